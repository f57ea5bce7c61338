#include "quik/layer_io.hpp"

#include "quik/container.hpp"

namespace quik {

void save_layer(const QuikLinearLayer &layer, const std::filesystem::path &dir) {
  layer.validate();
  TensorContainer c;
  c.add_packed("weight_base", layer.weights.base);
  c.add_f32("weight_scales", layer.weights.scales);
  c.add_f32("wreduced", layer.weights.wreduced);
  c.add_f32("outlier_weights", layer.weights.outlier_weights);
  if (!layer.bias.empty()) c.add_f32("bias", layer.bias);
  if (!layer.reference_weights.empty()) c.add_f32("weight_fp32", layer.reference_weights);
  if (!layer.weights.mask.empty()) {
    PackedIntMatrix m;
    m.rows = layer.weights.mask.rows;
    m.cols = layer.weights.mask.cols;
    m.bits = 8;
    m.data = layer.weights.mask.kept;
    c.add_packed("sparsity_mask", m);
  }
  c.metadata["format"] = "quik-layer";
  c.metadata["act_bits"] = layer.act_bits;
  c.metadata["in_features"] = layer.in_features();
  c.metadata["outlier_indices"] = layer.outliers.indices;
  c.metadata["permutation"] = layer.outliers.permutation;
  c.write(dir);
}

QuikLinearLayer load_layer(const std::filesystem::path &dir) {
  const TensorContainer c = TensorContainer::read(dir);
  if (!c.metadata.contains("format") || c.metadata["format"] != "quik-layer") {
    throw FormatError("not a quik layer bundle: " + dir.string());
  }
  QuikLinearLayer layer;
  try {
    layer.act_bits = c.metadata.at("act_bits").get<int>();
    const auto in_features = c.metadata.at("in_features").get<int64_t>();
    auto indices = c.metadata.at("outlier_indices").get<std::vector<int64_t>>();
    layer.outliers = OutlierSet::from_indices(in_features, std::move(indices));
    if (c.metadata.contains("permutation") &&
        c.metadata["permutation"].get<std::vector<int64_t>>() != layer.outliers.permutation) {
      throw FormatError("layer bundle: stored permutation does not match the outlier indices");
    }
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("invalid layer metadata: ") + e.what());
  } catch (const std::invalid_argument &e) {
    throw FormatError(std::string("invalid layer metadata: ") + e.what());
  }
  layer.weights.base = c.get_packed("weight_base");
  layer.weights.scales = c.get_f32_vector("weight_scales");
  layer.weights.wreduced = c.get_f32_vector("wreduced");
  layer.weights.outlier_weights = c.get_f32("outlier_weights");
  if (c.contains("bias")) layer.bias = c.get_f32_vector("bias");
  if (c.contains("weight_fp32")) layer.reference_weights = c.get_f32("weight_fp32");
  if (c.contains("sparsity_mask")) {
    const PackedIntMatrix m = c.get_packed("sparsity_mask");
    layer.weights.mask.rows = m.rows;
    layer.weights.mask.cols = m.cols;
    layer.weights.mask.kept = m.data;
  }
  if (static_cast<int64_t>(layer.weights.scales.size()) != layer.weights.base.rows ||
      static_cast<int64_t>(layer.weights.wreduced.size()) != layer.weights.base.rows) {
    throw FormatError("layer bundle: per-row vector lengths do not match weight_base");
  }
  try {
    layer.validate();
  } catch (const std::invalid_argument &e) {
    throw FormatError(std::string("inconsistent layer bundle: ") + e.what());
  }
  return layer;
}

} // namespace quik
