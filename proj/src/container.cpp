#include "quik/container.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace quik {

const char *dtype_name(Dtype d) {
  switch (d) {
  case Dtype::F32: return "f32";
  case Dtype::I8: return "i8";
  case Dtype::I4P: return "i4p";
  }
  throw FormatError("unknown dtype enum");
}

Dtype dtype_from_name(const std::string &name) {
  if (name == "f32") return Dtype::F32;
  if (name == "i8") return Dtype::I8;
  if (name == "i4p") return Dtype::I4P;
  throw FormatError("unknown dtype code '" + name + "'");
}

int64_t dtype_nbytes(Dtype d, std::span<const int64_t> shape) {
  if (shape.empty()) return 0;
  int64_t lead = 1;
  for (size_t i = 0; i + 1 < shape.size(); ++i) lead *= shape[i];
  const int64_t last = shape.back();
  switch (d) {
  case Dtype::F32: return lead * last * 4;
  case Dtype::I8: return lead * last;
  case Dtype::I4P: return lead * ((last + 1) / 2);
  }
  throw FormatError("unknown dtype enum");
}

void TensorContainer::add_f32(const std::string &name, const FpMatrix &m) {
  TensorEntry e;
  e.name = name;
  e.dtype = Dtype::F32;
  e.shape = {m.rows, m.cols};
  e.bytes.resize(m.data.size() * 4);
  std::memcpy(e.bytes.data(), m.data.data(), e.bytes.size());
  tensors.push_back(std::move(e));
}

void TensorContainer::add_f32(const std::string &name, std::span<const float> v) {
  TensorEntry e;
  e.name = name;
  e.dtype = Dtype::F32;
  e.shape = {static_cast<int64_t>(v.size())};
  e.bytes.resize(v.size() * 4);
  std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
  tensors.push_back(std::move(e));
}

void TensorContainer::add_packed(const std::string &name, const PackedIntMatrix &m) {
  TensorEntry e;
  e.name = name;
  e.dtype = m.bits == 4 ? Dtype::I4P : Dtype::I8;
  e.shape = {m.rows, m.cols};
  e.bytes = m.data;
  tensors.push_back(std::move(e));
}

bool TensorContainer::contains(const std::string &name) const {
  for (const auto &t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

const TensorEntry &TensorContainer::require(const std::string &name) const {
  for (const auto &t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("container is missing tensor '" + name + "'");
}

FpMatrix TensorContainer::get_f32(const std::string &name) const {
  const TensorEntry &e = require(name);
  if (e.dtype != Dtype::F32 || e.shape.size() != 2) {
    throw FormatError("tensor '" + name + "' is not a 2-d f32 matrix");
  }
  FpMatrix m(e.shape[0], e.shape[1]);
  std::memcpy(m.data.data(), e.bytes.data(), e.bytes.size());
  return m;
}

std::vector<float> TensorContainer::get_f32_vector(const std::string &name) const {
  const TensorEntry &e = require(name);
  if (e.dtype != Dtype::F32) {
    throw FormatError("tensor '" + name + "' is not f32");
  }
  std::vector<float> v(e.bytes.size() / 4);
  std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return v;
}

PackedIntMatrix TensorContainer::get_packed(const std::string &name) const {
  const TensorEntry &e = require(name);
  if ((e.dtype != Dtype::I4P && e.dtype != Dtype::I8) || e.shape.size() != 2) {
    throw FormatError("tensor '" + name + "' is not a packed integer matrix");
  }
  PackedIntMatrix m;
  m.rows = e.shape[0];
  m.cols = e.shape[1];
  m.bits = e.dtype == Dtype::I4P ? 4 : 8;
  m.data = e.bytes;
  return m;
}

void TensorContainer::write(const std::filesystem::path &dir) const {
  {
    std::set<std::string> names;
    for (const auto &t : tensors) {
      if (!names.insert(t.name).second) {
        throw FormatError("duplicate tensor name '" + t.name + "'");
      }
      const int64_t expect = dtype_nbytes(t.dtype, t.shape);
      if (expect != static_cast<int64_t>(t.bytes.size())) {
        throw FormatError("tensor '" + t.name + "' has " + std::to_string(t.bytes.size()) +
                          " bytes, shape implies " + std::to_string(expect));
      }
    }
  }

  std::filesystem::create_directories(dir);
  const std::string blob_name = "tensors.bin";

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["metadata"] = metadata;
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(dir / blob_name, std::ios::binary | std::ios::trunc);
  if (!blob) throw FormatError("cannot open blob file for writing: " + (dir / blob_name).string());

  int64_t offset = 0;
  for (const auto &t : tensors) {
    // pad to 8-byte alignment
    while (offset % 8 != 0) {
      blob.put('\0');
      ++offset;
    }
    nlohmann::json je;
    je["name"] = t.name;
    je["dtype"] = dtype_name(t.dtype);
    je["shape"] = t.shape;
    je["blob"] = blob_name;
    je["offset"] = offset;
    je["nbytes"] = static_cast<int64_t>(t.bytes.size());
    manifest["tensors"].push_back(je);
    blob.write(reinterpret_cast<const char *>(t.bytes.data()),
               static_cast<std::streamsize>(t.bytes.size()));
    offset += static_cast<int64_t>(t.bytes.size());
  }
  blob.close();
  if (!blob) throw FormatError("failed writing blob file: " + (dir / blob_name).string());

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw FormatError("cannot open manifest for writing: " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

TensorContainer TensorContainer::read(const std::filesystem::path &dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("cannot open manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("invalid manifest JSON: ") + e.what());
  }

  TensorContainer c;
  if (manifest.contains("metadata")) c.metadata = manifest["metadata"];
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw FormatError("manifest has no tensor list");
  }

  std::set<std::string> names;
  for (const auto &je : manifest["tensors"]) {
    TensorEntry e;
    try {
      e.name = je.at("name").get<std::string>();
      e.dtype = dtype_from_name(je.at("dtype").get<std::string>());
      e.shape = je.at("shape").get<std::vector<int64_t>>();
      const auto blob_name = je.at("blob").get<std::string>();
      const auto offset = je.at("offset").get<int64_t>();
      const auto nbytes = je.at("nbytes").get<int64_t>();

      if (!names.insert(e.name).second) {
        throw FormatError("duplicate tensor name '" + e.name + "'");
      }
      if (offset % 8 != 0) {
        throw FormatError("tensor '" + e.name + "' offset " + std::to_string(offset) +
                          " is not 8-byte aligned");
      }
      const int64_t expect = dtype_nbytes(e.dtype, e.shape);
      if (nbytes != expect) {
        throw FormatError("tensor '" + e.name + "': manifest nbytes " + std::to_string(nbytes) +
                          " does not match dtype x shape (" + std::to_string(expect) + ")");
      }

      std::ifstream blob(dir / blob_name, std::ios::binary);
      if (!blob) throw FormatError("cannot open blob file: " + (dir / blob_name).string());
      blob.seekg(0, std::ios::end);
      const int64_t blob_size = static_cast<int64_t>(blob.tellg());
      if (offset + nbytes > blob_size) {
        throw FormatError("tensor '" + e.name + "' extends past end of blob '" + blob_name +
                          "' (" + std::to_string(offset + nbytes) + " > " +
                          std::to_string(blob_size) + ")");
      }
      blob.seekg(offset);
      e.bytes.resize(static_cast<size_t>(nbytes));
      blob.read(reinterpret_cast<char *>(e.bytes.data()), nbytes);
      if (!blob) throw FormatError("short read on blob '" + blob_name + "'");
    } catch (const nlohmann::json::exception &ex) {
      throw FormatError(std::string("invalid manifest entry: ") + ex.what());
    }
    c.tensors.push_back(std::move(e));
  }
  return c;
}

} // namespace quik
