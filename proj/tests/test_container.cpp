#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "quik/container.hpp"
#include "test_helpers.hpp"

using namespace quik;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char *name) {
  const fs::path p = fs::temp_directory_path() / "quik_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

} // namespace

TEST_CASE("f32 tensor round-trip is bit-identical") {
  const fs::path dir = temp_dir("f32_roundtrip");
  TensorContainer c;
  c.add_f32("w", FpMatrix::from_rows({{1.5f, -2.25f}, {0.0f, 3.0e-7f}}));
  c.metadata["token_count"] = 17;
  c.write(dir);

  const TensorContainer r = TensorContainer::read(dir);
  CHECK(r.metadata["token_count"] == 17);
  CHECK(r.require("w").bytes == c.require("w").bytes);
  const FpMatrix m = r.get_f32("w");
  CHECK(m.at(1, 1) == 3.0e-7f);
}

TEST_CASE("i4p tensor round-trip is bit-identical") {
  const fs::path dir = temp_dir("i4p_roundtrip");
  const std::vector<int8_t> vals = {-8, 7, 3, -1, 0, 5}; // 2x3, odd row length
  TensorContainer c;
  c.add_packed("q", pack_int4(vals, 2, 3));
  c.write(dir);
  const TensorContainer r = TensorContainer::read(dir);
  const PackedIntMatrix m = r.get_packed("q");
  CHECK(m.bits == 4);
  CHECK(unpack_int4(m) == vals);
  CHECK(m.data == c.require("q").bytes);
}

TEST_CASE("manifest order and mixed dtypes survive a round-trip") {
  const fs::path dir = temp_dir("mixed");
  std::mt19937 rng(3);
  TensorContainer c;
  c.add_f32("a", oracle::random_matrix(rng, 3, 5));
  const std::vector<int8_t> i8(12, -7);
  c.add_packed("b", pack_int8(i8, 3, 4));
  c.add_f32("c", std::vector<float>{1.0f, 2.0f, 3.0f});
  c.write(dir);

  const TensorContainer r = TensorContainer::read(dir);
  REQUIRE(r.tensors.size() == 3);
  CHECK(r.tensors[0].name == "a");
  CHECK(r.tensors[1].name == "b");
  CHECK(r.tensors[2].name == "c");
  for (size_t i = 0; i < 3; ++i) CHECK(r.tensors[i].bytes == c.tensors[i].bytes);
  CHECK(r.get_f32_vector("c") == std::vector<float>{1.0f, 2.0f, 3.0f});
}

TEST_CASE("truncated blob file raises a format error") {
  const fs::path dir = temp_dir("truncated");
  TensorContainer c;
  c.add_f32("w", FpMatrix::from_rows({{1.0f, 2.0f}, {3.0f, 4.0f}}));
  c.write(dir);
  fs::resize_file(dir / "tensors.bin", 7);
  CHECK_THROWS_AS(TensorContainer::read(dir), FormatError);
}

TEST_CASE("manifest validation failures") {
  const fs::path dir = temp_dir("badmanifest");
  TensorContainer c;
  c.add_f32("w", FpMatrix::from_rows({{1.0f}}));
  c.write(dir);

  auto patch_manifest = [&](const std::string &from, const std::string &to) {
    std::ifstream in(dir / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, from.size(), to);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << text;
  };

  SUBCASE("unknown dtype") {
    patch_manifest("\"f32\"", "\"f64\"");
    CHECK_THROWS_AS(TensorContainer::read(dir), FormatError);
  }
  SUBCASE("length mismatch vs dtype and shape") {
    patch_manifest("\"nbytes\": 4", "\"nbytes\": 8");
    CHECK_THROWS_AS(TensorContainer::read(dir), FormatError);
  }
  SUBCASE("misaligned offset") {
    patch_manifest("\"offset\": 0", "\"offset\": 3");
    CHECK_THROWS_AS(TensorContainer::read(dir), FormatError);
  }
}

TEST_CASE("duplicate tensor names are rejected on write") {
  TensorContainer c;
  c.add_f32("w", FpMatrix::from_rows({{1.0f}}));
  c.add_f32("w", FpMatrix::from_rows({{2.0f}}));
  CHECK_THROWS_AS(c.write(temp_dir("dup")), FormatError);
}

TEST_CASE("blob offsets are 8-byte aligned") {
  const fs::path dir = temp_dir("aligned");
  TensorContainer c;
  c.add_f32("a", std::vector<float>{1.0f}); // 4 bytes -> next tensor needs padding
  c.add_f32("b", std::vector<float>{2.0f, 3.0f});
  c.write(dir);
  const TensorContainer r = TensorContainer::read(dir);
  CHECK(r.get_f32_vector("b") == std::vector<float>{2.0f, 3.0f});
  std::ifstream mf(dir / "manifest.json");
  nlohmann::json j;
  mf >> j;
  for (const auto &t : j["tensors"]) CHECK(t["offset"].get<int64_t>() % 8 == 0);
}
