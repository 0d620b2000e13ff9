#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dsf/network.hpp"
#include "dsf/rng.hpp"

using namespace dsf;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.input_channels = 1;
  cfg.downsample_count = 2;
  cfg.base_channels = 4;
  cfg.convs_per_block = 2;
  cfg.seed = 11;
  return cfg;
}

Tensor random_image(int h, int w, int c, Rng& rng) {
  Tensor t(Shape{1, c, h, w});
  for (float& v : t.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return t;
}

std::string temp_path(const char* stem) {
  return std::string("test_network_") + stem + ".bin";
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("build lays out encoder, bottleneck, decoder, and head in order",
          "[network]") {
  const Model m = Model::build(small_config());
  std::vector<std::string> names;
  for (const ConvParam& l : m.layers()) names.push_back(l.name);
  const std::vector<std::string> want = {
      "enc0.conv0", "enc0.conv1", "enc1.conv0", "enc1.conv1", "mid.conv0",
      "mid.conv1",  "dec1.conv0", "dec1.conv1", "dec0.conv0", "dec0.conv1",
      "head"};
  CHECK(names == want);

  auto shape_of = [&](std::size_t i) { return m.layers()[i].kernel.shape; };
  CHECK(shape_of(0) == Shape{4, 1, 3, 3});    // enc0.conv0
  CHECK(shape_of(1) == Shape{4, 4, 3, 3});    // enc0.conv1
  CHECK(shape_of(2) == Shape{8, 4, 3, 3});    // enc1.conv0
  CHECK(shape_of(4) == Shape{16, 8, 3, 3});   // mid.conv0
  CHECK(shape_of(6) == Shape{8, 24, 3, 3});   // dec1.conv0 takes 16 up + 8 skip
  CHECK(shape_of(8) == Shape{4, 12, 3, 3});   // dec0.conv0 takes 8 up + 4 skip
  CHECK(shape_of(10) == Shape{1, 4, 1, 1});   // head
  CHECK(m.layers()[10].bias.shape == Shape{1, 1, 1, 1});
}

TEST_CASE("parameter_count sums kernels and biases", "[network]") {
  const Model m = Model::build(small_config());
  std::size_t want = 0;
  for (const ConvParam& l : m.layers())
    want += static_cast<std::size_t>(l.kernel.shape.numel()) +
            static_cast<std::size_t>(l.bias.shape.numel());
  CHECK(m.parameter_count() == want);
  CHECK(want > 0);
}

TEST_CASE("forward emits a sigmoid map at input resolution", "[network]") {
  const Model m = Model::build(small_config());
  Rng rng(5);
  const ActivationMap a = m.forward(random_image(8, 12, 1, rng));
  REQUIRE(a.height == 8);
  REQUIRE(a.width == 12);
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      CHECK(a.at(y, x) > 0.0);
      CHECK(a.at(y, x) < 1.0);
    }
}

TEST_CASE("equal seeds build identical models, different seeds do not",
          "[network]") {
  const Model a = Model::build(small_config());
  const Model b = Model::build(small_config());
  NetworkConfig other = small_config();
  other.seed = 12;
  const Model c = Model::build(other);

  REQUIRE(a.layers().size() == b.layers().size());
  bool same_ab = true, same_ac = true;
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    same_ab = same_ab && a.layers()[i].kernel.data == b.layers()[i].kernel.data;
    same_ac = same_ac && a.layers()[i].kernel.data == c.layers()[i].kernel.data;
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);

  Rng rng(9);
  const Tensor img = random_image(8, 8, 1, rng);
  CHECK(a.forward(img).values == b.forward(img).values);
}

TEST_CASE("forward rejects inputs the pooling chain cannot halve", "[network]") {
  const Model m = Model::build(small_config());
  Rng rng(3);
  CHECK_THROWS_AS(m.forward(random_image(8, 8, 2, rng)), std::invalid_argument);
  try {
    m.forward(random_image(10, 8, 1, rng));
    FAIL("expected a shape rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("pad to 12x8") != std::string::npos);
  }
}

TEST_CASE("config validation rejects non-positive fields", "[network]") {
  NetworkConfig cfg = small_config();
  cfg.base_channels = 0;
  CHECK_THROWS_AS(Model::build(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.downsample_count = 0;
  CHECK_THROWS_AS(Model::build(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.input_channels = -1;
  CHECK_THROWS_AS(Model::build(cfg), std::invalid_argument);
}

TEST_CASE("weights round-trip bit-exactly through the file format", "[network]") {
  const std::string path = temp_path("roundtrip");
  const Model m = Model::build(small_config());
  save_weights(m, path);
  const LoadedWeights loaded = load_weights_full(path);

  CHECK(loaded.extra_keys.empty());
  CHECK(loaded.model.config().base_channels == 4);
  CHECK(loaded.model.config().seed == 11);
  REQUIRE(loaded.model.layers().size() == m.layers().size());
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    CHECK(loaded.model.layers()[i].kernel.data == m.layers()[i].kernel.data);
    CHECK(loaded.model.layers()[i].bias.data == m.layers()[i].bias.data);
  }

  Rng rng(4);
  const Tensor img = random_image(8, 8, 1, rng);
  CHECK(loaded.model.forward(img).values == m.forward(img).values);
  std::remove(path.c_str());
}

TEST_CASE("extra trailer keys survive save and load", "[network]") {
  const std::string path = temp_path("extra");
  const Model m = Model::build(small_config());
  save_weights(m, path, "epoch=7\nnote=resume\n");
  const LoadedWeights loaded = load_weights_full(path);
  REQUIRE(loaded.extra_keys.size() == 2);
  CHECK(loaded.extra_keys.at("epoch") == "7");
  CHECK(loaded.extra_keys.at("note") == "resume");
  std::remove(path.c_str());
}

TEST_CASE("loader rejects corrupted weight files with positioned errors",
          "[network]") {
  const std::string path = temp_path("corrupt");
  const Model m = Model::build(small_config());
  save_weights(m, path);
  const std::vector<char> good = slurp(path);

  SECTION("wrong magic") {
    std::vector<char> bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_AS(load_weights(path), std::runtime_error);
  }
  SECTION("unsupported version") {
    std::vector<char> bad = good;
    bad[4] = 9;
    spit(path, bad);
    try {
      load_weights(path);
      FAIL("expected a version rejection");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SECTION("truncation mid-tensor") {
    std::vector<char> bad = good;
    bad.resize(bad.size() / 2);
    spit(path, bad);
    CHECK_THROWS_AS(load_weights(path), std::runtime_error);
  }
  SECTION("trailer stripped") {
    std::vector<char> bad = good;
    while (!bad.empty() && bad.back() != '\0') bad.pop_back();
    bad.resize(bad.size() * 3 / 4);
    spit(path, bad);
    CHECK_THROWS_AS(load_weights(path), std::runtime_error);
  }
  std::remove(path.c_str());
}

TEST_CASE("expected-config load names the mismatched field", "[network]") {
  const std::string path = temp_path("mismatch");
  save_weights(Model::build(small_config()), path);

  NetworkConfig expected = small_config();
  expected.base_channels = 8;
  try {
    load_weights(path, expected);
    FAIL("expected a config mismatch");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("base_channels") != std::string::npos);
  }

  expected = small_config();
  CHECK_NOTHROW(load_weights(path, expected));
  std::remove(path.c_str());
}

TEST_CASE("saved weights reload after in-place edits", "[network]") {
  const std::string path = temp_path("edit");
  Model m = Model::build(small_config());
  m.layers()[0].bias.data[0] = 0.125f;
  m.layers()[2].kernel.data[7] = -2.5f;
  save_weights(m, path);
  const Model back = load_weights(path);
  CHECK(back.layers()[0].bias.data[0] == 0.125f);
  CHECK(back.layers()[2].kernel.data[7] == -2.5f);
  std::remove(path.c_str());
}
