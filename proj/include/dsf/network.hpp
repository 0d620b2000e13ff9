#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/graph.hpp"
#include "dsf/maps.hpp"
#include "dsf/rng.hpp"
#include "dsf/serial.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

struct NetworkConfig {
  int input_channels = 3;
  int downsample_count = 2;
  int base_channels = 16;
  int convs_per_block = 2;
  std::uint64_t seed = 0;
};

inline void validate(const NetworkConfig& cfg) {
  if (cfg.input_channels < 1)
    throw std::invalid_argument(
        detail::str("NetworkConfig: input_channels ", cfg.input_channels, " < 1"));
  if (cfg.downsample_count < 1)
    throw std::invalid_argument(
        detail::str("NetworkConfig: downsample_count ", cfg.downsample_count, " < 1"));
  if (cfg.base_channels < 1)
    throw std::invalid_argument(
        detail::str("NetworkConfig: base_channels ", cfg.base_channels, " < 1"));
  if (cfg.convs_per_block < 1)
    throw std::invalid_argument(
        detail::str("NetworkConfig: convs_per_block ", cfg.convs_per_block, " < 1"));
}

struct ConvParam {
  std::string name;
  Tensor kernel;  // [out, in, kh, kw]
  Tensor bias;    // [1, out, 1, 1]
};

// Encoder/decoder network emitting one sigmoid channel at input resolution.
// Channel width doubles per encoder level; the decoder mirrors it with
// nearest-neighbour upsampling and skip concatenation; 3x3 kernels except
// the final 1x1 head.
class Model {
 public:
  static Model build(const NetworkConfig& cfg) {
    validate(cfg);
    Model m;
    m.cfg_ = cfg;
    Rng rng(cfg.seed);
    int ch = cfg.input_channels;
    for (int level = 0; level < cfg.downsample_count; ++level) {
      const int out_ch = cfg.base_channels << level;
      for (int b = 0; b < cfg.convs_per_block; ++b) {
        m.add_conv(detail::str("enc", level, ".conv", b), b == 0 ? ch : out_ch,
                   out_ch, 3, rng);
      }
      ch = out_ch;
    }
    {
      const int out_ch = cfg.base_channels << cfg.downsample_count;
      for (int b = 0; b < cfg.convs_per_block; ++b)
        m.add_conv(detail::str("mid.conv", b), b == 0 ? ch : out_ch, out_ch, 3, rng);
      ch = out_ch;
    }
    for (int level = cfg.downsample_count - 1; level >= 0; --level) {
      const int skip_ch = cfg.base_channels << level;
      for (int b = 0; b < cfg.convs_per_block; ++b) {
        const int in_ch = b == 0 ? ch + skip_ch : skip_ch;
        m.add_conv(detail::str("dec", level, ".conv", b), in_ch, skip_ch, 3, rng);
      }
      ch = skip_ch;
    }
    m.add_conv("head", ch, 1, 1, rng);
    return m;
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<ConvParam>& layers() { return layers_; }
  const std::vector<ConvParam>& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const ConvParam& l : layers_) n += l.kernel.data.size() + l.bias.data.size();
    return n;
  }

  // Registers every kernel and bias as graph leaves, in layer order.
  // Returns ids interleaved (kernel, bias) per layer.
  std::vector<ValueId> register_params(Graph& g, bool trainable) const {
    std::vector<ValueId> ids;
    ids.reserve(layers_.size() * 2);
    for (const ConvParam& l : layers_) {
      ids.push_back(g.leaf(l.kernel, trainable));
      ids.push_back(g.leaf(l.bias, trainable));
    }
    return ids;
  }

  // Builds the forward computation on an existing graph. `params` must come
  // from register_params on the same graph.
  ValueId forward_graph(Graph& g, ValueId image,
                        const std::vector<ValueId>& params) const {
    if (params.size() != layers_.size() * 2)
      throw std::invalid_argument("forward_graph: parameter id list mismatch");
    const Shape in = g.value(image).shape;
    check_input_shape(in);

    std::size_t li = 0;
    auto conv_relu = [&](ValueId x) {
      ValueId y = g.conv2d(x, params[2 * li], params[2 * li + 1]);
      ++li;
      return g.relu(y);
    };

    ValueId cur = image;
    std::vector<ValueId> skips;
    for (int level = 0; level < cfg_.downsample_count; ++level) {
      for (int b = 0; b < cfg_.convs_per_block; ++b) cur = conv_relu(cur);
      skips.push_back(cur);
      cur = g.pool_down(cur);
    }
    for (int b = 0; b < cfg_.convs_per_block; ++b) cur = conv_relu(cur);
    for (int level = cfg_.downsample_count - 1; level >= 0; --level) {
      cur = g.concat_channels(g.upsample(cur), skips[level]);
      for (int b = 0; b < cfg_.convs_per_block; ++b) cur = conv_relu(cur);
    }
    ValueId head = g.conv2d(cur, params[2 * li], params[2 * li + 1]);
    return g.sigmoid(head);
  }

  // Inference convenience: no gradients tracked.
  ActivationMap forward(const Tensor& image) const {
    Graph g;
    const std::vector<ValueId> params = register_params(g, false);
    const ValueId img = g.leaf(image, false);
    const ValueId out = forward_graph(g, img, params);
    return activation_from_tensor(g.value(out));
  }

  void check_input_shape(const Shape& s) const {
    if (s.n != 1 || s.c != cfg_.input_channels)
      throw std::invalid_argument(
          detail::str("forward: input ", s.str(), " must be [1,", cfg_.input_channels,
                      ",h,w]"));
    const int div = 1 << cfg_.downsample_count;
    if (s.h < div || s.w < div || s.h % div != 0 || s.w % div != 0) {
      auto up = [div](int v) { return ((v + div - 1) / div) * div; };
      throw std::invalid_argument(detail::str(
          "forward: spatial extents ", s.h, "x", s.w, " must be multiples of ", div,
          "; pad to ", up(s.h), "x", up(s.w)));
    }
  }

 private:
  void add_conv(const std::string& name, int in_ch, int out_ch, int k, Rng& rng) {
    ConvParam p;
    p.name = name;
    p.kernel = Tensor(Shape{out_ch, in_ch, k, k});
    p.bias = Tensor(Shape{1, out_ch, 1, 1});
    const double fan_in = static_cast<double>(in_ch) * k * k;
    const double fan_out = static_cast<double>(out_ch) * k * k;
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (float& v : p.kernel.data)
      v = static_cast<float>(rng.uniform(-s, s));
    layers_.push_back(std::move(p));
  }

  NetworkConfig cfg_;
  std::vector<ConvParam> layers_;
};

// ---------------------------------------------------------------------------
// Weight file: magic "DSFW", u16 version, u16 tensor count, then per tensor
// (u16 name length, name, u8 rank, rank*u32 extents, float32 data LE), then
// a trailing key=value text block echoing the network config.

inline constexpr std::uint16_t kWeightFormatVersion = 1;

inline std::string network_config_block(const NetworkConfig& cfg) {
  return detail::str("input_channels=", cfg.input_channels,
                     "\ndownsample_count=", cfg.downsample_count,
                     "\nbase_channels=", cfg.base_channels,
                     "\nconvs_per_block=", cfg.convs_per_block, "\nseed=", cfg.seed,
                     "\nnormalization=unit_range\n");
}

// `extra` lets checkpoints append keys (e.g. epoch=) after the config echo.
inline void save_weights(const Model& model, const std::string& path,
                         const std::string& extra = "") {
  ByteWriter w;
  w.magic("DSFW");
  w.u16(kWeightFormatVersion);
  const std::size_t count = model.layers().size() * 2;
  if (count > 0xffff) throw std::invalid_argument("save_weights: too many tensors");
  w.u16(static_cast<std::uint16_t>(count));
  auto emit = [&w](const std::string& name, const Tensor& t, int rank,
                   const std::vector<std::uint32_t>& extents) {
    if (name.size() > 0xffff)
      throw std::invalid_argument("save_weights: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    w.u8(static_cast<std::uint8_t>(rank));
    for (std::uint32_t e : extents) w.u32(e);
    for (float v : t.data) w.f32(v);
  };
  for (const ConvParam& l : model.layers()) {
    const Shape ks = l.kernel.shape;
    emit(l.name + ".weight", l.kernel, 4,
         {static_cast<std::uint32_t>(ks.n), static_cast<std::uint32_t>(ks.c),
          static_cast<std::uint32_t>(ks.h), static_cast<std::uint32_t>(ks.w)});
    emit(l.name + ".bias", l.bias, 1,
         {static_cast<std::uint32_t>(l.bias.shape.c)});
  }
  w.text(network_config_block(model.config()) + extra);
  w.save(path);
}

struct LoadedWeights {
  Model model;
  std::map<std::string, std::string> extra_keys;  // keys beyond the config echo
};

inline LoadedWeights load_weights_full(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("DSFW");
  const std::uint16_t version = r.u16();
  if (version != kWeightFormatVersion)
    r.fail(detail::str("unsupported version ", version, ", expected ",
                       kWeightFormatVersion));
  const std::uint16_t count = r.u16();

  struct Entry {
    std::string name;
    std::vector<std::uint32_t> extents;
    std::vector<float> data;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint16_t e = 0; e < count; ++e) {
    Entry ent;
    const std::uint16_t name_len = r.u16();
    if (name_len == 0) r.fail("empty tensor name");
    ent.name = r.string(name_len);
    const std::uint8_t rank = r.u8();
    if (rank < 1 || rank > 4)
      r.fail(detail::str("tensor '", ent.name, "' has rank ", int(rank)));
    std::uint64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      const std::uint32_t ext = r.u32();
      if (ext == 0) r.fail(detail::str("tensor '", ent.name, "' has zero extent"));
      ent.extents.push_back(ext);
      numel *= ext;
      if (numel > (1ull << 28)) r.fail("tensor too large");
    }
    ent.data.resize(static_cast<std::size_t>(numel));
    for (float& v : ent.data) v = r.f32();
    entries.push_back(std::move(ent));
  }

  const std::string trailer = r.rest_as_text();
  const std::string origin = path + " (config block)";
  std::map<std::string, std::string> kv = detail::parse_kv_block(trailer, origin);
  NetworkConfig cfg;
  cfg.input_channels = static_cast<int>(detail::kv_uint(kv, "input_channels", origin, 4096));
  cfg.downsample_count =
      static_cast<int>(detail::kv_uint(kv, "downsample_count", origin, 16));
  cfg.base_channels = static_cast<int>(detail::kv_uint(kv, "base_channels", origin, 4096));
  cfg.convs_per_block =
      static_cast<int>(detail::kv_uint(kv, "convs_per_block", origin, 64));
  cfg.seed = detail::kv_uint(kv, "seed", origin, UINT64_MAX);
  if (!kv.count("normalization"))
    throw std::runtime_error(detail::str(origin, ": missing key 'normalization'"));
  for (const char* known : {"input_channels", "downsample_count", "base_channels",
                            "convs_per_block", "seed", "normalization"})
    kv.erase(known);

  LoadedWeights out{Model::build(cfg), std::move(kv)};
  Model& model = out.model;
  if (entries.size() != model.layers().size() * 2)
    throw std::runtime_error(detail::str(
        path, ": tensor count ", entries.size(), " does not match config (expected ",
        model.layers().size() * 2, ")"));
  std::size_t idx = 0;
  for (ConvParam& l : model.layers()) {
    for (int part = 0; part < 2; ++part) {
      const Entry& ent = entries[idx++];
      Tensor& dst = part == 0 ? l.kernel : l.bias;
      const std::string want = l.name + (part == 0 ? ".weight" : ".bias");
      if (ent.name != want)
        throw std::runtime_error(detail::str(path, ": tensor ", idx - 1, " named '",
                                             ent.name, "', expected '", want, "'"));
      std::vector<std::uint32_t> want_ext;
      if (part == 0)
        want_ext = {static_cast<std::uint32_t>(dst.shape.n),
                    static_cast<std::uint32_t>(dst.shape.c),
                    static_cast<std::uint32_t>(dst.shape.h),
                    static_cast<std::uint32_t>(dst.shape.w)};
      else
        want_ext = {static_cast<std::uint32_t>(dst.shape.c)};
      if (ent.extents != want_ext)
        throw std::runtime_error(
            detail::str(path, ": layer '", want, "' has mismatched extents"));
      dst.data = ent.data;
    }
  }
  return out;
}

inline Model load_weights(const std::string& path) {
  return load_weights_full(path).model;
}

// Loads and additionally cross-checks the stored config against an expected
// one; mismatches are reported by field before any layer is touched.
inline Model load_weights(const std::string& path, const NetworkConfig& expected) {
  Model m = load_weights(path);
  const NetworkConfig& got = m.config();
  auto mismatch = [&](const char* field, auto a, auto b) {
    throw std::runtime_error(detail::str(path, ": stored ", field, "=", a,
                                         " does not match expected ", b));
  };
  if (got.input_channels != expected.input_channels)
    mismatch("input_channels", got.input_channels, expected.input_channels);
  if (got.downsample_count != expected.downsample_count)
    mismatch("downsample_count", got.downsample_count, expected.downsample_count);
  if (got.base_channels != expected.base_channels)
    mismatch("base_channels", got.base_channels, expected.base_channels);
  if (got.convs_per_block != expected.convs_per_block)
    mismatch("convs_per_block", got.convs_per_block, expected.convs_per_block);
  return m;
}

}  // namespace dsf
