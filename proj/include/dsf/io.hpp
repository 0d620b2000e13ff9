#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/evaluation.hpp"
#include "dsf/features.hpp"
#include "dsf/geometry.hpp"
#include "dsf/maps.hpp"
#include "dsf/serial.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

// 8-bit grayscale raster, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {
    if (h < 1 || w < 1)
      throw std::invalid_argument(detail::str("Image: bad extent ", w, "x", h));
  }

  std::uint8_t at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& at(int y, int x) {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
};

// ---------------------------------------------------------------------------
// PGM (binary P5). The writer emits exactly "P5\n<w> <h>\n255\n" + payload
// and the reader accepts nothing else, so the grammar is a fixed point.

namespace detail {

inline std::size_t pgm_line_end(const std::vector<std::uint8_t>& bytes,
                                std::size_t start, const std::string& path) {
  for (std::size_t i = start; i < bytes.size() && i < start + 64; ++i)
    if (bytes[i] == '\n') return i;
  throw std::runtime_error(detail::str(path, ": missing header line terminator"));
}

}  // namespace detail

inline void write_pgm(const Image& img, const std::string& path) {
  if (img.height < 1 || img.width < 1 ||
      img.pixels.size() != static_cast<std::size_t>(img.height) * img.width)
    throw std::invalid_argument(detail::str("write_pgm: inconsistent image ",
                                            img.width, "x", img.height, " with ",
                                            img.pixels.size(), " pixels"));
  ByteWriter w;
  w.text(detail::str("P5\n", img.width, " ", img.height, "\n255\n"));
  w.raw(img.pixels.data(), img.pixels.size());
  w.save(path);
}

inline Image read_pgm(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  const std::size_t e1 = detail::pgm_line_end(bytes, 0, path);
  const std::string l1(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(e1));
  if (l1 != "P5")
    throw std::runtime_error(detail::str(path, ": not a binary PGM, first line '",
                                         l1, "'"));
  const std::size_t e2 = detail::pgm_line_end(bytes, e1 + 1, path);
  const std::string l2(bytes.begin() + static_cast<std::ptrdiff_t>(e1 + 1),
                       bytes.begin() + static_cast<std::ptrdiff_t>(e2));
  const std::vector<std::string> dims = detail::split_on(l2, ' ');
  std::uint64_t w = 0, h = 0;
  if (dims.size() != 2 || !detail::parse_uint(dims[0], 32767, w) ||
      !detail::parse_uint(dims[1], 32767, h) || w == 0 || h == 0)
    throw std::runtime_error(detail::str(path, ": bad dimension line '", l2, "'"));
  if (w * h > (1u << 26))
    throw std::runtime_error(detail::str(path, ": implausible size ", w, "x", h));
  const std::size_t e3 = detail::pgm_line_end(bytes, e2 + 1, path);
  const std::string l3(bytes.begin() + static_cast<std::ptrdiff_t>(e2 + 1),
                       bytes.begin() + static_cast<std::ptrdiff_t>(e3));
  if (l3 != "255")
    throw std::runtime_error(detail::str(path, ": unsupported max value '", l3, "'"));
  const std::size_t payload = bytes.size() - (e3 + 1);
  if (payload != w * h)
    throw std::runtime_error(detail::str(path, ": payload is ", payload,
                                         " bytes, header promises ", w * h));
  Image img(static_cast<int>(h), static_cast<int>(w));
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(e3 + 1), bytes.end(),
            img.pixels.begin());
  return img;
}

// Network input normalization: bytes scaled to [0,1], no mean subtraction.
inline Tensor image_to_tensor(const Image& img) {
  Tensor t(Shape{1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    t.data[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return t;
}

inline Image render_heatmap(const ActivationMap& m) {
  Image img(m.height, m.width);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const double v = std::clamp(static_cast<double>(m.values[i]), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Stability and label rasters ride on PGM, one byte per cell.

inline void save_stability(const StabilityMap& m, const std::string& path) {
  Image img(m.height, m.width);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (m.values[i] > 1)
      throw std::invalid_argument(detail::str("save_stability: value ",
                                              int(m.values[i]), " is not binary"));
    img.pixels[i] = m.values[i];
  }
  write_pgm(img, path);
}

inline StabilityMap load_stability(const std::string& path) {
  const Image img = read_pgm(path);
  StabilityMap m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (img.pixels[i] > 1)
      throw std::runtime_error(detail::str(path, ": stability cell ", i, " holds ",
                                           int(img.pixels[i]), ", expected 0 or 1"));
    m.values[i] = img.pixels[i];
  }
  return m;
}

inline void save_categories(const std::vector<std::string>& categories,
                            const std::string& path) {
  std::string text;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (categories[i].empty() ||
        categories[i].find_first_of("\t\n") != std::string::npos)
      throw std::invalid_argument(detail::str("save_categories: bad name at id ", i));
    text += detail::str(i, "\t", categories[i], "\n");
  }
  write_file_text(path, text);
}

inline std::vector<std::string> load_categories(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  std::vector<std::string> categories;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::vector<std::string> f = detail::split_on(lines[i], '\t');
    std::uint64_t id = 0;
    if (f.size() != 2 || !detail::parse_uint(f[0], 255, id) || f[1].empty())
      throw std::runtime_error(detail::str(path, ":", i + 1,
                                           ": expected 'id<TAB>name', got '",
                                           lines[i], "'"));
    if (id != categories.size())
      throw std::runtime_error(detail::str(path, ":", i + 1, ": id ", id,
                                           " out of order, expected ",
                                           categories.size()));
    categories.push_back(f[1]);
  }
  return categories;
}

inline void save_label_map(const LabelMap& lm, const std::string& pgm_path,
                           const std::string& categories_path) {
  lm.validate();
  Image img(lm.height, lm.width);
  img.pixels = lm.ids;
  write_pgm(img, pgm_path);
  save_categories(lm.categories, categories_path);
}

inline LabelMap load_label_map(const std::string& pgm_path,
                               const std::string& categories_path) {
  const Image img = read_pgm(pgm_path);
  LabelMap lm;
  lm.height = img.height;
  lm.width = img.width;
  lm.ids = img.pixels;
  lm.categories = load_categories(categories_path);
  lm.validate();
  return lm;
}

// ---------------------------------------------------------------------------
// Activation maps: magic "DSFA", u32 h, u32 w, row-major float32.

inline void save_activation(const ActivationMap& m, const std::string& path) {
  ByteWriter w;
  w.magic("DSFA");
  w.u32(static_cast<std::uint32_t>(m.height));
  w.u32(static_cast<std::uint32_t>(m.width));
  for (float v : m.values) w.f32(v);
  w.save(path);
}

inline ActivationMap load_activation(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("DSFA");
  const std::uint32_t h = r.u32();
  const std::uint32_t w = r.u32();
  if (h == 0 || w == 0 || h > 32767 || w > 32767 ||
      static_cast<std::uint64_t>(h) * w > (1u << 26))
    r.fail(detail::str("bad activation extent ", w, "x", h));
  ActivationMap m(static_cast<int>(h), static_cast<int>(w));
  for (float& v : m.values) {
    v = r.f32();
    if (std::isnan(v)) r.fail("NaN activation value");
  }
  r.require_exhausted();
  return m;
}

// ---------------------------------------------------------------------------
// Descriptors: magic "DSFD", u32 n, u32 dim, u8 kind, raw rows.

inline void save_descriptors(const DescriptorMatrix& m, const std::string& path) {
  m.validate();
  ByteWriter w;
  w.magic("DSFD");
  w.u32(static_cast<std::uint32_t>(m.count));
  w.u32(static_cast<std::uint32_t>(m.dim));
  w.u8(static_cast<std::uint8_t>(m.kind));
  if (m.kind == DescriptorKind::float32) {
    for (float v : m.fdata) w.f32(v);
  } else {
    w.raw(m.bdata.data(), m.bdata.size());
  }
  w.save(path);
}

inline DescriptorMatrix load_descriptors(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("DSFD");
  const std::uint32_t n = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint8_t kind = r.u8();
  if (dim == 0 || dim > (1u << 16)) r.fail(detail::str("bad descriptor dim ", dim));
  if (n > (1u << 24)) r.fail(detail::str("implausible descriptor count ", n));
  if (kind > 1) r.fail(detail::str("bad descriptor kind ", int(kind)));
  DescriptorMatrix m;
  m.count = static_cast<int>(n);
  m.dim = static_cast<int>(dim);
  m.kind = static_cast<DescriptorKind>(kind);
  if (m.kind == DescriptorKind::float32) {
    m.fdata.resize(static_cast<std::size_t>(n) * dim);
    for (float& v : m.fdata) {
      v = r.f32();
      if (!std::isfinite(v)) r.fail("non-finite descriptor value");
    }
  } else {
    m.bdata = r.bytes(static_cast<std::size_t>(n) * m.row_bytes());
  }
  r.require_exhausted();
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Keypoints: TSV x, y, response. Pixel coordinates.

inline void save_keypoints(const std::vector<Keypoint>& kps, const std::string& path) {
  std::string text;
  for (const Keypoint& k : kps)
    text += detail::str(detail::format_double(k.x), "\t", detail::format_double(k.y),
                        "\t", detail::format_double(k.response), "\n");
  write_file_text(path, text);
}

inline std::vector<Keypoint> load_keypoints(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  std::vector<Keypoint> kps;
  kps.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::vector<std::string> f = detail::split_on(lines[i], '\t');
    Keypoint k;
    if (f.size() != 3 || !detail::parse_double(f[0], k.x) ||
        !detail::parse_double(f[1], k.y) || !detail::parse_double(f[2], k.response) ||
        !std::isfinite(k.x) || !std::isfinite(k.y) || !std::isfinite(k.response))
      throw std::runtime_error(detail::str(path, ":", i + 1,
                                           ": expected 'x<TAB>y<TAB>response', got '",
                                           lines[i], "'"));
    kps.push_back(k);
  }
  return kps;
}

inline void save_feature_set(const FeatureSet& fs, const std::string& kp_path,
                             const std::string& desc_path) {
  fs.validate();
  save_keypoints(fs.keypoints, kp_path);
  save_descriptors(fs.descriptors, desc_path);
}

inline FeatureSet load_feature_set(const std::string& kp_path,
                                   const std::string& desc_path, int width,
                                   int height) {
  FeatureSet fs;
  fs.width = width;
  fs.height = height;
  fs.keypoints = load_keypoints(kp_path);
  fs.descriptors = load_descriptors(desc_path);
  if (fs.descriptors.count != static_cast<int>(fs.keypoints.size()))
    throw std::runtime_error(detail::str(desc_path, ": ", fs.descriptors.count,
                                         " descriptors for ", fs.keypoints.size(),
                                         " keypoints in ", kp_path));
  fs.validate();
  return fs;
}

// ---------------------------------------------------------------------------
// Matches: TSV x1, y1, x2, y2 and an optional weight, normalized coordinates.

inline void save_matches(const std::vector<Match>& matches, const std::string& path) {
  std::string text;
  for (const Match& m : matches) {
    text += detail::str(detail::format_double(m.p1.x), "\t",
                        detail::format_double(m.p1.y), "\t",
                        detail::format_double(m.p2.x), "\t",
                        detail::format_double(m.p2.y));
    if (m.weight) text += detail::str("\t", detail::format_double(*m.weight));
    text += "\n";
  }
  write_file_text(path, text);
}

inline std::vector<Match> load_matches(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  std::vector<Match> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::vector<std::string> f = detail::split_on(lines[i], '\t');
    Match m;
    double w = 0.0;
    const bool ok =
        (f.size() == 4 || f.size() == 5) && detail::parse_double(f[0], m.p1.x) &&
        detail::parse_double(f[1], m.p1.y) && detail::parse_double(f[2], m.p2.x) &&
        detail::parse_double(f[3], m.p2.y) &&
        (f.size() == 4 || detail::parse_double(f[4], w));
    if (!ok || !std::isfinite(m.p1.x) || !std::isfinite(m.p1.y) ||
        !std::isfinite(m.p2.x) || !std::isfinite(m.p2.y) ||
        (f.size() == 5 && !std::isfinite(w)))
      throw std::runtime_error(detail::str(path, ":", i + 1,
                                           ": expected 4 or 5 tab-separated numbers, got '",
                                           lines[i], "'"));
    if (f.size() == 5) m.weight = w;
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loop ground truth: headerless CSV id_a,id_b.

inline void save_loops(const std::vector<LoopPair>& loops, const std::string& path) {
  std::string text;
  for (const LoopPair& p : loops) {
    if (p.a < 0 || p.b < 0 || p.a == p.b)
      throw std::invalid_argument(detail::str("save_loops: bad pair (", p.a, ", ",
                                              p.b, ")"));
    text += detail::str(p.a, ",", p.b, "\n");
  }
  write_file_text(path, text);
}

inline std::vector<LoopPair> load_loops(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  std::vector<LoopPair> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::vector<std::string> f = detail::split_on(lines[i], ',');
    std::uint64_t a = 0, b = 0;
    if (f.size() != 2 || !detail::parse_uint(f[0], (1u << 30), a) ||
        !detail::parse_uint(f[1], (1u << 30), b) || a == b)
      throw std::runtime_error(detail::str(path, ":", i + 1,
                                           ": expected 'id_a,id_b' with distinct ids, got '",
                                           lines[i], "'"));
    out.push_back({static_cast<int>(a), static_cast<int>(b)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories: 12 whitespace-separated floats per line, row-major 3x4.

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
  validate_trajectory(traj);
  std::string text;
  for (const Pose& p : traj) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) {
        const double v = c < 3 ? p.rotation(r, c) : p.translation(r);
        if (r + c > 0) text += " ";
        text += detail::format_double(v);
      }
    text += "\n";
  }
  write_file_text(path, text);
}

inline Trajectory load_trajectory(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  Trajectory traj;
  traj.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::vector<double> vals;
    std::string token;
    bool bad = false;
    const std::string padded = lines[i] + " ";
    for (char ch : padded) {
      if (ch != ' ' && ch != '\t' && ch != '\r') {
        token += ch;
        continue;
      }
      if (token.empty()) continue;
      double v = 0.0;
      bad = bad || !detail::parse_double(token, v) || !std::isfinite(v);
      vals.push_back(v);
      token.clear();
    }
    if (bad || vals.size() != 12)
      throw std::runtime_error(detail::str(path, ":", i + 1,
                                           ": expected 12 numbers for a 3x4 pose, got '",
                                           lines[i], "'"));
    Pose p;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = vals[static_cast<std::size_t>(r) * 4 + c];
      p.translation(r) = vals[static_cast<std::size_t>(r) * 4 + 3];
    }
    traj.push_back(p);
  }
  validate_trajectory(traj);
  return traj;
}

// ---------------------------------------------------------------------------
// Config files: key=value lines with # comments.

inline std::map<std::string, std::string> read_config(const std::string& path) {
  return detail::parse_kv_block(read_file_text(path), path);
}

// ---------------------------------------------------------------------------
// Ranked/verified loop results: CSV with a header row.

struct LoopResultRow {
  int query_id = -1;
  int candidate_id = -1;
  double similarity = 0.0;
  double verif_score = std::numeric_limits<double>::infinity();
  int inliers = 0;
};

inline constexpr const char* kLoopResultHeader =
    "query_id,candidate_id,similarity,verif_score,inliers";

inline void save_loop_results(const std::vector<LoopResultRow>& rows,
                              const std::string& path) {
  std::string text = detail::str(kLoopResultHeader, "\n");
  for (const LoopResultRow& r : rows)
    text += detail::str(r.query_id, ",", r.candidate_id, ",",
                        detail::format_double(r.similarity), ",",
                        detail::format_double(r.verif_score), ",", r.inliers, "\n");
  write_file_text(path, text);
}

inline std::vector<LoopResultRow> load_loop_results(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  if (lines.empty() || lines[0] != kLoopResultHeader)
    throw std::runtime_error(detail::str(path, ":1: expected header '",
                                         kLoopResultHeader, "'"));
  std::vector<LoopResultRow> out;
  out.reserve(lines.size() - 1);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::vector<std::string> f = detail::split_on(lines[i], ',');
    LoopResultRow r;
    std::uint64_t q = 0, c = 0, inl = 0;
    if (f.size() != 5 || !detail::parse_uint(f[0], (1u << 30), q) ||
        !detail::parse_uint(f[1], (1u << 30), c) ||
        !detail::parse_double(f[2], r.similarity) ||
        !detail::parse_double(f[3], r.verif_score) ||
        !detail::parse_uint(f[4], (1u << 30), inl) || std::isnan(r.similarity) ||
        std::isnan(r.verif_score))
      throw std::runtime_error(detail::str(path, ":", i + 1, ": bad result row '",
                                           lines[i], "'"));
    r.query_id = static_cast<int>(q);
    r.candidate_id = static_cast<int>(c);
    r.inliers = static_cast<int>(inl);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PR curves: CSV threshold,precision,recall plus a closing auc line.

inline constexpr const char* kPrHeader = "threshold,precision,recall";

inline void save_pr_csv(const std::vector<PrPoint>& curve, double auc_value,
                        const std::string& path) {
  std::string text = detail::str(kPrHeader, "\n");
  for (const PrPoint& p : curve)
    text += detail::str(detail::format_double(p.threshold), ",",
                        detail::format_double(p.precision), ",",
                        detail::format_double(p.recall), "\n");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", auc_value);
  text += detail::str("auc=", buf, "\n");
  write_file_text(path, text);
}

}  // namespace dsf
