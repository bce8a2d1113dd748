#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ldseg/diffusion.hpp"
#include "ldseg/models.hpp"
#include "ldseg/optim.hpp"
#include "ldseg/rng.hpp"
#include "ldseg/tensor.hpp"

namespace ldseg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// ---------------------------------------------------------------------------
// low-level byte I/O (whole file in memory so every truncation is detectable)

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error(io_error::kind::open_failed, path, "cannot open for reading");
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<std::size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
  if (!f) throw io_error(io_error::kind::open_failed, path, "read failed");
  return buf;
}

inline void write_file_bytes(const std::string& path, const void* data, std::size_t len) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error(io_error::kind::write_failed, path, "cannot open for writing");
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
  f.flush();
  if (!f) throw io_error(io_error::kind::write_failed, path, "write failed");
}

// bounds-checked cursor over a loaded file
struct ByteReader {
  const unsigned char* p;
  std::size_t len, pos = 0;
  std::string path;

  ByteReader(const std::vector<unsigned char>& b, std::string path_)
      : p(b.data()), len(b.size()), path(std::move(path_)) {}

  std::size_t remaining() const { return len - pos; }

  void need(std::size_t n, const char* what) const {
    if (len - pos < n) throw io_error(io_error::kind::truncated, path, std::string("truncated in ") + what);
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, p + pos, n);
    pos += n;
  }
  std::uint8_t u8(const char* what) {
    std::uint8_t v;
    raw(&v, 1, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    raw(&v, 4, what);
    return v;
  }
};

// ---------------------------------------------------------------------------
// TNSR: tiny tensor container
//   "TNSR" | u8 dtype (0 = f32 LE) | u8 rank | rank x u32 dims | row-major f32

inline void write_tensor(const std::string& path, const Tensor& t) {
  std::vector<unsigned char> out;
  out.insert(out.end(), {'T', 'N', 'S', 'R'});
  out.push_back(0);  // f32
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) {
    const std::uint32_t v = static_cast<std::uint32_t>(t.dim(d));
    const unsigned char* b = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), b, b + 4);
  }
  const std::size_t payload = t.numel() * sizeof(float);
  const std::size_t head = out.size();
  out.resize(head + payload);
  if (payload > 0) std::memcpy(out.data() + head, t.data.data(), payload);
  write_file_bytes(path, out.data(), out.size());
}

inline Tensor read_tensor(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  ByteReader r(buf, path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, "TNSR", 4) != 0) throw io_error(io_error::kind::bad_magic, path, "not a TNSR file");
  const std::uint8_t dtype = r.u8("dtype");
  if (dtype != 0) throw io_error(io_error::kind::bad_dtype, path, "unsupported dtype " + std::to_string(dtype));
  const std::uint8_t rank = r.u8("rank");
  if (rank > 8) throw io_error(io_error::kind::bad_header, path, "rank " + std::to_string(rank) + " exceeds limit 8");
  std::vector<int> dims(rank);
  std::size_t numel = 1;
  for (int d = 0; d < rank; ++d) {
    const std::uint32_t v = r.u32("dims");
    if (v == 0) throw io_error(io_error::kind::bad_header, path, "zero dimension");
    if (v > (1u << 28) || numel > (std::size_t{1} << 28) / v)
      throw io_error(io_error::kind::bad_header, path, "dimensions overflow sanity limit");
    dims[static_cast<std::size_t>(d)] = static_cast<int>(v);
    numel *= v;
  }
  if (r.remaining() < numel * sizeof(float)) throw io_error(io_error::kind::truncated, path, "truncated in payload");
  if (r.remaining() > numel * sizeof(float)) throw io_error(io_error::kind::bad_header, path, "trailing bytes after payload");
  Tensor t(dims);
  r.raw(t.data.data(), numel * sizeof(float), "payload");
  return t;
}

// ---------------------------------------------------------------------------
// P5 binary greymap, maxval 255; images map [0,1] <-> 0..255, masks store raw
// class indices

struct P5Image {
  int W = 0, H = 0;
  std::vector<unsigned char> bytes;  // row-major, H rows of W
};

inline void write_p5(const std::string& path, const P5Image& img) {
  std::string head = "P5\n" + std::to_string(img.W) + " " + std::to_string(img.H) + "\n255\n";
  std::vector<unsigned char> out(head.begin(), head.end());
  out.insert(out.end(), img.bytes.begin(), img.bytes.end());
  write_file_bytes(path, out.data(), out.size());
}

namespace detail {
// whitespace/comment-aware ASCII integer token, as in the PNM family
inline long p5_token(ByteReader& r) {
  for (;;) {
    r.need(1, "header");
    const unsigned char c = r.p[r.pos];
    if (c == '#') {
      while (r.pos < r.len && r.p[r.pos] != '\n') ++r.pos;
    } else if (std::isspace(c)) {
      ++r.pos;
    } else {
      break;
    }
  }
  if (!std::isdigit(r.p[r.pos])) throw io_error(io_error::kind::bad_header, r.path, "expected integer in header");
  long v = 0;
  while (r.pos < r.len && std::isdigit(r.p[r.pos])) {
    v = v * 10 + (r.p[r.pos] - '0');
    if (v > 100000000L) throw io_error(io_error::kind::bad_header, r.path, "header value too large");
    ++r.pos;
  }
  return v;
}
}  // namespace detail

inline P5Image read_p5(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  ByteReader r(buf, path);
  char magic[2];
  r.raw(magic, 2, "magic");
  if (magic[0] != 'P' || magic[1] != '5') throw io_error(io_error::kind::bad_magic, path, "not a P5 greymap");
  const long W = detail::p5_token(r);
  const long H = detail::p5_token(r);
  const long maxval = detail::p5_token(r);
  if (W < 1 || H < 1 || W > 65536 || H > 65536 || W * H > (1L << 28))
    throw io_error(io_error::kind::bad_header, path, "bad raster dimensions");
  if (maxval != 255) throw io_error(io_error::kind::bad_header, path, "maxval must be 255");
  r.need(1, "raster separator");
  if (!std::isspace(r.p[r.pos])) throw io_error(io_error::kind::bad_header, path, "missing raster separator");
  ++r.pos;
  const std::size_t n = static_cast<std::size_t>(W) * static_cast<std::size_t>(H);
  if (r.remaining() < n) throw io_error(io_error::kind::truncated, path, "truncated in raster");
  if (r.remaining() > n) throw io_error(io_error::kind::bad_header, path, "trailing bytes after raster");
  P5Image img;
  img.W = static_cast<int>(W);
  img.H = static_cast<int>(H);
  img.bytes.assign(r.p + r.pos, r.p + r.pos + n);
  return img;
}

inline void write_image_p5(const std::string& path, const Tensor& img) {
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 1)
    throw shape_error("write_image_p5: expected [1,1,H,W]");
  P5Image p;
  p.H = img.dim(2);
  p.W = img.dim(3);
  p.bytes.resize(img.numel());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
    p.bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  write_p5(path, p);
}

inline Tensor read_image_p5(const std::string& path) {
  const P5Image p = read_p5(path);
  Tensor t({1, 1, p.H, p.W});
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<float>(p.bytes[i] / 255.0);
  return t;
}

inline void write_mask_p5(const std::string& path, const std::vector<int>& mask, int H, int W) {
  if (mask.size() != static_cast<std::size_t>(H) * W) throw shape_error("write_mask_p5: size mismatch");
  P5Image p;
  p.H = H;
  p.W = W;
  p.bytes.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] > 255) throw value_error("write_mask_p5: class index out of byte range");
    p.bytes[i] = static_cast<unsigned char>(mask[i]);
  }
  write_p5(path, p);
}

inline std::vector<int> read_mask_p5(const std::string& path, int classes, int* H_out = nullptr,
                                     int* W_out = nullptr) {
  const P5Image p = read_p5(path);
  std::vector<int> mask(p.bytes.size());
  for (std::size_t i = 0; i < p.bytes.size(); ++i) {
    if (p.bytes[i] >= classes)
      throw io_error(io_error::kind::bad_header, path, "mask value " + std::to_string(p.bytes[i]) + " out of range");
    mask[i] = p.bytes[i];
  }
  if (H_out) *H_out = p.H;
  if (W_out) *W_out = p.W;
  return mask;
}

// ---------------------------------------------------------------------------
// TSV manifest: split, image path, mask path, per-sample seed

struct ManifestRow {
  std::string split, image, mask;
  std::uint64_t seed = 0;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::string out = "split\timage\tmask\tseed\n";
  for (const auto& r : rows)
    out += r.split + "\t" + r.image + "\t" + r.mask + "\t" + std::to_string(r.seed) + "\n";
  write_file_bytes(path, out.data(), out.size());
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  std::string text(buf.begin(), buf.end());
  std::vector<ManifestRow> rows;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t c = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', c);
      cols.push_back(line.substr(c, tab == std::string::npos ? std::string::npos : tab - c));
      if (tab == std::string::npos) break;
      c = tab + 1;
    }
    if (cols.size() != 4)
      throw io_error(io_error::kind::bad_header, path, "line " + std::to_string(lineno) + ": expected 4 columns");
    if (lineno == 1) {
      if (cols[0] != "split") throw io_error(io_error::kind::bad_header, path, "missing manifest header row");
      continue;
    }
    ManifestRow r;
    r.split = cols[0];
    if (r.split != "train" && r.split != "val" && r.split != "test")
      throw io_error(io_error::kind::bad_header, path, "line " + std::to_string(lineno) + ": unknown split " + r.split);
    r.image = cols[1];
    r.mask = cols[2];
    try {
      r.seed = std::stoull(cols[3]);
    } catch (const std::exception&) {
      throw io_error(io_error::kind::bad_header, path, "line " + std::to_string(lineno) + ": bad seed");
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty() && lineno == 0) throw io_error(io_error::kind::bad_header, path, "empty manifest");
  return rows;
}

// ---------------------------------------------------------------------------
// synthetic scenes: two wobbly star-convex blobs on a flat background with
// per-pixel texture noise, quantized to 8 bits exactly as stored on disk

struct SynthParams {
  int H = 64, W = 64;
  int classes = 3;  // background + two objects
  double min_area = 0.08, max_area = 0.13;
  // low-contrast regime: with tight margins the per-pixel texture noise
  // actually matters, so context (not single pixels) must carry the decision
  double margin_lo = 0.15, margin_hi = 0.25;
  double tex_lo = 0.04, tex_hi = 0.05;
};

struct Sample {
  Tensor image;         // [1,1,H,W], quantized to 8-bit levels
  std::vector<int> mask;  // H*W class indices
  std::uint64_t seed = 0;
};

namespace detail {

struct Blob {
  double cx, cy, r0, ecc, rot;
  double a1, k1, p1, a2, k2, p2;

  // outer bound on the support radius, used for placement
  double rmax() const { return r0 * (1.0 + a1 + a2) * (1.0 + ecc); }

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(rot), sa = std::sin(rot);
    // rotate into the blob frame, undo the axis stretch
    const double ux = (ca * dx + sa * dy) / (1.0 + ecc);
    const double uy = (-sa * dx + ca * dy) * (1.0 + ecc);
    const double rr = std::sqrt(ux * ux + uy * uy);
    if (rr < 1e-12) return true;
    const double th = std::atan2(uy, ux);
    const double bound = r0 * (1.0 + a1 * std::cos(k1 * th + p1) + a2 * std::cos(k2 * th + p2));
    return rr <= bound;
  }
};

inline Blob draw_blob(RngStream& rng, const SynthParams& sp) {
  Blob b{};
  const double area = rng.uniform(sp.min_area, sp.max_area) * sp.H * sp.W;
  b.r0 = std::sqrt(area / std::numbers::pi);
  b.ecc = rng.uniform(0.0, 0.15);
  b.rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
  b.a1 = rng.uniform(0.0, 0.07);
  b.k1 = rng.uniform_int(2, 3);
  b.p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  b.a2 = rng.uniform(0.0, 0.05);
  b.k2 = rng.uniform_int(4, 5);
  b.p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return b;
}

}  // namespace detail

inline Sample make_sample(const SynthParams& sp, std::uint64_t seed) {
  if (sp.classes != 3) throw value_error("make_sample: generator draws exactly two objects (classes = 3)");
  if (sp.H < 32 || sp.W < 32) throw value_error("make_sample: image too small for two objects");
  RngStream rng(seed, 0);
  Sample s;
  s.seed = seed;

  for (int attempt = 0; attempt < 64; ++attempt) {
    detail::Blob A = detail::draw_blob(rng, sp);
    detail::Blob B = detail::draw_blob(rng, sp);
    const double sep = A.rmax() + B.rmax() + 3.0;

    bool placed = false;
    for (int tries = 0; tries < 100 && !placed; ++tries) {
      A.cx = rng.uniform(A.rmax() + 1.0, sp.W - A.rmax() - 1.0);
      A.cy = rng.uniform(A.rmax() + 1.0, sp.H - A.rmax() - 1.0);
      B.cx = rng.uniform(B.rmax() + 1.0, sp.W - B.rmax() - 1.0);
      B.cy = rng.uniform(B.rmax() + 1.0, sp.H - B.rmax() - 1.0);
      placed = std::hypot(A.cx - B.cx, A.cy - B.cy) >= sep;
    }
    if (!placed) {
      // deterministic fallback: opposite corners along the diagonal
      const double g = sep / (2.0 * std::numbers::sqrt2);
      A.cx = std::min(A.rmax() + 1.0, sp.W / 2.0 - g);
      A.cy = std::min(A.rmax() + 1.0, sp.H / 2.0 - g);
      B.cx = std::max(sp.W - B.rmax() - 1.0, sp.W / 2.0 + g);
      B.cy = std::max(sp.H - B.rmax() - 1.0, sp.H / 2.0 + g);
      if (std::hypot(A.cx - B.cx, A.cy - B.cy) < sep) continue;  // geometry infeasible, redraw shapes
    }

    s.mask.assign(static_cast<std::size_t>(sp.H) * sp.W, 0);
    std::size_t areaA = 0, areaB = 0;
    for (int y = 0; y < sp.H; ++y)
      for (int x = 0; x < sp.W; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * sp.W + x;
        if (A.contains(x + 0.5, y + 0.5)) {
          s.mask[idx] = 1;
          ++areaA;
        } else if (B.contains(x + 0.5, y + 0.5)) {
          s.mask[idx] = 2;
          ++areaB;
        }
      }
    const double total = static_cast<double>(sp.H) * sp.W;
    if (areaA / total < 0.03 || areaA / total > 0.25 || areaB / total < 0.03 || areaB / total > 0.25)
      continue;  // rasterization drifted out of bounds, redraw

    // intensity levels: class 1 is brighter than the background, class 2 is
    // darker, so appearance alone identifies the class (as it does for real
    // anatomy); both margins are drawn independently
    double m1 = rng.uniform(sp.margin_lo, sp.margin_hi);
    double m2 = rng.uniform(sp.margin_lo, sp.margin_hi);
    if (m1 + m2 > 0.96) m2 = 0.96 - m1;
    const double bg = rng.uniform(0.02 + m2, 0.98 - m1);
    const double lvlA = bg + m1;
    const double lvlB = bg - m2;
    const double sigma_tex = rng.uniform(sp.tex_lo, sp.tex_hi);

    s.image = Tensor({1, 1, sp.H, sp.W});
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      const double level = s.mask[i] == 1 ? lvlA : (s.mask[i] == 2 ? lvlB : bg);
      double v = level + rng.normal(0.0, sigma_tex);
      v = std::clamp(v, 0.0, 1.0);
      s.image.data[i] = static_cast<float>(std::lround(v * 255.0) / 255.0);
    }
    return s;
  }
  throw value_error("make_sample: failed to synthesize a valid scene for seed " + std::to_string(seed));
}

// Additive Gaussian corruption for robustness tests; deliberately not clipped
// back into [0,1].
inline Tensor corrupt(const Tensor& image, double sigma, RngStream& rng) {
  if (sigma < 0) throw value_error("corrupt: sigma must be >= 0");
  Tensor out = image;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = static_cast<float>(static_cast<double>(out.data[i]) + rng.normal(0.0, sigma));
  return out;
}

// ---------------------------------------------------------------------------
// dataset directory: images/, masks/, manifest.tsv, meta.json

struct Dataset {
  SynthParams params;
  std::vector<Sample> train, val, test;
};

namespace detail {
inline std::string sample_stem(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", i);
  return buf;
}
}  // namespace detail

inline void generate_dataset(const std::string& dir, int n, const SynthParams& sp, std::uint64_t base_seed) {
  if (n < 10) throw value_error("generate_dataset: need at least 10 samples to split");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw io_error(io_error::kind::write_failed, dir, "cannot create dataset directories");

  RngStream master(base_seed, 0);
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
  for (auto& v : seeds) v = master.next_u64();

  // held-out test split 20%, then 10% of the remainder for validation
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(master.uniform_int(0, i))]);
  const int n_test = n / 5;
  const int n_val = (n - n_test) / 10;
  std::vector<std::string> split(static_cast<std::size_t>(n), "train");
  for (int i = 0; i < n_test; ++i) split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = "test";
  for (int i = n_test; i < n_test + n_val; ++i) split[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = "val";

  std::vector<ManifestRow> rows;
  for (int i = 0; i < n; ++i) {
    const Sample s = make_sample(sp, seeds[static_cast<std::size_t>(i)]);
    ManifestRow r;
    r.split = split[static_cast<std::size_t>(i)];
    r.image = "images/" + detail::sample_stem(i) + ".pgm";
    r.mask = "masks/" + detail::sample_stem(i) + ".pgm";
    r.seed = s.seed;
    write_image_p5((fs::path(dir) / r.image).string(), s.image);
    write_mask_p5((fs::path(dir) / r.mask).string(), s.mask, sp.H, sp.W);
    rows.push_back(std::move(r));
  }
  write_manifest((fs::path(dir) / "manifest.tsv").string(), rows);

  nlohmann::json meta;
  meta["n"] = n;
  meta["H"] = sp.H;
  meta["W"] = sp.W;
  meta["classes"] = sp.classes;
  meta["base_seed"] = base_seed;
  const std::string mj = meta.dump(2) + "\n";
  write_file_bytes((fs::path(dir) / "meta.json").string(), mj.data(), mj.size());
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  const std::vector<unsigned char> mb = read_file_bytes((fs::path(dir) / "meta.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mb.begin(), mb.end());
    ds.params.H = meta.at("H").get<int>();
    ds.params.W = meta.at("W").get<int>();
    ds.params.classes = meta.at("classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw io_error(io_error::kind::bad_header, (fs::path(dir) / "meta.json").string(), e.what());
  }
  for (const ManifestRow& r : read_manifest((fs::path(dir) / "manifest.tsv").string())) {
    Sample s;
    s.image = read_image_p5((fs::path(dir) / r.image).string());
    int H = 0, W = 0;
    s.mask = read_mask_p5((fs::path(dir) / r.mask).string(), ds.params.classes, &H, &W);
    if (s.image.dim(2) != ds.params.H || s.image.dim(3) != ds.params.W || H != ds.params.H || W != ds.params.W)
      throw io_error(io_error::kind::bad_header, (fs::path(dir) / r.image).string(), "sample dims disagree with meta.json");
    s.seed = r.seed;
    (r.split == "train" ? ds.train : r.split == "val" ? ds.val : ds.test).push_back(std::move(s));
  }
  if (ds.train.empty()) throw io_error(io_error::kind::bad_header, dir, "dataset has no training rows");
  return ds;
}

// batching helpers
inline Tensor stack_images(const std::vector<Sample>& samples, const std::vector<int>& idx) {
  if (idx.empty()) throw value_error("stack_images: empty batch");
  const Tensor& first = samples[static_cast<std::size_t>(idx[0])].image;
  const int H = first.dim(2), W = first.dim(3);
  Tensor out({static_cast<int>(idx.size()), 1, H, W});
  const std::size_t per = static_cast<std::size_t>(H) * W;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& img = samples[static_cast<std::size_t>(idx[b])].image;
    if (img.dim(2) != H || img.dim(3) != W) throw shape_error("stack_images: mixed sizes in batch");
    std::copy(img.data.begin(), img.data.end(), out.data.begin() + b * per);
  }
  return out;
}

inline std::vector<int> stack_masks(const std::vector<Sample>& samples, const std::vector<int>& idx) {
  std::vector<int> out;
  for (int i : idx) {
    const auto& m = samples[static_cast<std::size_t>(i)].mask;
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// LDSC checkpoint: "LDSC" | u32 version | u32 json length | json | payload.
// The json lists tensors in order; the payload stores value, then first and
// second Adam moments for each. Byte-identical across a save/load/save trip.

struct Checkpoint {
  std::string kind;  // "mask_autoencoder" | "denoiser" | "baseline"
  nlohmann::json meta;
  ParamStore params;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["classes"] = c.classes;
  j["depth"] = c.depth;
  j["base_width"] = c.base_width;
  j["channel_mult"] = c.channel_mult;
  j["latent_channels"] = c.latent_channels;
  j["den_depth"] = c.den_depth;
  j["den_base"] = c.den_base;
  j["den_mult"] = c.den_mult;
  j["time_dim"] = c.time_dim;
  j["heads"] = c.heads;
  j["attention_level"] = c.attention_level;
  j["embed_mode"] = c.embed_mode;
  j["gn_groups"] = c.gn_groups;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.classes = j.at("classes").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.den_depth = j.at("den_depth").get<int>();
  c.den_base = j.at("den_base").get<int>();
  c.den_mult = j.at("den_mult").get<std::vector<int>>();
  c.time_dim = j.at("time_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.attention_level = j.at("attention_level").get<int>();
  c.embed_mode = j.at("embed_mode").get<std::string>();
  c.gn_groups = j.at("gn_groups").get<int>();
  return c;
}

inline nlohmann::json schedule_to_json(const NoiseSchedule& s) {
  nlohmann::json j;
  j["kind"] = s.kind;
  j["T"] = s.T;
  j["beta1"] = s.beta1;
  j["betaT"] = s.betaT;
  j["offset"] = s.offset;
  return j;
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "linear")
    return make_linear_schedule(j.at("T").get<int>(), j.at("beta1").get<double>(), j.at("betaT").get<double>());
  if (kind == "cosine") return make_cosine_schedule(j.at("T").get<int>(), j.at("offset").get<double>());
  throw io_error(io_error::kind::bad_header, "checkpoint", "unknown schedule kind " + kind);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json j = ck.meta;
  j["kind"] = ck.kind;
  j["opt_steps"] = ck.params.opt_steps;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, p] : ck.params.entries()) {
    nlohmann::json t;
    t["name"] = name;
    t["dims"] = p.value.shape;
    tensors.push_back(std::move(t));
  }
  j["tensors"] = std::move(tensors);
  const std::string js = j.dump();

  std::vector<unsigned char> out;
  out.insert(out.end(), {'L', 'D', 'S', 'C'});
  const std::uint32_t version = 1, jlen = static_cast<std::uint32_t>(js.size());
  const unsigned char* vb = reinterpret_cast<const unsigned char*>(&version);
  out.insert(out.end(), vb, vb + 4);
  const unsigned char* lb = reinterpret_cast<const unsigned char*>(&jlen);
  out.insert(out.end(), lb, lb + 4);
  out.insert(out.end(), js.begin(), js.end());
  for (const auto& [name, p] : ck.params.entries()) {
    for (const Tensor* t : {&p.value, &p.m, &p.v}) {
      const unsigned char* b = reinterpret_cast<const unsigned char*>(t->data.data());
      out.insert(out.end(), b, b + t->numel() * sizeof(float));
    }
  }
  write_file_bytes(path, out.data(), out.size());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  ByteReader r(buf, path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, "LDSC", 4) != 0) throw io_error(io_error::kind::bad_magic, path, "not a checkpoint file");
  const std::uint32_t version = r.u32("version");
  if (version != 1) throw io_error(io_error::kind::bad_version, path, "unsupported version " + std::to_string(version));
  const std::uint32_t jlen = r.u32("header length");
  r.need(jlen, "json header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.p + r.pos, r.p + r.pos + jlen);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(io_error::kind::bad_header, path, std::string("bad json header: ") + e.what());
  }
  r.pos += jlen;

  Checkpoint ck;
  try {
    ck.kind = j.at("kind").get<std::string>();
    ck.params.opt_steps = j.at("opt_steps").get<std::int64_t>();
    std::size_t payload = 0;
    std::vector<std::pair<std::string, std::vector<int>>> specs;
    for (const auto& t : j.at("tensors")) {
      std::pair<std::string, std::vector<int>> spec{t.at("name").get<std::string>(),
                                                    t.at("dims").get<std::vector<int>>()};
      for (int d : spec.second)
        if (d < 1 || d > (1 << 28)) throw io_error(io_error::kind::bad_header, path, "bad tensor dims");
      const std::size_t n = shape_numel(spec.second);
      if (n > (std::size_t{1} << 28)) throw io_error(io_error::kind::bad_header, path, "tensor too large");
      payload += 3 * n * sizeof(float);
      specs.push_back(std::move(spec));
    }
    if (r.remaining() < payload) throw io_error(io_error::kind::truncated, path, "truncated in tensor payload");
    if (r.remaining() > payload) throw io_error(io_error::kind::bad_header, path, "trailing bytes after payload");
    for (auto& [name, dims] : specs) {
      if (ck.params.has(name)) throw io_error(io_error::kind::bad_header, path, "duplicate tensor " + name);
      ck.params.add(name, Tensor(dims));
      Param& p = ck.params.at(name);
      for (Tensor* t : {&p.value, &p.m, &p.v}) r.raw(t->data.data(), t->numel() * sizeof(float), "tensor payload");
    }
    j.erase("kind");
    j.erase("opt_steps");
    j.erase("tensors");
    ck.meta = std::move(j);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(io_error::kind::bad_header, path, std::string("bad header field: ") + e.what());
  }
  return ck;
}

}  // namespace ldseg
