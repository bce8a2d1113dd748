#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ldseg/pipeline.hpp"

namespace ldseg {

// corruption draws live on their own stream ids so they never collide with
// data/train/sampling streams under the same user seed
inline constexpr int kStreamCorruptBase = 2'000'000;

// ---------------------------------------------------------------------------
// DSC / IoU

inline double dsc(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
  if (pred.size() != truth.size()) throw shape_error("dsc: size mismatch");
  std::size_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls, pb = truth[i] == cls;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

inline double iou(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
  if (pred.size() != truth.size()) throw shape_error("iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls, pb = truth[i] == cls;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// union-of-foreground score: any nonzero class counts as object
inline double combined_dsc(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw shape_error("combined_dsc: size mismatch");
  std::size_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] != 0, pb = truth[i] != 0;
    a += pa;
    b += pb;
    inter += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

inline double combined_iou(const std::vector<int>& pred, const std::vector<int>& truth) {
  const double d = combined_dsc(pred, truth);
  return d / (2.0 - d);  // inverse of DSC = 2*IoU/(1+IoU)
}

struct MetricReport {
  std::vector<double> dsc_per_class;  // index = class id, background included
  std::vector<double> iou_per_class;
  double combined_dsc = 0;
  double combined_iou = 0;
  int count = 0;  // samples averaged into this report
};

inline MetricReport evaluate_one(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  MetricReport r;
  r.count = 1;
  for (int c = 0; c < classes; ++c) {
    r.dsc_per_class.push_back(dsc(pred, truth, c));
    r.iou_per_class.push_back(iou(pred, truth, c));
  }
  r.combined_dsc = combined_dsc(pred, truth);
  r.combined_iou = combined_iou(pred, truth);
  return r;
}

inline void merge_into(MetricReport& acc, const MetricReport& r) {
  if (acc.count == 0) {
    acc = r;
    return;
  }
  if (acc.dsc_per_class.size() != r.dsc_per_class.size()) throw shape_error("merge_into: class count mismatch");
  const double wa = acc.count, wb = r.count, wt = wa + wb;
  for (std::size_t c = 0; c < acc.dsc_per_class.size(); ++c) {
    acc.dsc_per_class[c] = (acc.dsc_per_class[c] * wa + r.dsc_per_class[c] * wb) / wt;
    acc.iou_per_class[c] = (acc.iou_per_class[c] * wa + r.iou_per_class[c] * wb) / wt;
  }
  acc.combined_dsc = (acc.combined_dsc * wa + r.combined_dsc * wb) / wt;
  acc.combined_iou = (acc.combined_iou * wa + r.combined_iou * wb) / wt;
  acc.count = static_cast<int>(wt);
}

// ---------------------------------------------------------------------------
// wall-clock protocol: median of `repeats` timed runs after `warmup` unrecorded
// ones, single thread

template <typename F>
double time_median_seconds(F&& fn, int repeats = 5, int warmup = 1) {
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> secs;
  secs.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = clock::now();
    fn();
    const auto t1 = clock::now();
    secs.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(secs.begin(), secs.end());
  return secs[secs.size() / 2];
}

// ---------------------------------------------------------------------------
// benchmark records and their CSV round trip

struct BenchRecord {
  std::string config_id;  // "ldseg", "id", "md", "md_id", "baseline"
  std::string sampler;    // "ddpm", "ddim", or "-" where not applicable
  int steps = 0;
  int size = 0;
  double sigma = 0;
  double seconds = 0;
  MetricReport metrics;
};

namespace detail {
inline std::string join_g17(const std::vector<double>& v) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", v[i]);
    if (i) out += ';';
    out += buf;
  }
  return out;
}
inline std::vector<double> split_g17(const std::string& s, const std::string& path) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t semi = s.find(';', pos);
    const std::string item = s.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
    if (!item.empty()) {
      try {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw io_error(io_error::kind::bad_header, path, "bad numeric list entry '" + item + "'");
      }
    }
    if (semi == std::string::npos) break;
    pos = semi + 1;
  }
  return out;
}
}  // namespace detail

inline void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records) {
  std::string out = "config,sampler,steps,size,sigma,seconds,count,combined_dsc,combined_iou,class_dsc,class_iou\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), ",%d,%d,%.17g,%.17g,%d,%.17g,%.17g,", r.steps, r.size, r.sigma, r.seconds,
                  r.metrics.count, r.metrics.combined_dsc, r.metrics.combined_iou);
    out += r.config_id + "," + r.sampler + buf + detail::join_g17(r.metrics.dsc_per_class) + "," +
           detail::join_g17(r.metrics.iou_per_class) + "\n";
  }
  write_file_bytes(path, out.data(), out.size());
}

inline std::vector<BenchRecord> read_bench_csv(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  const std::string text(buf.begin(), buf.end());
  std::vector<BenchRecord> out;
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
      const std::size_t comma = line.find(',', c);
      cols.push_back(line.substr(c, comma == std::string::npos ? std::string::npos : comma - c));
      if (comma == std::string::npos) break;
      c = comma + 1;
    }
    if (cols.size() != 11)
      throw io_error(io_error::kind::bad_header, path, "expected 11 columns at line " + std::to_string(lineno));
    if (lineno == 1) {
      if (cols[0] != "config") throw io_error(io_error::kind::bad_header, path, "missing csv header");
      continue;
    }
    BenchRecord r;
    r.config_id = cols[0];
    r.sampler = cols[1];
    try {
      r.steps = std::stoi(cols[2]);
      r.size = std::stoi(cols[3]);
      r.sigma = std::stod(cols[4]);
      r.seconds = std::stod(cols[5]);
      r.metrics.count = std::stoi(cols[6]);
      r.metrics.combined_dsc = std::stod(cols[7]);
      r.metrics.combined_iou = std::stod(cols[8]);
    } catch (const std::exception&) {
      throw io_error(io_error::kind::bad_header, path, "bad numeric field at line " + std::to_string(lineno));
    }
    r.metrics.dsc_per_class = detail::split_g17(cols[9], path);
    r.metrics.iou_per_class = detail::split_g17(cols[10], path);
    out.push_back(std::move(r));
  }
  if (out.empty() && lineno == 0) throw io_error(io_error::kind::bad_header, path, "empty csv");
  return out;
}

// ---------------------------------------------------------------------------
// baseline runtime (forward-only)

struct BaselineRuntime {
  ModelConfig mcfg;
  int H = 0, W = 0, classes = 0;
  ParamStore ps;
  BaselineResUnetT<float> model;
};

inline BaselineRuntime make_baseline_runtime(const Checkpoint& ck) {
  if (ck.kind != "baseline") throw checkpoint_error("expected a baseline checkpoint, got '" + ck.kind + "'");
  BaselineRuntime rt;
  try {
    rt.mcfg = model_config_from_json(ck.meta.at("model"));
    rt.H = ck.meta.at("data").at("H").get<int>();
    rt.W = ck.meta.at("data").at("W").get<int>();
    rt.classes = ck.meta.at("data").at("classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(std::string("baseline checkpoint metadata incomplete: ") + e.what());
  }
  rt.ps = ck.params;
  ParamStore probe;
  RngStream rng(0, kStreamTrainInit);
  rt.model = BaselineResUnetT<float>::create(probe, rng, rt.mcfg);
  if (probe.count() != rt.ps.count())
    throw checkpoint_error("baseline checkpoint parameter set does not match its recorded architecture");
  for (const auto& [name, p] : probe.entries())
    if (!rt.ps.has(name) || !rt.ps.at(name).value.same_shape(p.value))
      throw checkpoint_error("baseline checkpoint does not match its recorded architecture at " + name);
  return rt;
}

inline std::vector<int> baseline_predict(BaselineRuntime& rt, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1)
    throw shape_error("baseline_predict: image must be [1,1,H,W]");
  if (image.dim(2) != rt.H || image.dim(3) != rt.W)
    throw checkpoint_error("image size does not match baseline checkpoint size");
  Tape<float> tape;
  TapeParams<float> tp(tape, rt.ps);
  return argmax_channel(rt.model(tp, ad::leaf(tape, image)).val());
}

// ---------------------------------------------------------------------------
// steps-vs-accuracy bench: one record per (sampler, K, test image); the
// largest K in the grid serves as the full-step reference for minimal-K

struct StepsBenchResult {
  std::vector<BenchRecord> records;
  std::map<std::string, std::map<int, double>> mean_dsc;    // sampler -> K -> mean combined DSC
  std::map<std::string, std::map<int, double>> total_secs;  // sampler -> K -> summed wall-clock
  std::map<std::string, int> minimal_k;                     // within 0.005 of the reference DSC
};

inline StepsBenchResult bench_steps(LdsegRuntime& rt, const std::vector<Sample>& test,
                                    const std::vector<int>& k_grid, const std::vector<std::string>& samplers,
                                    std::uint64_t seed) {
  if (test.empty()) throw value_error("bench_steps: empty test set");
  if (k_grid.empty()) throw value_error("bench_steps: empty K grid");
  StepsBenchResult res;
  for (const std::string& sampler : samplers) {
    // one unrecorded call to warm caches before any timing
    {
      const std::vector<int> s1 = evenly_spaced_subsequence(1, rt.sched.T);
      segment(test[0].image, rt, s1, sampler, seed, 0);
    }
    for (int K : k_grid) {
      const std::vector<int> steps = evenly_spaced_subsequence(K, rt.sched.T);
      double dsc_sum = 0, sec_sum = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        SegOut out = segment(test[i].image, rt, steps, sampler, seed, static_cast<int>(i));
        const auto t1 = std::chrono::steady_clock::now();
        BenchRecord rec;
        rec.config_id = rt.variant.tag();
        rec.sampler = sampler;
        rec.steps = K;
        rec.size = rt.H;
        rec.seconds = std::chrono::duration<double>(t1 - t0).count();
        rec.metrics = evaluate_one(out.labels, test[i].mask, rt.classes);
        dsc_sum += rec.metrics.combined_dsc;
        sec_sum += rec.seconds;
        res.records.push_back(std::move(rec));
      }
      res.mean_dsc[sampler][K] = dsc_sum / static_cast<double>(test.size());
      res.total_secs[sampler][K] = sec_sum;
    }
    const int k_ref = *std::max_element(k_grid.begin(), k_grid.end());
    const double ref = res.mean_dsc[sampler][k_ref];
    int best = k_ref;
    for (const auto& [K, d] : res.mean_dsc[sampler])
      if (std::abs(d - ref) <= 0.005) {
        best = K;
        break;  // map iterates in ascending K order
      }
    res.minimal_k[sampler] = best;
  }
  return res;
}

// ---------------------------------------------------------------------------
// size-vs-latency bench at fixed K: single-image wall-clock, median protocol

struct SizeEntry {
  int size = 0;
  LdsegRuntime* ldseg = nullptr;
  LdsegRuntime* fullres = nullptr;  // the (nearest, nearest) pixel-space variant
  Tensor image;
};

inline std::vector<BenchRecord> bench_size(std::vector<SizeEntry>& entries, int K, int repeats, int warmup,
                                           std::uint64_t seed) {
  if (entries.empty()) throw value_error("bench_size: no sizes given");
  std::vector<BenchRecord> out;
  for (auto& e : entries) {
    if (!e.ldseg || !e.fullres) throw value_error("bench_size: entry missing a runtime");
    struct Case {
      LdsegRuntime* rt;
      const char* id;
    } cases[2] = {{e.ldseg, "ldseg"}, {e.fullres, "md_id"}};
    for (const auto& c : cases) {
      const std::vector<int> steps = evenly_spaced_subsequence(K, c.rt->sched.T);
      const double sec =
          time_median_seconds([&] { segment(e.image, *c.rt, steps, "ddpm", seed, 0); }, repeats, warmup);
      BenchRecord rec;
      rec.config_id = c.id;
      rec.sampler = "ddpm";
      rec.steps = K;
      rec.size = e.size;
      rec.seconds = sec;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// noise-robustness bench: aggregated DSC per (model, sigma), clean-trained
// models, corruption applied to test images only

inline std::vector<BenchRecord> bench_noise(LdsegRuntime& ldseg_rt, BaselineRuntime& baseline_rt,
                                            const std::vector<Sample>& test, const std::vector<double>& sigmas,
                                            int K, const std::string& sampler, std::uint64_t seed) {
  if (test.empty()) throw value_error("bench_noise: empty test set");
  std::vector<BenchRecord> out;
  const std::vector<int> steps = evenly_spaced_subsequence(K, ldseg_rt.sched.T);
  for (std::size_t si = 0; si < sigmas.size(); ++si) {
    const double sigma = sigmas[si];
    MetricReport agg_ldseg, agg_base;
    double sec_ldseg = 0, sec_base = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      RngStream crng(seed, kStreamCorruptBase + static_cast<int>(si) * 100000 + static_cast<int>(i));
      const Tensor img = sigma == 0 ? test[i].image : corrupt(test[i].image, sigma, crng);
      {
        const auto t0 = std::chrono::steady_clock::now();
        SegOut seg = segment(img, ldseg_rt, steps, sampler, seed, static_cast<int>(i));
        sec_ldseg += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        merge_into(agg_ldseg, evaluate_one(seg.labels, test[i].mask, ldseg_rt.classes));
      }
      {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<int> pred = baseline_predict(baseline_rt, img);
        sec_base += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        merge_into(agg_base, evaluate_one(pred, test[i].mask, baseline_rt.classes));
      }
    }
    BenchRecord a;
    a.config_id = "ldseg";
    a.sampler = sampler;
    a.steps = K;
    a.size = ldseg_rt.H;
    a.sigma = sigma;
    a.seconds = sec_ldseg;
    a.metrics = agg_ldseg;
    out.push_back(std::move(a));
    BenchRecord b;
    b.config_id = "baseline";
    b.sampler = "-";
    b.steps = 1;
    b.size = baseline_rt.H;
    b.sigma = sigma;
    b.seconds = sec_base;
    b.metrics = agg_base;
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// tiny SVG line charts (presentation only; the CSV is the data of record)

struct SvgSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline void write_svg_chart(const std::string& path, const std::string& title, const std::string& xlabel,
                            const std::string& ylabel, const std::vector<SvgSeries>& series, bool log_x = false) {
  const int Wpx = 640, Hpx = 420, ml = 60, mr = 150, mt = 40, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      const double xv = log_x ? std::log10(std::max(x, 1e-12)) : x;
      xmin = std::min(xmin, xv);
      xmax = std::max(xmax, xv);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  auto X = [&](double x) {
    const double xv = log_x ? std::log10(std::max(x, 1e-12)) : x;
    return ml + (xv - xmin) / (xmax - xmin) * (Wpx - ml - mr);
  };
  auto Y = [&](double y) { return Hpx - mb - (y - ymin) / (ymax - ymin) * (Hpx - mt - mb); };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(Wpx) + "\" height=\"" +
                    std::to_string(Hpx) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(Wpx / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">" + title +
         "</text>\n";
  char buf[256];
  // axes
  std::snprintf(buf, sizeof(buf), "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml,
                Hpx - mb, Wpx - mr, Hpx - mb);
  svg += buf;
  std::snprintf(buf, sizeof(buf), "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml, mt,
                ml, Hpx - mb);
  svg += buf;
  for (int i = 0; i <= 4; ++i) {
    const double fy = ymin + (ymax - ymin) * i / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" text-anchor=\"end\">%.3g</text>\n", ml - 6, Y(fy) + 4, fy);
    svg += buf;
    const double fxv = xmin + (xmax - xmin) * i / 4.0;
    const double fx = log_x ? std::pow(10.0, fxv) : fxv;
    std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%d\" text-anchor=\"middle\">%.3g</text>\n", X(fx),
                  Hpx - mb + 18, fx);
    svg += buf;
  }
  svg += "<text x=\"" + std::to_string((ml + Wpx - mr) / 2) + "\" y=\"" + std::to_string(Hpx - 10) +
         "\" text-anchor=\"middle\">" + xlabel + "</text>\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"16\" y=\"%d\" text-anchor=\"middle\" transform=\"rotate(-90 16 %d)\">%s</text>\n",
                (mt + Hpx - mb) / 2, (mt + Hpx - mb) / 2, ylabel.c_str());
  svg += buf;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 6];
    std::string pts;
    for (auto [x, y] : series[s].points) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", X(x), Y(y));
      pts += buf;
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" stroke-width=\"2\" points=\"" + pts +
           "\"/>\n";
    for (auto [x, y] : series[s].points) {
      std::snprintf(buf, sizeof(buf), "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"%s\"/>\n", X(x), Y(y), col);
      svg += buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"%zu\" width=\"12\" height=\"12\" fill=\"%s\"/>"
                  "<text x=\"%d\" y=\"%zu\">%s</text>\n",
                  Wpx - mr + 10, mt + 20 * s, col, Wpx - mr + 28, mt + 20 * s + 11, series[s].name.c_str());
    svg += buf;
  }
  svg += "</svg>\n";
  write_file_bytes(path, svg.data(), svg.size());
}

}  // namespace ldseg
