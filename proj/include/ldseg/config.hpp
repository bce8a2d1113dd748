#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "ldseg/dataio.hpp"
#include "ldseg/diffusion.hpp"
#include "ldseg/errors.hpp"
#include "ldseg/models.hpp"

namespace ldseg {

// ---------------------------------------------------------------------------
// run configuration: one struct covering every subcommand, filled from a
// small TOML file ([data]/[model]/[train]/[sample]/[bench]) with flag
// overrides applied afterwards by the CLI (flags win)

struct RunConfig {
  // [data]
  std::string data_dir = "data";
  int n = 500;
  int size = 64;
  int classes = 3;
  std::uint64_t data_seed = 0;
  double min_area = 0.08, max_area = 0.13;
  double margin_lo = 0.15, margin_hi = 0.25;
  double tex_lo = 0.04, tex_hi = 0.05;

  // [model] (classes is mirrored from [data] at load time)
  ModelConfig model;
  std::string mask_path = "autoencoder";  // or "nearest-downsample"
  std::string image_path = "encoder";     // or "nearest-downsample"

  // [train]
  int ae_epochs = 100, cd_epochs = 300, baseline_epochs = 40;
  int batch = 4;
  double lr_ae = 1e-2, lr_cd = 1e-3, lr_baseline = 1e-3;
  double lr_decay = 0.999;  // per-epoch exponential factor
  double latent_reg = 0;    // weight of the latent moment penalty (0 = off)
  int T = 1000;
  std::string schedule = "linear";
  double beta1 = 1e-4, betaT = 0.02, cosine_offset = 0.008;
  std::uint64_t train_seed = 0;

  // [sample]
  int steps = 1000;
  std::string sampler = "ddpm";  // or "ddim"
  std::uint64_t sample_seed = 0;
  int runs = 100;  // uncertainty ensemble size

  // [bench]
  std::vector<int> bench_steps_grid{2, 5, 10, 25, 50, 1000};
  std::vector<std::string> bench_samplers{"ddpm", "ddim"};
  std::vector<int> bench_sizes{64, 96, 128, 192, 256};
  int bench_size_steps = 50;
  std::vector<double> bench_sigmas{0.0, 0.05, 0.1, 0.2};
  int timing_repeats = 5, timing_warmup = 1;
  bool svg = true;

  SynthParams synth() const {
    SynthParams sp;
    sp.H = size;
    sp.W = size;
    sp.classes = classes;
    sp.min_area = min_area;
    sp.max_area = max_area;
    sp.margin_lo = margin_lo;
    sp.margin_hi = margin_hi;
    sp.tex_lo = tex_lo;
    sp.tex_hi = tex_hi;
    return sp;
  }

  NoiseSchedule make_schedule() const {
    if (schedule == "linear") return make_linear_schedule(T, beta1, betaT);
    if (schedule == "cosine") return make_cosine_schedule(T, cosine_offset);
    throw config_error("train.schedule must be 'linear' or 'cosine', got '" + schedule + "'");
  }

  void validate() const {
    if (n < 10) throw config_error("data.n must be >= 10");
    if (size < 8) throw config_error("data.size must be >= 8");
    if (classes < 2) throw config_error("data.classes must be >= 2");
    if (!(min_area > 0 && max_area >= min_area && max_area < 0.5))
      throw config_error("data.min_area/max_area out of range");
    if (batch < 1) throw config_error("train.batch must be >= 1");
    if (ae_epochs < 1 || cd_epochs < 1 || baseline_epochs < 1)
      throw config_error("train epoch counts must be >= 1");
    if (!(lr_ae > 0 && lr_cd > 0 && lr_baseline > 0)) throw config_error("train learning rates must be > 0");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw config_error("train.lr_decay must be in (0, 1]");
    if (latent_reg < 0) throw config_error("train.latent_reg must be >= 0");
    if (T < 1) throw config_error("train.T must be >= 1");
    if (steps < 1) throw config_error("sample.steps must be >= 1");
    if (steps > T) throw config_error("sample.steps must be <= train.T");
    if (sampler != "ddpm" && sampler != "ddim")
      throw config_error("sample.sampler must be 'ddpm' or 'ddim'");
    if (runs < 1) throw config_error("sample.runs must be >= 1");
    if (mask_path != "autoencoder" && mask_path != "nearest-downsample")
      throw config_error("model.mask_path must be 'autoencoder' or 'nearest-downsample'");
    if (image_path != "encoder" && image_path != "nearest-downsample")
      throw config_error("model.image_path must be 'encoder' or 'nearest-downsample'");
    for (int k : bench_steps_grid)
      if (k < 1 || k > T) throw config_error("bench.steps_grid entries must be in [1, T]");
    for (const auto& s : bench_samplers)
      if (s != "ddpm" && s != "ddim") throw config_error("bench.samplers entries must be 'ddpm' or 'ddim'");
    for (int s : bench_sizes)
      if (s < 8) throw config_error("bench.sizes entries must be >= 8");
    if (bench_size_steps < 1) throw config_error("bench.size_steps must be >= 1");
    for (double s : bench_sigmas)
      if (s < 0) throw config_error("bench.sigmas entries must be >= 0");
    if (timing_repeats < 1 || timing_warmup < 0) throw config_error("bench timing parameters out of range");
    ModelConfig m = model;
    m.classes = classes;
    m.validate();
  }
};

// ---------------------------------------------------------------------------
// minimal TOML subset: [section], key = value, values are integers, floats,
// booleans, "strings", or flat arrays of those; # starts a comment

namespace toml {

struct Value {
  enum class kind { integer, real, boolean, str, array } k = kind::integer;
  long long i = 0;
  double f = 0;
  bool b = false;
  std::string s;
  std::vector<Value> arr;
};

inline std::string strip(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline Value parse_scalar(const std::string& tok, const std::string& where) {
  Value v;
  if (tok.empty()) throw config_error(where + ": empty value");
  if (tok.front() == '"') {
    if (tok.size() < 2 || tok.back() != '"') throw config_error(where + ": unterminated string");
    v.k = Value::kind::str;
    v.s = tok.substr(1, tok.size() - 2);
    return v;
  }
  if (tok == "true" || tok == "false") {
    v.k = Value::kind::boolean;
    v.b = tok == "true";
    return v;
  }
  const bool looks_real = tok.find_first_of(".eE") != std::string::npos;
  try {
    std::size_t used = 0;
    if (looks_real) {
      v.k = Value::kind::real;
      v.f = std::stod(tok, &used);
    } else {
      v.k = Value::kind::integer;
      v.i = std::stoll(tok, &used);
    }
    if (used != tok.size()) throw config_error(where + ": bad value '" + tok + "'");
  } catch (const config_error&) {
    throw;
  } catch (const std::exception&) {
    throw config_error(where + ": bad value '" + tok + "'");
  }
  return v;
}

inline Value parse_value(const std::string& raw, const std::string& where) {
  const std::string tok = strip(raw);
  if (!tok.empty() && tok.front() == '[') {
    if (tok.back() != ']') throw config_error(where + ": unterminated array");
    Value v;
    v.k = Value::kind::array;
    const std::string inner = tok.substr(1, tok.size() - 2);
    std::size_t pos = 0;
    while (pos <= inner.size()) {
      std::size_t comma = inner.find(',', pos);
      const std::string item = strip(inner.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (!item.empty()) v.arr.push_back(parse_scalar(item, where));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return v;
  }
  return parse_scalar(tok, where);
}

// line -> content with comments removed (quotes respected)
inline std::string uncomment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

}  // namespace toml

namespace detail {

inline long long want_int(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::integer) throw config_error(where + ": expected integer");
  return v.i;
}
inline double want_real(const toml::Value& v, const std::string& where) {
  if (v.k == toml::Value::kind::integer) return static_cast<double>(v.i);
  if (v.k != toml::Value::kind::real) throw config_error(where + ": expected number");
  return v.f;
}
inline std::string want_str(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::str) throw config_error(where + ": expected string");
  return v.s;
}
inline bool want_bool(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::boolean) throw config_error(where + ": expected true/false");
  return v.b;
}
inline std::vector<int> want_int_array(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::array) throw config_error(where + ": expected array");
  std::vector<int> out;
  for (const auto& e : v.arr) out.push_back(static_cast<int>(want_int(e, where)));
  return out;
}
inline std::vector<double> want_real_array(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::array) throw config_error(where + ": expected array");
  std::vector<double> out;
  for (const auto& e : v.arr) out.push_back(want_real(e, where));
  return out;
}
inline std::vector<std::string> want_str_array(const toml::Value& v, const std::string& where) {
  if (v.k != toml::Value::kind::array) throw config_error(where + ": expected array");
  std::vector<std::string> out;
  for (const auto& e : v.arr) out.push_back(want_str(e, where));
  return out;
}

inline void apply_key(RunConfig& c, const std::string& sec, const std::string& key, const toml::Value& v) {
  const std::string where = "config: " + sec + "." + key;
  auto I = [&] { return static_cast<int>(want_int(v, where)); };
  auto U = [&] { return static_cast<std::uint64_t>(want_int(v, where)); };
  auto F = [&] { return want_real(v, where); };
  auto S = [&] { return want_str(v, where); };

  if (sec == "data") {
    if (key == "dir") c.data_dir = S();
    else if (key == "n") c.n = I();
    else if (key == "size") c.size = I();
    else if (key == "classes") c.classes = I();
    else if (key == "seed") c.data_seed = U();
    else if (key == "min_area") c.min_area = F();
    else if (key == "max_area") c.max_area = F();
    else if (key == "margin_lo") c.margin_lo = F();
    else if (key == "margin_hi") c.margin_hi = F();
    else if (key == "tex_lo") c.tex_lo = F();
    else if (key == "tex_hi") c.tex_hi = F();
    else throw config_error("config: unknown key data." + key);
  } else if (sec == "model") {
    if (key == "depth") c.model.depth = I();
    else if (key == "base_width") c.model.base_width = I();
    else if (key == "channel_mult") c.model.channel_mult = want_int_array(v, where);
    else if (key == "den_depth") c.model.den_depth = I();
    else if (key == "den_base") c.model.den_base = I();
    else if (key == "den_mult") c.model.den_mult = want_int_array(v, where);
    else if (key == "time_dim") c.model.time_dim = I();
    else if (key == "heads") c.model.heads = I();
    else if (key == "attention_level") c.model.attention_level = I();
    else if (key == "embed_mode") c.model.embed_mode = S();
    else if (key == "gn_groups") c.model.gn_groups = I();
    else if (key == "mask_path") c.mask_path = S();
    else if (key == "image_path") c.image_path = S();
    else throw config_error("config: unknown key model." + key);
  } else if (sec == "train") {
    if (key == "ae_epochs") c.ae_epochs = I();
    else if (key == "cd_epochs") c.cd_epochs = I();
    else if (key == "baseline_epochs") c.baseline_epochs = I();
    else if (key == "batch") c.batch = I();
    else if (key == "lr_ae") c.lr_ae = F();
    else if (key == "lr_cd") c.lr_cd = F();
    else if (key == "lr_baseline") c.lr_baseline = F();
    else if (key == "lr_decay") c.lr_decay = F();
    else if (key == "latent_reg") c.latent_reg = F();
    else if (key == "T") c.T = I();
    else if (key == "schedule") c.schedule = S();
    else if (key == "beta1") c.beta1 = F();
    else if (key == "betaT") c.betaT = F();
    else if (key == "cosine_offset") c.cosine_offset = F();
    else if (key == "seed") c.train_seed = U();
    else throw config_error("config: unknown key train." + key);
  } else if (sec == "sample") {
    if (key == "steps") c.steps = I();
    else if (key == "sampler") c.sampler = S();
    else if (key == "seed") c.sample_seed = U();
    else if (key == "runs") c.runs = I();
    else throw config_error("config: unknown key sample." + key);
  } else if (sec == "bench") {
    if (key == "steps_grid") c.bench_steps_grid = want_int_array(v, where);
    else if (key == "samplers") c.bench_samplers = want_str_array(v, where);
    else if (key == "sizes") c.bench_sizes = want_int_array(v, where);
    else if (key == "size_steps") c.bench_size_steps = I();
    else if (key == "sigmas") c.bench_sigmas = want_real_array(v, where);
    else if (key == "timing_repeats") c.timing_repeats = I();
    else if (key == "timing_warmup") c.timing_warmup = I();
    else if (key == "svg") c.svg = want_bool(v, where);
    else throw config_error("config: unknown key bench." + key);
  } else {
    throw config_error("config: unknown section [" + sec + "]");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::string sec;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = toml::strip(toml::uncomment(text.substr(pos, end - pos)));
    pos = end + 1;
    ++lineno;
    if (line.empty()) {
      if (pos > text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') throw config_error("config line " + std::to_string(lineno) + ": bad section header");
      sec = toml::strip(line.substr(1, line.size() - 2));
      if (sec.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = toml::strip(line.substr(0, eq));
    if (key.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty key");
    if (sec.empty()) throw config_error("config line " + std::to_string(lineno) + ": key outside any section");
    detail::apply_key(c, sec, key, toml::parse_value(line.substr(eq + 1), "config: " + sec + "." + key));
    if (pos > text.size()) break;
  }
  c.model.classes = c.classes;
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  return parse_run_config(std::string(buf.begin(), buf.end()));
}

}  // namespace ldseg
