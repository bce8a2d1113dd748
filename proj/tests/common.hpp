#pragma once

// shared test machinery: finite-difference gradient checking on f64 tapes,
// sample-moment helpers, mask topology checks, temp dirs, and a subprocess
// runner for the CLI tests.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ldseg/eval.hpp"

namespace lt {

using ldseg::Tensor;
using T64 = ldseg::TensorT<double>;

inline std::string fresh_dir(const std::string& stem) {
  static std::mt19937_64 g(std::random_device{}());
  const auto p = std::filesystem::temp_directory_path() /
                 (stem + "_" + std::to_string(g()) + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p.string();
}

struct DirGuard {
  std::string path;
  explicit DirGuard(const std::string& stem) : path(fresh_dir(stem)) {}
  ~DirGuard() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string operator/(const std::string& rel) const { return (std::filesystem::path(path) / rel).string(); }
};

// ---------------------------------------------------------------------------
// finite-difference gradient checking
//
// `f` maps a set of double tensors to a scalar loss on a fresh tape each call.
// The analytic gradient comes from one reverse pass; the numeric one from
// central differences with h = 1e-3. Coordinates are subsampled per tensor to
// keep the battery fast; the relative-error scale guards against tiny values.

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst;  // "tensor[i]" of the worst coordinate
  int checked = 0;
};

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

// convention: builder returns the loss Var; we run forward+backward here
inline GradCheckResult check_gradients_var(
    const std::function<ldseg::Var<double>(ldseg::Tape<double>&, std::vector<ldseg::Var<double>>&)>& build,
    std::vector<T64>& inputs, ldseg::RngStream& coord_rng, int coords_per_tensor = 24, double h = 1e-3) {
  GradCheckResult res;
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    ldseg::Tape<double> tape;
    std::vector<ldseg::Var<double>> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(ldseg::ad::leaf(tape, t, true));
    ldseg::Var<double> loss = build(tape, vars);
    tape.backward(loss.id);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const T64& g = tape.grad_buf(vars[i].id);
      analytic[i].assign(g.data.begin(), g.data.end());
    }
  }
  auto eval = [&](const std::vector<T64>& xs) {
    ldseg::Tape<double> tape;
    tape.grad_enabled = false;
    std::vector<ldseg::Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& t : xs) vars.push_back(ldseg::ad::leaf(tape, t));
    return build(tape, vars).val().data[0];
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].numel();
    if (n == 0) continue;
    const int want = std::min<int>(coords_per_tensor, static_cast<int>(n));
    std::vector<std::size_t> picks;
    if (static_cast<std::size_t>(want) == n) {
      picks.resize(n);
      for (std::size_t k = 0; k < n; ++k) picks[k] = k;
    } else {
      for (int k = 0; k < want; ++k)
        picks.push_back(static_cast<std::size_t>(coord_rng.uniform_int(0, static_cast<int>(n) - 1)));
    }
    for (std::size_t idx : picks) {
      const double keep = inputs[i].data[idx];
      double err = 0, fd = 0;
      // retry with a smaller step where curvature makes h=1e-3 too coarse;
      // a wrong backward rule stays wrong as h shrinks
      for (double hh = h; hh >= h * 1e-3; hh *= 0.1) {
        inputs[i].data[idx] = keep + hh;
        const double up = eval(inputs);
        inputs[i].data[idx] = keep - hh;
        const double dn = eval(inputs);
        inputs[i].data[idx] = keep;
        fd = (up - dn) / (2 * hh);
        err = rel_err(fd, analytic[i][idx]);
        if (err < 5e-5) break;
      }
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = "input " + std::to_string(i) + "[" + std::to_string(idx) + "] fd=" + std::to_string(fd) +
                    " an=" + std::to_string(analytic[i][idx]);
      }
    }
  }
  return res;
}

// same idea over a parameter store: checks d loss / d theta for a sampled set
// of coordinates in every named parameter of a model
inline GradCheckResult check_param_gradients(
    ldseg::ParamStoreT<double>& ps,
    const std::function<ldseg::Var<double>(ldseg::Tape<double>&, ldseg::TapeParams<double>&)>& build,
    ldseg::RngStream& coord_rng, int coords_per_tensor = 8, double h = 1e-3) {
  GradCheckResult res;
  ps.zero_grads();
  {
    ldseg::Tape<double> tape;
    ldseg::TapeParams<double> tp(tape, ps);
    ldseg::Var<double> loss = build(tape, tp);
    tape.backward(loss.id);
    tp.flush_grads();
  }
  auto eval = [&] {
    ldseg::Tape<double> tape;
    tape.grad_enabled = false;
    ldseg::TapeParams<double> tp(tape, ps);
    return build(tape, tp).val().data[0];
  };
  for (const std::string& name : ps.names()) {
    ldseg::ParamT<double>& p = ps.at(name);
    const std::size_t n = p.value.numel();
    const int want = std::min<int>(coords_per_tensor, static_cast<int>(n));
    for (int k = 0; k < want; ++k) {
      const std::size_t idx = static_cast<std::size_t>(coord_rng.uniform_int(0, static_cast<int>(n) - 1));
      const double keep = p.value.data[idx];
      double err = 0, fd = 0;
      for (double hh = h; hh >= h * 1e-3; hh *= 0.1) {
        p.value.data[idx] = keep + hh;
        const double up = eval();
        p.value.data[idx] = keep - hh;
        const double dn = eval();
        p.value.data[idx] = keep;
        fd = (up - dn) / (2 * hh);
        err = rel_err(fd, p.grad.data[idx]);
        if (err < 5e-5) break;
      }
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = name + "[" + std::to_string(idx) + "] fd=" + std::to_string(fd) +
                    " an=" + std::to_string(p.grad.data[idx]);
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// sample moments

struct Moments {
  double mean = 0, var = 0, skew = 0, ex_kurt = 0;
  std::size_t n = 0;
};

inline Moments moments(const std::vector<double>& xs) {
  Moments m;
  m.n = xs.size();
  if (m.n == 0) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  double m2 = 0, m3 = 0, m4 = 0;
  for (double x : xs) {
    const double d = x - m.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= static_cast<double>(m.n);
  m3 /= static_cast<double>(m.n);
  m4 /= static_cast<double>(m.n);
  m.var = m2 * static_cast<double>(m.n) / std::max<double>(1.0, static_cast<double>(m.n) - 1);
  m.skew = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
  m.ex_kurt = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// mask topology: 4-connected component count for one class, and a hole check
// (background of the class reaches the border everywhere)

inline int component_count(const std::vector<int>& mask, int H, int W, int cls) {
  std::vector<int> seen(static_cast<std::size_t>(H) * W, 0);
  int comps = 0;
  std::vector<int> stack;
  for (int start = 0; start < H * W; ++start) {
    if (mask[start] != cls || seen[start]) continue;
    ++comps;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / W, x = p % W;
      const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
        const int q = ny[k] * W + nx[k];
        if (mask[q] == cls && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
  }
  return comps;
}

inline bool simply_connected(const std::vector<int>& mask, int H, int W, int cls) {
  if (component_count(mask, H, W, cls) != 1) return false;
  // flood the non-cls region from the border; any unreached non-cls pixel is a hole
  std::vector<int> seen(static_cast<std::size_t>(H) * W, 0);
  std::vector<int> stack;
  auto push = [&](int y, int x) {
    const int q = y * W + x;
    if (mask[q] != cls && !seen[q]) {
      seen[q] = 1;
      stack.push_back(q);
    }
  };
  for (int x = 0; x < W; ++x) {
    push(0, x);
    push(H - 1, x);
  }
  for (int y = 0; y < H; ++y) {
    push(y, 0);
    push(y, W - 1);
  }
  while (!stack.empty()) {
    const int p = stack.back();
    stack.pop_back();
    const int y = p / W, x = p % W;
    if (y > 0) push(y - 1, x);
    if (y + 1 < H) push(y + 1, x);
    if (x > 0) push(y, x - 1);
    if (x + 1 < W) push(y, x + 1);
  }
  for (int p = 0; p < H * W; ++p)
    if (mask[p] != cls && !seen[p]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// subprocess runner (CLI tests)

struct RunResult {
  int code = -1;
  std::string output;
};

inline RunResult run_cmd(const std::string& cmd, const std::string& log_path) {
  const std::string full = cmd + " > " + log_path + " 2>&1";
  const int raw = std::system(full.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log_path, std::ios::binary);
  r.output.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

inline std::vector<unsigned char> slurp(const std::string& path) { return ldseg::read_file_bytes(path); }

}  // namespace lt
