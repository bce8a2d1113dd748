#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ldseg/tensor.hpp"

namespace ldseg {

// Noise process coefficients, index 0 holding the conceptual t=0 entries
// (beta=0, alpha=1, alpha_bar=1) so alpha_bar[t_prev] is uniform to look up.
// All coefficient math is double; tensors stay in the pipeline's own scalar.
struct NoiseSchedule {
  int T = 0;
  std::string kind;  // "linear" or "cosine", with the defining parameters below
  double beta1 = 0.0, betaT = 0.0;  // linear endpoints
  double offset = 0.0;              // cosine offset s
  std::vector<double> beta, alpha, alpha_bar, sigma;

  double abar(int t) const {
    if (t < 0 || t > T) throw value_error("timestep " + std::to_string(t) + " out of range [0, " +
                                          std::to_string(T) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
  }

  void check_t(int t) const {
    if (t < 1 || t > T)
      throw value_error("timestep " + std::to_string(t) + " out of range [1, " + std::to_string(T) + "]");
  }
};

inline void finish_schedule(NoiseSchedule& s) {
  const int T = s.T;
  s.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.sigma.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const std::size_t i = static_cast<std::size_t>(t);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    s.sigma[i] = std::sqrt(s.beta[i]);
  }
}

inline NoiseSchedule make_linear_schedule(int T, double beta1, double betaT) {
  if (T < 1) throw value_error("schedule needs T >= 1");
  if (!(beta1 > 0.0) || !(beta1 <= betaT) || !(betaT < 1.0))
    throw value_error("linear schedule needs 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.T = T;
  s.kind = "linear";
  s.beta1 = beta1;
  s.betaT = betaT;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[static_cast<std::size_t>(t)] = beta1 + (betaT - beta1) * frac;
  }
  finish_schedule(s);
  return s;
}

// alpha_bar follows cos^2(((t/T + s)/(1 + s)) * pi/2) normalized to 1 at t=0;
// per-step betas are clipped at 0.999 and alpha_bar rebuilt as their running
// product so the product invariant holds after clipping.
inline NoiseSchedule make_cosine_schedule(int T, double offset = 0.008) {
  if (T < 1) throw value_error("schedule needs T >= 1");
  if (!(offset > 0.0)) throw value_error("cosine schedule needs offset > 0");
  NoiseSchedule s;
  s.T = T;
  s.kind = "cosine";
  s.offset = offset;
  const double half_pi = std::acos(0.0);
  auto f = [&](int t) {
    const double u = (static_cast<double>(t) / T + offset) / (1.0 + offset);
    const double c = std::cos(u * half_pi);
    return c * c;
  };
  const double f0 = f(0);
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  double prev = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double cur = f(t) / f0;
    s.beta[static_cast<std::size_t>(t)] = std::min(1.0 - cur / prev, 0.999);
    prev = cur;
  }
  finish_schedule(s);
  return s;
}

// Forward marginal: sqrt(abar_t) m0 + sqrt(1 - abar_t) eps
template <typename S>
TensorT<S> q_sample(const TensorT<S>& m0, int t, const TensorT<S>& eps, const NoiseSchedule& sched) {
  sched.check_t(t);
  check_same_shape(m0, eps, "q_sample");
  const double ab = sched.abar(t);
  const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
  TensorT<S> out(m0.shape);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data[i] = static_cast<S>(c0 * static_cast<double>(m0.data[i]) + c1 * static_cast<double>(eps.data[i]));
  return out;
}

// One reverse transition t -> t-1:
//   (mt - beta_t/sqrt(1-abar_t) eps_pred) / sqrt(alpha_t) + sigma_t z
// Callers must pass z = 0 at t = 1.
template <typename S>
TensorT<S> ddpm_step(const TensorT<S>& mt, const TensorT<S>& eps_pred, int t, const TensorT<S>& z,
                     const NoiseSchedule& sched) {
  sched.check_t(t);
  check_same_shape(mt, eps_pred, "ddpm_step");
  check_same_shape(mt, z, "ddpm_step");
  const std::size_t i = static_cast<std::size_t>(t);
  const double coef = sched.beta[i] / std::sqrt(1.0 - sched.alpha_bar[i]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[i]);
  const double sig = sched.sigma[i];
  TensorT<S> out(mt.shape);
  for (std::size_t j = 0; j < out.numel(); ++j)
    out.data[j] = static_cast<S>(
        inv_sqrt_alpha * (static_cast<double>(mt.data[j]) - coef * static_cast<double>(eps_pred.data[j])) +
        sig * static_cast<double>(z.data[j]));
  return out;
}

// Reverse transition across a gap t -> t_prev for subsequence sampling. The
// retained steps form their own chain with alpha'_i = abar(s_i)/abar(s_{i-1}),
// and this applies the ddpm_step formula with those respaced coefficients.
// With t_prev = t-1 it reduces to ddpm_step; with t_prev = 0 the update
// collapses to the x0 estimate, so the pass z = 0 rule carries over.
template <typename S>
TensorT<S> ddpm_step_respaced(const TensorT<S>& mt, const TensorT<S>& eps_pred, int t, int t_prev,
                              const TensorT<S>& z, const NoiseSchedule& sched) {
  sched.check_t(t);
  if (t_prev < 0 || t_prev >= t)
    throw value_error("ddpm_step_respaced: need 0 <= t_prev < t, got t_prev=" + std::to_string(t_prev) +
                      " t=" + std::to_string(t));
  check_same_shape(mt, eps_pred, "ddpm_step_respaced");
  check_same_shape(mt, z, "ddpm_step_respaced");
  const double ab_t = sched.abar(t);
  const double ab_prev = sched.abar(t_prev);
  const double alpha_r = ab_t / ab_prev;
  const double beta_r = 1.0 - alpha_r;
  const double coef = beta_r / std::sqrt(1.0 - ab_t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_r);
  const double sig = std::sqrt(beta_r);
  TensorT<S> out(mt.shape);
  for (std::size_t j = 0; j < out.numel(); ++j)
    out.data[j] = static_cast<S>(
        inv_sqrt_alpha * (static_cast<double>(mt.data[j]) - coef * static_cast<double>(eps_pred.data[j])) +
        sig * static_cast<double>(z.data[j]));
  return out;
}

// Deterministic (eta = 0) reverse mapping t -> t_prev; t_prev = 0 treats
// alpha_bar as 1 and returns the x0 estimate.
template <typename S>
TensorT<S> ddim_step(const TensorT<S>& mt, const TensorT<S>& eps_pred, int t, int t_prev,
                     const NoiseSchedule& sched) {
  sched.check_t(t);
  if (t_prev < 0 || t_prev >= t)
    throw value_error("ddim_step: need 0 <= t_prev < t, got t_prev=" + std::to_string(t_prev) +
                      " t=" + std::to_string(t));
  check_same_shape(mt, eps_pred, "ddim_step");
  const double ab_t = sched.abar(t);
  const double ab_prev = sched.abar(t_prev);
  const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
  const double sq_1mab = std::sqrt(1.0 - ab_t);
  const double c0 = std::sqrt(ab_prev);
  const double c1 = std::sqrt(1.0 - ab_prev);
  TensorT<S> out(mt.shape);
  for (std::size_t j = 0; j < out.numel(); ++j) {
    const double e = static_cast<double>(eps_pred.data[j]);
    const double x0 = (static_cast<double>(mt.data[j]) - sq_1mab * e) * inv_sqrt_ab;
    out.data[j] = static_cast<S>(c0 * x0 + c1 * e);
  }
  return out;
}

// K points evenly spaced over [1, T], rounded half away from zero, then
// deduplicated. K = 1 keeps only T so a single-step sampler still starts from
// pure noise.
inline std::vector<int> evenly_spaced_subsequence(int K, int T) {
  if (K < 1 || K > T)
    throw value_error("subsequence needs 1 <= K <= T, got K=" + std::to_string(K) + " T=" + std::to_string(T));
  if (K == 1) return {T};
  std::vector<int> steps;
  steps.reserve(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) {
    const double x = 1.0 + (static_cast<double>(T) - 1.0) * i / (K - 1);
    const int r = static_cast<int>(std::llround(x));  // llround = half away from zero
    if (steps.empty() || steps.back() != r) steps.push_back(r);
  }
  return steps;
}

}  // namespace ldseg
