#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ldseg/autodiff.hpp"
#include "ldseg/config.hpp"
#include "ldseg/dataio.hpp"
#include "ldseg/diffusion.hpp"
#include "ldseg/models.hpp"
#include "ldseg/optim.hpp"
#include "ldseg/rng.hpp"

namespace ldseg {

// RNG stream layout: one user seed fans out into fixed streams.
//   data generation = 0, training init = 1, sampling run r = 2 + r,
//   training epoch e = 1'000'000 + e (so --resume replays later epochs
//   exactly as an uninterrupted run would).
inline constexpr int kStreamData = 0;
inline constexpr int kStreamTrainInit = 1;
inline constexpr int kStreamSampleBase = 2;
inline constexpr int kStreamEpochBase = 1'000'000;

// ---------------------------------------------------------------------------
// variant wiring (the ablation grid)

struct VariantSpec {
  std::string mask_path = "autoencoder";  // or "nearest-downsample"
  std::string image_path = "encoder";     // or "nearest-downsample"

  bool uses_autoencoder() const { return mask_path == "autoencoder"; }
  bool uses_image_encoder() const { return image_path == "encoder"; }

  std::string tag() const {
    if (uses_autoencoder() && uses_image_encoder()) return "ldseg";
    if (uses_autoencoder()) return "id";
    if (uses_image_encoder()) return "md";
    return "md_id";
  }

  void validate() const {
    if (mask_path != "autoencoder" && mask_path != "nearest-downsample")
      throw config_error("variant mask_path must be 'autoencoder' or 'nearest-downsample'");
    if (image_path != "encoder" && image_path != "nearest-downsample")
      throw config_error("variant image_path must be 'encoder' or 'nearest-downsample'");
  }
};

inline VariantSpec variant_from_config(const RunConfig& cfg) {
  VariantSpec v;
  v.mask_path = cfg.mask_path;
  v.image_path = cfg.image_path;
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// training logs: one CSV row per optimizer step

struct TrainLogRow {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0;
  double lr = 0;
};

inline void write_loss_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::string out = "epoch,step,loss,lr\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.9g,%.9g\n", r.epoch, static_cast<long long>(r.step), r.loss,
                  r.lr);
    out += buf;
  }
  write_file_bytes(path, out.data(), out.size());
}

inline std::vector<TrainLogRow> read_loss_csv(const std::string& path) {
  const std::vector<unsigned char> buf = read_file_bytes(path);
  std::string text(buf.begin(), buf.end());
  std::vector<TrainLogRow> rows;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (line.empty() || lineno == 1) continue;
    TrainLogRow r;
    long long step = 0;
    if (std::sscanf(line.c_str(), "%d,%lld,%lf,%lf", &r.epoch, &step, &r.loss, &r.lr) != 4)
      throw io_error(io_error::kind::bad_header, path, "bad loss csv row at line " + std::to_string(lineno));
    r.step = step;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// internals shared by the training loops

namespace detail {

inline std::vector<std::vector<int>> epoch_batches(int n, int batch, RngStream& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  std::vector<std::vector<int>> batches;
  for (int at = 0; at < n; at += batch)
    batches.emplace_back(order.begin() + at, order.begin() + std::min(n, at + batch));
  return batches;
}

inline void check_loss_finite(double loss, int epoch, std::int64_t step) {
  if (!std::isfinite(loss))
    throw divergence_error("training loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step));
}

inline nlohmann::json data_meta(const Dataset& ds) {
  nlohmann::json j;
  j["H"] = ds.params.H;
  j["W"] = ds.params.W;
  j["classes"] = ds.params.classes;
  return j;
}

// Restores params/moments/step counter from a checkpoint into a freshly
// built store; names and shapes must agree exactly.
inline int apply_resume(ParamStore& ps, const Checkpoint& resume, const std::string& expect_kind) {
  if (resume.kind != expect_kind)
    throw checkpoint_error("resume checkpoint is a '" + resume.kind + "', expected '" + expect_kind + "'");
  if (resume.params.count() != ps.count())
    throw checkpoint_error("resume checkpoint parameter set does not match the configured model");
  for (auto& [name, p] : ps.entries()) {
    if (!resume.params.has(name)) throw checkpoint_error("resume checkpoint is missing parameter " + name);
    const Param& q = resume.params.at(name);
    if (!p.value.same_shape(q.value)) throw checkpoint_error("resume checkpoint shape mismatch for " + name);
    p.value = q.value;
    p.m = q.m;
    p.v = q.v;
    p.grad = q.grad;
  }
  ps.opt_steps = resume.params.opt_steps;
  return resume.meta.at("train").at("epochs_done").get<int>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// autoencoder training (cross-entropy reconstruction of one-hot masks)

inline Checkpoint train_autoencoder(const Dataset& ds, const RunConfig& cfg,
                                    std::vector<TrainLogRow>* log = nullptr,
                                    const Checkpoint* resume = nullptr) {
  cfg.validate();
  ModelConfig mcfg = cfg.model;
  mcfg.classes = ds.params.classes;
  check_spatial_divisible(ds.params.H, ds.params.W, mcfg.depth);

  ParamStore ps;
  RngStream init_rng(cfg.train_seed, kStreamTrainInit);
  auto ae = MaskAutoencoderT<float>::create(ps, init_rng, mcfg);
  int start_epoch = 0;
  if (resume) start_epoch = detail::apply_resume(ps, *resume, "mask_autoencoder");

  const int C = ds.params.classes, H = ds.params.H, W = ds.params.W;
  double final_loss = 0;
  for (int epoch = start_epoch; epoch < cfg.ae_epochs; ++epoch) {
    RngStream rng(cfg.train_seed, kStreamEpochBase + epoch);
    const double lr = cfg.lr_ae * std::pow(cfg.lr_decay, epoch);
    for (const auto& batch : detail::epoch_batches(static_cast<int>(ds.train.size()), cfg.batch, rng)) {
      Tape<float> tape;
      tape.grad_enabled = true;
      TapeParams<float> tp(tape, ps);
      const std::vector<int> labels = stack_masks(ds.train, batch);
      Var<float> onehot = ad::leaf(tape, one_hot<float>(labels, static_cast<int>(batch.size()), C, H, W));
      Var<float> z = ae.encode(tp, onehot);
      Var<float> probs = ae.decode_probs(tp, z);
      Var<float> loss = ad::nll_loss(probs, labels);
      if (cfg.latent_reg > 0) {
        // pull the latent's pooled shape toward the sampling prior: reverse
        // diffusion starts from unit Gaussian noise, and the layer-norm pins
        // mean/variance, so third and fourth moments are driven to 0 and 3
        Var<float> z2 = ad::mul(z, z);
        Var<float> m3 = ad::mean_all(ad::mul(z2, z));
        Var<float> m4 = ad::mean_all(ad::mul(z2, z2));
        Tensor three(std::vector<int>{});  // rank-0, matching mean_all
        three.data[0] = 3.0f;
        Var<float> ex = ad::sub(m4, ad::leaf(tape, three));
        Var<float> pen = ad::add(ad::mul(m3, m3), ad::mul(ex, ex));
        loss = ad::add(loss, ad::scale(pen, static_cast<float>(cfg.latent_reg)));
      }
      const double lv = static_cast<double>(loss.val().data[0]);
      detail::check_loss_finite(lv, epoch, ps.opt_steps);
      tape.backward(loss.id);
      ps.zero_grads();
      tp.flush_grads();
      adam_step(ps, lr);
      final_loss = lv;
      if (log) log->push_back({epoch, ps.opt_steps, lv, lr});
    }
  }

  Checkpoint ck;
  ck.kind = "mask_autoencoder";
  ck.params = std::move(ps);
  ck.meta["model"] = model_config_to_json(mcfg);
  ck.meta["data"] = detail::data_meta(ds);
  ck.meta["train"] = {{"seed", cfg.train_seed},
                      {"epochs_done", cfg.ae_epochs},
                      {"final_loss", final_loss},
                      {"latent_reg", cfg.latent_reg}};
  return ck;
}

// ---------------------------------------------------------------------------
// conditional denoiser training: sample pair -> m0 -> uniform t -> eps ->
// noise-prediction regression; image encoder (when present) trains jointly,
// the autoencoder stays frozen

inline Checkpoint train_denoiser(const Dataset& ds, const Checkpoint* ae_ckpt, const RunConfig& cfg,
                                 std::vector<TrainLogRow>* log = nullptr,
                                 const Checkpoint* resume = nullptr) {
  cfg.validate();
  const VariantSpec variant = variant_from_config(cfg);
  ModelConfig mcfg = cfg.model;
  mcfg.classes = ds.params.classes;
  const int H = ds.params.H, W = ds.params.W, C = ds.params.classes;
  check_spatial_divisible(H, W, mcfg.depth);
  const int factor = mcfg.latent_factor();
  const int h = H / factor, w = W / factor;
  check_spatial_divisible(h, w, mcfg.den_depth);
  const NoiseSchedule sched = cfg.make_schedule();

  // frozen mask path: precompute every training latent once
  std::vector<Tensor> m0(ds.train.size());
  if (variant.uses_autoencoder()) {
    if (!ae_ckpt) throw config_error("denoiser training with mask_path=autoencoder needs an autoencoder checkpoint");
    if (ae_ckpt->kind != "mask_autoencoder")
      throw checkpoint_error("expected a mask_autoencoder checkpoint, got '" + ae_ckpt->kind + "'");
    const ModelConfig ae_cfg = model_config_from_json(ae_ckpt->meta.at("model"));
    if (ae_cfg.depth != mcfg.depth)
      throw checkpoint_error("autoencoder depth " + std::to_string(ae_cfg.depth) +
                             " disagrees with configured depth " + std::to_string(mcfg.depth));
    ParamStore ae_ps = ae_ckpt->params;
    ParamStore probe;
    RngStream probe_rng(0, kStreamTrainInit);
    auto ae = MaskAutoencoderT<float>::create(probe, probe_rng, ae_cfg);
    for (const auto& [name, p] : probe.entries()) {
      if (!ae_ps.has(name) || !ae_ps.at(name).value.same_shape(p.value))
        throw checkpoint_error("autoencoder checkpoint does not match its recorded architecture at " + name);
    }
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      Tape<float> tape;
      TapeParams<float> tp(tape, ae_ps);
      Var<float> onehot = ad::leaf(tape, one_hot<float>(ds.train[i].mask, 1, C, H, W));
      m0[i] = ae.encode(tp, onehot).val();
    }
  } else {
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      const std::vector<int> small =
          factor == 1 ? ds.train[i].mask : nearest_downsample_labels(ds.train[i].mask, H, W, factor);
      m0[i] = labels_to_centered<float>(small, 1, C, h, w);
    }
  }

  // fixed image condition when the learned encoder is ablated away
  std::vector<Tensor> e_fixed;
  if (!variant.uses_image_encoder()) {
    e_fixed.resize(ds.train.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      e_fixed[i] = factor == 1 ? ds.train[i].image : nearest_downsample(ds.train[i].image, factor);
  }

  ParamStore ps;
  RngStream init_rng(cfg.train_seed, kStreamTrainInit);
  auto cd = DenoiserT<float>::create(ps, init_rng, mcfg);
  ImageEncoderT<float> ie;
  if (variant.uses_image_encoder()) ie = ImageEncoderT<float>::create(ps, init_rng, mcfg);
  int start_epoch = 0;
  if (resume) start_epoch = detail::apply_resume(ps, *resume, "denoiser");

  double final_loss = 0;
  for (int epoch = start_epoch; epoch < cfg.cd_epochs; ++epoch) {
    RngStream rng(cfg.train_seed, kStreamEpochBase + epoch);
    const double lr = cfg.lr_cd * std::pow(cfg.lr_decay, epoch);
    for (const auto& batch : detail::epoch_batches(static_cast<int>(ds.train.size()), cfg.batch, rng)) {
      const int B = static_cast<int>(batch.size());
      Tensor m0_b({B, 1, h, w});
      const std::size_t per = static_cast<std::size_t>(h) * w;
      for (int b = 0; b < B; ++b)
        std::copy(m0[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])].data.begin(),
                  m0[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])].data.end(),
                  m0_b.data.begin() + static_cast<std::size_t>(b) * per);
      const int t = rng.uniform_int(1, sched.T);
      Tensor eps({B, 1, h, w});
      rng.fill_normal(eps);
      const Tensor mt = q_sample(m0_b, t, eps, sched);

      Tape<float> tape;
      tape.grad_enabled = true;
      TapeParams<float> tp(tape, ps);
      Var<float> e;
      if (variant.uses_image_encoder()) {
        e = ie(tp, ad::leaf(tape, stack_images(ds.train, batch)));
      } else {
        Tensor e_b({B, 1, h, w});
        for (int b = 0; b < B; ++b)
          std::copy(e_fixed[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])].data.begin(),
                    e_fixed[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])].data.end(),
                    e_b.data.begin() + static_cast<std::size_t>(b) * per);
        e = ad::leaf(tape, e_b);
      }
      Var<float> eps_hat = cd(tp, ad::leaf(tape, mt), e, t);
      Var<float> loss = ad::mse(eps_hat, ad::leaf(tape, eps));
      const double lv = static_cast<double>(loss.val().data[0]);
      detail::check_loss_finite(lv, epoch, ps.opt_steps);
      tape.backward(loss.id);
      ps.zero_grads();
      tp.flush_grads();
      adam_step(ps, lr);
      final_loss = lv;
      if (log) log->push_back({epoch, ps.opt_steps, lv, lr});
    }
  }

  Checkpoint ck;
  ck.kind = "denoiser";
  ck.params = std::move(ps);
  ck.meta["model"] = model_config_to_json(mcfg);
  ck.meta["data"] = detail::data_meta(ds);
  ck.meta["schedule"] = schedule_to_json(sched);
  ck.meta["variant"] = {{"mask_path", variant.mask_path}, {"image_path", variant.image_path}};
  ck.meta["train"] = {{"seed", cfg.train_seed}, {"epochs_done", cfg.cd_epochs}, {"final_loss", final_loss}};
  return ck;
}

// ---------------------------------------------------------------------------
// deterministic baseline training (plain supervised segmentation)

inline Checkpoint train_baseline(const Dataset& ds, const RunConfig& cfg,
                                 std::vector<TrainLogRow>* log = nullptr,
                                 const Checkpoint* resume = nullptr) {
  cfg.validate();
  ModelConfig mcfg = cfg.model;
  mcfg.classes = ds.params.classes;
  check_spatial_divisible(ds.params.H, ds.params.W, mcfg.depth);

  ParamStore ps;
  RngStream init_rng(cfg.train_seed, kStreamTrainInit);
  auto bl = BaselineResUnetT<float>::create(ps, init_rng, mcfg);
  int start_epoch = 0;
  if (resume) start_epoch = detail::apply_resume(ps, *resume, "baseline");

  double final_loss = 0;
  for (int epoch = start_epoch; epoch < cfg.baseline_epochs; ++epoch) {
    RngStream rng(cfg.train_seed, kStreamEpochBase + epoch);
    const double lr = cfg.lr_baseline * std::pow(cfg.lr_decay, epoch);
    for (const auto& batch : detail::epoch_batches(static_cast<int>(ds.train.size()), cfg.batch, rng)) {
      Tape<float> tape;
      tape.grad_enabled = true;
      TapeParams<float> tp(tape, ps);
      Var<float> probs = bl(tp, ad::leaf(tape, stack_images(ds.train, batch)));
      const std::vector<int> labels = stack_masks(ds.train, batch);
      Var<float> loss = ad::nll_loss(probs, labels);
      const double lv = static_cast<double>(loss.val().data[0]);
      detail::check_loss_finite(lv, epoch, ps.opt_steps);
      tape.backward(loss.id);
      ps.zero_grads();
      tp.flush_grads();
      adam_step(ps, lr);
      final_loss = lv;
      if (log) log->push_back({epoch, ps.opt_steps, lv, lr});
    }
  }

  Checkpoint ck;
  ck.kind = "baseline";
  ck.params = std::move(ps);
  ck.meta["model"] = model_config_to_json(mcfg);
  ck.meta["data"] = detail::data_meta(ds);
  ck.meta["train"] = {{"seed", cfg.train_seed}, {"epochs_done", cfg.baseline_epochs}, {"final_loss", final_loss}};
  return ck;
}

// ---------------------------------------------------------------------------
// inference runtime: models rebuilt from checkpoints, shapes validated

struct LdsegRuntime {
  ModelConfig mcfg;
  NoiseSchedule sched;
  VariantSpec variant;
  int H = 0, W = 0, classes = 0;
  ParamStore ae_ps, cd_ps;
  MaskAutoencoderT<float> ae;
  ImageEncoderT<float> ie;
  DenoiserT<float> cd;
};

inline LdsegRuntime make_runtime(const Checkpoint& cd_ckpt, const Checkpoint* ae_ckpt) {
  if (cd_ckpt.kind != "denoiser")
    throw checkpoint_error("expected a denoiser checkpoint, got '" + cd_ckpt.kind + "'");
  LdsegRuntime rt;
  try {
    rt.mcfg = model_config_from_json(cd_ckpt.meta.at("model"));
    rt.sched = schedule_from_json(cd_ckpt.meta.at("schedule"));
    rt.variant.mask_path = cd_ckpt.meta.at("variant").at("mask_path").get<std::string>();
    rt.variant.image_path = cd_ckpt.meta.at("variant").at("image_path").get<std::string>();
    rt.H = cd_ckpt.meta.at("data").at("H").get<int>();
    rt.W = cd_ckpt.meta.at("data").at("W").get<int>();
    rt.classes = cd_ckpt.meta.at("data").at("classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(std::string("denoiser checkpoint metadata incomplete: ") + e.what());
  }
  rt.variant.validate();
  rt.cd_ps = cd_ckpt.params;

  ParamStore probe;
  RngStream probe_rng(0, kStreamTrainInit);
  rt.cd = DenoiserT<float>::create(probe, probe_rng, rt.mcfg);
  if (rt.variant.uses_image_encoder()) rt.ie = ImageEncoderT<float>::create(probe, probe_rng, rt.mcfg);
  if (probe.count() != rt.cd_ps.count())
    throw checkpoint_error("denoiser checkpoint parameter set does not match its recorded architecture");
  for (const auto& [name, p] : probe.entries())
    if (!rt.cd_ps.has(name) || !rt.cd_ps.at(name).value.same_shape(p.value))
      throw checkpoint_error("denoiser checkpoint does not match its recorded architecture at " + name);

  if (rt.variant.uses_autoencoder()) {
    if (!ae_ckpt) throw checkpoint_error("this denoiser needs a mask_autoencoder checkpoint for decoding");
    if (ae_ckpt->kind != "mask_autoencoder")
      throw checkpoint_error("expected a mask_autoencoder checkpoint, got '" + ae_ckpt->kind + "'");
    const ModelConfig ae_cfg = model_config_from_json(ae_ckpt->meta.at("model"));
    if (ae_cfg.depth != rt.mcfg.depth || ae_cfg.classes != rt.classes)
      throw checkpoint_error("autoencoder checkpoint geometry disagrees with the denoiser checkpoint");
    rt.ae_ps = ae_ckpt->params;
    ParamStore ae_probe;
    RngStream ae_rng(0, kStreamTrainInit);
    rt.ae = MaskAutoencoderT<float>::create(ae_probe, ae_rng, ae_cfg);
    if (ae_probe.count() != rt.ae_ps.count())
      throw checkpoint_error("autoencoder checkpoint parameter set does not match its recorded architecture");
    for (const auto& [name, p] : ae_probe.entries())
      if (!rt.ae_ps.has(name) || !rt.ae_ps.at(name).value.same_shape(p.value))
        throw checkpoint_error("autoencoder checkpoint does not match its recorded architecture at " + name);
  }
  return rt;
}

// ---------------------------------------------------------------------------
// Algorithm 2: reverse diffusion from pure noise, then decode

struct SegOut {
  std::vector<int> labels;  // H*W class indices
  Tensor probs;             // [1,C,H,W]
  Tensor latent;            // [1,1,h,w] final m0 estimate
};

// observer sees every reverse transition (t -> t_prev) with the captured
// intermediates, for fidelity cross-checks and trajectory dumps
using StepObserver = std::function<void(int t, int t_prev, const Tensor& m_before, const Tensor& eps_hat,
                                        const Tensor& z, const Tensor& m_after)>;

inline SegOut segment(const Tensor& image, LdsegRuntime& rt, const std::vector<int>& steps,
                      const std::string& sampler, std::uint64_t seed, int run = 0,
                      const StepObserver& observer = nullptr) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1)
    throw shape_error("segment: image must be [1,1,H,W]");
  if (image.dim(2) != rt.H || image.dim(3) != rt.W)
    throw checkpoint_error("image size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                           " does not match checkpoint size " + std::to_string(rt.H) + "x" +
                           std::to_string(rt.W));
  if (steps.empty()) throw value_error("segment: empty step subsequence");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    rt.sched.check_t(steps[i]);
    if (i > 0 && steps[i] <= steps[i - 1]) throw value_error("segment: steps must be strictly increasing");
  }
  if (sampler != "ddpm" && sampler != "ddim") throw value_error("segment: unknown sampler '" + sampler + "'");

  const int factor = rt.mcfg.latent_factor();
  const int h = rt.H / factor, w = rt.W / factor;
  RngStream rng(seed, kStreamSampleBase + run);

  // condition
  Tensor e_val;
  if (rt.variant.uses_image_encoder()) {
    Tape<float> tape;
    TapeParams<float> tp(tape, rt.cd_ps);
    e_val = rt.ie(tp, ad::leaf(tape, image)).val();
  } else {
    e_val = factor == 1 ? image : nearest_downsample(image, factor);
  }

  Tensor m({1, 1, h, w});
  rng.fill_normal(m);

  for (std::size_t i = steps.size(); i-- > 0;) {
    const int t = steps[i];
    const int t_prev = i == 0 ? 0 : steps[i - 1];
    Tensor eps_hat;
    {
      Tape<float> tape;
      TapeParams<float> tp(tape, rt.cd_ps);
      eps_hat = rt.cd(tp, ad::leaf(tape, m), ad::leaf(tape, e_val), t).val();
    }
    Tensor z(m.shape);
    if (t_prev > 0) rng.fill_normal(z);  // z = 0 on the final transition
    Tensor next;
    if (sampler == "ddim") {
      next = ddim_step(m, eps_hat, t, t_prev, rt.sched);
    } else if (t_prev == t - 1) {
      next = ddpm_step(m, eps_hat, t, z, rt.sched);
    } else {
      next = ddpm_step_respaced(m, eps_hat, t, t_prev, z, rt.sched);
    }
    if (observer) observer(t, t_prev, m, eps_hat, z, next);
    m = std::move(next);
  }

  SegOut out;
  out.latent = m;
  if (rt.variant.uses_autoencoder()) {
    Tape<float> tape;
    TapeParams<float> tp(tape, rt.ae_ps);
    out.probs = rt.ae.decode_probs(tp, ad::leaf(tape, m)).val();
    out.labels = argmax_channel(out.probs);
  } else {
    const std::vector<int> small = centered_to_labels(m, rt.classes);
    out.labels = factor == 1 ? small : nearest_upsample_labels(small, h, w, factor);
    out.probs = one_hot<float>(out.labels, 1, rt.classes, rt.H, rt.W);
  }
  return out;
}

// variant mismatch guard: the checkpoint must have been trained with exactly
// the requested path substitutions
inline SegOut segment_variant(const Tensor& image, const VariantSpec& want, LdsegRuntime& rt,
                              const std::vector<int>& steps, const std::string& sampler, std::uint64_t seed,
                              int run = 0, const StepObserver& observer = nullptr) {
  want.validate();
  if (want.mask_path != rt.variant.mask_path || want.image_path != rt.variant.image_path)
    throw checkpoint_error("variant mismatch: checkpoint was trained as (" + rt.variant.mask_path + ", " +
                           rt.variant.image_path + "), requested (" + want.mask_path + ", " + want.image_path +
                           ")");
  return segment(image, rt, steps, sampler, seed, run, observer);
}

// ---------------------------------------------------------------------------
// ensemble uncertainty: R independent runs on per-run RNG streams

struct UncertaintyResult {
  Tensor mean_probs;  // [1,C,H,W] averaged over runs
  Tensor sd_map;      // [1,1,H,W] per-pixel standard deviation of predicted labels
  int runs = 0;
};

inline UncertaintyResult estimate_uncertainty(const Tensor& image, LdsegRuntime& rt,
                                              const std::vector<int>& steps, const std::string& sampler,
                                              int R, std::uint64_t seed) {
  if (R < 1) throw value_error("estimate_uncertainty: R must be >= 1");
  UncertaintyResult res;
  res.runs = R;
  const std::size_t npix = static_cast<std::size_t>(rt.H) * rt.W;
  std::vector<double> sum(npix, 0.0), sumsq(npix, 0.0);
  for (int r = 0; r < R; ++r) {
    SegOut out = segment(image, rt, steps, sampler, seed, r);
    if (r == 0) {
      res.mean_probs = out.probs;
    } else {
      for (std::size_t i = 0; i < res.mean_probs.numel(); ++i) res.mean_probs.data[i] += out.probs.data[i];
    }
    for (std::size_t i = 0; i < npix; ++i) {
      const double v = static_cast<double>(out.labels[i]);
      sum[i] += v;
      sumsq[i] += v * v;
    }
  }
  for (std::size_t i = 0; i < res.mean_probs.numel(); ++i) res.mean_probs.data[i] /= static_cast<float>(R);
  res.sd_map = Tensor({1, 1, rt.H, rt.W});
  for (std::size_t i = 0; i < npix; ++i) {
    const double mean = sum[i] / R;
    const double var = std::max(0.0, sumsq[i] / R - mean * mean);
    res.sd_map.data[i] = static_cast<float>(std::sqrt(var));
  }
  return res;
}

}  // namespace ldseg
