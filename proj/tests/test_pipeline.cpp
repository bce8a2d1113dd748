// training loops, checkpoint resume, runtime assembly, reverse-diffusion
// segmentation, and ensemble uncertainty — all on deliberately tiny models

#include "common.hpp"

using namespace ldseg;

namespace {

RunConfig tiny_cfg() {
  RunConfig c;
  c.n = 10;
  c.size = 32;
  c.model.depth = 2;
  c.model.base_width = 4;
  c.model.channel_mult = {1, 2, 2};
  c.model.den_depth = 1;
  c.model.den_base = 8;
  c.model.den_mult = {1, 2};
  c.model.heads = 2;
  c.model.time_dim = 8;
  c.model.gn_groups = 2;
  c.ae_epochs = 2;
  c.cd_epochs = 2;
  c.baseline_epochs = 1;
  c.batch = 4;
  c.T = 50;
  c.steps = 5;
  c.bench_steps_grid = {2, 5, 50};
  c.train_seed = 9;
  return c;
}

Dataset tiny_dataset() {
  Dataset ds;
  ds.params.H = 32;
  ds.params.W = 32;
  for (std::uint64_t i = 0; i < 8; ++i) ds.train.push_back(make_sample(ds.params, 100 + i));
  ds.val.push_back(make_sample(ds.params, 200));
  ds.test.push_back(make_sample(ds.params, 300));
  return ds;
}

// one trained AE + denoiser pair shared by the read-only tests below
struct Trained {
  Dataset ds;
  Checkpoint ae, cd;
  std::vector<TrainLogRow> ae_log, cd_log;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    out.ds = tiny_dataset();
    const RunConfig cfg = tiny_cfg();
    out.ae = train_autoencoder(out.ds, cfg, &out.ae_log);
    out.cd = train_denoiser(out.ds, &out.ae, cfg, &out.cd_log);
    return out;
  }();
  return t;
}

std::vector<unsigned char> checkpoint_bytes(const Checkpoint& ck) {
  lt::DirGuard dir("ckbytes");
  save_checkpoint(dir / "x.ldsc", ck);
  return lt::slurp(dir / "x.ldsc");
}

}  // namespace

TEST(EpochBatches, PartitionsEverySampleExactlyOnce) {
  RngStream rng(1, 2);
  const auto batches = detail::epoch_batches(11, 4, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[2].size(), 3u);
  std::vector<int> seen;
  for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  for (int i = 0; i < 11; ++i) EXPECT_EQ(seen[static_cast<std::size_t>(i)], i);
  // same stream state -> same order; advancing the stream reshuffles
  RngStream r2(1, 2);
  EXPECT_EQ(detail::epoch_batches(11, 4, r2), batches);
  EXPECT_NE(detail::epoch_batches(11, 4, r2), batches);
}

TEST(LossCsv, RoundTripsRows) {
  lt::DirGuard dir("losscsv");
  const std::vector<TrainLogRow> rows{{0, 1, 1.25, 0.01}, {1, 2, 0.5, 0.009}};
  write_loss_csv(dir / "l.csv", rows);
  const auto back = read_loss_csv(dir / "l.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].epoch, 1);
  EXPECT_EQ(back[1].step, 2);
  EXPECT_DOUBLE_EQ(back[1].loss, 0.5);
  EXPECT_DOUBLE_EQ(back[0].lr, 0.01);
}

TEST(TrainAutoencoder, LearnsAndRecordsCompleteCheckpoint) {
  const Trained& t = trained();
  ASSERT_EQ(t.ae_log.size(), 4u);  // 2 epochs x ceil(8/4) batches
  EXPECT_LT(t.ae_log.back().loss, t.ae_log.front().loss);
  EXPECT_NEAR(t.ae_log.front().loss, std::log(3.0), 0.05);  // zero-init head starts uniform
  EXPECT_EQ(t.ae.kind, "mask_autoencoder");
  EXPECT_EQ(t.ae.params.opt_steps, 4);
  EXPECT_EQ(t.ae.meta.at("train").at("epochs_done").get<int>(), 2);
  EXPECT_EQ(t.ae.meta.at("data").at("H").get<int>(), 32);
  for (const auto& [name, p] : t.ae.params.entries()) {
    p.value.require_finite(name.c_str());
    EXPECT_TRUE(p.value.same_shape(p.m)) << name;
  }
}

TEST(TrainDenoiser, LearnsNoisePredictionJointlyWithEncoder) {
  const Trained& t = trained();
  ASSERT_EQ(t.cd_log.size(), 4u);
  EXPECT_EQ(t.cd.kind, "denoiser");
  // eps ~ N(0,1) and the head starts at zero, so the first step's loss is
  // close to E|eps|^2 = 1
  EXPECT_NEAR(t.cd_log.front().loss, 1.0, 0.25);
  EXPECT_LT(t.cd_log.back().loss, t.cd_log.front().loss + 0.05);
  // joint training: image-encoder parameters live in the denoiser checkpoint
  bool has_ie = false;
  for (const auto& [name, p] : t.cd.params.entries()) has_ie = has_ie || name.rfind("ie.", 0) == 0;
  EXPECT_TRUE(has_ie);
  EXPECT_EQ(t.cd.meta.at("variant").at("mask_path").get<std::string>(), "autoencoder");
  EXPECT_EQ(t.cd.meta.at("schedule").at("kind").get<std::string>(), "linear");
}

TEST(TrainResume, AutoencoderResumeIsBitIdentical) {
  const Dataset ds = tiny_dataset();
  RunConfig cfg = tiny_cfg();
  cfg.ae_epochs = 4;
  const Checkpoint straight = train_autoencoder(ds, cfg);
  RunConfig half = cfg;
  half.ae_epochs = 2;
  const Checkpoint first = train_autoencoder(ds, half);
  std::vector<TrainLogRow> tail_log;
  const Checkpoint resumed = train_autoencoder(ds, cfg, &tail_log, &first);
  EXPECT_EQ(tail_log.size(), 4u);  // only epochs 2 and 3 re-run
  EXPECT_EQ(tail_log.front().epoch, 2);
  EXPECT_EQ(checkpoint_bytes(straight), checkpoint_bytes(resumed));
}

TEST(TrainResume, DenoiserResumeIsBitIdentical) {
  const Dataset ds = tiny_dataset();
  RunConfig cfg = tiny_cfg();
  cfg.cd_epochs = 4;
  const Checkpoint ae = train_autoencoder(ds, cfg);
  const Checkpoint straight = train_denoiser(ds, &ae, cfg);
  RunConfig half = cfg;
  half.cd_epochs = 2;
  const Checkpoint first = train_denoiser(ds, &ae, half);
  const Checkpoint resumed = train_denoiser(ds, &ae, cfg, nullptr, &first);
  EXPECT_EQ(checkpoint_bytes(straight), checkpoint_bytes(resumed));
  // resuming with the wrong checkpoint kind is rejected
  EXPECT_THROW(train_denoiser(ds, &ae, cfg, nullptr, &ae), checkpoint_error);
}

TEST(TrainDenoiser, HugeLearningRateRaisesDivergence) {
  const Dataset ds = tiny_dataset();
  RunConfig cfg = tiny_cfg();
  cfg.cd_epochs = 4;
  cfg.lr_cd = 1e8;
  const Checkpoint ae = train_autoencoder(ds, cfg);
  EXPECT_THROW(train_denoiser(ds, &ae, cfg), divergence_error);
}

TEST(TrainDenoiser, VariantsSkipTheFrozenPathsTheyReplace) {
  const Dataset ds = tiny_dataset();
  RunConfig cfg = tiny_cfg();
  cfg.cd_epochs = 1;
  cfg.mask_path = "nearest-downsample";
  cfg.image_path = "nearest-downsample";
  const Checkpoint cd = train_denoiser(ds, nullptr, cfg);  // md_id needs no autoencoder
  EXPECT_EQ(cd.meta.at("variant").at("image_path").get<std::string>(), "nearest-downsample");
  for (const auto& [name, p] : cd.params.entries()) EXPECT_NE(name.rfind("ie.", 0), 0u) << name;
  // the autoencoder mask path without one to decode through is a config error
  cfg.mask_path = "autoencoder";
  EXPECT_THROW(train_denoiser(ds, nullptr, cfg), config_error);
}

TEST(MakeRuntime, AcceptsMatchedPairAndRejectsTampering) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  EXPECT_EQ(rt.H, 32);
  EXPECT_EQ(rt.classes, 3);
  EXPECT_EQ(rt.variant.tag(), "ldseg");
  EXPECT_EQ(rt.sched.T, 50);

  EXPECT_THROW(make_runtime(t.ae, &t.ae), checkpoint_error);   // wrong kind
  EXPECT_THROW(make_runtime(t.cd, nullptr), checkpoint_error); // missing decoder
  EXPECT_THROW(make_runtime(t.cd, &t.cd), checkpoint_error);   // decoder of wrong kind

  Checkpoint tampered = t.cd;
  tampered.meta["model"]["den_base"] = 16;  // recorded architecture no longer matches params
  EXPECT_THROW(make_runtime(tampered, &t.ae), checkpoint_error);
  Checkpoint incomplete = t.cd;
  incomplete.meta.erase("schedule");
  EXPECT_THROW(make_runtime(incomplete, &t.ae), checkpoint_error);
  Checkpoint wrong_ae = t.ae;
  wrong_ae.meta["model"]["depth"] = 3;
  EXPECT_THROW(make_runtime(t.cd, &wrong_ae), checkpoint_error);
}

TEST(Segment, DeterministicPerSeedAndSeparatedPerRun) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  const Tensor& img = t.ds.test[0].image;
  const std::vector<int> ladder = evenly_spaced_subsequence(5, rt.sched.T);
  const SegOut a = segment(img, rt, ladder, "ddpm", 31, 0);
  const SegOut b = segment(img, rt, ladder, "ddpm", 31, 0);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.probs.data, b.probs.data);
  EXPECT_EQ(a.latent.data, b.latent.data);
  const SegOut c = segment(img, rt, ladder, "ddpm", 31, 1);
  EXPECT_NE(a.latent.data, c.latent.data);  // run index selects a fresh noise stream

  ASSERT_TRUE((a.probs.shape == std::vector<int>{1, 3, 32, 32}));
  ASSERT_TRUE((a.latent.shape == std::vector<int>{1, 1, 8, 8}));
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double s = 0;
      for (int cc = 0; cc < 3; ++cc) s += a.probs.at4(0, cc, y, x);
      ASSERT_NEAR(s, 1.0, 1e-4);
    }

  EXPECT_THROW(segment(Tensor({1, 2, 32, 32}), rt, ladder, "ddpm", 0), shape_error);
  EXPECT_THROW(segment(Tensor({1, 1, 16, 16}), rt, ladder, "ddpm", 0), checkpoint_error);
  EXPECT_THROW(segment(img, rt, {}, "ddpm", 0), value_error);
  EXPECT_THROW(segment(img, rt, {5, 5}, "ddpm", 0), value_error);
  EXPECT_THROW(segment(img, rt, {1, 9999}, "ddpm", 0), value_error);
  EXPECT_THROW(segment(img, rt, ladder, "euler", 0), value_error);
}

TEST(Segment, ObserverSeesTheWholeReverseChainInOrder) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  const std::vector<int> ladder{1, 11, 21, 50};
  struct Call {
    int t, t_prev;
    Tensor before, after, z;
  };
  std::vector<Call> calls;
  segment(t.ds.test[0].image, rt, ladder, "ddpm", 5, 0,
          [&](int tt, int tp, const Tensor& mb, const Tensor& eh, const Tensor& z, const Tensor& ma) {
            EXPECT_TRUE(eh.same_shape(mb));
            calls.push_back({tt, tp, mb, ma, z});
          });
  ASSERT_EQ(calls.size(), ladder.size());
  // transitions walk the ladder downward and end at 0
  for (std::size_t i = 0; i < calls.size(); ++i) {
    EXPECT_EQ(calls[i].t, ladder[ladder.size() - 1 - i]);
    EXPECT_EQ(calls[i].t_prev, i + 1 < calls.size() ? ladder[ladder.size() - 2 - i] : 0);
  }
  // each step starts from the previous step's output
  for (std::size_t i = 1; i < calls.size(); ++i) EXPECT_EQ(calls[i].before.data, calls[i - 1].after.data);
  // the final transition is noise-free
  for (float v : calls.back().z.data) ASSERT_EQ(v, 0.0f);
  bool z_used = false;
  for (float v : calls.front().z.data) z_used = z_used || v != 0.0f;
  EXPECT_TRUE(z_used);
}

TEST(Segment, VariantGuardNamesBothSides) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  VariantSpec want;
  want.mask_path = "nearest-downsample";
  try {
    segment_variant(t.ds.test[0].image, want, rt, {1}, "ddim", 0);
    FAIL();
  } catch (const checkpoint_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("variant mismatch"), std::string::npos);
    EXPECT_NE(msg.find("autoencoder"), std::string::npos);
    EXPECT_NE(msg.find("nearest-downsample"), std::string::npos);
  }
  VariantSpec ok;  // matching request passes through
  EXPECT_NO_THROW(segment_variant(t.ds.test[0].image, ok, rt, {1}, "ddim", 0));
}

TEST(Uncertainty, SingleRunHasZeroSpread) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  const std::vector<int> ladder = evenly_spaced_subsequence(3, rt.sched.T);
  const UncertaintyResult u = estimate_uncertainty(t.ds.test[0].image, rt, ladder, "ddim", 1, 77);
  EXPECT_EQ(u.runs, 1);
  ASSERT_TRUE((u.sd_map.shape == std::vector<int>{1, 1, 32, 32}));
  for (float v : u.sd_map.data) ASSERT_EQ(v, 0.0f);
  for (int y = 0; y < 32; ++y) {
    double s = 0;
    for (int cc = 0; cc < 3; ++cc) s += u.mean_probs.at4(0, cc, y, 0);
    ASSERT_NEAR(s, 1.0, 1e-4);
  }
  EXPECT_THROW(estimate_uncertainty(t.ds.test[0].image, rt, ladder, "ddim", 0, 1), value_error);
}

TEST(Uncertainty, EnsembleMeanMatchesPerRunAverage) {
  const Trained& t = trained();
  LdsegRuntime rt = make_runtime(t.cd, &t.ae);
  const std::vector<int> ladder = evenly_spaced_subsequence(3, rt.sched.T);
  const UncertaintyResult u = estimate_uncertainty(t.ds.test[0].image, rt, ladder, "ddpm", 3, 77);
  Tensor expect;
  std::vector<std::vector<int>> labels;
  for (int r = 0; r < 3; ++r) {
    const SegOut o = segment(t.ds.test[0].image, rt, ladder, "ddpm", 77, r);
    if (r == 0)
      expect = o.probs;
    else
      for (std::size_t i = 0; i < expect.numel(); ++i) expect.data[i] += o.probs.data[i];
    labels.push_back(o.labels);
  }
  for (std::size_t i = 0; i < expect.numel(); ++i)
    ASSERT_NEAR(u.mean_probs.data[i], expect.data[i] / 3.0f, 1e-5f);
  // spot-check the sd map against the label spread at one pixel
  const std::size_t pix = 32 * 15 + 15;
  double mean = 0;
  for (int r = 0; r < 3; ++r) mean += labels[static_cast<std::size_t>(r)][pix];
  mean /= 3.0;
  double var = 0;
  for (int r = 0; r < 3; ++r) {
    const double d = labels[static_cast<std::size_t>(r)][pix] - mean;
    var += d * d;
  }
  EXPECT_NEAR(u.sd_map.data[pix], std::sqrt(var / 3.0), 1e-5);
}

TEST(TrainBaseline, ProducesWorkingSingleShotSegmenter) {
  const Dataset ds = tiny_dataset();
  RunConfig cfg = tiny_cfg();
  std::vector<TrainLogRow> log;
  const Checkpoint bl = train_baseline(ds, cfg, &log);
  EXPECT_EQ(bl.kind, "baseline");
  ASSERT_EQ(log.size(), 2u);  // 1 epoch x 2 batches
  EXPECT_NEAR(log.front().loss, std::log(3.0), 0.05);
  BaselineRuntime brt = make_baseline_runtime(bl);
  const std::vector<int> pred = baseline_predict(brt, ds.test[0].image);
  ASSERT_EQ(pred.size(), static_cast<std::size_t>(32 * 32));
  for (int v : pred) {
    ASSERT_GE(v, 0);
    ASSERT_LT(v, 3);
  }
  EXPECT_THROW(make_baseline_runtime(trained().ae), checkpoint_error);
}
