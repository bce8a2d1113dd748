// network building blocks: label/one-hot codecs, nearest-neighbor resampling,
// zero-initialized heads, structural self-description, and shape guards.

#include "common.hpp"

using namespace ldseg;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig mc;
  mc.classes = 3;
  mc.depth = 2;
  mc.base_width = 4;
  mc.channel_mult = {1, 2, 2};
  mc.gn_groups = 2;
  mc.den_depth = 1;
  mc.den_base = 4;
  mc.den_mult = {1, 2};
  mc.heads = 2;
  mc.time_dim = 8;
  return mc;
}

}  // namespace

TEST(Labels, OneHotAndArgmaxRoundTrip) {
  const std::vector<int> labels{0, 2, 1, 1, 0, 2};
  const Tensor oh = one_hot<float>(labels, 1, 3, 2, 3);
  ASSERT_TRUE((oh.shape == std::vector<int>{1, 3, 2, 3}));
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x)
      for (int c = 0; c < 3; ++c)
        EXPECT_FLOAT_EQ(oh.at4(0, c, y, x), labels[static_cast<std::size_t>(y * 3 + x)] == c ? 1.0f : 0.0f);
  EXPECT_EQ(argmax_channel(oh), labels);
  std::vector<int> bad{0, 3};
  EXPECT_THROW(one_hot<float>(bad, 1, 3, 1, 2), value_error);
}

TEST(Labels, ArgmaxTiesGoToLowestClass) {
  Tensor probs({1, 3, 1, 2});
  probs.fill(1.0f / 3);  // perfect tie everywhere
  EXPECT_EQ(argmax_channel(probs), (std::vector<int>{0, 0}));
  probs.at4(0, 1, 0, 1) = 0.5f;
  EXPECT_EQ(argmax_channel(probs), (std::vector<int>{0, 1}));
}

TEST(Labels, CenteredCodecRoundTrips) {
  for (int C : {2, 3, 5}) {
    std::vector<int> labels;
    for (int c = 0; c < C; ++c) labels.push_back(c);
    const Tensor z = labels_to_centered<float>(labels, 1, C, 1, C);
    EXPECT_FLOAT_EQ(z.data.front(), -1.0f);
    EXPECT_FLOAT_EQ(z.data.back(), 1.0f);
    EXPECT_EQ(centered_to_labels(z, C), labels);
  }
  // out-of-range latents clamp instead of wrapping
  Tensor wild({1, 1, 1, 3});
  wild.data = {-9.0f, 0.6f, 9.0f};  // values beyond the class range clamp
  EXPECT_EQ(centered_to_labels(wild, 3), (std::vector<int>{0, 2, 2}));
}

TEST(Resampling, NearestDownUpConventions) {
  // 4x4 labels, factor 2: the sampled point is the block center (offset f/2)
  const std::vector<int> labels{0, 0, 1, 1,  //
                                0, 2, 1, 1,  //
                                2, 2, 0, 0,  //
                                2, 2, 0, 1};
  const std::vector<int> down = nearest_downsample_labels(labels, 4, 4, 2);
  EXPECT_EQ(down, (std::vector<int>{2, 1, 2, 1}));
  const std::vector<int> up = nearest_upsample_labels(down, 2, 2, 2);
  EXPECT_EQ(up, (std::vector<int>{2, 2, 1, 1,  //
                                  2, 2, 1, 1,  //
                                  2, 2, 1, 1,  //
                                  2, 2, 1, 1}));
  // down(up(x)) is the identity for any x
  EXPECT_EQ(nearest_downsample_labels(up, 4, 4, 2), down);
  // factor 1 is a no-op
  EXPECT_EQ(nearest_downsample_labels(labels, 4, 4, 1), labels);
  EXPECT_THROW(nearest_downsample_labels(labels, 4, 4, 3), shape_error);
}

TEST(Resampling, TensorDownsampleMatchesLabelConvention) {
  Tensor img({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) img.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const Tensor d = nearest_downsample(img, 2);
  ASSERT_TRUE((d.shape == std::vector<int>{1, 1, 2, 2}));
  EXPECT_FLOAT_EQ(d.at4(0, 0, 0, 0), 5.0f);   // center of top-left block
  EXPECT_FLOAT_EQ(d.at4(0, 0, 1, 1), 15.0f);  // center convention in[i*f+f/2]
}

TEST(ModelConfig, ValidationNamesTheProblem) {
  ModelConfig mc = tiny_cfg();
  mc.validate();
  mc.heads = 3;  // bottleneck width 8 not divisible
  EXPECT_THROW(mc.validate(), config_error);
  mc = tiny_cfg();
  mc.latent_channels = 2;
  EXPECT_THROW(mc.validate(), config_error);
  mc = tiny_cfg();
  mc.embed_mode = "stack";
  EXPECT_THROW(mc.validate(), config_error);
  mc = tiny_cfg();
  mc.depth = 0;  // full-resolution ablation is legal
  mc.validate();
  EXPECT_EQ(mc.latent_factor(), 1);
}

TEST(Models, FreshDecoderIsExactlyUniform) {
  // zero-initialized output heads: the untrained decoder must emit the uniform
  // distribution, so the first training loss is exactly ln(classes)
  ModelConfig mc = tiny_cfg();
  ParamStore ps;
  RngStream rng(1, 1);
  auto ae = MaskAutoencoderT<float>::create(ps, rng, mc);
  std::vector<int> labels(16, 1);
  Tape<float> tape;
  tape.grad_enabled = false;
  TapeParams<float> tp(tape, ps);
  auto z = ae.encode(tp, ad::leaf(tape, one_hot<float>(labels, 1, 3, 4, 4)));
  auto probs = ae.decode_probs(tp, z);
  for (std::size_t i = 0; i < probs.val().numel(); ++i)
    EXPECT_FLOAT_EQ(probs.val().data[i], 1.0f / 3);
  auto loss = ad::nll_loss(probs, labels);
  EXPECT_NEAR(loss.val().data[0], std::log(3.0), 1e-6);
}

TEST(Models, FreshDenoiserPredictsZeroNoise) {
  ModelConfig mc = tiny_cfg();
  ParamStore ps;
  RngStream rng(2, 1);
  auto cd = DenoiserT<float>::create(ps, rng, mc);
  Tensor mt({1, 1, 4, 4}), e({1, 1, 4, 4});
  rng.fill_normal(mt);
  rng.fill_normal(e);
  Tape<float> tape;
  tape.grad_enabled = false;
  TapeParams<float> tp(tape, ps);
  auto out = cd(tp, ad::leaf(tape, mt), ad::leaf(tape, e), 10);
  for (std::size_t i = 0; i < out.val().numel(); ++i) EXPECT_FLOAT_EQ(out.val().data[i], 0.0f);
}

TEST(Models, LatentIsLayerNormalizedPerSample) {
  ModelConfig mc = tiny_cfg();
  ParamStore ps;
  RngStream rng(3, 1);
  auto ae = MaskAutoencoderT<float>::create(ps, rng, mc);
  std::vector<int> labels(2 * 64);
  for (auto& l : labels) l = rng.uniform_int(0, 2);
  Tape<float> tape;
  tape.grad_enabled = false;
  TapeParams<float> tp(tape, ps);
  auto z = ae.encode(tp, ad::leaf(tape, one_hot<float>(labels, 2, 3, 8, 8)));
  ASSERT_TRUE((z.val().shape == std::vector<int>{2, 1, 2, 2}));
  for (int n = 0; n < 2; ++n) {
    double mean = 0, var = 0;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) mean += z.val().at4(n, 0, y, x);
    mean /= 4;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        const double d = z.val().at4(n, 0, y, x) - mean;
        var += d * d;
      }
    var /= 4;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(Models, StructuralSelfDescription) {
  ModelConfig mc = tiny_cfg();
  ParamStore p1, p2, p3, p4;
  RngStream rng(4, 1);
  auto ae = MaskAutoencoderT<float>::create(p1, rng, mc);
  auto ie = ImageEncoderT<float>::create(p2, rng, mc);
  auto cd = DenoiserT<float>::create(p3, rng, mc);
  auto bl = BaselineResUnetT<float>::create(p4, rng, mc);

  const ModelStructure sae = ae.describe();
  EXPECT_FALSE(sae.skip_connections);  // compression must not leak around the latent
  EXPECT_TRUE(sae.final_layer_norm);
  EXPECT_FALSE(sae.attention);
  EXPECT_FALSE(sae.time_conditioned);

  const ModelStructure sie = ie.describe();
  EXPECT_FALSE(sie.skip_connections);
  EXPECT_FALSE(sie.final_layer_norm);  // image embedding stays unnormalized

  const ModelStructure scd = cd.describe();
  EXPECT_TRUE(scd.skip_connections);
  EXPECT_TRUE(scd.attention);
  EXPECT_TRUE(scd.time_conditioned);

  const ModelStructure sbl = bl.describe();
  EXPECT_TRUE(sbl.skip_connections);
  EXPECT_FALSE(sbl.attention);
  EXPECT_FALSE(sbl.time_conditioned);
}

TEST(Models, DenoiserChecksConditioningShape) {
  ModelConfig mc = tiny_cfg();
  ParamStore ps;
  RngStream rng(5, 1);
  auto cd = DenoiserT<float>::create(ps, rng, mc);
  Tensor mt({1, 1, 4, 4}), e_bad({1, 1, 2, 2});
  Tape<float> tape;
  TapeParams<float> tp(tape, ps);
  EXPECT_THROW(cd(tp, ad::leaf(tape, mt), ad::leaf(tape, e_bad), 5), shape_error);
  Tensor odd({1, 1, 5, 5});
  EXPECT_THROW(cd(tp, ad::leaf(tape, odd), ad::leaf(tape, odd), 5), shape_error);
}

TEST(Models, SpatialDivisibilityGuard) {
  EXPECT_NO_THROW(check_spatial_divisible(64, 64, 4));
  EXPECT_NO_THROW(check_spatial_divisible(96, 96, 5));
  try {
    check_spatial_divisible(63, 64, 4);
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
}

TEST(Models, AddEmbedModeRunsAndDiffersFromConcat) {
  ModelConfig mc = tiny_cfg();
  mc.embed_mode = "add";
  ParamStore ps;
  RngStream rng(6, 1);
  auto cd = DenoiserT<float>::create(ps, rng, mc);
  // randomize so outputs are nonzero and the conditioning actually mixes in
  for (const auto& n : ps.names()) rng.fill_normal(ps.at(n).value, 0.0, 0.2);
  Tensor mt({1, 1, 4, 4}), e1({1, 1, 4, 4}), e2({1, 1, 4, 4});
  rng.fill_normal(mt);
  rng.fill_normal(e1);
  rng.fill_normal(e2);
  Tape<float> tape;
  tape.grad_enabled = false;
  TapeParams<float> tp(tape, ps);
  const Tensor o1 = cd(tp, ad::leaf(tape, mt), ad::leaf(tape, e1), 5).val();
  Tape<float> tape2;
  TapeParams<float> tp2(tape2, ps);
  tape2.grad_enabled = false;
  const Tensor o2 = cd(tp2, ad::leaf(tape2, mt), ad::leaf(tape2, e2), 5).val();
  double diff = 0;
  for (std::size_t i = 0; i < o1.numel(); ++i) diff = std::max<double>(diff, std::abs(o1.data[i] - o2.data[i]));
  EXPECT_GT(diff, 0.0);  // conditioning image must influence the prediction
}

TEST(Models, ParameterCountsAreStableAcrossCreates) {
  ModelConfig mc = tiny_cfg();
  ParamStore a, b;
  RngStream r1(7, 1), r2(8, 1);
  auto m1 = DenoiserT<float>::create(a, r1, mc);
  auto m2 = DenoiserT<float>::create(b, r2, mc);
  EXPECT_EQ(a.names(), b.names());
  EXPECT_EQ(a.numel(), b.numel());
}
