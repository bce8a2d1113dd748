#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ldseg/autodiff.hpp"
#include "ldseg/optim.hpp"
#include "ldseg/rng.hpp"
#include "ldseg/tensor.hpp"

namespace ldseg {

// ---------------------------------------------------------------------------
// raw (non-differentiated) helpers

inline void check_spatial_divisible(int H, int W, int depth) {
  const int f = 1 << depth;
  if (H % f != 0 || W % f != 0)
    throw shape_error("spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by 2^" + std::to_string(depth));
}

template <typename S>
TensorT<S> one_hot(const std::vector<int>& labels, int N, int C, int H, int W) {
  if (labels.size() != static_cast<std::size_t>(N) * H * W)
    throw shape_error("one_hot: label count does not match N*H*W");
  TensorT<S> out({N, C, H, W});
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const int cls = labels[static_cast<std::size_t>(n) * HW + p];
      if (cls < 0 || cls >= C) throw value_error("one_hot: label " + std::to_string(cls) + " out of range");
      out.data[(static_cast<std::size_t>(n) * C + cls) * HW + p] = S(1);
    }
  return out;
}

// Per-pixel argmax over channels; ties resolve to the lowest class index.
template <typename S>
std::vector<int> argmax_channel(const TensorT<S>& probs) {
  if (probs.rank() != 4) throw shape_error("argmax_channel: expected [N,C,H,W]");
  const int N = probs.dim(0), C = probs.dim(1);
  const std::size_t HW = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
  std::vector<int> out(static_cast<std::size_t>(N) * HW);
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      int best = 0;
      S best_v = probs.data[static_cast<std::size_t>(n) * C * HW + p];
      for (int c = 1; c < C; ++c) {
        const S v = probs.data[(static_cast<std::size_t>(n) * C + c) * HW + p];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[static_cast<std::size_t>(n) * HW + p] = best;
    }
  return out;
}

// Sinusoidal timestep features: [sin(t*w_0..), cos(t*w_0..)], dim/2 each,
// frequencies log-spaced from 1 down to 1/10000. t=0 gives zeros then ones.
template <typename S>
TensorT<S> time_embedding(int t, int dim) {
  if (t < 0) throw value_error("time_embedding: t must be >= 0");
  if (dim < 2 || dim % 2 != 0) throw value_error("time_embedding: dim must be even and >= 2");
  const int half = dim / 2;
  TensorT<S> out({dim});
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * i / half);
    out.data[static_cast<std::size_t>(i)] = static_cast<S>(std::sin(t * w));
    out.data[static_cast<std::size_t>(half + i)] = static_cast<S>(std::cos(t * w));
  }
  return out;
}

// Batch of identical timestep rows [N, dim] (t is drawn once per batch).
template <typename S>
TensorT<S> time_embedding_rows(int t, int dim, int N) {
  TensorT<S> one = time_embedding<S>(t, dim);
  TensorT<S> out({N, dim});
  for (int n = 0; n < N; ++n)
    std::copy(one.data.begin(), one.data.end(), out.data.begin() + static_cast<std::size_t>(n) * dim);
  return out;
}

// Nearest-neighbor resize helpers (center convention on the way down,
// block replication on the way up) for the ablation variants.
inline std::vector<int> nearest_downsample_labels(const std::vector<int>& in, int H, int W, int factor) {
  if (factor < 1 || H % factor != 0 || W % factor != 0)
    throw shape_error("nearest_downsample: dims not divisible by factor");
  const int h = H / factor, w = W / factor;
  std::vector<int> out(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i) * w + j] =
          in[static_cast<std::size_t>(i * factor + factor / 2) * W + (j * factor + factor / 2)];
  return out;
}

inline std::vector<int> nearest_upsample_labels(const std::vector<int>& in, int h, int w, int factor) {
  const int H = h * factor, W = w * factor;
  std::vector<int> out(static_cast<std::size_t>(H) * W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      out[static_cast<std::size_t>(i) * W + j] = in[static_cast<std::size_t>(i / factor) * w + (j / factor)];
  return out;
}

template <typename S>
TensorT<S> nearest_downsample(const TensorT<S>& in, int factor) {
  if (in.rank() != 4) throw shape_error("nearest_downsample: expected [N,C,H,W]");
  const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  if (factor < 1 || H % factor != 0 || W % factor != 0)
    throw shape_error("nearest_downsample: dims not divisible by factor");
  const int h = H / factor, w = W / factor;
  TensorT<S> out({N, C, h, w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          out.at4(n, c, i, j) = in.at4(n, c, i * factor + factor / 2, j * factor + factor / 2);
  return out;
}

// Class index <-> centered real value in [-1, 1] (the diffusion target when a
// nearest-downsampled mask stands in for the learned latent).
template <typename S>
TensorT<S> labels_to_centered(const std::vector<int>& labels, int N, int C, int H, int W) {
  TensorT<S> out({N, 1, H, W});
  const double denom = static_cast<double>(C - 1);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const int cls = labels[i];
    if (cls < 0 || cls >= C) throw value_error("labels_to_centered: label out of range");
    out.data[i] = static_cast<S>(2.0 * cls / denom - 1.0);
  }
  return out;
}

template <typename S>
std::vector<int> centered_to_labels(const TensorT<S>& t, int C) {
  std::vector<int> out(t.numel());
  const double denom = static_cast<double>(C - 1);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = (static_cast<double>(t.data[i]) + 1.0) * denom / 2.0;
    const int cls = static_cast<int>(std::llround(v));
    out[i] = std::clamp(cls, 0, C - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// configuration

struct ModelConfig {
  int classes = 3;
  int depth = 4;  // autoencoder / image-encoder / baseline downsampling layers
  int base_width = 16;
  std::vector<int> channel_mult = {1, 2, 2, 4};
  int latent_channels = 1;

  int den_depth = 1;  // denoiser Unet depth (latent is already small)
  int den_base = 64;
  std::vector<int> den_mult = {1, 2};

  int time_dim = 128;
  int heads = 4;
  int attention_level = -1;  // -1 = bottleneck of the denoiser (the only placement)
  std::string embed_mode = "concat";  // "concat" (two-channel input) or "add"

  double gn_eps = 1e-5;
  double ln_eps = 1e-5;
  int gn_groups = 8;

  int width_at(int level) const {
    const int idx = std::min(level, static_cast<int>(channel_mult.size()) - 1);
    return base_width * channel_mult[static_cast<std::size_t>(idx)];
  }
  int den_width_at(int level) const {
    const int idx = std::min(level, static_cast<int>(den_mult.size()) - 1);
    return den_base * den_mult[static_cast<std::size_t>(idx)];
  }
  int latent_factor() const { return 1 << depth; }

  void validate() const {
    if (classes < 2) throw config_error("model: classes must be >= 2");
    if (depth < 0) throw config_error("model: depth must be >= 0");
    if (base_width < 1) throw config_error("model: base_width must be >= 1");
    if (channel_mult.empty()) throw config_error("model: channel_mult must be non-empty");
    for (int m : channel_mult)
      if (m < 1) throw config_error("model: channel_mult entries must be >= 1");
    if (latent_channels != 1) throw config_error("model: latent_channels must be 1 (two-channel conditioning)");
    if (den_depth < 1) throw config_error("model: den_depth must be >= 1");
    if (den_base < 1) throw config_error("model: den_base must be >= 1");
    if (den_mult.empty()) throw config_error("model: den_mult must be non-empty");
    for (int m : den_mult)
      if (m < 1) throw config_error("model: den_mult entries must be >= 1");
    if (time_dim < 2 || time_dim % 2 != 0) throw config_error("model: time_dim must be even and >= 2");
    if (heads < 1) throw config_error("model: heads must be >= 1");
    if (den_width_at(den_depth) % heads != 0)
      throw config_error("model: bottleneck width not divisible by attention heads");
    if (attention_level != -1 && attention_level != den_depth)
      throw config_error("model: attention is only supported at the denoiser bottleneck");
    if (embed_mode != "concat" && embed_mode != "add")
      throw config_error("model: embed_mode must be 'concat' or 'add'");
    if (gn_groups < 1) throw config_error("model: gn_groups must be >= 1");
  }
};

// Structural summary for architecture assertions (skip connections, final
// normalization) without poking at parameter names.
struct ModelStructure {
  std::string kind;
  bool skip_connections = false;
  bool final_layer_norm = false;
  bool attention = false;
  bool time_conditioned = false;
  std::vector<std::string> blocks;
};

// ---------------------------------------------------------------------------
// layers: thin structs holding parameter names; weights live in a ParamStore
// and are bound onto the tape per forward pass.

enum class WeightInit { he, zero };

template <typename S>
struct Conv2dL {
  std::string w, b;
  int stride = 1, pad = 1;
  bool has_bias = true;

  static Conv2dL create(ParamStoreT<S>& ps, RngStream& rng, const std::string& name, int cin, int cout,
                        int k, int stride, int pad, WeightInit init, bool bias = true) {
    Conv2dL l;
    l.w = name + ".w";
    l.b = name + ".b";
    l.stride = stride;
    l.pad = pad;
    l.has_bias = bias;
    TensorT<S> wt({cout, cin, k, k});
    if (init == WeightInit::he) rng.fill_normal(wt, 0.0, std::sqrt(2.0 / (static_cast<double>(cin) * k * k)));
    ps.add(l.w, std::move(wt));
    if (bias) ps.add(l.b, TensorT<S>({cout}));
    return l;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x) const {
    return ad::conv2d(x, p[w], has_bias ? p[b] : Var<S>(), stride, pad);
  }
};

template <typename S>
struct GroupNormL {
  std::string g, b;
  int groups = 1;
  double eps = 1e-5;

  static GroupNormL create(ParamStoreT<S>& ps, const std::string& name, int channels, int want_groups,
                           double eps) {
    GroupNormL l;
    l.g = name + ".g";
    l.b = name + ".b";
    l.eps = eps;
    int g = std::min(want_groups, channels);
    while (channels % g != 0) --g;
    l.groups = g;
    ps.add(l.g, TensorT<S>({channels}, S(1)));
    ps.add(l.b, TensorT<S>({channels}));
    return l;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x) const { return ad::group_norm(x, groups, eps, p[g], p[b]); }
};

template <typename S>
struct LinearL {
  std::string w, b;

  static LinearL create(ParamStoreT<S>& ps, RngStream& rng, const std::string& name, int in, int out,
                        WeightInit init) {
    LinearL l;
    l.w = name + ".w";
    l.b = name + ".b";
    TensorT<S> wt({out, in});
    if (init == WeightInit::he) rng.fill_normal(wt, 0.0, std::sqrt(2.0 / static_cast<double>(in)));
    ps.add(l.w, std::move(wt));
    ps.add(l.b, TensorT<S>({out}));
    return l;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x) const { return ad::linear(x, p[w], p[b]); }
};

// Pre-norm residual block: gn-silu-conv, optional time bias, gn-silu-conv,
// plus a 1x1 projection on the shortcut when channel counts change. The
// second conv starts at zero so a fresh block is the identity.
template <typename S>
struct ResBlockL {
  GroupNormL<S> gn1, gn2;
  Conv2dL<S> conv1, conv2, skip;
  LinearL<S> t1, t2;
  bool has_skip_proj = false;
  bool has_time = false;

  static ResBlockL create(ParamStoreT<S>& ps, RngStream& rng, const std::string& name, int cin, int cout,
                          const ModelConfig& cfg, bool time) {
    ResBlockL l;
    l.gn1 = GroupNormL<S>::create(ps, name + ".gn1", cin, cfg.gn_groups, cfg.gn_eps);
    l.conv1 = Conv2dL<S>::create(ps, rng, name + ".conv1", cin, cout, 3, 1, 1, WeightInit::he);
    l.has_time = time;
    if (time) {
      l.t1 = LinearL<S>::create(ps, rng, name + ".time1", cfg.time_dim, cout, WeightInit::he);
      l.t2 = LinearL<S>::create(ps, rng, name + ".time2", cout, cout, WeightInit::he);
    }
    l.gn2 = GroupNormL<S>::create(ps, name + ".gn2", cout, cfg.gn_groups, cfg.gn_eps);
    l.conv2 = Conv2dL<S>::create(ps, rng, name + ".conv2", cout, cout, 3, 1, 1, WeightInit::zero);
    l.has_skip_proj = cin != cout;
    if (l.has_skip_proj) l.skip = Conv2dL<S>::create(ps, rng, name + ".skip", cin, cout, 1, 1, 0, WeightInit::he);
    return l;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x, Var<S> temb = Var<S>()) const {
    Var<S> h = conv1(p, ad::silu(gn1(p, x)));
    if (has_time) {
      if (temb.id < 0) throw value_error("residual block expects a time embedding");
      h = ad::add_rowwise_bias(h, t2(p, ad::silu(t1(p, temb))));
    }
    h = conv2(p, ad::silu(gn2(p, h)));
    return ad::add(h, has_skip_proj ? skip(p, x) : x);
  }
};

// Spatial self-attention over H*W tokens with a residual add; the output
// projection starts at zero so a fresh layer is the identity.
template <typename S>
struct SelfAttention2dL {
  Conv2dL<S> q, k, v, out;
  int heads = 1;

  static SelfAttention2dL create(ParamStoreT<S>& ps, RngStream& rng, const std::string& name, int channels,
                                 int heads) {
    if (channels % heads != 0) throw shape_error("attention: channels not divisible by heads");
    SelfAttention2dL l;
    l.heads = heads;
    l.q = Conv2dL<S>::create(ps, rng, name + ".q", channels, channels, 1, 1, 0, WeightInit::he);
    l.k = Conv2dL<S>::create(ps, rng, name + ".k", channels, channels, 1, 1, 0, WeightInit::he);
    l.v = Conv2dL<S>::create(ps, rng, name + ".v", channels, channels, 1, 1, 0, WeightInit::he);
    l.out = Conv2dL<S>::create(ps, rng, name + ".out", channels, channels, 1, 1, 0, WeightInit::zero);
    return l;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x) const {
    const int C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    const int d = C / heads;
    Var<S> qh = ad::split_heads(q(p, x), heads);
    Var<S> kh = ad::split_heads(k(p, x), heads);
    Var<S> vh = ad::split_heads(v(p, x), heads);
    Var<S> att = ad::softmax_lastdim(ad::scale(ad::bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(d))));
    Var<S> o = ad::merge_heads(ad::bmm(att, vh), heads, H, W);
    return ad::add(x, out(p, o));
  }
};

// ---------------------------------------------------------------------------
// encoder/decoder trunks shared by the mask autoencoder and image encoder

template <typename S>
struct EncoderTrunkT {
  Conv2dL<S> stem;
  std::vector<ResBlockL<S>> rb;
  std::vector<Conv2dL<S>> down;
  ResBlockL<S> mid;
  Conv2dL<S> head;
  int depth = 0;

  static EncoderTrunkT create(ParamStoreT<S>& ps, RngStream& rng, const std::string& prefix, int in_ch,
                              const ModelConfig& cfg) {
    EncoderTrunkT e;
    e.depth = cfg.depth;
    e.stem = Conv2dL<S>::create(ps, rng, prefix + ".stem", in_ch, cfg.width_at(0), 3, 1, 1, WeightInit::he);
    for (int i = 0; i < cfg.depth; ++i) {
      e.rb.push_back(ResBlockL<S>::create(ps, rng, prefix + ".rb" + std::to_string(i), cfg.width_at(i),
                                          cfg.width_at(i), cfg, false));
      e.down.push_back(Conv2dL<S>::create(ps, rng, prefix + ".down" + std::to_string(i), cfg.width_at(i),
                                          cfg.width_at(i + 1), 3, 2, 1, WeightInit::he));
    }
    e.mid = ResBlockL<S>::create(ps, rng, prefix + ".mid", cfg.width_at(cfg.depth), cfg.width_at(cfg.depth),
                                 cfg, false);
    e.head =
        Conv2dL<S>::create(ps, rng, prefix + ".head", cfg.width_at(cfg.depth), 1, 3, 1, 1, WeightInit::he);
    return e;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> x) const {
    x = stem(p, x);
    for (int i = 0; i < depth; ++i) x = down[static_cast<std::size_t>(i)](p, rb[static_cast<std::size_t>(i)](p, x));
    return head(p, mid(p, x));
  }
};

template <typename S>
struct DecoderTrunkT {
  Conv2dL<S> from_latent;
  ResBlockL<S> mid;
  std::vector<Conv2dL<S>> up;
  std::vector<ResBlockL<S>> rb;
  GroupNormL<S> out_gn;
  Conv2dL<S> out_conv;
  int depth = 0;

  static DecoderTrunkT create(ParamStoreT<S>& ps, RngStream& rng, const std::string& prefix, int out_ch,
                              const ModelConfig& cfg) {
    DecoderTrunkT d;
    d.depth = cfg.depth;
    d.from_latent =
        Conv2dL<S>::create(ps, rng, prefix + ".from_latent", 1, cfg.width_at(cfg.depth), 3, 1, 1, WeightInit::he);
    d.mid = ResBlockL<S>::create(ps, rng, prefix + ".mid", cfg.width_at(cfg.depth), cfg.width_at(cfg.depth),
                                 cfg, false);
    for (int i = cfg.depth - 1; i >= 0; --i) {
      d.up.push_back(Conv2dL<S>::create(ps, rng, prefix + ".up" + std::to_string(i), cfg.width_at(i + 1),
                                        cfg.width_at(i), 3, 1, 1, WeightInit::he));
      d.rb.push_back(ResBlockL<S>::create(ps, rng, prefix + ".rb" + std::to_string(i), cfg.width_at(i),
                                          cfg.width_at(i), cfg, false));
    }
    d.out_gn = GroupNormL<S>::create(ps, prefix + ".out_gn", cfg.width_at(0), cfg.gn_groups, cfg.gn_eps);
    // zero-init final conv: an untrained decoder emits the uniform distribution
    d.out_conv = Conv2dL<S>::create(ps, rng, prefix + ".out", cfg.width_at(0), out_ch, 3, 1, 1, WeightInit::zero);
    return d;
  }

  // returns logits [N, out_ch, H, W]
  Var<S> operator()(TapeParams<S>& p, Var<S> m) const {
    Var<S> x = mid(p, from_latent(p, m));
    for (std::size_t i = 0; i < up.size(); ++i) x = rb[i](p, up[i](p, ad::upsample_nearest2(x)));
    return out_conv(p, ad::silu(out_gn(p, x)));
  }
};

// ---------------------------------------------------------------------------
// mask autoencoder (no skip connections; layer-normalized latent)

template <typename S>
struct MaskAutoencoderT {
  ModelConfig cfg;
  EncoderTrunkT<S> enc;
  DecoderTrunkT<S> dec;

  static MaskAutoencoderT create(ParamStoreT<S>& ps, RngStream& rng, const ModelConfig& cfg,
                                 const std::string& prefix = "ae") {
    cfg.validate();
    MaskAutoencoderT m;
    m.cfg = cfg;
    m.enc = EncoderTrunkT<S>::create(ps, rng, prefix + ".enc", cfg.classes, cfg);
    m.dec = DecoderTrunkT<S>::create(ps, rng, prefix + ".dec", cfg.classes, cfg);
    return m;
  }

  // one-hot mask -> layer-normalized single-channel latent
  Var<S> encode(TapeParams<S>& p, Var<S> onehot) const {
    check_spatial_divisible(onehot.val().dim(2), onehot.val().dim(3), cfg.depth);
    return ad::layer_norm(enc(p, onehot), cfg.ln_eps);
  }

  // latent -> per-pixel class probabilities
  Var<S> decode_probs(TapeParams<S>& p, Var<S> latent) const { return ad::softmax_channel(dec(p, latent)); }

  ModelStructure describe() const {
    ModelStructure s;
    s.kind = "mask_autoencoder";
    s.skip_connections = false;
    s.final_layer_norm = true;
    for (int i = 0; i < cfg.depth; ++i)
      s.blocks.push_back("enc level " + std::to_string(i) + ": resblock+down " + std::to_string(cfg.width_at(i)) +
                         "->" + std::to_string(cfg.width_at(i + 1)));
    s.blocks.push_back("latent: 1 channel, layer norm");
    for (int i = cfg.depth - 1; i >= 0; --i)
      s.blocks.push_back("dec level " + std::to_string(i) + ": up+resblock " + std::to_string(cfg.width_at(i + 1)) +
                         "->" + std::to_string(cfg.width_at(i)));
    return s;
  }
};

// ---------------------------------------------------------------------------
// image encoder: same trunk, no final layer normalization

template <typename S>
struct ImageEncoderT {
  ModelConfig cfg;
  EncoderTrunkT<S> enc;

  static ImageEncoderT create(ParamStoreT<S>& ps, RngStream& rng, const ModelConfig& cfg,
                              const std::string& prefix = "ie") {
    cfg.validate();
    ImageEncoderT m;
    m.cfg = cfg;
    m.enc = EncoderTrunkT<S>::create(ps, rng, prefix, 1, cfg);
    return m;
  }

  Var<S> operator()(TapeParams<S>& p, Var<S> image) const {
    check_spatial_divisible(image.val().dim(2), image.val().dim(3), cfg.depth);
    return enc(p, image);
  }

  ModelStructure describe() const {
    ModelStructure s;
    s.kind = "image_encoder";
    s.skip_connections = false;
    s.final_layer_norm = false;
    s.blocks.push_back("encoder trunk, depth " + std::to_string(cfg.depth) + ", no output normalization");
    return s;
  }
};

// ---------------------------------------------------------------------------
// conditional denoiser: Unet with skips, per-block time bias, self-attention
// at the bottleneck; input is [m_t || e] (or m_t + e in "add" mode)

template <typename S>
struct DenoiserT {
  ModelConfig cfg;
  Conv2dL<S> stem;
  std::vector<ResBlockL<S>> rb_down;
  std::vector<Conv2dL<S>> down;
  ResBlockL<S> mid1, mid2;
  SelfAttention2dL<S> attn;
  std::vector<Conv2dL<S>> up;
  std::vector<ResBlockL<S>> rb_up;
  GroupNormL<S> out_gn;
  Conv2dL<S> out_conv;

  static DenoiserT create(ParamStoreT<S>& ps, RngStream& rng, const ModelConfig& cfg,
                          const std::string& prefix = "cd") {
    cfg.validate();
    DenoiserT m;
    m.cfg = cfg;
    const int in_ch = cfg.embed_mode == "concat" ? 2 : 1;
    m.stem = Conv2dL<S>::create(ps, rng, prefix + ".stem", in_ch, cfg.den_width_at(0), 3, 1, 1, WeightInit::he);
    for (int i = 0; i < cfg.den_depth; ++i) {
      m.rb_down.push_back(ResBlockL<S>::create(ps, rng, prefix + ".down_rb" + std::to_string(i),
                                               cfg.den_width_at(i), cfg.den_width_at(i), cfg, true));
      m.down.push_back(Conv2dL<S>::create(ps, rng, prefix + ".down" + std::to_string(i), cfg.den_width_at(i),
                                          cfg.den_width_at(i + 1), 3, 2, 1, WeightInit::he));
    }
    const int wb = cfg.den_width_at(cfg.den_depth);
    m.mid1 = ResBlockL<S>::create(ps, rng, prefix + ".mid1", wb, wb, cfg, true);
    m.attn = SelfAttention2dL<S>::create(ps, rng, prefix + ".attn", wb, cfg.heads);
    m.mid2 = ResBlockL<S>::create(ps, rng, prefix + ".mid2", wb, wb, cfg, true);
    for (int i = cfg.den_depth - 1; i >= 0; --i) {
      m.up.push_back(Conv2dL<S>::create(ps, rng, prefix + ".up" + std::to_string(i), cfg.den_width_at(i + 1),
                                        cfg.den_width_at(i), 3, 1, 1, WeightInit::he));
      m.rb_up.push_back(ResBlockL<S>::create(ps, rng, prefix + ".up_rb" + std::to_string(i),
                                             2 * cfg.den_width_at(i), cfg.den_width_at(i), cfg, true));
    }
    m.out_gn = GroupNormL<S>::create(ps, prefix + ".out_gn", cfg.den_width_at(0), cfg.gn_groups, cfg.gn_eps);
    m.out_conv =
        Conv2dL<S>::create(ps, rng, prefix + ".out", cfg.den_width_at(0), 1, 3, 1, 1, WeightInit::zero);
    return m;
  }

  // mt [N,1,h,w], e [N,1,h,w], t in [1, T] (one t per batch)
  Var<S> operator()(TapeParams<S>& p, Var<S> mt, Var<S> e, int t) const {
    check_same_shape(mt.val(), e.val(), "denoiser conditioning");
    check_spatial_divisible(mt.val().dim(2), mt.val().dim(3), cfg.den_depth);
    Tape<S>& tape = *mt.tape;
    const int N = mt.val().dim(0);
    Var<S> temb = ad::leaf(tape, time_embedding_rows<S>(t, cfg.time_dim, N));
    Var<S> x = cfg.embed_mode == "concat" ? ad::concat_channels(mt, e) : ad::add(mt, e);
    x = stem(p, x);
    std::vector<Var<S>> skips;
    for (int i = 0; i < cfg.den_depth; ++i) {
      x = rb_down[static_cast<std::size_t>(i)](p, x, temb);
      skips.push_back(x);
      x = down[static_cast<std::size_t>(i)](p, x);
    }
    x = mid2(p, attn(p, mid1(p, x, temb)), temb);
    for (std::size_t j = 0; j < up.size(); ++j) {
      x = up[j](p, ad::upsample_nearest2(x));
      x = ad::concat_channels(x, skips[skips.size() - 1 - j]);
      x = rb_up[j](p, x, temb);
    }
    return out_conv(p, ad::silu(out_gn(p, x)));
  }

  ModelStructure describe() const {
    ModelStructure s;
    s.kind = "denoiser";
    s.skip_connections = true;
    s.final_layer_norm = false;
    s.attention = true;
    s.time_conditioned = true;
    s.blocks.push_back("input: " + std::string(cfg.embed_mode == "concat" ? "2-channel concat" : "1-channel add"));
    for (int i = 0; i < cfg.den_depth; ++i)
      s.blocks.push_back("down level " + std::to_string(i) + ": width " + std::to_string(cfg.den_width_at(i)));
    s.blocks.push_back("bottleneck: width " + std::to_string(cfg.den_width_at(cfg.den_depth)) + ", attention " +
                       std::to_string(cfg.heads) + " heads");
    return s;
  }
};

// ---------------------------------------------------------------------------
// deterministic Res-Unet baseline (with skip connections)

template <typename S>
struct BaselineResUnetT {
  ModelConfig cfg;
  Conv2dL<S> stem;
  std::vector<ResBlockL<S>> rb_down;
  std::vector<Conv2dL<S>> down;
  ResBlockL<S> mid;
  std::vector<Conv2dL<S>> up;
  std::vector<ResBlockL<S>> rb_up;
  GroupNormL<S> out_gn;
  Conv2dL<S> out_conv;

  static BaselineResUnetT create(ParamStoreT<S>& ps, RngStream& rng, const ModelConfig& cfg,
                                 const std::string& prefix = "base") {
    cfg.validate();
    BaselineResUnetT m;
    m.cfg = cfg;
    m.stem = Conv2dL<S>::create(ps, rng, prefix + ".stem", 1, cfg.width_at(0), 3, 1, 1, WeightInit::he);
    for (int i = 0; i < cfg.depth; ++i) {
      m.rb_down.push_back(ResBlockL<S>::create(ps, rng, prefix + ".down_rb" + std::to_string(i),
                                               cfg.width_at(i), cfg.width_at(i), cfg, false));
      m.down.push_back(Conv2dL<S>::create(ps, rng, prefix + ".down" + std::to_string(i), cfg.width_at(i),
                                          cfg.width_at(i + 1), 3, 2, 1, WeightInit::he));
    }
    m.mid = ResBlockL<S>::create(ps, rng, prefix + ".mid", cfg.width_at(cfg.depth), cfg.width_at(cfg.depth),
                                 cfg, false);
    for (int i = cfg.depth - 1; i >= 0; --i) {
      m.up.push_back(Conv2dL<S>::create(ps, rng, prefix + ".up" + std::to_string(i), cfg.width_at(i + 1),
                                        cfg.width_at(i), 3, 1, 1, WeightInit::he));
      m.rb_up.push_back(ResBlockL<S>::create(ps, rng, prefix + ".up_rb" + std::to_string(i),
                                             2 * cfg.width_at(i), cfg.width_at(i), cfg, false));
    }
    m.out_gn = GroupNormL<S>::create(ps, prefix + ".out_gn", cfg.width_at(0), cfg.gn_groups, cfg.gn_eps);
    m.out_conv =
        Conv2dL<S>::create(ps, rng, prefix + ".out", cfg.width_at(0), cfg.classes, 3, 1, 1, WeightInit::zero);
    return m;
  }

  // image [N,1,H,W] -> class probabilities [N,C,H,W]
  Var<S> operator()(TapeParams<S>& p, Var<S> image) const {
    check_spatial_divisible(image.val().dim(2), image.val().dim(3), cfg.depth);
    Var<S> x = stem(p, image);
    std::vector<Var<S>> skips;
    for (int i = 0; i < cfg.depth; ++i) {
      x = rb_down[static_cast<std::size_t>(i)](p, x);
      skips.push_back(x);
      x = down[static_cast<std::size_t>(i)](p, x);
    }
    x = mid(p, x);
    for (std::size_t j = 0; j < up.size(); ++j) {
      x = up[j](p, ad::upsample_nearest2(x));
      x = ad::concat_channels(x, skips[skips.size() - 1 - j]);
      x = rb_up[j](p, x);
    }
    return ad::softmax_channel(out_conv(p, ad::silu(out_gn(p, x))));
  }

  ModelStructure describe() const {
    ModelStructure s;
    s.kind = "baseline_res_unet";
    s.skip_connections = true;
    s.final_layer_norm = false;
    for (int i = 0; i < cfg.depth; ++i)
      s.blocks.push_back("level " + std::to_string(i) + ": width " + std::to_string(cfg.width_at(i)) +
                         ", skip concat on the way up");
    return s;
  }
};

}  // namespace ldseg
