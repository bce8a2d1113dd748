// command-line front end: dataset generation, training, inference, evaluation,
// and the three benchmark harnesses behind one binary.
//
// exit codes: 0 success, 1 I/O failure, 2 bad arguments/config, 3 training
// divergence, 4 checkpoint incompatibility.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ldseg/eval.hpp"

namespace fs = std::filesystem;
using namespace ldseg;

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error(io_error::kind::write_failed, dir, "cannot create directory: " + ec.message());
}

// every command refuses to clobber its primary output unless --force
void refuse_overwrite(const std::string& path, bool force) {
  if (!force && fs::exists(path))
    throw io_error(io_error::kind::write_failed, path, "already exists (pass --force to overwrite)");
}

// each command records what it wrote; the list lands next to the outputs
struct Produced {
  std::string root;
  std::vector<std::string> rel;
  void add(const std::string& r) { rel.push_back(r); }
  void write() const {
    std::sort(const_cast<std::vector<std::string>&>(rel).begin(), const_cast<std::vector<std::string>&>(rel).end());
    std::string text;
    for (const auto& r : rel) text += r + "\n";
    write_file_bytes(root + "/produced_files.txt", text.data(), text.size());
  }
};

std::string join_path(const std::string& a, const std::string& b) { return (fs::path(a) / b).string(); }

// --steps takes either a count K (expanded to the even subsequence) or an
// explicit comma-separated increasing list of timesteps
std::vector<int> parse_steps_arg(const std::string& s, int T) {
  auto to_int = [&](const std::string& tok) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw config_error("--steps: '" + tok + "' is not an integer");
    }
  };
  if (s.find(',') == std::string::npos) {
    const int K = to_int(s);
    if (K < 1) throw config_error("--steps must be >= 1");
    if (K > T) throw config_error("--steps must be <= T=" + std::to_string(T));
    return evenly_spaced_subsequence(K, T);
  }
  std::vector<int> steps;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) steps.push_back(to_int(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (steps.empty()) throw config_error("--steps: empty list");
  return steps;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) {
      try {
        out.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw config_error(std::string(what) + ": '" + tok + "' is not an integer");
      }
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw config_error(std::string(what) + ": empty list");
  return out;
}

std::vector<double> parse_real_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) {
      try {
        out.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw config_error(std::string(what) + ": '" + tok + "' is not a number");
      }
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw config_error(std::string(what) + ": empty list");
  return out;
}

std::vector<std::string> parse_str_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) out.push_back(tok);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// shared option bundle for commands that read a RunConfig; flags win over file
struct ConfigOpts {
  std::string config_path;
  std::optional<std::string> data_dir;
  std::optional<int> epochs, batch, steps_n, runs, T, size_n, n_samples, classes;
  std::optional<double> lr;
  std::optional<std::string> schedule, sampler, mask_path, image_path, embed_mode;
  std::optional<int> depth, base_width, den_depth, den_base;
  std::optional<std::string> channel_mult, den_mult;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd, bool train_cmd) {
    cmd->add_option("--config", config_path, "TOML config file (flags override its values)");
    cmd->add_option("--data", data_dir, "dataset directory (default: config data.dir)");
    cmd->add_option("--seed", seed, "seed for this command's RNG streams");
    cmd->add_option("--classes", classes, "number of classes incl. background (default 3)");
    if (train_cmd) {
      cmd->add_option("--epochs", epochs, "training epochs (default: config value)");
      cmd->add_option("--batch", batch, "minibatch size (default 4)");
      cmd->add_option("--lr", lr, "initial learning rate (default: per-model config value)");
      cmd->add_option("--T", T, "diffusion steps used at training time (default 1000)");
      cmd->add_option("--schedule", schedule, "noise schedule: linear|cosine (default linear)");
      cmd->add_option("--mask-path", mask_path, "mask path: autoencoder|nearest-downsample");
      cmd->add_option("--image-path", image_path, "image path: encoder|nearest-downsample");
      cmd->add_option("--depth", depth, "encoder/decoder downsamplings (default 4)");
      cmd->add_option("--base-width", base_width, "first-level channel count (default 16)");
      cmd->add_option("--channel-mult", channel_mult, "comma list of per-level width multipliers");
      cmd->add_option("--den-depth", den_depth, "denoiser downsamplings in latent space (default 1)");
      cmd->add_option("--den-base", den_base, "denoiser first-level channels (default 64)");
      cmd->add_option("--den-mult", den_mult, "comma list of denoiser width multipliers");
      cmd->add_option("--embed-mode", embed_mode, "image conditioning: concat|add (default concat)");
    }
  }

  RunConfig resolve(bool for_train, const char* lr_target) const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (data_dir) cfg.data_dir = *data_dir;
    if (classes) cfg.classes = *classes;
    if (seed) {
      cfg.data_seed = *seed;
      cfg.train_seed = *seed;
      cfg.sample_seed = *seed;
    }
    if (for_train) {
      if (epochs) {
        cfg.ae_epochs = *epochs;
        cfg.cd_epochs = *epochs;
        cfg.baseline_epochs = *epochs;
      }
      if (batch) cfg.batch = *batch;
      if (lr) {
        if (std::string(lr_target) == "ae") cfg.lr_ae = *lr;
        if (std::string(lr_target) == "cd") cfg.lr_cd = *lr;
        if (std::string(lr_target) == "baseline") cfg.lr_baseline = *lr;
      }
      if (T) cfg.T = *T;
      if (schedule) cfg.schedule = *schedule;
      if (mask_path) cfg.mask_path = *mask_path;
      if (image_path) cfg.image_path = *image_path;
      if (depth) cfg.model.depth = *depth;
      if (base_width) cfg.model.base_width = *base_width;
      if (channel_mult) cfg.model.channel_mult = parse_int_list(*channel_mult, "--channel-mult");
      if (den_depth) cfg.model.den_depth = *den_depth;
      if (den_base) cfg.model.den_base = *den_base;
      if (den_mult) cfg.model.den_mult = parse_int_list(*den_mult, "--den-mult");
      if (embed_mode) cfg.model.embed_mode = *embed_mode;
    }
    cfg.model.classes = cfg.classes;
    return cfg;
  }
};

void write_loss_and_ckpt(const std::string& out, const std::string& stem, const Checkpoint& ck,
                         const std::vector<TrainLogRow>& log, Produced& made) {
  save_checkpoint(join_path(out, stem + ".ldsc"), ck);
  made.add(stem + ".ldsc");
  write_loss_csv(join_path(out, stem + "_loss.csv"), log);
  made.add(stem + "_loss.csv");
}

// checkpoint directory convention: cd.ldsc plus ae.ldsc when the denoiser's
// variant runs masks through the autoencoder
LdsegRuntime runtime_from_dir(const std::string& dir) {
  const Checkpoint cd = load_checkpoint(join_path(dir, "cd.ldsc"));
  bool wants_ae = false;
  try {
    wants_ae = cd.meta.at("variant").at("mask_path").get<std::string>() == "autoencoder";
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(std::string("denoiser checkpoint metadata incomplete: ") + e.what());
  }
  if (!wants_ae) return make_runtime(cd, nullptr);
  const std::string ae_path = join_path(dir, "ae.ldsc");
  if (!fs::exists(ae_path))
    throw checkpoint_error(dir + ": missing ae.ldsc required by this denoiser's mask path");
  const Checkpoint ae = load_checkpoint(ae_path);
  return make_runtime(cd, &ae);
}

void print_report(const char* tag, const MetricReport& m) {
  std::printf("%s: combined DSC %.4f, IoU %.4f over %d samples\n", tag, m.combined_dsc, m.combined_iou, m.count);
  for (std::size_t c = 0; c < m.dsc_per_class.size(); ++c)
    std::printf("  class %zu: DSC %.4f, IoU %.4f\n", c, m.dsc_per_class[c], m.iou_per_class[c]);
}

std::string eval_csv_text(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::string text = "name,combined_dsc,combined_iou,class_dsc,class_iou\n";
  char buf[64];
  for (const auto& [name, m] : rows) {
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,", m.combined_dsc, m.combined_iou);
    text += name + buf + detail::join_g17(m.dsc_per_class) + "," + detail::join_g17(m.iou_per_class) + "\n";
  }
  return text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "latent-diffusion segmentation toolkit\n"
      "exit codes: 0 ok, 1 I/O failure, 2 bad arguments, 3 divergence, 4 checkpoint mismatch"};
  app.require_subcommand(1);

  // ---- gen-data ----
  struct {
    int n = 500, size = 64;
    std::uint64_t seed = 0;
    std::string out, config;
    bool force = false;
  } gd;
  {
    auto* c = app.add_subcommand("gen-data", "generate a synthetic two-object dataset with manifest");
    auto* opt_n = c->add_option("--n", gd.n, "number of samples (default 500, min 10)");
    auto* opt_size = c->add_option("--size", gd.size, "square image size, multiple of 16 (default 64)");
    auto* opt_seed = c->add_option("--seed", gd.seed, "master seed; identical seeds give identical bytes (default 0)");
    c->add_option("--config", gd.config, "TOML config for shape/texture ranges ([data] section)");
    c->add_option("--out", gd.out, "output directory")->required();
    c->add_flag("--force", gd.force, "overwrite an existing dataset");
    c->callback([&] {
      RunConfig cfg;
      if (!gd.config.empty()) cfg = load_run_config(gd.config);
      if (opt_n->count()) cfg.n = gd.n;
      if (opt_size->count()) cfg.size = gd.size;
      if (opt_seed->count()) cfg.data_seed = gd.seed;
      if (cfg.size < 16 || cfg.size % 16 != 0)
        throw config_error("--size must be a positive multiple of 16 so depth-4 models divide it evenly, got " +
                           std::to_string(cfg.size));
      ensure_dir(gd.out);
      refuse_overwrite(join_path(gd.out, "manifest.tsv"), gd.force);
      generate_dataset(gd.out, cfg.n, cfg.synth(), cfg.data_seed);
      Produced made{gd.out, {}};
      made.add("manifest.tsv");
      made.add("meta.json");
      for (int i = 0; i < cfg.n; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "images/%05d.pgm", i);
        made.add(buf);
        std::snprintf(buf, sizeof(buf), "masks/%05d.pgm", i);
        made.add(buf);
      }
      made.write();
      std::printf("wrote %d samples to %s\n", cfg.n, gd.out.c_str());
    });
  }

  // ---- train-ae ----
  struct {
    ConfigOpts co;
    std::string out, resume;
    bool force = false;
  } ta;
  {
    auto* c = app.add_subcommand("train-ae", "train the mask autoencoder");
    ta.co.attach(c, true);
    c->add_option("--out", ta.out, "output directory (ae.ldsc, ae_loss.csv)")->required();
    c->add_option("--resume", ta.resume, "checkpoint to continue from (skips the overwrite check)");
    c->add_flag("--force", ta.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = ta.co.resolve(true, "ae");
      ensure_dir(ta.out);
      if (ta.resume.empty()) refuse_overwrite(join_path(ta.out, "ae.ldsc"), ta.force);
      const Dataset ds = load_dataset(cfg.data_dir);
      std::optional<Checkpoint> resume;
      if (!ta.resume.empty()) resume = load_checkpoint(ta.resume);
      std::vector<TrainLogRow> log;
      const Checkpoint ck = train_autoencoder(ds, cfg, &log, resume ? &*resume : nullptr);
      Produced made{ta.out, {}};
      write_loss_and_ckpt(ta.out, "ae", ck, log, made);
      made.write();
      std::printf("autoencoder final loss %.6f after %lld optimizer steps\n",
                  log.empty() ? 0.0 : log.back().loss, static_cast<long long>(ck.params.opt_steps));
    });
  }

  // ---- train-cd ----
  struct {
    ConfigOpts co;
    std::string out, resume, ae_ckpt;
    bool force = false;
  } tc;
  {
    auto* c = app.add_subcommand("train-cd", "train the conditional latent denoiser");
    tc.co.attach(c, true);
    c->add_option("--ae-checkpoint", tc.ae_ckpt, "trained mask autoencoder (required for mask_path=autoencoder)");
    c->add_option("--out", tc.out, "output directory (cd.ldsc, cd_loss.csv)")->required();
    c->add_option("--resume", tc.resume, "checkpoint to continue from (skips the overwrite check)");
    c->add_flag("--force", tc.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = tc.co.resolve(true, "cd");
      const VariantSpec variant = variant_from_config(cfg);
      if (variant.uses_autoencoder() && tc.ae_ckpt.empty())
        throw config_error("train-cd with mask_path=autoencoder requires --ae-checkpoint");
      ensure_dir(tc.out);
      if (tc.resume.empty()) refuse_overwrite(join_path(tc.out, "cd.ldsc"), tc.force);
      const Dataset ds = load_dataset(cfg.data_dir);
      std::optional<Checkpoint> ae;
      if (!tc.ae_ckpt.empty()) ae = load_checkpoint(tc.ae_ckpt);
      std::optional<Checkpoint> resume;
      if (!tc.resume.empty()) resume = load_checkpoint(tc.resume);
      std::vector<TrainLogRow> log;
      const Checkpoint ck = train_denoiser(ds, ae ? &*ae : nullptr, cfg, &log, resume ? &*resume : nullptr);
      Produced made{tc.out, {}};
      write_loss_and_ckpt(tc.out, "cd", ck, log, made);
      // pair the autoencoder alongside so the directory is a runnable unit
      if (ae && variant.uses_autoencoder()) {
        save_checkpoint(join_path(tc.out, "ae.ldsc"), *ae);
        made.add("ae.ldsc");
      }
      made.write();
      std::printf("denoiser (%s) final loss %.6f after %lld optimizer steps\n", variant.tag().c_str(),
                  log.empty() ? 0.0 : log.back().loss, static_cast<long long>(ck.params.opt_steps));
    });
  }

  // ---- train-baseline ----
  struct {
    ConfigOpts co;
    std::string out, resume;
    bool force = false;
  } tb;
  {
    auto* c = app.add_subcommand("train-baseline", "train the deterministic res-unet baseline");
    tb.co.attach(c, true);
    c->add_option("--out", tb.out, "output directory (baseline.ldsc, baseline_loss.csv)")->required();
    c->add_option("--resume", tb.resume, "checkpoint to continue from (skips the overwrite check)");
    c->add_flag("--force", tb.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = tb.co.resolve(true, "baseline");
      ensure_dir(tb.out);
      if (tb.resume.empty()) refuse_overwrite(join_path(tb.out, "baseline.ldsc"), tb.force);
      const Dataset ds = load_dataset(cfg.data_dir);
      std::optional<Checkpoint> resume;
      if (!tb.resume.empty()) resume = load_checkpoint(tb.resume);
      std::vector<TrainLogRow> log;
      const Checkpoint ck = train_baseline(ds, cfg, &log, resume ? &*resume : nullptr);
      Produced made{tb.out, {}};
      write_loss_and_ckpt(tb.out, "baseline", ck, log, made);
      made.write();
      std::printf("baseline final loss %.6f after %lld optimizer steps\n", log.empty() ? 0.0 : log.back().loss,
                  static_cast<long long>(ck.params.opt_steps));
    });
  }

  // ---- segment ----
  struct {
    std::string image, ckpt_dir, steps = "1000", sampler = "ddpm", out;
    std::uint64_t seed = 0;
    int run = 0;
    bool force = false, dump = false;
  } sg;
  {
    auto* c = app.add_subcommand("segment", "segment one image by reverse diffusion");
    c->add_option("--image", sg.image, "input image (P5 .pgm)")->required();
    c->add_option("--ckpt-dir", sg.ckpt_dir, "directory holding cd.ldsc (+ ae.ldsc when needed)")->required();
    c->add_option("--steps", sg.steps, "step count K or explicit comma list of timesteps (default 1000)");
    c->add_option("--sampler", sg.sampler, "ddpm|ddim (default ddpm)");
    c->add_option("--seed", sg.seed, "sampling seed (default 0)");
    c->add_option("--run", sg.run, "run index for ensemble-style repeats (default 0)");
    c->add_option("--out", sg.out, "output directory (mask.pgm, latent.tnsr, probs.tnsr)")->required();
    c->add_flag("--dump-trajectory", sg.dump, "also write every intermediate latent as TNSR");
    c->add_flag("--force", sg.force, "overwrite existing outputs");
    c->callback([&] {
      if (sg.sampler != "ddpm" && sg.sampler != "ddim")
        throw config_error("--sampler must be 'ddpm' or 'ddim', got '" + sg.sampler + "'");
      LdsegRuntime rt = runtime_from_dir(sg.ckpt_dir);
      const std::vector<int> steps = parse_steps_arg(sg.steps, rt.sched.T);
      const Tensor image = read_image_p5(sg.image);
      ensure_dir(sg.out);
      refuse_overwrite(join_path(sg.out, "mask.pgm"), sg.force);
      Produced made{sg.out, {}};
      StepObserver obs = nullptr;
      if (sg.dump) {
        ensure_dir(join_path(sg.out, "trajectory"));
        bool first = true;
        obs = [&](int t, int t_prev, const Tensor& m_before, const Tensor&, const Tensor&, const Tensor& m_after) {
          char buf[48];
          if (first) {
            std::snprintf(buf, sizeof(buf), "trajectory/m_%04d.tnsr", t);
            write_tensor(join_path(sg.out, buf), m_before);
            made.add(buf);
            first = false;
          }
          std::snprintf(buf, sizeof(buf), "trajectory/m_%04d.tnsr", t_prev);
          write_tensor(join_path(sg.out, buf), m_after);
          made.add(buf);
        };
      }
      const SegOut res = segment(image, rt, steps, sg.sampler, sg.seed, sg.run, obs);
      write_mask_p5(join_path(sg.out, "mask.pgm"), res.labels, rt.H, rt.W);
      made.add("mask.pgm");
      write_tensor(join_path(sg.out, "latent.tnsr"), res.latent);
      made.add("latent.tnsr");
      write_tensor(join_path(sg.out, "probs.tnsr"), res.probs);
      made.add("probs.tnsr");
      made.write();
      std::size_t fg = 0;
      for (int v : res.labels) fg += v != 0;
      std::printf("segmented %s: %zu/%zu foreground pixels, %zu steps (%s)\n", sg.image.c_str(), fg,
                  res.labels.size(), steps.size(), sg.sampler.c_str());
    });
  }

  // ---- eval ----
  struct {
    std::string pred, truth, ckpt_dir, data, split = "test", steps = "1000", sampler = "ddpm", out;
    int classes = 3, limit = 0;
    std::uint64_t seed = 0;
    bool force = false;
  } ev;
  {
    auto* c = app.add_subcommand("eval",
                                 "score predictions: either --pred vs --truth mask directories, or run a "
                                 "checkpoint over a dataset split");
    c->add_option("--pred", ev.pred, "directory of predicted masks (.pgm)");
    c->add_option("--truth", ev.truth, "directory of reference masks (.pgm)");
    c->add_option("--classes", ev.classes, "class count for directory mode (default 3)");
    c->add_option("--ckpt-dir", ev.ckpt_dir, "checkpoint directory for dataset mode");
    c->add_option("--data", ev.data, "dataset directory for dataset mode");
    c->add_option("--split", ev.split, "train|val|test (default test)");
    c->add_option("--steps", ev.steps, "step count K or explicit list (default 1000)");
    c->add_option("--sampler", ev.sampler, "ddpm|ddim (default ddpm)");
    c->add_option("--seed", ev.seed, "sampling seed (default 0)");
    c->add_option("--limit", ev.limit, "cap the number of scored samples, 0 = all");
    c->add_option("--out", ev.out, "output directory (metrics.csv)")->required();
    c->add_flag("--force", ev.force, "overwrite existing outputs");
    c->callback([&] {
      ensure_dir(ev.out);
      refuse_overwrite(join_path(ev.out, "metrics.csv"), ev.force);
      std::vector<std::pair<std::string, MetricReport>> rows;
      MetricReport mean;
      if (!ev.pred.empty() || !ev.truth.empty()) {
        if (ev.pred.empty() || ev.truth.empty())
          throw config_error("directory mode needs both --pred and --truth");
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(ev.pred))
          if (e.is_regular_file() && e.path().extension() == ".pgm") names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        if (names.empty()) throw io_error(io_error::kind::open_failed, ev.pred, "no .pgm files");
        for (const auto& name : names) {
          const std::vector<int> p = read_mask_p5(join_path(ev.pred, name), ev.classes);
          const std::vector<int> t = read_mask_p5(join_path(ev.truth, name), ev.classes);
          rows.emplace_back(name, evaluate_one(p, t, ev.classes));
          merge_into(mean, rows.back().second);
        }
      } else {
        if (ev.ckpt_dir.empty() || ev.data.empty())
          throw config_error("dataset mode needs --ckpt-dir and --data (or use --pred/--truth)");
        LdsegRuntime rt = runtime_from_dir(ev.ckpt_dir);
        const std::vector<int> steps = parse_steps_arg(ev.steps, rt.sched.T);
        const Dataset ds = load_dataset(ev.data);
        const std::vector<Sample>* split = &ds.test;
        if (ev.split == "train")
          split = &ds.train;
        else if (ev.split == "val")
          split = &ds.val;
        else if (ev.split != "test")
          throw config_error("--split must be train|val|test");
        std::size_t count = split->size();
        if (ev.limit > 0) count = std::min<std::size_t>(count, static_cast<std::size_t>(ev.limit));
        for (std::size_t i = 0; i < count; ++i) {
          const SegOut res =
              segment((*split)[i].image, rt, steps, ev.sampler, ev.seed, static_cast<int>(i));
          char name[24];
          std::snprintf(name, sizeof(name), "%05d", static_cast<int>(i));
          rows.emplace_back(name, evaluate_one(res.labels, (*split)[i].mask, rt.classes));
          merge_into(mean, rows.back().second);
        }
      }
      rows.emplace_back("mean", mean);
      const std::string text = eval_csv_text(rows);
      write_file_bytes(join_path(ev.out, "metrics.csv"), text.data(), text.size());
      Produced made{ev.out, {"metrics.csv"}};
      made.write();
      print_report("eval", mean);
    });
  }

  // ---- bench-steps ----
  struct {
    ConfigOpts co;
    std::string ckpt_dir, out, k_grid, samplers;
    int limit = 0;
    bool force = false;
  } bs;
  {
    auto* c = app.add_subcommand("bench-steps", "DSC and wall-clock across sampling-step counts");
    bs.co.attach(c, false);
    c->add_option("--ckpt-dir", bs.ckpt_dir, "checkpoint directory")->required();
    c->add_option("--k-grid", bs.k_grid, "comma list of K values (default from config)");
    c->add_option("--samplers", bs.samplers, "comma list from {ddpm,ddim} (default from config)");
    c->add_option("--limit", bs.limit, "cap test samples, 0 = all");
    c->add_option("--out", bs.out, "output directory (steps_bench.csv, steps_summary.json)")->required();
    c->add_flag("--force", bs.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = bs.co.resolve(false, "");
      if (!bs.k_grid.empty()) cfg.bench_steps_grid = parse_int_list(bs.k_grid, "--k-grid");
      if (!bs.samplers.empty()) cfg.bench_samplers = parse_str_list(bs.samplers);
      ensure_dir(bs.out);
      refuse_overwrite(join_path(bs.out, "steps_bench.csv"), bs.force);
      LdsegRuntime rt = runtime_from_dir(bs.ckpt_dir);
      Dataset ds = load_dataset(bs.co.data_dir ? *bs.co.data_dir : cfg.data_dir);
      std::vector<Sample> test = ds.test;
      if (bs.limit > 0 && static_cast<int>(test.size()) > bs.limit) test.resize(bs.limit);
      const StepsBenchResult res = bench_steps(rt, test, cfg.bench_steps_grid, cfg.bench_samplers,
                                               cfg.sample_seed);
      write_bench_csv(join_path(bs.out, "steps_bench.csv"), res.records);
      Produced made{bs.out, {"steps_bench.csv"}};
      nlohmann::json summary;
      for (const auto& [sampler, by_k] : res.mean_dsc) {
        for (const auto& [k, d] : by_k) {
          summary[sampler]["mean_dsc"][std::to_string(k)] = d;
          summary[sampler]["total_seconds"][std::to_string(k)] = res.total_secs.at(sampler).at(k);
        }
        summary[sampler]["minimal_k_within_0.005"] = res.minimal_k.at(sampler);
      }
      const std::string js = summary.dump(2) + "\n";
      write_file_bytes(join_path(bs.out, "steps_summary.json"), js.data(), js.size());
      made.add("steps_summary.json");
      if (cfg.svg) {
        std::vector<SvgSeries> dsc_series, sec_series;
        for (const auto& [sampler, by_k] : res.mean_dsc) {
          SvgSeries sd{sampler, {}}, ss{sampler, {}};
          for (const auto& [k, d] : by_k) {
            sd.points.emplace_back(k, d);
            ss.points.emplace_back(k, res.total_secs.at(sampler).at(k));
          }
          dsc_series.push_back(std::move(sd));
          sec_series.push_back(std::move(ss));
        }
        write_svg_chart(join_path(bs.out, "steps_dsc.svg"), "DSC vs sampling steps", "steps K", "combined DSC",
                        dsc_series, true);
        write_svg_chart(join_path(bs.out, "steps_seconds.svg"), "wall-clock vs sampling steps", "steps K",
                        "total seconds", sec_series, true);
        made.add("steps_dsc.svg");
        made.add("steps_seconds.svg");
      }
      made.write();
      for (const auto& [sampler, k] : res.minimal_k)
        std::printf("%s: minimal K within 0.005 of full-step DSC: %d\n", sampler.c_str(), k);
    });
  }

  // ---- bench-size ----
  struct {
    ConfigOpts co;
    std::string root, out, sizes;
    int k = 0;
    bool force = false;
  } bz;
  {
    auto* c = app.add_subcommand("bench-size",
                                 "single-image latency across image sizes; --root holds per-size dirs "
                                 "<root>/<size>/ with ae.ldsc+cd.ldsc, fullres/cd.ldsc, image.pgm");
    bz.co.attach(c, false);
    c->add_option("--root", bz.root, "directory of per-size checkpoint bundles")->required();
    c->add_option("--sizes", bz.sizes, "comma list of sizes (default from config)");
    c->add_option("--steps", bz.k, "sampling steps K (default from config, 50)");
    c->add_option("--out", bz.out, "output directory (size_bench.csv)")->required();
    c->add_flag("--force", bz.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = bz.co.resolve(false, "");
      if (!bz.sizes.empty()) cfg.bench_sizes = parse_int_list(bz.sizes, "--sizes");
      const int K = bz.k > 0 ? bz.k : cfg.bench_size_steps;
      ensure_dir(bz.out);
      refuse_overwrite(join_path(bz.out, "size_bench.csv"), bz.force);
      std::vector<LdsegRuntime> keep;  // stable addresses for the entries
      keep.reserve(cfg.bench_sizes.size() * 2);
      std::vector<SizeEntry> entries;
      for (int size : cfg.bench_sizes) {
        const std::string dir = join_path(bz.root, std::to_string(size));
        keep.push_back(runtime_from_dir(dir));
        LdsegRuntime* a = &keep.back();
        keep.push_back(runtime_from_dir(join_path(dir, "fullres")));
        LdsegRuntime* b = &keep.back();
        SizeEntry e;
        e.size = size;
        e.ldseg = a;
        e.fullres = b;
        e.image = read_image_p5(join_path(dir, "image.pgm"));
        entries.push_back(std::move(e));
      }
      const std::vector<BenchRecord> recs =
          bench_size(entries, K, cfg.timing_repeats, cfg.timing_warmup, cfg.sample_seed);
      write_bench_csv(join_path(bz.out, "size_bench.csv"), recs);
      Produced made{bz.out, {"size_bench.csv"}};
      if (cfg.svg) {
        SvgSeries lat{"ldseg", {}}, pix{"full-res md,id", {}};
        for (const auto& r : recs)
          (r.config_id == "ldseg" ? lat : pix).points.emplace_back(r.size, r.seconds);
        write_svg_chart(join_path(bz.out, "size_seconds.svg"), "single-image latency vs size", "image size",
                        "seconds", {lat, pix}, false);
        made.add("size_seconds.svg");
      }
      made.write();
      for (const auto& r : recs)
        std::printf("%-8s %4dpx: %.3f s at K=%d\n", r.config_id.c_str(), r.size, r.seconds, r.steps);
    });
  }

  // ---- bench-noise ----
  struct {
    ConfigOpts co;
    std::string ckpt_dir, baseline, out, sigmas, sampler = "ddpm";
    int k = 50, limit = 0;
    bool force = false;
  } bn;
  {
    auto* c = app.add_subcommand("bench-noise", "DSC under test-time Gaussian corruption, vs the baseline");
    bn.co.attach(c, false);
    c->add_option("--ckpt-dir", bn.ckpt_dir, "diffusion checkpoint directory")->required();
    c->add_option("--baseline", bn.baseline, "baseline checkpoint (baseline.ldsc)")->required();
    c->add_option("--sigmas", bn.sigmas, "comma list of noise SDs (default from config)");
    c->add_option("--steps", bn.k, "sampling steps K (default 50)");
    c->add_option("--sampler", bn.sampler, "ddpm|ddim (default ddpm)");
    c->add_option("--limit", bn.limit, "cap test samples, 0 = all");
    c->add_option("--out", bn.out, "output directory (noise_bench.csv)")->required();
    c->add_flag("--force", bn.force, "overwrite existing outputs");
    c->callback([&] {
      RunConfig cfg = bn.co.resolve(false, "");
      if (!bn.sigmas.empty()) cfg.bench_sigmas = parse_real_list(bn.sigmas, "--sigmas");
      ensure_dir(bn.out);
      refuse_overwrite(join_path(bn.out, "noise_bench.csv"), bn.force);
      LdsegRuntime rt = runtime_from_dir(bn.ckpt_dir);
      BaselineRuntime blrt = make_baseline_runtime(load_checkpoint(bn.baseline));
      Dataset ds = load_dataset(bn.co.data_dir ? *bn.co.data_dir : cfg.data_dir);
      std::vector<Sample> test = ds.test;
      if (bn.limit > 0 && static_cast<int>(test.size()) > bn.limit) test.resize(bn.limit);
      const std::vector<BenchRecord> recs =
          bench_noise(rt, blrt, test, cfg.bench_sigmas, bn.k, bn.sampler, cfg.sample_seed);
      write_bench_csv(join_path(bn.out, "noise_bench.csv"), recs);
      Produced made{bn.out, {"noise_bench.csv"}};
      if (cfg.svg) {
        SvgSeries s0{"ldseg", {}}, s1{"baseline", {}};
        for (const auto& r : recs)
          (r.config_id == "ldseg" ? s0 : s1).points.emplace_back(r.sigma, r.metrics.combined_dsc);
        write_svg_chart(join_path(bn.out, "noise_dsc.svg"), "DSC vs corruption level", "sigma", "combined DSC",
                        {s0, s1}, false);
        made.add("noise_dsc.svg");
      }
      made.write();
      for (const auto& r : recs)
        std::printf("%-8s sigma=%.2f: DSC %.4f\n", r.config_id.c_str(), r.sigma, r.metrics.combined_dsc);
    });
  }

  // ---- uncertainty ----
  struct {
    std::string image, ckpt_dir, steps = "50", sampler = "ddpm", out;
    int runs = 100;
    std::uint64_t seed = 0;
    bool force = false;
  } un;
  {
    auto* c = app.add_subcommand("uncertainty", "ensemble mean and per-pixel SD over repeated samplings");
    c->add_option("--image", un.image, "input image (P5 .pgm)")->required();
    c->add_option("--ckpt-dir", un.ckpt_dir, "checkpoint directory")->required();
    c->add_option("--runs", un.runs, "ensemble size R (default 100)");
    c->add_option("--steps", un.steps, "step count K or explicit list (default 50)");
    c->add_option("--sampler", un.sampler, "ddpm|ddim (default ddpm)");
    c->add_option("--seed", un.seed, "base seed; run r uses its own stream (default 0)");
    c->add_option("--out", un.out, "output directory (mean/sd TNSR + previews)")->required();
    c->add_flag("--force", un.force, "overwrite existing outputs");
    c->callback([&] {
      LdsegRuntime rt = runtime_from_dir(un.ckpt_dir);
      const std::vector<int> steps = parse_steps_arg(un.steps, rt.sched.T);
      const Tensor image = read_image_p5(un.image);
      ensure_dir(un.out);
      refuse_overwrite(join_path(un.out, "sd_map.tnsr"), un.force);
      const UncertaintyResult res = estimate_uncertainty(image, rt, steps, un.sampler, un.runs, un.seed);
      write_tensor(join_path(un.out, "mean_probs.tnsr"), res.mean_probs);
      write_tensor(join_path(un.out, "sd_map.tnsr"), res.sd_map);
      // previews: expected label value and SD, both clamped into [0,1] grey
      Tensor mean_grey({1, 1, rt.H, rt.W});
      for (int y = 0; y < rt.H; ++y)
        for (int x = 0; x < rt.W; ++x) {
          float e = 0;
          for (int cch = 0; cch < rt.classes; ++cch) e += cch * res.mean_probs.at4(0, cch, y, x);
          mean_grey.at4(0, 0, y, x) = std::min(1.0f, e / static_cast<float>(rt.classes - 1));
        }
      Tensor sd_grey = res.sd_map;
      for (std::size_t i = 0; i < sd_grey.numel(); ++i)
        sd_grey.ptr()[i] = std::min(1.0f, std::max(0.0f, sd_grey.ptr()[i]));
      write_image_p5(join_path(un.out, "mean_preview.pgm"), mean_grey);
      write_image_p5(join_path(un.out, "sd_preview.pgm"), sd_grey);
      Produced made{un.out, {"mean_probs.tnsr", "sd_map.tnsr", "mean_preview.pgm", "sd_preview.pgm"}};
      made.write();
      double peak = 0;
      for (std::size_t i = 0; i < res.sd_map.numel(); ++i)
        peak = std::max(peak, static_cast<double>(res.sd_map.ptr()[i]));
      std::printf("uncertainty over %d runs: peak per-pixel SD %.4f\n", res.runs, peak);
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const value_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const shape_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const divergence_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const checkpoint_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 4;
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
