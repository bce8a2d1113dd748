// end-to-end checks of the command-line binary: exit codes, file outputs,
// overwrite discipline, determinism, and config/flag precedence, all through
// real subprocess invocations

#include "common.hpp"

#ifndef LDSEG_CLI_PATH
#error "compile with -DLDSEG_CLI_PATH=\"/path/to/ldseg\""
#endif

using namespace ldseg;

namespace {

const std::string kBin = LDSEG_CLI_PATH;

// one generated dataset + trained checkpoint pair shared by the tests; built
// through the CLI itself so the happy path is exercised exactly once
struct Workspace {
  lt::DirGuard dir{"cliws"};
  std::string data, ckpt, config;
  bool ok = false;
  std::string why;
};

const Workspace& ws() {
  static Workspace w = [] {
    Workspace out;
    out.data = out.dir / "data";
    out.ckpt = out.dir / "ckpt";
    out.config = out.dir / "tiny.toml";
    const std::string toml = R"([data]
n = 12
size = 32

[model]
depth = 2
base_width = 4
channel_mult = [1, 2, 2]
den_depth = 1
den_base = 8
den_mult = [1, 2]
heads = 2
time_dim = 8
gn_groups = 2

[train]
ae_epochs = 2
cd_epochs = 2
baseline_epochs = 1
T = 40

[sample]
steps = 4

[bench]
steps_grid = [1, 4]
sigmas = [0.0, 0.2]
)";
    write_file_bytes(out.config, toml.data(), toml.size());
    auto step = [&](const std::string& what, const std::string& cmd) {
      if (!out.ok && !out.why.empty()) return;
      const lt::RunResult r = lt::run_cmd(cmd, out.dir / (what + ".log"));
      if (r.code != 0) out.why = what + " exited " + std::to_string(r.code) + ":\n" + r.output;
    };
    step("gen", kBin + " gen-data --config " + out.config + " --out " + out.data);
    step("ae", kBin + " train-ae --config " + out.config + " --data " + out.data + " --out " + out.dir / "ae");
    step("cd", kBin + " train-cd --config " + out.config + " --data " + out.data + " --ae-checkpoint " +
                   out.dir / "ae/ae.ldsc" + " --out " + out.ckpt);
    out.ok = out.why.empty();
    return out;
  }();
  return w;
}

#define NEED_WS() \
  ASSERT_TRUE(ws().ok) << ws().why

std::string first_test_image() {
  const auto rows = read_manifest(ws().data + "/manifest.tsv");
  for (const auto& r : rows)
    if (r.split == "test") return ws().data + "/" + r.image;
  return "";
}

}  // namespace

TEST(CliGenData, DeterministicBytesAndOverwriteDiscipline) {
  NEED_WS();
  lt::DirGuard dir("gen2");
  const std::string a = dir / "a", b = dir / "b";
  const std::string base = kBin + " gen-data --n 10 --size 32 --seed 5 --out ";
  ASSERT_EQ(lt::run_cmd(base + a, dir / "1.log").code, 0);
  ASSERT_EQ(lt::run_cmd(base + b, dir / "2.log").code, 0);
  for (const char* rel : {"manifest.tsv", "meta.json", "images/00000.pgm", "masks/00009.pgm"})
    EXPECT_EQ(lt::slurp(a + "/" + rel), lt::slurp(b + "/" + rel)) << rel;
  // produced_files.txt names every artifact
  const auto raw = lt::slurp(a + "/produced_files.txt");
  const std::string listing(raw.begin(), raw.end());
  EXPECT_NE(listing.find("manifest.tsv"), std::string::npos);
  EXPECT_NE(listing.find("images/00000.pgm"), std::string::npos);
  // refusing to clobber: exit 1 and an explanation; --force overwrites
  const lt::RunResult refuse = lt::run_cmd(base + a, dir / "3.log");
  EXPECT_EQ(refuse.code, 1);
  EXPECT_NE(refuse.output.find("--force"), std::string::npos);
  EXPECT_EQ(lt::run_cmd(base + a + " --force", dir / "4.log").code, 0);
}

TEST(CliGenData, RejectsIndivisibleSize) {
  const lt::RunResult r = lt::run_cmd(kBin + " gen-data --n 10 --size 63 --out /tmp/never_written_63",
                                      std::string("/tmp/ldseg_cli_63.log"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("16"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists("/tmp/never_written_63"));
}

TEST(CliTrain, OutputsCheckpointLossCsvAndManifest) {
  NEED_WS();
  EXPECT_TRUE(std::filesystem::exists(ws().ckpt + "/cd.ldsc"));
  EXPECT_TRUE(std::filesystem::exists(ws().ckpt + "/ae.ldsc"));  // copied beside the denoiser
  const auto rows = read_loss_csv(ws().ckpt + "/cd_loss.csv");
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().epoch, 0);
  EXPECT_EQ(rows.back().epoch, 1);
  const Checkpoint cd = load_checkpoint(ws().ckpt + "/cd.ldsc");
  EXPECT_EQ(cd.kind, "denoiser");
  EXPECT_EQ(cd.meta.at("data").at("H").get<int>(), 32);
  // flags override the config: one extra epoch on top of the same file
  lt::DirGuard dir("flagwin");
  const lt::RunResult r = lt::run_cmd(kBin + " train-ae --config " + ws().config + " --data " + ws().data +
                                          " --epochs 1 --out " + dir / "ae1",
                                      dir / "t.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto short_rows = read_loss_csv(dir / "ae1/ae_loss.csv");
  EXPECT_EQ(short_rows.back().epoch, 0);
}

TEST(CliTrain, ResumeContinuesFromRecordedEpoch) {
  NEED_WS();
  lt::DirGuard dir("resume");
  const std::string out = dir / "ae";
  ASSERT_EQ(lt::run_cmd(kBin + " train-ae --config " + ws().config + " --data " + ws().data + " --epochs 2 --out " + out,
                        dir / "1.log")
                .code,
            0);
  const lt::RunResult r = lt::run_cmd(kBin + " train-ae --config " + ws().config + " --data " + ws().data +
                                          " --epochs 4 --resume " + out + "/ae.ldsc --out " + out,
                                      dir / "2.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = read_loss_csv(out + "/ae_loss.csv");
  EXPECT_EQ(rows.front().epoch, 2);  // the csv covers the resumed leg
  EXPECT_EQ(rows.back().epoch, 3);
  EXPECT_EQ(load_checkpoint(out + "/ae.ldsc").meta.at("train").at("epochs_done").get<int>(), 4);
}

TEST(CliTrain, MissingAutoencoderCheckpointIsAUsageError) {
  NEED_WS();
  const lt::RunResult r = lt::run_cmd(kBin + " train-cd --config " + ws().config + " --data " + ws().data +
                                          " --out /tmp/never_written_cd",
                                      std::string("/tmp/ldseg_cli_noae.log"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--ae-checkpoint"), std::string::npos);
}

TEST(CliSegment, CountAndExplicitListAgreeByteForByte) {
  NEED_WS();
  lt::DirGuard dir("steps_eq");
  const std::string img = first_test_image();
  ASSERT_FALSE(img.empty());
  const std::vector<int> ladder = evenly_spaced_subsequence(4, 40);
  std::string list;
  for (std::size_t i = 0; i < ladder.size(); ++i) list += (i ? "," : "") + std::to_string(ladder[i]);
  const std::string common = kBin + " segment --image " + img + " --ckpt-dir " + ws().ckpt + " --seed 3 --out ";
  ASSERT_EQ(lt::run_cmd(common + dir / "bycount" + " --steps 4", dir / "1.log").code, 0);
  ASSERT_EQ(lt::run_cmd(common + dir / "bylist" + " --steps " + list, dir / "2.log").code, 0);
  EXPECT_EQ(lt::slurp(dir / "bycount/mask.pgm"), lt::slurp(dir / "bylist/mask.pgm"));
  EXPECT_EQ(lt::slurp(dir / "bycount/probs.tnsr"), lt::slurp(dir / "bylist/probs.tnsr"));
  // identical invocations are byte-identical too
  ASSERT_EQ(lt::run_cmd(common + dir / "again" + " --steps 4", dir / "3.log").code, 0);
  EXPECT_EQ(lt::slurp(dir / "bycount/mask.pgm"), lt::slurp(dir / "again/mask.pgm"));
}

TEST(CliSegment, TrajectoryDumpWalksTheLadder) {
  NEED_WS();
  lt::DirGuard dir("traj");
  const lt::RunResult r = lt::run_cmd(kBin + " segment --image " + first_test_image() + " --ckpt-dir " + ws().ckpt +
                                          " --steps 1,14,27,40 --dump-trajectory --out " + dir / "o",
                                      dir / "1.log");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* name : {"m_0040.tnsr", "m_0027.tnsr", "m_0014.tnsr", "m_0001.tnsr", "m_0000.tnsr"})
    EXPECT_TRUE(std::filesystem::exists(dir / (std::string("o/trajectory/") + name))) << name;
  const Tensor final_state = read_tensor(dir / "o/trajectory/m_0000.tnsr");
  const Tensor latent = read_tensor(dir / "o/latent.tnsr");
  EXPECT_EQ(final_state.data, latent.data);
}

TEST(CliSegment, UsageErrorsExitTwo) {
  NEED_WS();
  const std::string img = first_test_image();
  auto code = [&](const std::string& args) {
    return lt::run_cmd(kBin + " " + args, std::string("/tmp/ldseg_cli_use.log")).code;
  };
  EXPECT_EQ(code("segment --image " + img + " --ckpt-dir " + ws().ckpt + " --steps 0 --out /tmp/nw1"), 2);
  EXPECT_EQ(code("segment --image " + img + " --ckpt-dir " + ws().ckpt + " --steps 99999 --out /tmp/nw2"), 2);
  EXPECT_EQ(code("segment --image " + img + " --ckpt-dir " + ws().ckpt + " --sampler euler --out /tmp/nw3"), 2);
  EXPECT_EQ(code("segment --image " + img + " --ckpt-dir " + ws().ckpt + " --bogus-flag --out /tmp/nw4"), 2);
  EXPECT_EQ(code("no-such-command"), 2);
}

TEST(CliSegment, WrongCheckpointKindExitsFour) {
  NEED_WS();
  lt::DirGuard dir("wrongkind");
  std::filesystem::create_directories(dir / "fake");
  std::filesystem::copy_file(ws().ckpt + "/ae.ldsc", dir / "fake/cd.ldsc");
  std::filesystem::copy_file(ws().ckpt + "/ae.ldsc", dir / "fake/ae.ldsc");
  const lt::RunResult r = lt::run_cmd(kBin + " segment --image " + first_test_image() + " --ckpt-dir " +
                                          dir / "fake" + " --steps 1 --out " + dir / "o",
                                      dir / "1.log");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find("denoiser"), std::string::npos);
}

TEST(CliConfig, BadKeysAreNamedAndExitTwo) {
  lt::DirGuard dir("badcfg");
  const std::string bad = "[train]\nlearning_rate = 0.1\n";
  write_file_bytes(dir / "bad.toml", bad.data(), bad.size());
  const lt::RunResult r =
      lt::run_cmd(kBin + " gen-data --config " + dir / "bad.toml" + " --out " + dir / "o", dir / "1.log");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.learning_rate"), std::string::npos);
}

TEST(CliEval, DirectoryModeScoresPerfectAgreement) {
  NEED_WS();
  lt::DirGuard dir("evald");
  std::filesystem::create_directories(dir / "m");
  const auto rows = read_manifest(ws().data + "/manifest.tsv");
  int copied = 0;
  for (const auto& r : rows)
    if (r.split == "test") {
      std::filesystem::copy_file(ws().data + "/" + r.mask,
                                 dir / ("m/" + std::filesystem::path(r.mask).filename().string()));
      ++copied;
    }
  ASSERT_GT(copied, 0);
  const lt::RunResult r = lt::run_cmd(
      kBin + " eval --pred " + dir / "m" + " --truth " + dir / "m" + " --out " + dir / "o", dir / "1.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto raw = lt::slurp(dir / "o/metrics.csv");
  const std::string csv(raw.begin(), raw.end());
  EXPECT_NE(csv.find("name,combined_dsc,combined_iou,class_dsc,class_iou"), std::string::npos);
  EXPECT_NE(csv.find("mean,1,1"), std::string::npos);
}

TEST(CliEval, DatasetModeWritesPerSampleRows) {
  NEED_WS();
  lt::DirGuard dir("evalds");
  const lt::RunResult r = lt::run_cmd(kBin + " eval --ckpt-dir " + ws().ckpt + " --data " + ws().data +
                                          " --steps 2 --limit 2 --out " + dir / "o",
                                      dir / "1.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto raw = lt::slurp(dir / "o/metrics.csv");
  const std::string csv(raw.begin(), raw.end());
  // two scored rows plus the mean row
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_NE(csv.find("mean,"), std::string::npos);
}

TEST(CliBenchSteps, EmitsCsvSummaryAndCharts) {
  NEED_WS();
  lt::DirGuard dir("bsteps");
  const lt::RunResult r = lt::run_cmd(kBin + " bench-steps --config " + ws().config + " --ckpt-dir " + ws().ckpt +
                                          " --data " + ws().data + " --k-grid 1,4 --samplers ddim --limit 2 --out " +
                                          dir / "o",
                                      dir / "1.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto recs = read_bench_csv(dir / "o/steps_bench.csv");
  EXPECT_EQ(recs.size(), 4u);  // 2 K values x 2 samples
  const auto raw = lt::slurp(dir / "o/steps_summary.json");
  const nlohmann::json j = nlohmann::json::parse(std::string(raw.begin(), raw.end()));
  ASSERT_TRUE(j.contains("ddim"));
  EXPECT_TRUE(j["ddim"].contains("minimal_k_within_0.005"));
  EXPECT_TRUE(std::filesystem::exists(dir / "o/steps_dsc.svg"));
  EXPECT_TRUE(std::filesystem::exists(dir / "o/steps_seconds.svg"));
}

TEST(CliUncertainty, SingleRunGivesBlackSdPreview) {
  NEED_WS();
  lt::DirGuard dir("unc");
  const lt::RunResult r = lt::run_cmd(kBin + " uncertainty --image " + first_test_image() + " --ckpt-dir " +
                                          ws().ckpt + " --runs 1 --steps 2 --out " + dir / "o",
                                      dir / "1.log");
  ASSERT_EQ(r.code, 0) << r.output;
  const P5Image sd = read_p5(dir / "o/sd_preview.pgm");
  for (unsigned char b : sd.bytes) ASSERT_EQ(b, 0);
  const Tensor mean = read_tensor(dir / "o/mean_probs.tnsr");
  ASSERT_TRUE((mean.shape == std::vector<int>{1, 3, 32, 32}));
}
