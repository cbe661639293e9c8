#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"

// End-to-end checks of the command-line interface: exit codes, produced
// files, and byte-identical reruns. XREFINE_CLI_PATH points at the binary.

namespace fs = std::filesystem;

namespace {

const char* kCli = XREFINE_CLI_PATH;

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "xrefine_cli_test";
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd =
      std::string(kCli) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status < 0) return -1;
#ifdef WEXITSTATUS
  return WEXITSTATUS(status);
#else
  return status;
#endif
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

}  // namespace

TEST_CASE("cli: no subcommand or unknown flags fail with exit 1") {
  CHECK(run("") == 1);
  CHECK(run("synth --no-such-flag") == 1);
  CHECK(run("bogus-subcommand") == 1);
  CHECK(run("--help") == 0);
  CHECK(run("synth --help") == 0);
}

TEST_CASE("cli: synth writes images, matches and a manifest deterministically") {
  const fs::path dir = work_dir();
  const fs::path out1 = dir / "synth1";
  const fs::path out2 = dir / "synth2";
  fs::remove_all(out1);
  fs::remove_all(out2);

  const std::string args = " --pairs 2 --matches 24 --noise 1.0 --seed 9 --width 160 --height 160";
  REQUIRE(run("synth --out " + out1.string() + args) == 0);
  REQUIRE(run("synth --out " + out2.string() + args) == 0);

  for (const char* name :
       {"pair_000_a.pgm", "pair_000_b.pgm", "pair_000_matches.txt", "pair_000_exact.txt",
        "pair_001_a.pgm", "pair_001_b.pgm", "manifest.txt"}) {
    CHECK(fs::exists(out1 / name));
    CHECK(slurp(out1 / name) == slurp(out2 / name));  // byte-identical rerun
  }

  const std::string manifest = slurp(out1 / "manifest.txt");
  CHECK(manifest.find("pairs") != std::string::npos);
  CHECK(manifest.find("essential") != std::string::npos);
}

TEST_CASE("cli: train then refine, reruns byte-identical") {
  const fs::path dir = work_dir();
  const fs::path synth = dir / "data";
  fs::remove_all(synth);
  REQUIRE(run("synth --out " + synth.string() +
              " --pairs 1 --matches 32 --noise 1.5 --seed 4 --width 160 --height 160") == 0);

  const fs::path t1 = dir / "train1";
  const fs::path t2 = dir / "train2";
  fs::remove_all(t1);
  fs::remove_all(t2);
  const std::string targs =
      " --seed 3 --epochs 1 --pairs-per-epoch 2 --matches 16 --batch-pairs 2"
      " --val-pairs 2 --val-matches 16 --threads 1";
  REQUIRE(run("train --out " + t1.string() + targs) == 0);
  REQUIRE(run("train --out " + t2.string() + targs) == 0);

  for (const char* name : {"best.xrw", "state.xrs", "train_log.txt", "best_checkpoint.txt"})
    CHECK(slurp(t1 / name) == slurp(t2 / name));

  const fs::path r1 = dir / "refined1.txt";
  const fs::path r2 = dir / "refined2.txt";
  const std::string rargs = " --image-a " + (synth / "pair_000_a.pgm").string() +
                            " --image-b " + (synth / "pair_000_b.pgm").string() +
                            " --matches " + (synth / "pair_000_matches.txt").string() +
                            " --weights " + (t1 / "best.xrw").string();
  REQUIRE(run("refine" + rargs + " --out " + r1.string()) == 0);
  REQUIRE(run("refine" + rargs + " --out " + r2.string()) == 0);
  CHECK(slurp(r1) == slurp(r2));

  // refined list parses and has one row per input row
  const std::string refined = slurp(r1);
  int rows = 0;
  for (char ch : refined)
    if (ch == '\n') ++rows;
  const std::string original = slurp(synth / "pair_000_matches.txt");
  int orig_rows = 0;
  for (char ch : original)
    if (ch == '\n') ++orig_rows;
  CHECK(rows >= orig_rows);  // refined adds a header comment
}

TEST_CASE("cli: missing inputs exit with the data-error code") {
  const fs::path dir = work_dir();
  CHECK(run("refine --image-a /nonexistent/a.pgm --image-b /nonexistent/b.pgm"
            " --matches /nonexistent/m.txt --weights /nonexistent/w.xrw --out " +
            (dir / "x.txt").string()) == 2);
  CHECK(run("eval-pose --out " + (dir / "p.txt").string() +
            " --weights /nonexistent/w.xrw --pairs 1") == 2);
}

TEST_CASE("cli: eval-pose without weights produces a deterministic report") {
  const fs::path dir = work_dir();
  const fs::path p1 = dir / "pose1.txt";
  const fs::path p2 = dir / "pose2.txt";
  const std::string args =
      " --pairs 2 --matches 64 --reps 1 --iterations 200 --seed 12 --threads 1";
  REQUIRE(run("eval-pose --out " + p1.string() + args) == 0);
  REQUIRE(run("eval-pose --out " + p2.string() + args) == 0);
  CHECK(slurp(p1) == slurp(p2));
  const std::string rep = slurp(p1);
  CHECK(rep.find("unrefined") != std::string::npos);
  CHECK(rep.find("auc") != std::string::npos);
}

TEST_CASE("cli: gradcheck subcommand passes a quick round") {
  CHECK(run("gradcheck --seed 2 --rounds 1 --tolerance 1e-4") == 0);
  // an absurd tolerance must fail with the numerical-error exit code
  CHECK(run("gradcheck --seed 2 --rounds 1 --tolerance 1e-18") == 3);
}
