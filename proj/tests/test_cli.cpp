#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Sandbox {
  fs::path dir;
  Sandbox() {
    dir = fs::temp_directory_path() / ("ppc_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the CLI with stderr captured to `log`; returns the exit status.
int ppc(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(PPC_CLI_PATH) + " " + args + " >/dev/null 2>" + log;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
    rows.push_back(f);
  }
  return rows;
}

}  // namespace

TEST_CASE("cli generate is reproducible and guards outputs") {
  Sandbox box;
  const std::string log = box / "log";
  const std::string a = box / "a.ppcd", b = box / "b.ppcd";
  REQUIRE(ppc("generate --kind sine --count 10 --seed 5 --with-changepoints --out " + a, log) == 0);
  REQUIRE(ppc("generate --kind sine --count 10 --seed 5 --with-changepoints --out " + b, log) == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(fs::exists(a + ".run.cfg"));
  CHECK(slurp(a + ".run.cfg").find("dataset.seed = 5") != std::string::npos);

  CHECK(ppc("generate --kind sine --count 10 --seed 5 --out " + a, log) == 2);
  CHECK(slurp(log).find("--force") != std::string::npos);
  CHECK(ppc("generate --kind sine --count 10 --seed 6 --out " + a + " --force", log) == 0);
  CHECK(slurp(a) != slurp(b));

  CHECK(ppc("generate --kind sine --count 0 --seed 5 --out " + (box / "c.ppcd"), log) == 2);
  CHECK(ppc("generate --kind sine --count 10 --out " + (box / "c.ppcd"), log) == 2);
  CHECK(slurp(log).find("--seed") != std::string::npos);
  CHECK(ppc("generate --kind cosine --count 10 --seed 1 --out " + (box / "c.ppcd"), log) == 2);
  CHECK(ppc("frobnicate", log) == 2);
  CHECK_FALSE(fs::exists(box / "c.ppcd"));
}

TEST_CASE("cli replays a resolved run config") {
  Sandbox box;
  const std::string log = box / "log";
  const std::string a = box / "a.ppcd";
  REQUIRE(ppc("generate --kind prop --count 20 --seed 9 --out " + a, log) == 0);
  // The resolved file names its own output; replaying it with --force rewrites identical bytes.
  const std::string before = slurp(a);
  fs::copy_file(a + ".run.cfg", box / "replay.cfg");
  REQUIRE(ppc("generate --config " + (box / "replay.cfg") + " --force", log) == 0);
  CHECK(slurp(a) == before);

  std::ofstream(box / "bad.cfg") << "dataset.kind = prop\ndataset.colour = red\n";
  CHECK(ppc("generate --config " + (box / "bad.cfg") + " --count 3 --seed 1 --out " + (box / "b.ppcd"), log) == 2);
  CHECK(slurp(log).find("dataset.colour") != std::string::npos);
}

TEST_CASE("cli train, score and evaluate") {
  Sandbox box;
  const std::string log = box / "log";
  const std::string tr = box / "tr.ppcd", va = box / "va.ppcd", te = box / "te.ppcd";
  REQUIRE(ppc("generate --kind prop --count 64 --seed 1 --out " + tr, log) == 0);
  REQUIRE(ppc("generate --kind prop --count 32 --seed 2 --out " + va, log) == 0);
  REQUIRE(ppc("generate --kind prop --count 40 --seed 3 --out " + te, log) == 0);

  const std::string train_args = "train --preset proportionality --seed 4 --train " + tr + " --val " + va +
                                 " --warmup-iters 3 --max-iters 6 --eval-every 3 --batch-size 8";
  CHECK(ppc(train_args + " --out " + (box / "m.ckpt"), log) == 0);
  CHECK(ppc(train_args + " --out " + (box / "n.ckpt"), log) == 0);
  CHECK(slurp(box / "m.ckpt") == slurp(box / "n.ckpt"));
  CHECK(slurp(box / "m.ckpt.history.csv") == slurp(box / "n.ckpt.history.csv"));
  CHECK(fs::exists(box / "m.ckpt.run.cfg"));
  CHECK(read_csv(box / "m.ckpt.history.csv").size() > 1);

  const std::string ckpt_bytes = slurp(box / "m.ckpt");
  fs::copy_file(box / "m.ckpt.run.cfg", box / "train.cfg");
  REQUIRE(ppc("train --config " + (box / "train.cfg") + " --force", log) == 0);
  CHECK(slurp(box / "m.ckpt") == ckpt_bytes);

  CHECK(ppc("train --preset proportionality --train " + tr + " --val " + va + " --out " + (box / "x.ckpt"), log) == 2);
  const std::string missing = box / "missing.ppcd";
  CHECK(ppc("train --preset proportionality --seed 1 --train " + missing + " --val " + va + " --out " +
                (box / "x.ckpt"),
            log) == 3);
  CHECK(slurp(log).find(missing) != std::string::npos);

  const std::string scores = box / "s.csv";
  REQUIRE(ppc("score --checkpoint " + (box / "m.ckpt") + " --data " + te + " --out " + scores, log) == 0);
  REQUIRE(ppc("score --checkpoint " + (box / "m.ckpt") + " --data " + te + " --out " + (box / "s2.csv"), log) == 0);
  CHECK(slurp(scores) == slurp(box / "s2.csv"));
  fs::copy_file(scores + ".run.cfg", box / "score.cfg");
  REQUIRE(ppc("score --config " + (box / "score.cfg") + " --out " + (box / "s3.csv"), log) == 0);
  CHECK(slurp(box / "s3.csv") == slurp(scores));
  const auto rows = read_csv(scores);
  REQUIRE(rows.size() > 1);
  CHECK(rows[0] == std::vector<std::string>{"sequence_id", "step_index", "log_likelihood", "distance", "p_step",
                                            "p_sequence", "label"});
  std::set<std::string> ids;
  for (std::size_t i = 1; i < rows.size(); ++i) ids.insert(rows[i][0]);
  CHECK(ids.size() == 40);

  const std::string sine = box / "sine.ppcd";
  REQUIRE(ppc("generate --kind sine --count 4 --seed 1 --out " + sine, log) == 0);
  CHECK(ppc("score --checkpoint " + (box / "m.ckpt") + " --data " + sine + " --out " + (box / "bad.csv"), log) == 3);

  // Recount the confusion matrix at a fixed alpha by hand: flagged when p_sequence < alpha.
  std::ofstream lab(box / "labelled.csv");
  lab << "sequence_id,step_index,log_likelihood,distance,p_step,p_sequence,label\n";
  const std::vector<double> ps = {0.01, 0.2, 0.04, 0.6, 0.049, 0.9, 0.05, 0.3};
  const std::vector<int> ys = {1, 1, 0, 0, 1, 0, 1, 0};
  for (std::size_t i = 0; i < ps.size(); ++i) {
    lab << i << ",0,0,0," << ps[i] << ',' << ps[i] << ',' << ys[i] << '\n';
    lab << i << ",1,0,0," << ps[i] << ',' << ps[i] << ',' << ys[i] << '\n';
  }
  lab.close();
  const std::string metrics = box / "m.json";
  REQUIRE(ppc("evaluate --scores " + (box / "labelled.csv") + " --threshold 0.05 --out " + metrics, log) == 0);
  const auto j = nlohmann::json::parse(slurp(metrics));
  CHECK(j["sequences"] == 8);
  CHECK(j["counts"]["tp"] == 2);
  CHECK(j["counts"]["fn"] == 2);
  CHECK(j["counts"]["fp"] == 1);
  CHECK(j["counts"]["tn"] == 3);
  CHECK(j["alpha"] == 0.05);
  CHECK(j["recall"].get<double>() == doctest::Approx(0.5));
  CHECK(ppc("evaluate --scores " + (box / "labelled.csv") + " --threshold auto --out " + (box / "auto.json"), log) == 0);
  CHECK(ppc("evaluate --scores " + (box / "labelled.csv") + " --threshold 1.5 --out " + (box / "x.json"), log) == 2);

  std::ofstream(box / "nolabel.csv") << "sequence_id,p_sequence\n0,0.5\n";
  CHECK(ppc("evaluate --scores " + (box / "nolabel.csv") + " --out " + (box / "y.json"), log) == 3);
  CHECK(slurp(log).find("label") != std::string::npos);

  CHECK(ppc("grid --checkpoint " + (box / "m.ckpt") + " --resolution 0 --seed 1 --out " + (box / "g.csv"), log) == 2);
  CHECK(ppc("grid --checkpoint " + (box / "m.ckpt") + " --resolution 1 --out " + (box / "g.csv"), log) == 2);
}

TEST_CASE("cli prop-test with one run marks the spread as missing") {
  Sandbox box;
  const std::string log = box / "log";
  const std::string out = box / "prop.csv";
  REQUIRE(ppc("prop-test --runs 1 --seed 3 --count 64 --warmup-iters 2 --max-iters 4 --out " + out, log) == 0);
  const auto rows = read_csv(out);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] ==
        std::vector<std::string>{"x1", "mu", "sigma", "mu_hat_mean", "mu_hat_sd", "sigma_hat_mean", "sigma_hat_sd", "runs"});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i][4] == "NA");
    CHECK(rows[i][6] == "NA");
    CHECK(rows[i][7] == "1");
  }
  CHECK(fs::exists(out + ".run.cfg"));
  CHECK(ppc("prop-test --runs 0 --seed 3 --out " + (box / "p0.csv"), log) == 2);
}
