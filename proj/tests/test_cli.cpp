#include "modarith/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

using namespace modarith;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = fs::path(MODARITH_SOURCE_DIR) / "fixtures";
const std::string kConfig = (kFixtures / "config.json").string();

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "modarith");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("modarith_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path file(const std::string& name, const std::string& text) const {
    const fs::path p = path_ / name;
    std::ofstream(p) << text;
    return p;
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

// Two tokens: D is uniform and cheap, B puts all mass on token 0 and costs 10.
std::string two_token_config(const TempDir& dir) {
  dir.file("vocab.txt", "#:BOS=0\n#:EOS=1\np\nq\n");
  return dir
      .file("config.json", R"({
  "vocabulary": "vocab.txt",
  "providers": [
    {"name": "D", "kind": "tabular", "default": [0.5, 0.5], "cost": 1.0},
    {"name": "B", "kind": "tabular", "default": [1.0, 0.0], "cost": 10.0}
  ]
})")
      .string();
}

}  // namespace

TEST(Generate, SameSeedSameBytes) {
  const std::vector<std::string> args{"generate", "--config", kConfig, "--formula", "M", "--prompt", "the cat", "--max-tokens", "5",
                                      "--seed", "7", "--json"};
  const Outcome a = run(args);
  const Outcome b = run(args);
  ASSERT_EQ(a.code, kExitOk) << a.err;
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_EQ(j["seed"], 7);
  EXPECT_LE(j["tokens"].size(), 5u);
  EXPECT_EQ(j["tokens"].size(), j["logprobs"].size());
}

TEST(Generate, SpeculativeUnitFactorsMatchPlainBytes) {
  std::vector<std::string> args{"generate", "--config", kConfig, "--formula", "M - 0.6*Mtox + 0.5*Ma", "--prompt", "the cat",
                                "--max-tokens", "12", "--seed", "3", "--json"};
  const Outcome plain = run(args);
  args.push_back("--speculative");
  const Outcome spec = run(args);
  ASSERT_EQ(plain.code, kExitOk) << plain.err;
  ASSERT_EQ(spec.code, kExitOk) << spec.err;
  EXPECT_EQ(plain.out, spec.out);
}

TEST(Generate, PlainTextOutput) {
  const Outcome o = run({"generate", "--config", kConfig, "--formula", "M + 0.5*Ma", "--prompt", "the cat", "--max-tokens", "4"});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  EXPECT_FALSE(o.out.empty());
  EXPECT_EQ(o.out.back(), '\n');
}

TEST(Generate, AutoFactors) {
  const Outcome o = run({"generate", "--config", kConfig, "--formula", "supersede(A, M) + 0.3*Ma", "--prompt", "the cat",
                         "--max-tokens", "8", "--speculative", "--factors", "auto", "--json"});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  EXPECT_GT(nlohmann::json::parse(o.out)["tokens"].size(), 0u);
}

TEST(Generate, UnknownNameShowsTheSpan) {
  const Outcome o = run({"generate", "--config", kConfig, "--formula", "M + 0.5*Mx", "--prompt", "the cat"});
  EXPECT_EQ(o.code, kExitUser);
  EXPECT_NE(o.err.find("Mx"), std::string::npos) << o.err;
  EXPECT_NE(o.err.find("  M + 0.5*Mx\n          ^^\n"), std::string::npos) << o.err;
}

TEST(Generate, UserErrors) {
  EXPECT_EQ(run({"generate", "--config", kConfig, "--formula", "M +", "--prompt", "the"}).code, kExitUser);
  EXPECT_EQ(run({"generate", "--config", kConfig, "--formula", "M", "--prompt", "zyzzyva"}).code, kExitUser);
  EXPECT_EQ(run({"generate", "--config", kConfig, "--formula", "M", "--factors", "auto"}).code, kExitUser);
  EXPECT_EQ(run({"generate", "--config", "/nonexistent.json", "--formula", "M"}).code, kExitUser);
  EXPECT_EQ(run({"generate", "--config", kConfig}).code, kExitUser);
  EXPECT_EQ(run({"bogus"}).code, kExitUser);
  EXPECT_EQ(run({"generate", "--config", kConfig, "--formula", "M", "--mode", "loose"}).code, kExitUser);
}

TEST(Generate, ConfigFromEnvironment) {
  ::setenv(kConfigEnv, kConfig.c_str(), 1);
  const Outcome env = run({"generate", "--formula", "M", "--prompt", "the cat", "--max-tokens", "5", "--seed", "1", "--json"});
  ::unsetenv(kConfigEnv);
  const Outcome flag = run({"generate", "--config", kConfig, "--formula", "M", "--prompt", "the cat", "--max-tokens", "5", "--seed", "1",
                            "--json"});
  ASSERT_EQ(env.code, kExitOk) << env.err;
  EXPECT_EQ(env.out, flag.out);
  const Outcome none = run({"generate", "--formula", "M"});
  EXPECT_EQ(none.code, kExitUser);
  EXPECT_NE(none.err.find(kConfigEnv), std::string::npos);
}

TEST(Generate, UnreachableBackendExitsThree) {
  TempDir dir;
  dir.file("vocab.txt", "#:BOS=0\n#:EOS=1\np\nq\n");
  const auto cfg = dir.file("config.json", R"({
  "vocabulary": "vocab.txt",
  "providers": [{"name": "R", "kind": "remote", "endpoint": "http://127.0.0.1:1", "timeout_ms": 200, "retries": 0}]
})");
  const Outcome o = run({"generate", "--config", cfg.string(), "--formula", "R", "--prompt", "p", "--max-tokens", "2"});
  EXPECT_EQ(o.code, kExitBackend) << o.err;
  EXPECT_NE(o.err.find("BackendUnavailable"), std::string::npos) << o.err;
}

// --- tune ------------------------------------------------------------------

TEST(Tune, IdenticalSourcesWarnAndUseSMax) {
  TempDir dir;
  const auto prompts = dir.file("prompts.txt", "the cat\na bird sat\n");
  const Outcome o = run({"tune", "--config", kConfig, "--mode", "kl_optimal", "--formula", "M + M", "--prompts", prompts.string(),
                         "--samples", "2", "--s-max", "16"});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  ASSERT_EQ(j["terms"].size(), 2u);
  EXPECT_EQ(j["terms"][1]["a"], 1.0);
  EXPECT_EQ(j["terms"][1]["s"], 16);
  EXPECT_NE(o.err.find("warning:"), std::string::npos);
}

TEST(Tune, WorkedExampleChoosesThree) {
  TempDir dir;
  const std::string cfg = two_token_config(dir);
  const auto prompts = dir.file("prompts.txt", "p\n");
  const auto report = dir.path() / "report.json";
  const Outcome o = run({"tune", "--config", cfg, "--formula", "D + B", "--prompts", prompts.string(), "--samples", "4", "--out",
                         report.string()});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const auto j = nlohmann::json::parse(cli::read_file(report.string()));
  EXPECT_EQ(j["terms"][0]["s"], 1);
  EXPECT_DOUBLE_EQ(j["terms"][1]["a"].get<double>(), 0.5);
  EXPECT_EQ(j["terms"][1]["s"], 3);

  // The report feeds straight back into generate.
  const Outcome g = run({"generate", "--config", cfg, "--formula", "D + B", "--prompt", "p", "--max-tokens", "6", "--speculative",
                         "--factors", report.string(), "--json"});
  ASSERT_EQ(g.code, kExitOk) << g.err;
}

TEST(Tune, RejectsBadArguments) {
  TempDir dir;
  const auto prompts = dir.file("prompts.txt", "the cat\n");
  EXPECT_EQ(run({"tune", "--config", kConfig, "--formula", "M + Ma", "--prompts", prompts.string(), "--samples", "0"}).code, kExitUser);
  EXPECT_EQ(run({"tune", "--config", kConfig, "--formula", "M + Ma", "--prompts", (dir.path() / "missing").string()}).code, kExitUser);
  const auto empty = dir.file("empty.txt", "");
  EXPECT_EQ(run({"tune", "--config", kConfig, "--formula", "M + Ma", "--prompts", empty.string()}).code, kExitUser);
}

// --- sweep -----------------------------------------------------------------

TEST(Sweep, WritesJsonlAndCsv) {
  TempDir dir;
  const auto spec = dir.file("sweep.json", R"({
  "formula": "M + {lam}*Ma", "slots": {"lam": [0.1, 1.0]}, "prompts": ["the cat", "a bird sat"],
  "metrics": ["perplexity", "calls_per_token", "attribute_score"], "max_tokens": 8, "seed": 5,
  "speculation": "tuned", "reference": "M", "scorer": "word_length"
})");
  const auto out = dir.path() / "report.jsonl";
  const Outcome o = run({"sweep", "--config", kConfig, "--spec", spec.string(), "--out", out.string()});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const auto lines = cli::read_lines(out.string());
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(nlohmann::json::parse(lines[0])["scorer"], "word_length");
  const auto csv = cli::read_lines((dir.path() / "report.csv").string());
  ASSERT_EQ(csv.size(), 7u);
  EXPECT_EQ(csv[0], "cell,formula,slot_lam,relative_lam,metric,value,stderr,n");

  const Outcome again = run({"sweep", "--config", kConfig, "--spec", spec.string()});
  ASSERT_EQ(again.code, kExitOk);
  EXPECT_EQ(again.out, cli::read_file(out.string()));
}

TEST(Sweep, BundledSpecRuns) {
  const Outcome o = run({"sweep", "--config", kConfig, "--spec", (kFixtures / "sweep.json").string()});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  std::istringstream in(o.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 1u + 3u * 3u);
}

TEST(Sweep, UserErrors) {
  TempDir dir;
  const auto unresolved = dir.file("a.json", R"({"formula": "M + {lam}*Ma + {mu}*Mtox", "slots": {"lam": [0.1]}, "prompts": ["the cat"]})");
  const Outcome o = run({"sweep", "--config", kConfig, "--spec", unresolved.string()});
  EXPECT_EQ(o.code, kExitUser);
  EXPECT_NE(o.err.find("TemplateError"), std::string::npos) << o.err;
  const auto bad_json = dir.file("b.json", "{\"formula\": ");
  EXPECT_EQ(run({"sweep", "--config", kConfig, "--spec", bad_json.string()}).code, kExitUser);
  const auto bad_kind = dir.file("c.json", R"({"formula": "M + {lam}*Ma", "slots": {"lam": [0.1]}, "prompts": ["the cat"],
  "speculation": "always"})");
  EXPECT_EQ(run({"sweep", "--config", kConfig, "--spec", bad_kind.string()}).code, kExitUser);
}

// --- test ------------------------------------------------------------------

TEST(SelfTest, Suites) {
  const Outcome oracles = run({"test", "--suite", "oracles"});
  EXPECT_EQ(oracles.code, kExitOk) << oracles.out;
  EXPECT_NE(oracles.out.find("PASS theorem1_oracle"), std::string::npos);
  const Outcome exact = run({"test", "--suite", "exactness", "--samples", "10000", "--seed", "2"});
  EXPECT_EQ(exact.code, kExitOk) << exact.out;
  EXPECT_EQ(std::count(exact.out.begin(), exact.out.end(), '\n'), 10);
  EXPECT_EQ(run({"test", "--suite", "exactness", "--samples", "100"}).code, kExitUser);
}

// --- config ----------------------------------------------------------------

TEST(Config, RoundTrip) {
  const EngineConfig a = load_config(kConfig);
  const nlohmann::json j = to_json(a);
  const EngineConfig b = parse_config(j, a.base_dir);
  EXPECT_EQ(to_json(b), j);
  EXPECT_EQ(j["providers"].size(), 4u);
  EXPECT_EQ(j["defaults"]["max_tokens"], 24);
  EXPECT_EQ(j["defaults"]["s_max"], 64);
}

TEST(Config, Errors) {
  TempDir dir;
  const auto dup = dir.file("dup.json", R"({"providers": [
    {"name": "M", "kind": "tabular", "default": [1.0]}, {"name": "M", "kind": "tabular", "default": [1.0]}]})");
  EXPECT_EQ(run({"generate", "--config", dup.string(), "--formula", "M"}).code, kExitUser);
  const auto unknown = dir.file("unknown.json", R"({"providers": [{"name": "M", "kind": "oracle"}]})");
  EXPECT_EQ(run({"generate", "--config", unknown.string(), "--formula", "M"}).code, kExitUser);
  const auto typo = dir.file("typo.json", R"({"providers": [{"name": "M", "kind": "ngram", "corpus": "x.txt", "ordr": 2}]})");
  EXPECT_EQ(run({"generate", "--config", typo.string(), "--formula", "M"}).code, kExitUser);
}
