#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "embscale/ingest.hpp"
#include "embscale/stats.hpp"
#include "oracles/param_oracle.hpp"

using namespace embscale;

namespace {

const char* kHeader = "model_name,method,tokens,final_loss,mteb_score\n";

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("embscale_ingest_" + name)).string();
}

}  // namespace

TEST(LoadRuns, ThreeRowCsv) {
  const std::string csv = std::string(kHeader) +
                          "pythia-14m,full,1e8,2.5,0.31\n"
                          "pythia-70m,lora:32,2e8,2.1,\n"
                          "pythia-160m,freeze:4,3e8,1.9,0.4\n";
  const auto set = parse_runs(csv, {}, "runs.csv");
  ASSERT_EQ(set.records.size(), 3u);
  EXPECT_TRUE(set.rejected.empty());
  EXPECT_TRUE(set.warnings.empty());
  EXPECT_FALSE(set.records[1].mteb_score.has_value());
  EXPECT_EQ(to_string(set.records[2].method), "freeze:4");
  EXPECT_EQ(set.schema_version, kRunSchemaVersion);
  EXPECT_EQ(set.source_digest.rfind("fnv1a64:", 0), 0u);
}

TEST(LoadRuns, NegativeLossRejectedWithLine) {
  const std::string csv = std::string(kHeader) + "pythia-14m,full,1e8,2.5,\npythia-14m,full,2e8,-1,\n";
  const auto set = parse_runs(csv, {}, "runs.csv");
  ASSERT_EQ(set.records.size(), 1u);
  ASSERT_EQ(set.rejected.size(), 1u);
  EXPECT_EQ(set.rejected[0].line, 3u);
  EXPECT_NE(set.rejected[0].message.find("final_loss must be positive"), std::string::npos);
}

TEST(LoadRuns, MissingFlopFilledFromCostModel) {
  const std::string jsonl = R"({"model_name":"pythia-160m","method":"full","tokens":1e9,"final_loss":2.0})";
  const auto set = parse_runs(jsonl);
  ASSERT_EQ(set.records.size(), 1u);
  const auto& r = set.records[0];
  const auto nf = static_cast<double>(oracle::enumerate(*find_arch(default_registry(), "pythia-160m")).nonembed);
  EXPECT_DOUBLE_EQ(r.flop, 6.0 * nf * 1e9);
  EXPECT_TRUE(r.flop_verified);
  EXPECT_EQ(r.n_nonembed, static_cast<ParamCount>(nf));
  EXPECT_DOUBLE_EQ(r.trainable_fraction, 1.0);
}

TEST(LoadRuns, InconsistentFlopRejected) {
  const auto a = *find_arch(default_registry(), "pythia-70m");
  const double c = flop_cost(param_counts(a, LoRA{8}), 5e8);
  std::ostringstream ok, bad;
  ok.precision(17);
  bad.precision(17);
  ok << R"({"model_name":"pythia-70m","method":"lora:8","tokens":5e8,"final_loss":2,"flop":)" << c * (1 + 1e-9) << "}\n";
  bad << R"({"model_name":"pythia-70m","method":"lora:8","tokens":5e8,"final_loss":2,"replicate":1,"flop":)" << c * 1.01 << "}\n";
  const auto set = parse_runs(ok.str() + bad.str());
  EXPECT_EQ(set.records.size(), 1u);
  ASSERT_EQ(set.rejected.size(), 1u);
  EXPECT_EQ(set.rejected[0].line, 2u);
  EXPECT_NE(set.rejected[0].message.find("inconsistent"), std::string::npos);
}

TEST(LoadRuns, UnknownArchitectureFlaggedUnverified) {
  const std::string jsonl =
      R"({"model_name":"custom-7b","method":"full","n_total":7000,"n_nonembed":6000,"tokens":1e9,"flop":3.6e13,"final_loss":1.5})"
      "\n"
      R"({"model_name":"custom-7b","method":"full","n_total":7000,"n_nonembed":6000,"tokens":1e9,"final_loss":1.5})";
  const auto set = parse_runs(jsonl);
  ASSERT_EQ(set.records.size(), 1u);
  EXPECT_FALSE(set.records[0].flop_verified);
  ASSERT_EQ(set.warnings.size(), 1u);
  EXPECT_NE(set.warnings[0].message.find("unverified"), std::string::npos);
  ASSERT_EQ(set.rejected.size(), 1u);
  EXPECT_EQ(set.rejected[0].line, 2u);
}

TEST(LoadRuns, TokensDerivedFromSteps) {
  const std::string jsonl =
      R"({"model_name":"pythia-14m","method":"bias","steps":100,"batch_size":1024,"context_len":75,"final_loss":3,"data_measure":"steps"})";
  const auto set = parse_runs(jsonl);
  ASSERT_EQ(set.records.size(), 1u);
  EXPECT_DOUBLE_EQ(set.records[0].tokens, 100.0 * 1024 * 75);
  EXPECT_DOUBLE_EQ(set.records[0].data_amount(), 100.0);
}

TEST(LoadRuns, MethodHyperColumnCombinesAndConflictsAreRejected) {
  const std::string csv =
      "model_name,method,method_hyper,tokens,final_loss\n"
      "pythia-31m,lora,64,1e8,2\n"
      "pythia-31m,lora:16,64,1e8,2\n"
      "pythia-31m,full,,1e8,2\n";
  const auto set = parse_runs(csv, {}, "x.csv");
  ASSERT_EQ(set.records.size(), 2u);
  EXPECT_EQ(to_string(set.records[0].method), "lora:64");
  ASSERT_EQ(set.rejected.size(), 1u);
  EXPECT_EQ(set.rejected[0].line, 3u);
}

TEST(LoadRuns, DuplicatesNeedReplicateIndex) {
  const std::string row = R"({"model_name":"pythia-14m","method":"full","tokens":1e8,"final_loss":2)";
  const auto set = parse_runs(row + "}\n" + row + "}\n" + row + R"(,"replicate":1})" + "\n");
  EXPECT_EQ(set.records.size(), 2u);
  ASSERT_EQ(set.rejected.size(), 1u);
  EXPECT_EQ(set.rejected[0].line, 2u);
  EXPECT_NE(set.rejected[0].message.find("duplicate"), std::string::npos);
}

TEST(LoadRuns, ColumnMapAdaptsForeignHeaders) {
  SchemaOptions opt;
  opt.column_map = {{"model", "model_name"}, {"ft", "method"}, {"loss", "final_loss"}, {"D", "tokens"}};
  const auto set = parse_runs("model,ft,D,loss\npythia-14m,full,1e8,2.5\n", opt, "a.csv");
  ASSERT_EQ(set.records.size(), 1u);
  EXPECT_DOUBLE_EQ(set.records[0].final_loss, 2.5);

  const auto path = temp_path("colmap.json");
  std::ofstream(path) << R"({"columns": {"model": "model_name"}})";
  EXPECT_EQ(load_column_map(path).at("model"), "model_name");
}

TEST(LoadRuns, MalformedCsvReportsByteOffset) {
  const std::string csv = std::string(kHeader) + "pythia-14m,full,1e8,2.5,\n\"unterminated,full,1,1,\n";
  try {
    parse_runs(csv, {}, "a.csv");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.byte_offset(), std::string(kHeader).size() + 25);
  }
  const std::string ragged = std::string(kHeader) + "pythia-14m,full\n";
  try {
    parse_runs(ragged, {}, "a.csv");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.byte_offset(), std::string(kHeader).size());
  }
}

TEST(LoadRuns, MalformedJsonlReportsByteOffset) {
  const std::string good = R"({"model_name":"pythia-14m","method":"full","tokens":1e8,"final_loss":2})";
  const std::string text = good + "\n{\"model_name\": oops}\n";
  try {
    parse_runs(text);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_GE(e.byte_offset(), good.size() + 1);
    EXPECT_LT(e.byte_offset(), text.size());
  }
}

TEST(LoadRuns, AllInvalidIsAnError) {
  EXPECT_THROW(parse_runs(std::string(kHeader) + "pythia-14m,full,1e8,-2,\n", {}, "a.csv"), InsufficientDataError);
  EXPECT_THROW(parse_runs("model_name,final_loss\nx,1\n", {}, "a.csv"), FormatError);
}

TEST(LoadRuns, PersistRoundTripIsIdentity) {
  const std::string csv =
      "model_name,n_total,n_nonembed,method,method_hyper,trainable_fraction,tokens,steps,batch_size,context_len,flop,final_loss,mteb_score\n"
      "pythia-410m,,,lora,128,,,10,1024,75,,1.8,0.55\n"
      "pythia-1b,,,freeze,8,,3.3e9,,,,,1.7,\n"
      "mystery,100,90,full,,1,5e5,,,,2.7e8,2.2,0.1\n"
      "pythia-14m,,,bias,,,1e7,,,,,3.1,0.2\n";
  const auto first = parse_runs(csv, {}, "a.csv");
  ASSERT_EQ(first.records.size(), 4u);
  const auto path = temp_path("roundtrip.jsonl");
  save_runs(first, path);
  const auto second = load_runs(path);
  ASSERT_EQ(second.records.size(), first.records.size());
  for (std::size_t i = 0; i < first.records.size(); ++i) EXPECT_EQ(second.records[i], first.records[i]) << i;
  EXPECT_EQ(runs_to_jsonl(second), runs_to_jsonl(first));
}

TEST(LoadRuns, ValidationIsDeterministic) {
  const std::string csv = std::string(kHeader) + "pythia-14m,full,1e8,2.5,\npythia-14m,full,2e8,-1,\nx,full,1,1,\n";
  const auto a = parse_runs(csv, {}, "a.csv");
  const auto b = parse_runs(csv, {}, "a.csv");
  EXPECT_EQ(runs_to_jsonl(a), runs_to_jsonl(b));
  ASSERT_EQ(a.rejected.size(), b.rejected.size());
  for (std::size_t i = 0; i < a.rejected.size(); ++i) EXPECT_EQ(a.rejected[i].message, b.rejected[i].message);
}

TEST(Spearman, PerfectMonotone) {
  std::vector<double> x = {0.1, 0.5, 0.7, 2.0, 3.5}, up, down;
  for (double v : x) {
    up.push_back(std::exp(v));
    down.push_back(-v * v * v);
  }
  EXPECT_EQ(spearman(x, up), 1.0);
  EXPECT_EQ(spearman(x, down), -1.0);
}

TEST(Spearman, TiesUseAverageRanks) {
  const std::vector<double> x = {1, 2, 2, 3};
  const auto r = average_ranks(x);
  EXPECT_EQ(r, (std::vector<double>{1.0, 2.5, 2.5, 4.0}));
  // Hand-computed: ranks (1,2.5,2.5,4) vs (1,2,3,4) -> 4.5/sqrt(4.5*5)
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 2, 3, 4}), 4.5 / std::sqrt(4.5 * 5.0), 1e-15);
}

TEST(Spearman, MonotoneTransformInvariance) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(50), y(50), fx, gy;
    for (auto& v : x) v = u(rng);
    for (auto& v : y) v = u(rng);
    for (double v : x) fx.push_back(std::log(v) * 3.0 + 1.0);
    for (double v : y) gy.push_back(1.0 / v);
    EXPECT_EQ(spearman(fx, y), spearman(x, y));
    EXPECT_EQ(spearman(x, gy), -spearman(x, y));
  }
}

TEST(Spearman, IndependentPermutationNearZero) {
  std::mt19937_64 rng(22);
  std::vector<double> x(1000), y(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = y[i] = static_cast<double>(i);
  std::shuffle(y.begin(), y.end(), rng);
  EXPECT_LT(std::abs(spearman(x, y)), 0.1);
}

TEST(Spearman, LossVsScoreOnRunSet) {
  std::string jsonl;
  for (int i = 0; i < 6; ++i) {
    jsonl += R"({"model_name":"pythia-14m","method":"full","tokens":)" + std::to_string((i + 1) * 1000000) +
             R"(,"final_loss":)" + std::to_string(3.0 - 0.2 * i) + R"(,"mteb_score":)" +
             std::to_string(0.2 + 0.05 * i) + "}\n";
  }
  jsonl += R"({"model_name":"pythia-14m","method":"full","tokens":9e6,"final_loss":1.0})";
  EXPECT_EQ(spearman_loss_vs_score(parse_runs(jsonl)), -1.0);
  EXPECT_THROW(spearman_loss_vs_score(parse_runs(R"({"model_name":"pythia-14m","method":"full","tokens":9e6,"final_loss":1.0,"mteb_score":0.3})")),
               InsufficientDataError);
  EXPECT_THROW(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), InsufficientDataError);
}
