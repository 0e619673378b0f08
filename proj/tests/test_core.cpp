#include <gtest/gtest.h>

#include <bit>
#include <fstream>
#include <thread>

#include "test_support.hpp"

namespace logitmap {
namespace {

using testing::ScratchDir;

TEST(UsageFraction, CountsUniqueQueriesOverDenominator) {
  ApiLedger ledger(2000);
  for (int i = 0; i < 28; ++i) ledger.record(fmt::format("id{}", i));
  EXPECT_DOUBLE_EQ(round4(usage_fraction(ledger)), 0.0140);
  EXPECT_DOUBLE_EQ(ledger_to_json(ledger)["fraction"].get<double>(), 0.014);
}

TEST(UsageFraction, ZeroQueriesIsZero) {
  ApiLedger ledger(500);
  EXPECT_EQ(usage_fraction(ledger), 0.0);
}

TEST(UsageFraction, EveryExampleQueriedOnceIsOne) {
  ApiLedger ledger(37);
  for (int i = 0; i < 37; ++i) ledger.record(fmt::format("id{}", i));
  EXPECT_EQ(usage_fraction(ledger), 1.0);
}

TEST(UsageFraction, ZeroDenominatorThrows) {
  ApiLedger ledger(0);
  try {
    usage_fraction(ledger);
    FAIL() << "expected ZeroDenominator";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kZeroDenominator);
  }
}

TEST(ApiLedger, RepeatedIdsOnlyCountOnce) {
  ApiLedger ledger(10);
  EXPECT_TRUE(ledger.record("a"));
  EXPECT_FALSE(ledger.record("a"));
  ledger.record_hit();
  EXPECT_EQ(ledger.unique_count(), 1u);
  EXPECT_EQ(ledger.total_requests(), 3u);
  const Json j = ledger_to_json(ledger);
  EXPECT_EQ(j["unique"], 1);
  EXPECT_EQ(j["total"], 3);
  EXPECT_EQ(j["denominator"], 10);
}

TEST(ApiLedger, UniqueCountNeverDecreases) {
  ApiLedger ledger(100);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> id(0, 30);
  std::size_t last = 0;
  for (int step = 0; step < 500; ++step) {
    ledger.record(fmt::format("id{}", id(rng)));
    EXPECT_GE(ledger.unique_count(), last);
    EXPECT_LE(ledger.unique_count(), ledger.total_requests());
    last = ledger.unique_count();
  }
}

TEST(ApiLedger, ConcurrentRecordsAreSerialized) {
  ApiLedger ledger(1000);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 1000; ++i) ledger.record(fmt::format("id{}", i));
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ledger.unique_count(), 1000u);
  EXPECT_EQ(ledger.total_requests(), 8000u);
  EXPECT_EQ(ledger.timeline().size(), 1000u);
}

TEST(ApiLedger, BudgetCapRejectsNewIdsOnly) {
  ApiLedger ledger(10, 2);
  ledger.record("a");
  ledger.record("b");
  EXPECT_NO_THROW(ledger.check_budget("a"));
  try {
    ledger.check_budget("c");
    FAIL() << "expected BudgetExceeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kBudgetExceeded);
  }
}

TEST(ApiLedger, TimelineRoundTripsThroughCsv) {
  ScratchDir dir("timeline");
  ApiLedger ledger(5);
  ledger.set_phase("select");
  ledger.record("a");
  ledger.record("a");
  ledger.set_phase("gate");
  ledger.record("b");
  write_ledger_timeline_csv(ledger.timeline(), dir / "t.csv");
  const auto back = read_ledger_timeline_csv(dir / "t.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].id, "a");
  EXPECT_EQ(back[0].phase, "select");
  EXPECT_EQ(back[0].sequence, 1u);
  EXPECT_EQ(back[1].id, "b");
  EXPECT_EQ(back[1].phase, "gate");
  EXPECT_EQ(back[1].sequence, 3u);
}

TEST(Dataset, RejectsInconsistentExamples) {
  EXPECT_THROW(Dataset({{"a", Eigen::VectorXd::Zero(2), 0}, {"b", Eigen::VectorXd::Zero(3), 0}}, 2, 2), Error);
  EXPECT_THROW(Dataset({{"a", Eigen::VectorXd::Zero(2), 2}}, 2, 2), Error);
  EXPECT_THROW(Dataset({{"a", Eigen::VectorXd::Zero(2), 0}, {"a", Eigen::VectorXd::Zero(2), 1}}, 2, 2), Error);
}

TEST(LoadDataset, ThreeRowJsonl) {
  ScratchDir dir("load");
  std::ofstream(dir / "d.jsonl") << R"({"id":"a","features":[0.5,1.0],"label":0})" << '\n'
                                 << R"({"id":"b","features":[1.5,-1.0],"label":1})" << '\n'
                                 << R"({"id":"c","features":[2.5,3.0],"label":1})" << '\n';
  const Dataset d = load_dataset(dir / "d.jsonl");
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.dim(), 2u);
  EXPECT_EQ(d.num_classes(), 2u);
  EXPECT_EQ(d[1].embedding[0], 1.5);
}

TEST(LoadDataset, RaggedRowIsDimensionMismatch) {
  ScratchDir dir("ragged");
  std::ofstream(dir / "d.jsonl") << R"({"id":"a","features":[0.5,1.0],"label":0})" << '\n'
                                 << R"({"id":"b","features":[1.5,-1.0,2.0],"label":1})" << '\n';
  try {
    load_dataset(dir / "d.jsonl");
    FAIL() << "expected DimensionMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kDimensionMismatch);
  }
}

TEST(LoadDataset, MalformedRowIsParseError) {
  ScratchDir dir("malformed");
  std::ofstream(dir / "d.jsonl") << R"({"id":"a","features":[0.5,1.0],"label":0})" << '\n' << "{not json\n";
  try {
    load_dataset(dir / "d.jsonl");
    FAIL() << "expected ParseError";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kParseError);
  }
}

TEST(LoadDataset, LabelBeyondDeclaredClassesIsOutOfRange) {
  ScratchDir dir("label");
  std::ofstream(dir / "d.csv") << "# num_classes=2\nid,f0,label\na,0.5,0\nb,1.0,2\n";
  try {
    load_dataset(dir / "d.csv");
    FAIL() << "expected LabelOutOfRange";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kLabelOutOfRange);
  }
}

TEST(LoadDataset, CsvWithHeader) {
  ScratchDir dir("csv");
  std::ofstream(dir / "d.csv") << "id,f0,f1,label\na,0.5,1,0\nb,-2,3e-1,2\n";
  const Dataset d = load_dataset(dir / "d.csv");
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.num_classes(), 3u);
  EXPECT_EQ(d[1].embedding[1], 0.3);
}

bool bit_identical(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size() || a.dim() != b.dim() || a.num_classes() != b.num_classes()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || a[i].label != b[i].label) return false;
    for (Eigen::Index k = 0; k < a[i].embedding.size(); ++k) {
      if (std::bit_cast<std::uint64_t>(a[i].embedding[k]) != std::bit_cast<std::uint64_t>(b[i].embedding[k])) return false;
    }
  }
  return true;
}

TEST(SaveDataset, RoundTripIsBitExactOnRandomDatasets) {
  ScratchDir dir("roundtrip");
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> size(1, 40), dim(1, 9), classes(1, 6);
  std::uniform_real_distribution<double> exponent(-300.0, 300.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t v = classes(rng);
    Dataset d = testing::random_dataset(rng, size(rng), dim(rng), v);
    // Widen the dynamic range so the formatter has to print awkward values.
    std::vector<Example> rows = d.examples();
    rows.front().embedding[0] = std::pow(10.0, exponent(rng));
    rows.back().embedding[rows.back().embedding.size() - 1] = -std::nextafter(1.0 / 3.0, 1.0);
    d = Dataset(std::move(rows), v, d.dim());
    const auto path = dir / fmt::format("d{}.{}", trial, trial % 2 ? "csv" : "jsonl");
    save_dataset(d, path);
    EXPECT_TRUE(bit_identical(d, load_dataset(path))) << "trial " << trial;
  }
}

}  // namespace
}  // namespace logitmap
