#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "test_support.hpp"

namespace logitmap {
namespace {

using testing::CountingBackend;

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::kIoError;
}

Eigen::VectorXd vec(std::initializer_list<double> v) { return testing::to_eigen_list(v); }

// Three examples with one-hot features, so a linear proxy whose columns are
// the desired logits reproduces them exactly, while the embedder supplies
// the selection inputs.
struct HandTrace {
  Dataset data;
  ProxyParams proxy;
  Embedder embedder;

  HandTrace() : data(testing::dataset_from({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {0, 1, 1}, 2)),
                proxy(Architecture::kLinear, 3, 2) {
    Eigen::VectorXd w(8);
    w << 1, 0, 1, 0.1, 0, 5, 0, 0;
    proxy.set_weights(w);
    proxy.seal();
    embedder = [](const Example& e) {
      if (e.id == "x1") return vec({0.0, 0.0});
      if (e.id == "x2") return vec({0.5, 0.0});
      return vec({3.0, 0.0});
    };
  }
};

std::vector<std::string> ids_of(const CandidateSet& set) {
  std::vector<std::string> ids;
  for (const auto& c : set.candidates) ids.push_back(c.id);
  return ids;
}

void expect_pairwise_property(const CandidateSet& set, const SelectionThresholds& th) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const auto& a = set.candidates[i];
      const auto& b = set.candidates[j];
      EXPECT_GT(input_distance(a.embedding, b.embedding, th.metric), th.tau_in);
      EXPECT_GT(output_distance(a.proxy_logits, b.proxy_logits), th.tau_out);
    }
  }
}

TEST(InputDistance, EuclideanExamples) {
  EXPECT_DOUBLE_EQ(input_distance(vec({0, 0}), vec({3, 4})), 5.0);
  EXPECT_DOUBLE_EQ(input_distance(vec({1, 0}), vec({0, 1})), std::sqrt(2.0));
  EXPECT_EQ(input_distance(vec({2, 2}), vec({2, 2})), 0.0);
}

TEST(InputDistance, CosineExamples) {
  EXPECT_NEAR(input_distance(vec({1, 0}), vec({0, 1}), Metric::kCosine), 1.0, 1e-15);
  EXPECT_NEAR(input_distance(vec({1, 1}), vec({2, 2}), Metric::kCosine), 0.0, 1e-15);
  EXPECT_EQ(code_of([] { input_distance(vec({0, 0}), vec({1, 0}), Metric::kCosine); }), Errc::kZeroVector);
}

TEST(InputDistance, MismatchAndNonFinite) {
  EXPECT_EQ(code_of([] { input_distance(vec({0, 0}), vec({1, 0, 0})); }), Errc::kDimensionMismatch);
  EXPECT_EQ(code_of([] { input_distance(vec({0, std::numeric_limits<double>::infinity()}), vec({1, 0})); }),
            Errc::kNonFiniteInput);
}

TEST(InputDistance, ManhattanDominatesEuclideanAndTriangleHolds) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::VectorXd a = testing::random_vector(rng, 5), b = testing::random_vector(rng, 5),
                          c = testing::random_vector(rng, 5);
    EXPECT_GE(input_distance(a, b, Metric::kManhattan), input_distance(a, b) - 1e-12);
    for (Metric m : {Metric::kEuclidean, Metric::kManhattan}) {
      EXPECT_LE(input_distance(a, c, m), input_distance(a, b, m) + input_distance(b, c, m) + 1e-12);
      EXPECT_EQ(input_distance(a, b, m), input_distance(b, a, m));
    }
  }
}

TEST(FilterSelect, HandTracedExampleSelectsFirstAndThird) {
  HandTrace t;
  SelectionOptions opt;
  opt.embedder = t.embedder;
  const CandidateSet set = filter_select(t.data, t.proxy, {1.0, 0.5, Metric::kEuclidean}, opt);
  EXPECT_EQ(ids_of(set), (std::vector<std::string>{"x1", "x3"}));
  EXPECT_NEAR(output_distance(set.candidates[0].proxy_logits, set.candidates[1].proxy_logits), std::sqrt(26.0), 1e-12);
  EXPECT_FALSE(set.truncated);
}

TEST(FilterSelect, ZeroThresholdsSelectEveryDistinctExample) {
  std::mt19937_64 rng(2);
  const Dataset data = testing::random_dataset(rng, 60, 3, 3);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 3, 3, 0, 4);
  EXPECT_EQ(filter_select(data, proxy, {0.0, 0.0}).size(), 60u);
}

TEST(FilterSelect, ExactDuplicateIsRejectedAtAnyThreshold) {
  const Dataset data = testing::dataset_from({{0, 1}, {2, 3}, {0, 1}}, {0, 1, 0}, 2);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 2, 0, 4);
  EXPECT_EQ(ids_of(filter_select(data, proxy, {0.0, 0.0})), (std::vector<std::string>{"x1", "x2"}));
}

TEST(FilterSelect, RandomDatasetsSatisfyPairwiseProperty) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> tau(0.0, 1.5);
  for (int trial = 0; trial < 100; ++trial) {
    const Dataset data = testing::random_dataset(rng, 80, 3, 4);
    const ProxyParams proxy = init_proxy(Architecture::kLinear, 3, 4, 0, static_cast<std::uint64_t>(trial));
    const SelectionThresholds th{tau(rng), tau(rng), trial % 2 ? Metric::kManhattan : Metric::kEuclidean};
    const CandidateSet set = filter_select(data, proxy, th);
    ASSERT_GE(set.size(), 1u);
    EXPECT_EQ(set.candidates.front().id, data[0].id);
    expect_pairwise_property(set, th);
  }
}

// Greedy selection is order dependent, so a larger threshold can reject an
// early point and admit two later ones. This pins the smallest such case.
TEST(FilterSelect, RaisingThresholdCanGrowTheSetOnSomeOrders) {
  const Dataset data = testing::dataset_from({{2, 1}, {4, 3}, {4, 5}, {5, 2}}, {0, 0, 0, 0}, 1);
  ProxyParams identity(Architecture::kLinear, 2, 2);
  Eigen::VectorXd w(6);
  w << 1, 0, 0, 1, 0, 0;
  identity.set_weights(w);
  EXPECT_EQ(ids_of(filter_select(data, identity, {2.0, 0.0})), (std::vector<std::string>{"x1", "x2"}));
  EXPECT_EQ(ids_of(filter_select(data, identity, {3.0, 0.0})), (std::vector<std::string>{"x1", "x3", "x4"}));
}

TEST(FilterSelect, RaisingThresholdsShrinksTheSetInAggregate) {
  std::mt19937_64 rng(4);
  const std::vector<double> taus{0.0, 0.2, 0.5, 1.0, 2.0};
  std::vector<std::size_t> in_only(taus.size(), 0), both(taus.size(), 0);
  for (int trial = 0; trial < 30; ++trial) {
    const Dataset data = testing::random_dataset(rng, 60, 2, 3);
    const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 3, 0, static_cast<std::uint64_t>(trial));
    for (std::size_t k = 0; k < taus.size(); ++k) {
      in_only[k] += filter_select(data, proxy, {taus[k], 0.0}).size();
      both[k] += filter_select(data, proxy, {taus[k], taus[k]}).size();
    }
  }
  for (std::size_t k = 1; k < taus.size(); ++k) {
    EXPECT_LT(in_only[k], in_only[k - 1]);
    EXPECT_LT(both[k], both[k - 1]);
  }
  for (std::size_t k = 0; k < taus.size(); ++k) EXPECT_LE(both[k], in_only[k]);
}

TEST(FilterSelect, PermutedOrderStillSatisfiesPairwiseProperty) {
  std::mt19937_64 rng(5);
  const Dataset data = testing::random_dataset(rng, 80, 2, 3);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 3, 0, 1);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const SelectionThresholds th{0.6, 0.4};
  expect_pairwise_property(filter_select(data.subset(order), proxy, th), th);
}

TEST(FilterSelect, CapTruncatesInSelectionOrder) {
  std::mt19937_64 rng(6);
  const Dataset data = testing::random_dataset(rng, 50, 3, 3);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 3, 3, 0, 1);
  SelectionOptions opt;
  opt.max_selected = 5;
  const CandidateSet capped = filter_select(data, proxy, {0.0, 0.0}, opt);
  EXPECT_TRUE(capped.truncated);
  EXPECT_EQ(ids_of(capped), (std::vector<std::string>{"x0", "x1", "x2", "x3", "x4"}));
}

TEST(FilterSelect, NegativeThresholdIsInvalid) {
  const Dataset data = testing::dataset_from({{0, 1}}, {0}, 2);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 2, 0, 4);
  EXPECT_EQ(code_of([&] { filter_select(data, proxy, {-1.0, 0.0}); }), Errc::kInvalidSpec);
}

TEST(FilterSelect, MakesNoOracleCalls) {
  std::mt19937_64 rng(7);
  const Dataset data = testing::random_dataset(rng, 100, 3, 3);
  auto backend = std::make_shared<CountingBackend>(3, 3);
  Oracle oracle(backend);
  ApiLedger ledger(data.size());
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 3, 3, 0, 1);
  const auto th = calibrate_thresholds(data, proxy, 0.01);
  filter_select(data, proxy, th);
  EXPECT_EQ(backend->calls(), 0u);
  EXPECT_EQ(ledger.total_requests(), 0u);
  EXPECT_EQ(oracle.cache()->size(), 0u);
}

TEST(PercentileThreshold, OnePercentOfHundredValues) {
  std::vector<double> values;
  for (int i = 100; i >= 1; --i) values.push_back(i);
  EXPECT_EQ(percentile_threshold(values, 0.01), 1.0);
  EXPECT_EQ(percentile_threshold(values, 0.5), 50.0);
  EXPECT_EQ(code_of([] { percentile_threshold({}, 0.01); }), Errc::kEmptyInput);
}

TEST(CalibrateThresholds, SingleExampleIsEmptyInput) {
  const Dataset data = testing::dataset_from({{0, 1}}, {0}, 2);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 2, 0, 4);
  EXPECT_EQ(code_of([&] { calibrate_thresholds(data, proxy); }), Errc::kEmptyInput);
}

TEST(CalibrateThresholds, PermissiveRunRecordsEveryComparison) {
  std::mt19937_64 rng(8);
  const Dataset data = testing::random_dataset(rng, 40, 2, 3);
  const ProxyParams proxy = init_proxy(Architecture::kLinear, 2, 3, 0, 1);
  const auto permissive = collect_distances(data, proxy, Metric::kEuclidean, CalibrationMode::kPermissiveRun);
  const auto full = collect_distances(data, proxy, Metric::kEuclidean, CalibrationMode::kFullPairwise);
  // With distinct points the permissive pass accepts everyone, so it sees
  // every pair exactly once, just like the full sweep.
  EXPECT_EQ(permissive.input.size(), 40u * 39u / 2u);
  EXPECT_EQ(full.input.size(), 40u * 39u / 2u);
  auto a = permissive.input, b = full.input;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  const auto th = calibrate_thresholds(data, proxy, 0.01);
  EXPECT_EQ(th.tau_in, percentile_threshold(full.input, 0.01));
}

TEST(RandomSelect, WholeDatasetIsAPermutation) {
  std::mt19937_64 rng(9);
  const Dataset data = testing::random_dataset(rng, 25, 2, 2);
  const auto ids = ids_of(random_select(data, 25, 1));
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 25u);
}

TEST(RandomSelect, SameSeedSameSelection) {
  std::mt19937_64 rng(10);
  const Dataset data = testing::random_dataset(rng, 100, 2, 2);
  EXPECT_EQ(ids_of(random_select(data, 10, 42)), ids_of(random_select(data, 10, 42)));
  EXPECT_NE(ids_of(random_select(data, 10, 42)), ids_of(random_select(data, 10, 43)));
}

TEST(RandomSelect, CountOutOfRange) {
  std::mt19937_64 rng(11);
  const Dataset data = testing::random_dataset(rng, 5, 2, 2);
  EXPECT_EQ(code_of([&] { random_select(data, 0, 1); }), Errc::kCountOutOfRange);
  EXPECT_EQ(code_of([&] { random_select(data, 6, 1); }), Errc::kCountOutOfRange);
}

TEST(RandomSelect, SelectionFrequencyIsUniform) {
  std::mt19937_64 rng(12);
  const Dataset data = testing::random_dataset(rng, 20, 1, 2);
  const std::size_t count = 5, trials = 10000;
  std::vector<std::size_t> hits(data.size(), 0);
  for (std::size_t t = 0; t < trials; ++t) {
    for (const auto& c : random_select(data, count, t).candidates) ++hits[c.index];
  }
  const double p = static_cast<double>(count) / static_cast<double>(data.size());
  const double sigma = std::sqrt(static_cast<double>(trials) * p * (1.0 - p));
  for (auto h : hits) EXPECT_NEAR(static_cast<double>(h), p * static_cast<double>(trials), 3.0 * sigma);
}

TEST(BuildLogitMap, OneQueryPerCandidateWithOracleLogits) {
  std::mt19937_64 rng(13);
  const Dataset data = testing::random_dataset(rng, 30, 3, 4);
  auto backend = std::make_shared<CountingBackend>(3, 4);
  Oracle oracle(backend);
  ApiLedger ledger(data.size());
  const CandidateSet cands = random_select(data, 7, 1);
  const LogitMapSet pairs = build_logitmap(cands, data, oracle, ledger);
  EXPECT_EQ(ledger.unique_count(), 7u);
  EXPECT_EQ(backend->calls(), 7u);
  ASSERT_EQ(pairs.size(), 7u);
  for (const auto& p : pairs.pairs()) {
    EXPECT_EQ(p.oracle_logits, backend->direct(data[*data.find(p.example_id)]));
  }
  // A second build is served entirely from the cache.
  build_logitmap(cands, data, oracle, ledger);
  EXPECT_EQ(ledger.unique_count(), 7u);
  EXPECT_EQ(backend->calls(), 7u);
  EXPECT_EQ(ledger.total_requests(), 14u);
}

TEST(BuildLogitMap, BudgetCapStopsNewQueries) {
  std::mt19937_64 rng(14);
  const Dataset data = testing::random_dataset(rng, 30, 3, 4);
  Oracle oracle(std::make_shared<CountingBackend>(3, 4));
  ApiLedger ledger(data.size(), 3);
  EXPECT_EQ(code_of([&] { build_logitmap(random_select(data, 5, 1), data, oracle, ledger); }), Errc::kBudgetExceeded);
  EXPECT_EQ(ledger.unique_count(), 3u);
}

TEST(SelectionFiles, CandidatesAndPairsRoundTrip) {
  testing::ScratchDir dir("sel");
  HandTrace t;
  const CandidateSet set = filter_select(t.data, t.proxy, {0.0, 0.0});
  write_candidates_jsonl(set, dir / "c.jsonl");
  EXPECT_EQ(read_candidate_ids(dir / "c.jsonl"), ids_of(set));

  Oracle oracle(std::make_shared<CountingBackend>(3, 2));
  ApiLedger ledger(3);
  const LogitMapSet pairs = build_logitmap(set, t.data, oracle, ledger);
  write_logitmap_jsonl(pairs, dir / "p.jsonl");
  const LogitMapSet back = read_logitmap_jsonl(dir / "p.jsonl");
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(back.pairs()[i].example_id, pairs.pairs()[i].example_id);
    EXPECT_EQ(back.pairs()[i].embedding, pairs.pairs()[i].embedding);
    EXPECT_EQ(back.pairs()[i].oracle_logits, pairs.pairs()[i].oracle_logits);
  }
}

}  // namespace
}  // namespace logitmap
