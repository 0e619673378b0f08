#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "test_support.hpp"
#include "logitmap/http_oracle.hpp"

namespace logitmap {
namespace {

using testing::CountingBackend;
using testing::ScratchDir;

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::kIoError;
}

Dataset blobs(double label_noise_free_separation, std::size_t n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.dim = 4;
  spec.blobs_per_class = 1;
  spec.separation = label_noise_free_separation;
  spec.noise = 0.5;
  spec.train_size = n;
  spec.test_size = 3;
  spec.seed = seed;
  return generate_synthetic(spec).train;
}

TEST(OracleQuery, FreshIdCountsOnceAndRepeatIsCached) {
  std::mt19937_64 rng(1);
  const Dataset data = testing::random_dataset(rng, 5, 3, 4);
  auto backend = std::make_shared<CountingBackend>(3, 4);
  Oracle oracle(backend);
  ApiLedger ledger(data.size());
  const LogitVector first = oracle.query(data[0], ledger);
  EXPECT_EQ(ledger.unique_count(), 1u);
  const LogitVector again = oracle.query(data[0], ledger);
  EXPECT_EQ(first, again);
  EXPECT_EQ(ledger.unique_count(), 1u);
  EXPECT_EQ(ledger.total_requests(), 2u);
  EXPECT_EQ(backend->calls(), 1u);
}

TEST(OracleQuery, LedgerMatchesCacheSizeThroughout) {
  std::mt19937_64 rng(2);
  const Dataset data = testing::random_dataset(rng, 40, 3, 4);
  Oracle oracle(std::make_shared<CountingBackend>(3, 4));
  ApiLedger ledger(data.size());
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  for (int i = 0; i < 300; ++i) {
    oracle.query(data[pick(rng)], ledger);
    EXPECT_EQ(ledger.unique_count(), oracle.cache()->size());
  }
}

TEST(OracleQuery, ConcurrentMissesOnOneIdCallTheBackendOnce) {
  std::mt19937_64 rng(3);
  const Dataset data = testing::random_dataset(rng, 4, 3, 4);
  auto backend = std::make_shared<CountingBackend>(3, 4, 7, std::chrono::milliseconds(20));
  Oracle oracle(backend);
  ApiLedger ledger(data.size());
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] { oracle.query(data[static_cast<std::size_t>(t % 2)], ledger); });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(backend->calls(), 2u);
  EXPECT_EQ(ledger.unique_count(), 2u);
  EXPECT_EQ(ledger.total_requests(), 8u);
}

TEST(OracleQuery, FailedBackendCallLeavesNoTrace) {
  auto cache = std::make_shared<OracleCache>();
  Oracle oracle(std::make_shared<CacheOnlyBackend>(cache, 2), cache);
  ApiLedger ledger(1);
  const Example x{"missing", Eigen::VectorXd::Zero(2), 0};
  EXPECT_EQ(code_of([&] { oracle.query(x, ledger); }), Errc::kOracleUnavailable);
  EXPECT_EQ(ledger.unique_count(), 0u);
  EXPECT_EQ(cache->size(), 0u);
}

TEST(OracleQuery, BudgetCapBlocksNewIdsButNotHits) {
  std::mt19937_64 rng(4);
  const Dataset data = testing::random_dataset(rng, 3, 2, 2);
  Oracle oracle(std::make_shared<CountingBackend>(2, 2));
  ApiLedger ledger(data.size(), 1);
  oracle.query(data[0], ledger);
  EXPECT_NO_THROW(oracle.query(data[0], ledger));
  EXPECT_EQ(code_of([&] { oracle.query(data[1], ledger); }), Errc::kBudgetExceeded);
}

TEST(OracleCache, SaveLoadGivesIdenticalAnswers) {
  ScratchDir dir("cache");
  std::mt19937_64 rng(5);
  const Dataset data = testing::random_dataset(rng, 20, 3, 5);
  Oracle oracle(std::make_shared<CountingBackend>(3, 5));
  ApiLedger ledger(data.size());
  for (const auto& e : data.examples()) oracle.query(e, ledger);
  oracle.cache()->save(dir / "cache.jsonl");

  auto loaded = std::make_shared<OracleCache>(OracleCache::load(dir / "cache.jsonl"));
  EXPECT_EQ(loaded->size(), 20u);
  Oracle offline(std::make_shared<CacheOnlyBackend>(loaded, 5), loaded);
  ApiLedger ledger2(data.size());
  for (const auto& e : data.examples()) EXPECT_EQ(offline.query(e, ledger2), oracle.query(e, ledger));
  EXPECT_EQ(ledger2.unique_count(), 0u);
}

TEST(OracleCache, MalformedRowIsParseError) {
  ScratchDir dir("badcache");
  std::ofstream(dir / "c.jsonl") << R"({"id":"a","logits":[1,2]})" << '\n' << R"({"id":"b"})" << '\n';
  EXPECT_EQ(code_of([&] { OracleCache::load(dir / "c.jsonl"); }), Errc::kParseError);
}

TEST(SyntheticTeacher, OracleMatchesDirectEvaluation) {
  const Dataset data = blobs(4.0, 150, 1);
  TeacherSpec spec;
  spec.hidden = 16;
  spec.epochs = 5;
  spec.seed = 2;
  auto teacher = make_synthetic_teacher(data, spec);
  Oracle oracle(teacher);
  ApiLedger ledger(data.size());
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(oracle.query(data[i], ledger), proxy_forward(teacher->sealed_params_for_testing(), data[i].embedding));
  }
  EXPECT_TRUE(teacher->sealed_params_for_testing().sealed());
}

TEST(SyntheticTeacher, SameSeedIsBitIdentical) {
  const Dataset data = blobs(4.0, 120, 1);
  TeacherSpec spec;
  spec.hidden = 8;
  spec.epochs = 3;
  spec.seed = 9;
  EXPECT_EQ(params_hash(make_synthetic_teacher(data, spec)->sealed_params_for_testing()),
            params_hash(make_synthetic_teacher(data, spec)->sealed_params_for_testing()));
}

TEST(SyntheticTeacher, NoiselessSeparableIsAccurate) {
  const Dataset data = blobs(6.0, 600, 3);
  TeacherSpec spec;
  spec.hidden = 32;
  spec.epochs = 20;
  spec.seed = 4;
  EXPECT_GE(make_synthetic_teacher(data, spec)->train_accuracy(), 0.99);
}

TEST(SyntheticTeacher, LabelNoiseLowersAccuracy) {
  // Overlapping classes, so corrupted labels actually move the boundary.
  const Dataset data = blobs(1.5, 600, 3);
  TeacherSpec spec;
  spec.hidden = 32;
  spec.epochs = 20;
  spec.seed = 4;
  const double clean = make_synthetic_teacher(data, spec)->train_accuracy();
  spec.label_noise = 0.3;
  EXPECT_LT(make_synthetic_teacher(data, spec)->train_accuracy(), clean);
}

TEST(SyntheticTeacher, RejectsBadNoise) {
  const Dataset data = blobs(4.0, 30, 1);
  TeacherSpec spec;
  spec.label_noise = 1.0;
  EXPECT_EQ(code_of([&] { make_synthetic_teacher(data, spec); }), Errc::kInvalidSpec);
}

TEST(TruncateTopk, OrdersByLogprob) {
  const TopKLogprobs top = truncate_topk(testing::to_eigen_list({3, 1, 2}), 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].token_id, 0);
  EXPECT_EQ(top[1].token_id, 2);
  EXPECT_EQ(code_of([] { truncate_topk(testing::to_eigen_list({3, 1, 2}), 0); }), Errc::kKOutOfRange);
  EXPECT_EQ(code_of([] { truncate_topk(testing::to_eigen_list({3, 1, 2}), 4); }), Errc::kKOutOfRange);
}

TEST(TruncateTopk, FullKIsNormalizedPermutation) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const LogitVector logits = testing::random_vector(rng, 7, 3.0);
    const TopKLogprobs top = truncate_topk(logits, 7);
    double mass = 0.0;
    for (std::size_t i = 0; i < top.size(); ++i) {
      mass += std::exp(top[i].logprob);
      if (i > 0) EXPECT_GE(top[i - 1].logprob, top[i].logprob);
    }
    EXPECT_NEAR(mass, 1.0, 1e-9);
    EXPECT_NO_THROW(validate_topk(top));
    EXPECT_LE((align_topk(top, 7) - log_softmax(logits)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(AlignTopk, PlacesObservedEntriesAndFillsFloor) {
  const LogitVector dense = align_topk({{0, -0.1}, {3, -2.3}}, 5, -20.0);
  EXPECT_EQ(dense, testing::to_eigen_list({-0.1, -20, -20, -2.3, -20}));
  EXPECT_EQ(align_topk({{0, -0.1}, {3, -2.3}}, 5)[1], -12.3);
  EXPECT_EQ(code_of([] { align_topk({{5, -0.1}}, 5); }), Errc::kTokenIdOutOfRange);
  const auto mask = observed_mask({{0, -0.1}, {3, -2.3}}, 5);
  EXPECT_EQ(mask, (std::vector<bool>{true, false, false, true, false}));
}

TEST(AlignTopk, ArgmaxSurvivesTruncationForEveryK) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const LogitVector logits = testing::random_vector(rng, 6, 2.0);
    for (std::size_t k = 1; k <= 6; ++k) EXPECT_EQ(argmax(align_topk(truncate_topk(logits, k), 6)), argmax(logits));
  }
}

TEST(ValidateTopk, RejectsBrokenResponses) {
  EXPECT_EQ(code_of([] { validate_topk({}); }), Errc::kParseError);
  EXPECT_EQ(code_of([] { validate_topk({{1, -1.0}, {1, -2.0}}); }), Errc::kParseError);
  EXPECT_EQ(code_of([] { validate_topk({{1, -2.0}, {0, -1.0}}); }), Errc::kParseError);
}

TEST(TopKBackend, ServesDensifiedTopK) {
  std::mt19937_64 rng(8);
  const Dataset data = testing::random_dataset(rng, 3, 3, 6);
  auto inner = std::make_shared<CountingBackend>(3, 6);
  Oracle oracle(std::make_shared<TopKBackend>(inner, 2));
  ApiLedger ledger(3);
  const LogitVector got = oracle.query(data[0], ledger);
  EXPECT_EQ(got, align_topk(truncate_topk(inner->direct(data[0]), 2), 6));
  EXPECT_EQ(argmax(got), argmax(inner->direct(data[0])));
}

// ---------------------------------------------------------------------------
// Wire protocol

Json load_schema() {
  std::ifstream in(std::filesystem::path(LOGITMAP_SOURCE_DIR) / "schema/logits_wire.schema.json");
  return Json::parse(in);
}

// Checks the subset of JSON Schema the wire schema uses: required keys,
// closed property sets and primitive types.
void expect_conforms(const Json& doc, const Json& def) {
  for (const auto& key : def.at("required")) EXPECT_TRUE(doc.contains(key.get<std::string>())) << key;
  const auto& props = def.at("properties");
  for (const auto& [key, value] : doc.items()) {
    ASSERT_TRUE(props.contains(key)) << "unexpected key " << key;
    const std::string type = props[key].at("type");
    if (type == "string") EXPECT_TRUE(value.is_string()) << key;
    if (type == "integer") EXPECT_TRUE(value.is_number_integer()) << key;
    if (type == "number") EXPECT_TRUE(value.is_number()) << key;
    if (type == "array") EXPECT_TRUE(value.is_array()) << key;
  }
}

TEST(WireSchema, RequestAndCacheRowsConform) {
  const Json schema = load_schema();
  const Example x{"tr00001", testing::to_eigen_list({0.5, -1.25}), 0};
  const Json req = logits_request(x, 5);
  expect_conforms(req, schema["$defs"]["request"]);
  expect_conforms(logits_request(x, 5, "a prompt"), schema["$defs"]["request"]);
  EXPECT_EQ(req["features"], Json::array({0.5, -1.25}));

  ScratchDir dir("schema");
  OracleCache cache;
  cache.insert("tr00001", testing::to_eigen_list({1.0, 2.0}));
  cache.save(dir / "c.jsonl");
  expect_conforms(Json::parse(testing::read_file(dir / "c.jsonl")), schema["$defs"]["cache_row"]);
}

TEST(WireSchema, ResponseParsesAndConforms) {
  const Json schema = load_schema();
  const std::string body = R"({"model_id":"m","entries":[{"token_id":2,"logprob":-0.2},{"token_id":0,"logprob":-1.9}]})";
  const Json doc = Json::parse(body);
  expect_conforms(doc, schema["$defs"]["response"]);
  for (const auto& e : doc["entries"]) expect_conforms(e, schema["$defs"]["entry"]);
  const auto [model, entries] = parse_logits_response(body);
  EXPECT_EQ(model, "m");
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].token_id, 2);
  EXPECT_EQ(code_of([] { parse_logits_response(R"({"model_id":"m"})"); }), Errc::kParseError);
}

// Serves /v1/logits on an ephemeral port with a programmable status code.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/logits", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      last_request_ = req.body;
      const int status = status_.load();
      if (status != 200) {
        res.status = status;
        return;
      }
      const Json in = Json::parse(req.body);
      Json entries = Json::array();
      for (int k = 0; k < in["top_k"].get<int>(); ++k) entries.push_back({{"token_id", k}, {"logprob", -1.0 - k}});
      res.set_content(Json{{"model_id", "fake"}, {"entries", entries}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  HttpOracleConfig config(std::size_t top_k, std::size_t vocab) const {
    HttpOracleConfig cfg;
    cfg.base_url = fmt::format("http://127.0.0.1:{}", port_);
    cfg.top_k = top_k;
    cfg.vocab_size = vocab;
    cfg.initial_backoff = std::chrono::milliseconds(5);
    cfg.timeout = std::chrono::seconds(5);
    return cfg;
  }
  void set_status(int s) { status_ = s; }
  int hits() const { return hits_.load(); }
  std::string last_request() const { return last_request_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> status_{200};
  std::atomic<int> hits_{0};
  std::string last_request_;
};

TEST(HttpOracle, SuccessfulQueryIsAlignedAndCounted) {
  FakeServer server;
  auto backend = std::make_shared<HttpOracleBackend>(server.config(2, 4));
  Oracle oracle(backend);
  ApiLedger ledger(10);
  const Example x{"a", testing::to_eigen_list({1.0, 2.0}), 0};
  const LogitVector got = oracle.query(x, ledger);
  EXPECT_EQ(got, testing::to_eigen_list({-1.0, -2.0, -12.0, -12.0}));
  EXPECT_EQ(backend->model_id(), "fake");
  expect_conforms(Json::parse(server.last_request()), load_schema()["$defs"]["request"]);
  oracle.query(x, ledger);
  EXPECT_EQ(server.hits(), 1);
  EXPECT_EQ(ledger.unique_count(), 1u);
}

TEST(HttpOracle, TooManyRequestsIsBudgetExceeded) {
  FakeServer server;
  server.set_status(429);
  Oracle oracle(std::make_shared<HttpOracleBackend>(server.config(2, 4)));
  ApiLedger ledger(10);
  EXPECT_EQ(code_of([&] { oracle.query({"a", Eigen::VectorXd::Zero(1), 0}, ledger); }), Errc::kBudgetExceeded);
  EXPECT_EQ(server.hits(), 1);
  EXPECT_EQ(ledger.unique_count(), 0u);
}

TEST(HttpOracle, ServerErrorsAreRetriedThenUnavailable) {
  FakeServer server;
  server.set_status(503);
  Oracle oracle(std::make_shared<HttpOracleBackend>(server.config(2, 4)));
  ApiLedger ledger(10);
  EXPECT_EQ(code_of([&] { oracle.query({"a", Eigen::VectorXd::Zero(1), 0}, ledger); }), Errc::kOracleUnavailable);
  EXPECT_EQ(server.hits(), 3);
  EXPECT_EQ(ledger.unique_count(), 0u);
}

TEST(HttpOracle, UnreachableServerIsUnavailable) {
  HttpOracleConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.vocab_size = 3;
  cfg.top_k = 1;
  cfg.max_attempts = 2;
  cfg.initial_backoff = std::chrono::milliseconds(1);
  cfg.timeout = std::chrono::seconds(1);
  HttpOracleBackend backend(cfg);
  EXPECT_EQ(code_of([&] { backend.evaluate({"a", Eigen::VectorXd::Zero(1), 0}); }), Errc::kOracleUnavailable);
}

TEST(HttpOracle, RequiresVocabularySize) {
  HttpOracleConfig cfg;
  EXPECT_EQ(code_of([&] { HttpOracleBackend b(cfg); }), Errc::kConfigError);
}

}  // namespace
}  // namespace logitmap
