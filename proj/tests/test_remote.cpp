#include "modarith/formula.hpp"
#include "modarith/remote.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <thread>

using namespace modarith;

namespace {

// Local backend on an ephemeral port; the handler decides every response.
class TestServer {
 public:
  using Handler = std::function<void(const nlohmann::json&, httplib::Response&)>;

  explicit TestServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) { serve(req, res); });
    server_.Post("/api/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) { serve(req, res); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& path = "") const { return "http://127.0.0.1:" + std::to_string(port_) + path; }
  std::size_t hits() const { return hits_.load(); }
  nlohmann::json last_request() const {
    std::lock_guard lock(mutex_);
    return last_;
  }

 private:
  void serve(const httplib::Request& req, httplib::Response& res) {
    ++hits_;
    const nlohmann::json body = nlohmann::json::parse(req.body);
    {
      std::lock_guard lock(mutex_);
      last_ = body;
    }
    handler_(body, res);
  }

  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<std::size_t> hits_{0};
  mutable std::mutex mutex_;
  nlohmann::json last_;
};

void reply(httplib::Response& res, const std::vector<double>& logprobs) {
  res.set_content(nlohmann::json{{"logprobs", logprobs}}.dump(), "application/json");
}

RemoteOptions options(const std::string& endpoint, std::size_t retries = 2) {
  RemoteOptions o;
  o.endpoint = endpoint;
  o.model = "toy";
  o.timeout = std::chrono::milliseconds(1000);
  o.retries = retries;
  return o;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no modarith::Error thrown";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Remote, UniformEcho) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { reply(res, std::vector<double>(5, 0.0)); });
  RemoteProvider p("R", 5, options(server.url()));
  const LogDistribution d = p.next_logdist(Context{3, 1});
  for (std::size_t x = 0; x < 5; ++x) EXPECT_NEAR(d.prob(x), 0.2, 1e-12);
  EXPECT_EQ(server.last_request()["model"], "toy");
  EXPECT_EQ(server.last_request()["context"], nlohmann::json::array({3, 1}));
  EXPECT_EQ(p.attempts(), 1u);
}

TEST(Remote, RenormalizesLocallyAndMapsNullToFloor) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"logprobs": [1.0, 1.0, null, 2.0]})", "application/json");
  });
  RemoteProvider p("R", 4, options(server.url()));
  const LogDistribution d = p.next_logdist(Context{});
  const double z = 2.0 * std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(d.prob(0), std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(d.prob(3), std::exp(2.0) / z, 1e-12);
  EXPECT_EQ(d.prob(2), 0.0);
  EXPECT_TRUE(d.floored(2));
}

TEST(Remote, ShortResponseIsVocabMismatch) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { reply(res, std::vector<double>(4, 0.0)); });
  RemoteProvider p("R", 5, options(server.url()));
  EXPECT_EQ(code_of([&] { p.next_logdist(Context{}); }), ErrorCode::VocabMismatch);
  EXPECT_EQ(server.hits(), 1u);  // not retried
}

TEST(Remote, ServerErrorsExhaustTheRetryBudget) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { res.status = 503; });
  for (std::size_t retries : {0u, 1u, 3u}) {
    const std::size_t before = server.hits();
    RemoteProvider p("R", 3, options(server.url(), retries));
    EXPECT_EQ(code_of([&] { p.next_logdist(Context{}); }), ErrorCode::BackendUnavailable);
    EXPECT_EQ(p.attempts(), retries + 1);
    EXPECT_EQ(server.hits() - before, retries + 1);
  }
}

TEST(Remote, UnreachableEndpointExhaustsTheRetryBudget) {
  std::string url;
  {
    // Grab a free port, then close it.
    httplib::Server probe;
    const int port = probe.bind_to_any_port("127.0.0.1");
    url = "http://127.0.0.1:" + std::to_string(port);
  }
  RemoteOptions o = options(url, 2);
  o.timeout = std::chrono::milliseconds(200);
  RemoteProvider p("R", 3, o);
  EXPECT_EQ(code_of([&] { p.next_logdist(Context{}); }), ErrorCode::BackendUnavailable);
  EXPECT_EQ(p.attempts(), 3u);
}

TEST(Remote, TransientFailureRecovers) {
  std::atomic<int> calls{0};
  TestServer server([&](const nlohmann::json&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = 500;
      return;
    }
    reply(res, {0.0, 0.0});
  });
  RemoteProvider p("R", 2, options(server.url(), 2));
  EXPECT_NEAR(p.next_logdist(Context{}).prob(1), 0.5, 1e-12);
  EXPECT_EQ(p.attempts(), 3u);
}

TEST(Remote, ClientErrorsAreNotRetried) {
  TestServer vocab([](const nlohmann::json&, httplib::Response& res) { res.status = 422; });
  RemoteProvider a("R", 2, options(vocab.url()));
  EXPECT_EQ(code_of([&] { a.next_logdist(Context{}); }), ErrorCode::VocabMismatch);
  EXPECT_EQ(vocab.hits(), 1u);

  TestServer bad([](const nlohmann::json&, httplib::Response& res) { res.status = 400; });
  RemoteProvider b("R", 2, options(bad.url()));
  EXPECT_EQ(code_of([&] { b.next_logdist(Context{}); }), ErrorCode::BadRequest);
  EXPECT_EQ(bad.hits(), 1u);
}

TEST(Remote, MalformedBodyIsBackendUnavailable) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { res.set_content("not json", "text/plain"); });
  RemoteProvider p("R", 2, options(server.url()));
  EXPECT_EQ(code_of([&] { p.next_logdist(Context{}); }), ErrorCode::BackendUnavailable);
}

TEST(Remote, EndpointPrefixAndCostEstimate) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { reply(res, {0.0, -1.0}); });
  RemoteProvider p("R", 2, options(server.url("/api/")));
  EXPECT_EQ(p.cost_hint(), 1.0);
  p.next_logdist(Context{0});
  EXPECT_GT(p.cost_hint(), 0.0);
  EXPECT_EQ(server.hits(), 1u);
}

TEST(Remote, EvaluateRefusesOverlongContexts) {
  TestServer server([](const nlohmann::json&, httplib::Response& res) { reply(res, {0.0, 0.0}); });
  RemoteOptions o = options(server.url());
  o.max_context = 2;
  Registry registry(2);
  registry.add(std::make_shared<RemoteProvider>("R", 2, o));
  const Formula f = parse_formula("R", registry);
  EXPECT_NEAR(evaluate(f, Context{0, 1}).prob(0), 0.5, 1e-12);
  EXPECT_EQ(code_of([&] { evaluate(f, Context{0, 1, 0}); }), ErrorCode::ContextTooLong);
  EXPECT_EQ(server.hits(), 1u);
}

TEST(Remote, ConcurrentCallsShareThePool) {
  TestServer server([](const nlohmann::json& body, httplib::Response& res) {
    const double bias = body["context"].size();
    reply(res, {bias, 0.0});
  });
  RemoteProvider p("R", 2, options(server.url()));
  std::vector<std::thread> threads;
  std::atomic<int> wrong{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 10; ++i) {
        const Context ctx(static_cast<std::size_t>(t), 0);
        const double want = std::exp(double(t)) / (std::exp(double(t)) + 1.0);
        if (std::abs(p.next_logdist(ctx).prob(0) - want) > 1e-12) ++wrong;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(wrong.load(), 0);
  EXPECT_EQ(server.hits(), 40u);
}
