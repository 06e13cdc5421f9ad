#include "modarith/providers.hpp"

#include <gtest/gtest.h>

#include <sstream>
#include <thread>

using namespace modarith;

namespace {

LogDistribution dist(std::vector<double> p) { return LogDistribution::from_probabilities(p); }

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

Context random_context(RngStream& rng, std::size_t vocab, std::size_t max_len) {
  Context ctx(rng.next_u64() % (max_len + 1));
  for (TokenId& t : ctx) t = static_cast<TokenId>(rng.next_u64() % vocab);
  return ctx;
}

}  // namespace

TEST(Ngram, HandCountedBigram) {
  const std::vector<Context> corpus{{0, 1, 0, 1}};
  const auto m = train_ngram("M", corpus, 2, 2, 1.0);
  const LogDistribution d = m->next_logdist(Context{0});
  // after 0 the corpus shows token 1 twice: ((0+1)/(2+2), (2+1)/(2+2))
  EXPECT_NEAR(d.prob(0), (0.0 + 1.0) / (2.0 + 2.0), 1e-12);
  EXPECT_NEAR(d.prob(1), (2.0 + 1.0) / (2.0 + 2.0), 1e-12);
  EXPECT_NEAR(d.prob(0), 0.25, 1e-12);
  // after 1: token 0 once
  const LogDistribution e = m->next_logdist(Context{0, 1});
  EXPECT_NEAR(e.prob(0), 2.0 / 3.0, 1e-12);
}

TEST(Ngram, UnigramIgnoresContext) {
  const std::vector<Context> corpus{{0, 0, 0, 1}, {2}};
  const auto m = train_ngram("U", corpus, 3, 1, 0.5);
  const LogDistribution a = m->next_logdist(Context{});
  const LogDistribution b = m->next_logdist(Context{2, 1, 0});
  EXPECT_EQ(a, b);
  // (count + 0.5) / (5 + 1.5)
  EXPECT_NEAR(a.prob(0), 3.5 / 6.5, 1e-12);
  EXPECT_NEAR(a.prob(1), 1.5 / 6.5, 1e-12);
  EXPECT_NEAR(a.prob(2), 1.5 / 6.5, 1e-12);
}

TEST(Ngram, UnseenContextIsUniform) {
  const std::vector<Context> corpus{{0, 1, 0, 1}};
  const auto m = train_ngram("M", corpus, 3, 2, 0.7);
  const LogDistribution d = m->next_logdist(Context{2});
  for (std::size_t x = 0; x < 3; ++x) EXPECT_NEAR(d.prob(x), 1.0 / 3.0, 1e-12);
}

TEST(Ngram, Errors) {
  const std::vector<Context> none;
  EXPECT_EQ(code_of([&] { train_ngram("M", none, 2, 2, 1.0); }), ErrorCode::EmptyCorpus);
  const std::vector<Context> blank{{}};
  EXPECT_EQ(code_of([&] { train_ngram("M", blank, 2, 2, 1.0); }), ErrorCode::EmptyCorpus);
  const std::vector<Context> corpus{{0, 1}};
  EXPECT_EQ(code_of([&] { train_ngram("M", corpus, 2, 0, 1.0); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { train_ngram("M", corpus, 2, 2, 0.0); }), ErrorCode::InvalidArgument);
  const std::vector<Context> out_of_range{{0, 5}};
  EXPECT_EQ(code_of([&] { train_ngram("M", out_of_range, 2, 2, 1.0); }), ErrorCode::InvalidArgument);
}

TEST(Ngram, LargerAlphaMovesTowardUniform) {
  RngStream rng(1, 0);
  std::vector<Context> corpus;
  for (int i = 0; i < 30; ++i) corpus.push_back(random_context(rng, 6, 12));
  // skew the counts so the conditionals are far from uniform
  corpus.push_back(Context(40, 3));
  const LogDistribution uniform = LogDistribution::uniform(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Context ctx = random_context(rng, 6, 4);
    double previous = 2.0;
    for (double alpha : {0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 100.0}) {
      const double tv = total_variation(train_ngram("M", corpus, 6, 3, alpha)->next_logdist(ctx), uniform);
      EXPECT_LE(tv, previous + 1e-15);
      previous = tv;
    }
  }
}

TEST(Ngram, ParsesCorpusText) {
  std::istringstream in("0 1 2\n\n  3 4 \n5\n");
  const auto corpus = parse_corpus(in);
  ASSERT_EQ(corpus.size(), 3u);
  EXPECT_EQ(corpus[0], (Context{0, 1, 2}));
  EXPECT_EQ(corpus[1], (Context{3, 4}));
  std::istringstream bad("0 x 2\n");
  EXPECT_THROW(parse_corpus(bad), Error);
}

TEST(Tabular, LongestSuffixWins) {
  TabularProvider t("T", dist({0.5, 0.25, 0.25}), 2);
  t.set({1}, dist({1.0, 0.0, 0.0}));
  t.set({2, 1}, dist({0.0, 1.0, 0.0}));
  t.set({}, dist({0.0, 0.0, 1.0}));
  EXPECT_EQ(t.next_logdist(Context{0, 1}).prob(0), 1.0);
  EXPECT_EQ(t.next_logdist(Context{2, 1}).prob(1), 1.0);
  EXPECT_EQ(t.next_logdist(Context{0, 0, 2, 1}).prob(1), 1.0);
  EXPECT_EQ(t.next_logdist(Context{0}).prob(2), 1.0);  // empty suffix entry beats the fallback
  EXPECT_EQ(t.cost_hint(), 1.0);
  EXPECT_EQ(TabularProvider("X", LogDistribution::uniform(3)).key_length(), 3u);
}

TEST(Tabular, RejectsBadEntries) {
  TabularProvider t("T", dist({0.5, 0.5}), 1);
  EXPECT_EQ(code_of([&] { t.set({0, 1}, dist({0.5, 0.5})); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { t.set({0}, dist({0.2, 0.3, 0.5})); }), ErrorCode::VocabMismatch);
  EXPECT_EQ(code_of([&] { t.set({0}, LogDistribution(std::vector<double>{0.0, 0.0})); }), ErrorCode::InvalidArgument);
}

TEST(Providers, OutputsSumToOne) {
  RngStream rng(2, 0);
  std::vector<Context> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back(random_context(rng, 7, 15));
  TabularProvider tab("T", dist({0.1, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1}));
  tab.set({3}, dist({0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0}));
  const std::vector<ProviderPtr> providers{train_ngram("N1", corpus, 7, 1, 0.3), train_ngram("N3", corpus, 7, 3, 0.05),
                                           std::make_shared<TabularProvider>(tab), std::make_shared<UniformProvider>(7)};
  for (const ProviderPtr& p : providers) {
    for (int i = 0; i < 1000; ++i) {
      const LogDistribution d = p->next_logdist(random_context(rng, 7, 10));
      ASSERT_TRUE(d.normalized());
      ASSERT_NEAR(d.mass(), 1.0, 1e-9) << p->name();
    }
  }
}

TEST(Providers, PureUnderConcurrentCalls) {
  RngStream rng(3, 0);
  std::vector<Context> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back(random_context(rng, 5, 15));
  const auto m = train_ngram("M", corpus, 5, 3, 0.1);
  std::vector<Context> contexts;
  for (int i = 0; i < 200; ++i) contexts.push_back(random_context(rng, 5, 6));
  std::vector<LogDistribution> serial;
  for (const Context& c : contexts) serial.push_back(m->next_logdist(c));
  std::vector<std::vector<LogDistribution>> parallel(4);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < parallel.size(); ++t) {
    threads.emplace_back([&, t] {
      for (const Context& c : contexts) parallel[t].push_back(m->next_logdist(c));
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& results : parallel) EXPECT_EQ(results, serial);
}

// --- classifiers -----------------------------------------------------------

TEST(ClassifierInduced, ConstantScoresGiveUniform) {
  const FunctionClassifier c("C", [](std::span<const TokenId>) { return 0.25; });
  const LogDistribution q = classifier_induced_distribution(c, Context{1}, 4, dist({0.7, 0.1, 0.1, 0.1}));
  for (std::size_t x = 0; x < 4; ++x) EXPECT_NEAR(q.prob(x), 0.25, 1e-12);
}

TEST(ClassifierInduced, TopKUsesPrefixScoreForTheRest) {
  // vocab {a, b, c}; ranking (0.5, 0.3, 0.2); top 2 are a and b.
  const Context ctx{1, 1};
  const FunctionClassifier c("C", [&](std::span<const TokenId> text) {
    if (text.size() == ctx.size()) return 0.5;
    return text.back() == 0 ? 0.9 : text.back() == 1 ? 0.1 : 0.99;
  });
  const LogDistribution q = classifier_induced_distribution(c, ctx, 2, dist({0.5, 0.3, 0.2}));
  const double z = 0.9 + 0.1 + 0.5;
  EXPECT_NEAR(q.prob(0), 0.9 / z, 1e-12);
  EXPECT_NEAR(q.prob(1), 0.1 / z, 1e-12);
  EXPECT_NEAR(q.prob(2), 0.5 / z, 1e-12);
  EXPECT_NEAR(q.prob(0), 0.6, 1e-12);
  EXPECT_NEAR(q.prob(1), 0.0667, 1e-4);
  EXPECT_NEAR(q.prob(2), 0.3333, 1e-4);
}

TEST(ClassifierInduced, FullTopKMatchesBruteForce) {
  RngStream rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 9;
    std::vector<double> scores(n);
    for (double& s : scores) s = 0.01 + 0.98 * rng.next_uniform();
    const FunctionClassifier c("C", [&](std::span<const TokenId> text) { return scores[text.back()]; });
    std::vector<double> ranking(n, 1.0);
    ranking[trial % n] = 5.0;
    const LogDistribution q = classifier_induced_distribution(c, Context{0}, n, dist(ranking));
    double z = 0.0;
    for (double s : scores) z += s;
    for (std::size_t x = 0; x < n; ++x) EXPECT_NEAR(q.prob(x), scores[x] / z, 1e-9);
  }
}

TEST(ClassifierInduced, RangeAndArgumentErrors) {
  const FunctionClassifier one("C", [](std::span<const TokenId>) { return 1.0; });
  const FunctionClassifier zero("Z", [](std::span<const TokenId>) { return 0.0; });
  const LogDistribution r = LogDistribution::uniform(3);
  EXPECT_EQ(code_of([&] { classifier_induced_distribution(one, Context{}, 3, r); }), ErrorCode::ClassifierRange);
  EXPECT_EQ(code_of([&] { classifier_induced_distribution(zero, Context{}, 3, r); }), ErrorCode::ClassifierRange);
  const FunctionClassifier ok("C", [](std::span<const TokenId>) { return 0.5; });
  EXPECT_EQ(code_of([&] { classifier_induced_distribution(ok, Context{}, 0, r); }), ErrorCode::InvalidArgument);
}

TEST(TokenSetClassifier, LogisticOfWindowHits) {
  const TokenSetClassifier c("C", {2, 3}, 1.5, -1.0, 2);
  const auto logistic = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  EXPECT_NEAR(c.score(Context{}), logistic(-1.0), 1e-15);
  EXPECT_NEAR(c.score(Context{2, 3}), logistic(2.0), 1e-15);
  EXPECT_NEAR(c.score(Context{2, 3, 0}), logistic(0.5), 1e-15);  // window of two drops the first hit
  const double s = checked_score(c, Context{3, 3});
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
}
