#pragma once

// HTTP/JSON client for model backends.
//
//   POST {endpoint}/v1/logprobs
//   request  {"model": "<name>", "context": [int, ...]}
//   response {"logprobs": [float, ...]}   (exactly |T| entries)
//
// 5xx responses, timeouts and connection failures are retried up to the retry
// budget and then reported as BackendUnavailable. 422 means the backend
// disagrees about the vocabulary (VocabMismatch); other 4xx are BadRequest.

#include "modarith/providers.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace modarith {

struct RemoteOptions {
  std::string endpoint;  // e.g. "http://127.0.0.1:8080" or "http://host:port/prefix"
  std::string model;
  std::chrono::milliseconds timeout{2000};
  std::size_t retries = 2;
  std::optional<std::size_t> max_context;
  double floor = kDefaultFloor;
};

class RemoteProvider final : public Provider {
 public:
  RemoteProvider(std::string name, std::size_t vocab_size, RemoteOptions options)
      : Provider(std::move(name), vocab_size), options_(std::move(options)) {
    const auto scheme = options_.endpoint.find("://");
    const auto path_start = options_.endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_start == std::string::npos) {
      base_ = options_.endpoint;
    } else {
      base_ = options_.endpoint.substr(0, path_start);
      prefix_ = options_.endpoint.substr(path_start);
      while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    }
  }

  const RemoteOptions& options() const noexcept { return options_; }
  std::size_t attempts() const noexcept { return attempts_.load(); }

  LogDistribution next_logdist(std::span<const TokenId> ctx) const override {
    nlohmann::json request = {{"model", options_.model}, {"context", std::vector<TokenId>(ctx.begin(), ctx.end())}};
    const std::string body = request.dump();
    const std::string path = prefix_ + "/v1/logprobs";
    std::string last_error = "no attempt made";

    for (std::size_t attempt = 0; attempt <= options_.retries; ++attempt) {
      ++attempts_;
      auto client = acquire();
      const auto started = std::chrono::steady_clock::now();
      auto response = client->Post(path, body, "application/json");
      const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
      release(std::move(client));

      if (!response) {
        last_error = "transport error: " + httplib::to_string(response.error());
        continue;
      }
      if (response->status >= 500) {
        last_error = "HTTP " + std::to_string(response->status);
        continue;
      }
      if (response->status == 422) {
        throw Error(ErrorCode::VocabMismatch, name() + ": backend rejected the vocabulary: " + response->body);
      }
      if (response->status >= 400) {
        throw Error(ErrorCode::BadRequest, name() + ": HTTP " + std::to_string(response->status) + ": " + response->body);
      }
      record_cost(elapsed);
      return decode(response->body);
    }
    throw Error(ErrorCode::BackendUnavailable,
                name() + ": gave up after " + std::to_string(options_.retries + 1) + " attempts (" + last_error + ")");
  }

  // Exponential moving average of call latency in milliseconds; 1.0 before the first call.
  double cost_hint() const override {
    std::lock_guard lock(mutex_);
    return cost_ema_.value_or(1.0);
  }

  std::optional<std::size_t> max_context() const override { return options_.max_context; }

 private:
  LogDistribution decode(const std::string& body) const {
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BackendUnavailable, name() + ": malformed response: " + e.what());
    }
    if (!parsed.is_object() || !parsed.contains("logprobs") || !parsed["logprobs"].is_array()) {
      throw Error(ErrorCode::BackendUnavailable, name() + ": response lacks a logprobs array");
    }
    const auto& values = parsed["logprobs"];
    if (values.size() != vocab_size()) {
      throw Error(ErrorCode::VocabMismatch, name() + ": backend returned " + std::to_string(values.size()) +
                                                " log-probs for a vocabulary of " + std::to_string(vocab_size()));
    }
    std::vector<double> logits(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      // JSON has no -inf; null stands for an impossible token.
      logits[i] = values[i].is_number() ? values[i].get<double>() : options_.floor;
      if (std::isnan(logits[i]) || logits[i] == kInfinity) {
        throw Error(ErrorCode::BackendUnavailable, name() + ": non-finite log-prob in response");
      }
    }
    return softmax_normalize(logits, options_.floor);
  }

  std::unique_ptr<httplib::Client> acquire() const {
    {
      std::lock_guard lock(mutex_);
      if (!pool_.empty()) {
        auto client = std::move(pool_.back());
        pool_.pop_back();
        return client;
      }
    }
    auto client = std::make_unique<httplib::Client>(base_);
    const auto secs = options_.timeout.count() / 1000;
    const auto usecs = (options_.timeout.count() % 1000) * 1000;
    client->set_connection_timeout(secs, usecs);
    client->set_read_timeout(secs, usecs);
    client->set_write_timeout(secs, usecs);
    return client;
  }

  void release(std::unique_ptr<httplib::Client> client) const {
    std::lock_guard lock(mutex_);
    pool_.push_back(std::move(client));
  }

  void record_cost(double ms) const {
    std::lock_guard lock(mutex_);
    cost_ema_ = cost_ema_ ? 0.8 * *cost_ema_ + 0.2 * ms : ms;
  }

  RemoteOptions options_;
  std::string base_;
  std::string prefix_;
  mutable std::mutex mutex_;
  mutable std::vector<std::unique_ptr<httplib::Client>> pool_;
  mutable std::optional<double> cost_ema_;
  mutable std::atomic<std::size_t> attempts_{0};
};

}  // namespace modarith
