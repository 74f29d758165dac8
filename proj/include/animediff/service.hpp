#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "animediff/colorize.hpp"

namespace animediff::service {

using ColorizeHandler =
    std::function<ColorizeResult(const Tensor<float>& line, const Tensor<float>& reference, const ColorizeOptions&)>;

/// Bounded single-lane job queue. Capacity counts every accepted job that has
/// not finished yet, including the one running, so capacity 1 means "one at a time, no waiting".
class JobQueue {
 public:
  JobQueue(int capacity, ColorizeHandler handler);
  ~JobQueue();
  JobQueue(const JobQueue&) = delete;
  JobQueue& operator=(const JobQueue&) = delete;

  /// nullopt when the queue is full.
  std::optional<std::future<ColorizeResult>> submit(Tensor<float> line, Tensor<float> reference,
                                                    ColorizeOptions options);
  [[nodiscard]] int in_flight() const;
  [[nodiscard]] int capacity() const { return capacity_; }

 private:
  struct Job {
    Tensor<float> line;
    Tensor<float> reference;
    ColorizeOptions options;
    std::promise<ColorizeResult> promise;
  };

  void run();

  int capacity_;
  ColorizeHandler handler_;
  mutable std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<Job> waiting_;
  int in_flight_ = 0;
  bool stopping_ = false;
  std::thread worker_;
};

struct ModelInfo {
  std::string checkpoint_hash;
  std::string stage;
  Json summary;  ///< body of GET /v1/model
};

/// HTTP API backing the studio:
///   POST /v1/colorize  multipart fields line, reference (PNG), optional steps, seed
///   GET  /v1/health    {status, checkpoint_hash, stage}
///   GET  /v1/model     configuration summary
class Server {
 public:
  Server(ModelInfo info, ColorizeHandler handler, int max_queue);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and returns the port (0 picks a free one). Throws on failure.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits "host:port".
std::pair<std::string, int> parse_bind(const std::string& bind);

std::string base64_encode(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> base64_decode(const std::string& text);

}  // namespace animediff::service
