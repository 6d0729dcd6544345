#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

namespace kp {

enum class CacheMode {
  aging,    // every other resident ages on each access: true LRU
  literal,  // only the requested entry's counter increments
};

struct CacheEvent {
  bool hit = false;
  std::int64_t h_value = 0;  // counter before reset on a hit, evicted counter on a full miss
  std::optional<std::int64_t> evicted;
};

/// Counter bookkeeping of the date-indexed replacement policy, without
/// payloads. Ties on the largest counter evict the smallest date index.
class CounterLru {
 public:
  CounterLru(std::size_t capacity, CacheMode mode);

  /// Applies one request and reports hit/miss, h-value and any eviction.
  CacheEvent access(std::int64_t key);

  bool contains(std::int64_t key) const { return counters_.count(key) != 0; }
  std::size_t size() const { return counters_.size(); }
  std::size_t capacity() const { return capacity_; }
  CacheMode mode() const { return mode_; }
  const std::map<std::int64_t, std::int64_t>& counters() const { return counters_; }

 private:
  std::size_t capacity_;
  CacheMode mode_;
  std::map<std::int64_t, std::int64_t> counters_;
};

std::vector<CacheEvent> simulate_cache(std::size_t capacity, CacheMode mode,
                                       std::span<const std::int64_t> requests);

/// Thread-safe payload cache over CounterLru.
///
/// One mutex guards all bookkeeping. Loaders run outside the lock; concurrent
/// requests for a key that is already loading wait on the same future instead
/// of loading twice. A throwing loader leaves the cache untouched.
template <typename Payload>
class SampleCache {
 public:
  using Loader = std::function<Payload(std::int64_t)>;
  using Ptr = std::shared_ptr<const Payload>;

  struct Result {
    Ptr payload;
    bool hit = false;
    std::int64_t h_value = 0;
  };

  explicit SampleCache(std::size_t capacity, CacheMode mode = CacheMode::aging) : lru_(capacity, mode) {}

  Result get(std::int64_t key, const Loader& loader) {
    std::unique_lock lock(mu_);
    for (;;) {
      if (lru_.contains(key)) {
        const CacheEvent ev = lru_.access(key);
        ++hits_;
        return {payloads_.at(key), true, ev.h_value};
      }
      auto it = inflight_.find(key);
      if (it == inflight_.end()) break;
      auto fut = it->second;
      lock.unlock();
      fut.wait();  // rethrows below if the load failed
      if (!fut.get()) throw std::runtime_error("cache load failed");
      lock.lock();
      // The loaded entry may already have been evicted again; loop re-checks.
    }

    std::promise<Ptr> promise;
    inflight_.emplace(key, promise.get_future().share());
    lock.unlock();
    Ptr payload;
    try {
      payload = std::make_shared<const Payload>(loader(key));
    } catch (...) {
      lock.lock();
      inflight_.erase(key);
      promise.set_exception(std::current_exception());
      throw;
    }
    lock.lock();
    const CacheEvent ev = lru_.access(key);
    if (ev.evicted) payloads_.erase(*ev.evicted);
    payloads_[key] = payload;
    inflight_.erase(key);
    ++misses_;
    promise.set_value(payload);
    return {payload, false, ev.h_value};
  }

  std::size_t hits() const {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::size_t misses() const {
    std::lock_guard lock(mu_);
    return misses_;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return lru_.size();
  }
  bool contains(std::int64_t key) const {
    std::lock_guard lock(mu_);
    return lru_.contains(key);
  }

 private:
  mutable std::mutex mu_;
  CounterLru lru_;
  std::map<std::int64_t, Ptr> payloads_;
  std::map<std::int64_t, std::shared_future<Ptr>> inflight_;
  std::size_t hits_ = 0, misses_ = 0;
};

}  // namespace kp
