#include "kunpeng/cache.hpp"

#include <stdexcept>

namespace kp {

CounterLru::CounterLru(std::size_t capacity, CacheMode mode) : capacity_(capacity), mode_(mode) {
  if (capacity_ < 1) throw std::invalid_argument("cache capacity must be at least 1");
}

CacheEvent CounterLru::access(std::int64_t key) {
  CacheEvent ev;
  auto it = counters_.find(key);
  if (it != counters_.end()) {
    ev.hit = true;
    ev.h_value = it->second;
    it->second = 0;
  } else {
    if (counters_.size() >= capacity_) {
      // std::map iterates keys ascending, so strict '>' keeps the smallest key on ties.
      auto victim = counters_.begin();
      for (auto j = counters_.begin(); j != counters_.end(); ++j) {
        if (j->second > victim->second) victim = j;
      }
      ev.h_value = victim->second;
      ev.evicted = victim->first;
      counters_.erase(victim);
    }
    it = counters_.emplace(key, 0).first;
  }
  if (mode_ == CacheMode::literal) {
    ++it->second;
  } else {
    for (auto& [k, c] : counters_) {
      if (k != key) ++c;
    }
  }
  return ev;
}

std::vector<CacheEvent> simulate_cache(std::size_t capacity, CacheMode mode, std::span<const std::int64_t> requests) {
  CounterLru lru(capacity, mode);
  std::vector<CacheEvent> out;
  out.reserve(requests.size());
  for (auto r : requests) out.push_back(lru.access(r));
  return out;
}

}  // namespace kp
