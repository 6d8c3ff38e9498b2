#pragma once

#include <cstdint>

namespace depthcrf::opcount {

enum class Category { kOther, kAttnInteraction };

struct Counters {
  std::uint64_t total_macs = 0;
  std::uint64_t attn_interaction_macs = 0;
  Category current = Category::kOther;
};

inline Counters& counters() {
  static thread_local Counters c;
  return c;
}

inline void reset() { counters() = Counters{}; }

inline void add_macs(std::uint64_t n) {
  Counters& c = counters();
  c.total_macs += n;
  if (c.current == Category::kAttnInteraction) c.attn_interaction_macs += n;
}

/// Tags MACs recorded while alive as window-attention interaction work
/// (the QK^T and weights*V products).
struct ScopedCategory {
  explicit ScopedCategory(Category cat) : prev(counters().current) {
    counters().current = cat;
  }
  ~ScopedCategory() { counters().current = prev; }
  Category prev;
};

}  // namespace depthcrf::opcount
