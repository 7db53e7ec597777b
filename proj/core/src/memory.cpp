#include "bsatnp/memory.hpp"

#include <algorithm>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace bsatnp {

MemoryCounters& memory_counters() noexcept {
  thread_local MemoryCounters counters;
  return counters;
}

void keep_freed_pages() noexcept {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

PeakMemoryScope::PeakMemoryScope() noexcept {
  auto& c = memory_counters();
  base_ = c.current_bytes;
  saved_peak_ = c.peak_bytes;
  c.peak_bytes = c.current_bytes;
}

PeakMemoryScope::~PeakMemoryScope() {
  auto& c = memory_counters();
  c.peak_bytes = std::max(saved_peak_, c.peak_bytes);
}

std::size_t PeakMemoryScope::peak_bytes() const noexcept {
  const auto peak = memory_counters().peak_bytes;
  return peak > base_ ? peak - base_ : 0;
}

}  // namespace bsatnp
