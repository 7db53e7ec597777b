#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace bsatnp {

// Per-thread byte counters fed by TrackingAllocator. Every tensor buffer and
// every kernel scratch buffer in the library goes through it, so peak usage
// of a call can be measured exactly.
struct MemoryCounters {
  std::size_t current_bytes = 0;
  std::size_t peak_bytes = 0;
  std::size_t allocations = 0;
};

MemoryCounters& memory_counters() noexcept;

// Asks the C allocator to keep freed blocks instead of returning them to the
// OS. Training reallocates the same multi-megabyte buffers every step, and
// fresh pages cost a page fault each. No-op outside glibc.
void keep_freed_pages() noexcept;

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    auto& c = memory_counters();
    c.current_bytes += n * sizeof(T);
    c.allocations += 1;
    if (c.current_bytes > c.peak_bytes) c.peak_bytes = c.current_bytes;
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    memory_counters().current_bytes -= n * sizeof(T);
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

// Measures the high-water mark of tracked allocations made while the scope is
// alive, relative to the bytes already live when it was opened.
class PeakMemoryScope {
 public:
  PeakMemoryScope() noexcept;
  ~PeakMemoryScope();
  PeakMemoryScope(const PeakMemoryScope&) = delete;
  PeakMemoryScope& operator=(const PeakMemoryScope&) = delete;

  std::size_t peak_bytes() const noexcept;

 private:
  std::size_t base_;
  std::size_t saved_peak_;
};

}  // namespace bsatnp
