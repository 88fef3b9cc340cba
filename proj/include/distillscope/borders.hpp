#pragma once

#include <algorithm>

namespace distillscope {

/// Half-sample symmetric reflection into [0, n): ... b a | a b c ... c b | ...
inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

inline long clamp_index(long i, long n) { return std::clamp(i, 0L, n - 1); }

}  // namespace distillscope
