#include "motok/common.hpp"

#include <algorithm>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace motok {

namespace {
int g_threads = 0;  // 0 = not yet resolved
}

int num_threads() {
  if (g_threads == 0) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    g_threads = std::clamp(hw, 1, 8);
  }
  return g_threads;
}

void set_num_threads(int n) {
  g_threads = std::max(1, n);
#ifdef _OPENMP
  omp_set_num_threads(g_threads);
#endif
}

}  // namespace motok
