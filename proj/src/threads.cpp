#include "ensldm/threads.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ensldm {

namespace {
int g_threads = 0;  // 0 = unresolved

int resolve_default() {
  if (const char* env = std::getenv("ENSEMBLE_LDM_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}
}  // namespace

int max_threads() {
  if (g_threads <= 0) g_threads = resolve_default();
  return g_threads;
}

void set_max_threads(int n) { g_threads = n > 0 ? n : resolve_default(); }

bool in_parallel_region() {
#ifdef _OPENMP
  return omp_in_parallel() != 0;
#else
  return false;
#endif
}

}  // namespace ensldm
