#include "evspike/parallel.hpp"

#include <omp.h>

namespace evspike {

namespace {
const int kDefaultThreads = omp_get_max_threads();
}

void set_thread_count(int n) { omp_set_num_threads(n > 0 ? n : kDefaultThreads); }

int thread_count() { return omp_get_max_threads(); }

}  // namespace evspike
