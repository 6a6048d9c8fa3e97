#pragma once

namespace evspike {

/// Caps OpenMP worker threads; n <= 0 restores the runtime default.
void set_thread_count(int n);
int thread_count();

}  // namespace evspike
