#pragma once

#include <cstddef>
#include <functional>

namespace trajcluster {

// Global worker cap shared by all modules. Resolution order: explicit
// set_max_threads() (the CLI --threads flag), else the TRAJCLUSTER_THREADS
// environment variable, else the hardware concurrency.
void set_max_threads(int n);
int max_threads();

// Runs fn(i) for i in [0, n). Work items must be independent; each writes
// only to its own output slot so results do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace trajcluster
