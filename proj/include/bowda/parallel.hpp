#pragma once

#include <cstddef>
#include <functional>

namespace bowda {

/// Worker cap for data-parallel loops. Results never depend on it: parallel
/// loops only partition independent work items, and any reduction over items
/// happens afterwards in item order.
void set_num_threads(int n);
int num_threads();

/// Resolves the thread count from an explicit flag value (> 0), then the
/// BOWDA_THREADS environment variable, then hardware concurrency.
int resolve_thread_count(int flag_value);

/// Runs fn(i) for i in [0, count). Items may run concurrently.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace bowda
