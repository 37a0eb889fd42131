#pragma once

#include <cstddef>
#include <functional>

namespace psx {

/// Worker count used when a caller passes 0.
std::size_t default_workers();

/// Calls `body(begin, end)` for consecutive chunks of [0, count) of at most
/// `chunk` items, spread over `workers` threads. `on_chunk_done(end - begin)`
/// runs serialized after each chunk. The first exception thrown by a chunk is
/// rethrown after all workers stop.
void parallel_chunks(std::size_t count, std::size_t chunk, std::size_t workers,
                     const std::function<void(std::size_t, std::size_t)>& body,
                     const std::function<void(std::size_t)>& on_chunk_done = {});

}  // namespace psx
