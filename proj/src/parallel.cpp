#include "psx/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace psx {

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

void parallel_chunks(std::size_t count, std::size_t chunk, std::size_t workers,
                     const std::function<void(std::size_t, std::size_t)>& body,
                     const std::function<void(std::size_t)>& on_chunk_done) {
  if (count == 0) return;
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (count + chunk - 1) / chunk;
  workers = std::min(workers == 0 ? default_workers() : workers, chunks);

  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex mutex;
  std::exception_ptr error;

  auto run = [&] {
    while (!stop.load()) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      const std::size_t begin = c * chunk;
      const std::size_t end = std::min(count, begin + chunk);
      try {
        body(begin, end);
        if (on_chunk_done) {
          std::lock_guard lock(mutex);
          on_chunk_done(end - begin);
        }
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
        stop = true;
      }
    }
  };

  if (workers <= 1) {
    run();
  } else {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace psx
