#include "vitscope/sae/tokens.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace vitscope::sae {

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<Matrix> collect_read_points(const backbone::ResidualBackbone& bb, const backbone::Dataset& ds,
                                        int max_images, int threads) {
  const int n = max_images < 0 ? static_cast<int>(ds.samples.size())
                               : std::min<int>(max_images, static_cast<int>(ds.samples.size()));
  const int t = bb.num_tokens();
  std::vector<Matrix> out(bb.num_read_points(), Matrix(static_cast<Eigen::Index>(n) * t, bb.width()));
  parallel_for(n, threads, [&](int i) {
    const auto rec = backbone::run_forward(bb, ds.samples[i].image, {}, false);
    for (int l = 0; l < bb.num_read_points(); ++l) out[l].middleRows(static_cast<Eigen::Index>(i) * t, t) = rec.read_points[l];
  });
  return out;
}

Matrix collect_tokens(const backbone::ResidualBackbone& bb, const backbone::Dataset& ds, int read_point,
                      int max_images, int threads) {
  if (read_point < 0 || read_point >= bb.num_read_points()) {
    throw InputError("read point " + std::to_string(read_point) + " out of range [0, " +
                     std::to_string(bb.num_read_points()) + ")");
  }
  const int n = max_images < 0 ? static_cast<int>(ds.samples.size())
                               : std::min<int>(max_images, static_cast<int>(ds.samples.size()));
  const int t = bb.num_tokens();
  Matrix out(static_cast<Eigen::Index>(n) * t, bb.width());
  parallel_for(n, threads, [&](int i) {
    const auto rec = backbone::run_forward(bb, ds.samples[i].image, {}, false);
    out.middleRows(static_cast<Eigen::Index>(i) * t, t) = rec.read_points[read_point];
  });
  return out;
}

}  // namespace vitscope::sae
