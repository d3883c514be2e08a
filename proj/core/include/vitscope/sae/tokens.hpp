#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/shapes.hpp"

#include <vector>

namespace vitscope::sae {

/// Residual activations stacked per read point: result[l] has one row per
/// (image, token) pair, image-major, for the first `max_images` images
/// (all when negative).
std::vector<Matrix> collect_read_points(const backbone::ResidualBackbone& bb, const backbone::Dataset& ds,
                                        int max_images = -1, int threads = 0);

/// Same, for a single read point.
Matrix collect_tokens(const backbone::ResidualBackbone& bb, const backbone::Dataset& ds, int read_point,
                      int max_images = -1, int threads = 0);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers (0 = hardware).
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace vitscope::sae
