#pragma once

#include <vector>

#include "sparsevox/common.hpp"
#include "sparsevox/volume.hpp"

namespace sparsevox {

// Derives a suite of per-case phantom specs from one template: case i gets
// seed base.seed + i and, when jitter > 0, organ centers shifted by a
// deterministic uniform offset in [-jitter, jitter] voxels (clamped so the
// ellipsoid stays inside the volume).
inline std::vector<PhantomSpec> make_phantom_suite(const PhantomSpec& base,
                                                   int count,
                                                   double jitter = 0.0) {
  base.validate();
  std::vector<PhantomSpec> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    PhantomSpec s = base;
    s.seed = base.seed + static_cast<std::uint64_t>(i);
    if (jitter > 0.0) {
      Rng rng(mix64(s.seed ^ 0x0ff5e7ULL));
      for (auto& o : s.organs)
        for (int a = 0; a < 3; ++a) {
          const double shift = rng.uniform(-jitter, jitter);
          const double lo = o.radii[a];
          const double hi = s.dims[a] - 1 - o.radii[a];
          o.center[a] = std::clamp(o.center[a] + shift, lo, hi);
        }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sparsevox
