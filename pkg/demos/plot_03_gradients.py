"""
Checking every gradient against finite differences
==================================================

The analytic gradient is computed in the dtype under test; the reference is
a float64 central difference.  Coordinates sitting on a kink (relu at zero,
a max-pool tie) are detected and skipped.
"""

from collections import defaultdict

from siamese_zsl.gradcheck import run_suite

results = run_suite(seeds=range(5))
worst = defaultdict(float)
for r in results:
    worst[r.name, r.dtype] = max(worst[r.name, r.dtype], r.error)
for (name, dtype), err in sorted(worst.items()):
    print(f"{name:18} {dtype}  {err:.1e}")
print(sum(r.passed for r in results), "of", len(results), "checks passed")
