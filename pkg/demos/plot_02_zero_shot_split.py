"""
A zero-shot split of a long-tailed collection
=============================================

Species with fewer than ``min_count`` samples never reach training: all of
their samples land in the test partition.  Every other species gives 20% to
test and then 20% of the remainder to validation.
"""

import numpy as np

from siamese_zsl.data import Dataset, make_split, sample_pairs

rng = np.random.default_rng(3)
counts = np.sort(rng.zipf(1.6, 30).clip(max=400) * 25)[::-1]
records = [(f"sp{i:02d}_{j}", f"sp{i:02d}") for i, n in enumerate(counts) for j in range(n)]
ds = Dataset.from_records(records)

split = make_split(ds, min_count=300, seed=0)
print(split.census())
print("unseen:", split.unseen_species)

###############################################################################
# Evaluation pairs come from the test partition.  ``unseen`` is conventional
# zero-shot, ``all`` mixes seen and unseen species.

for scope in ("seen", "unseen", "all"):
    pairs = sample_pairs(split, 200, scope=scope, seed=1)
    print(scope, len(pairs), "pairs,", sum(p.label == 0 for p in pairs), "same-species")
