"""
Training on precomputed features
================================

Features from any external extractor can replace the convolutional stack.
They travel in the binary EMBV format; here a random projection of
species-dependent vectors stands in for a real extractor.
"""

import tempfile
from pathlib import Path

import numpy as np

from siamese_zsl.data import (Dataset, EmbeddingStore, import_embeddings, make_split,
                              sample_pairs, write_embeddings)
from siamese_zsl.trainer import TrainConfig, evaluate_model, train

rng = np.random.default_rng(1)
species = [f"s{i}" for i in range(10)]
centres = {sp: rng.standard_normal(64) for sp in species}
ds = Dataset.from_records((f"{sp}_{j}", sp) for sp in species for j in range(40))
features = {s.id: centres[s.species] + 0.5 * rng.standard_normal(64) for s in ds.samples}

path = Path(tempfile.mkdtemp()) / "features.embv"
write_embeddings(EmbeddingStore(64, features), path)
store = import_embeddings(path)
store.join(ds)

split = make_split(ds, min_count=1, seed=0, unseen=species[-3:])
params, log = train(ds, split, TrainConfig(backbone="precomputed", max_epochs=15), store)
for scope in ("seen", "unseen"):
    report, cm = evaluate_model(params, ds, sample_pairs(split, 100, scope=scope), store=store)
    print(f"{scope:7} F1 {report.f1:.3f}  {cm}")
