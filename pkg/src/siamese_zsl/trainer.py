"""Training loop with early stopping, and scope-wise evaluation."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import network as net
from .data import (DataError, Dataset, EmbeddingStore, Pair, SplitManifest, draw_transform,
                   pair_capacity, sample_pairs, sample_pairs_from_pool, transform)
from .loss import LossConfig, contrastive_loss, pair_loss
from .metrics import ConfusionMatrix, MetricsReport, evaluate_scores, write_reports
from .seeding import derive_rng
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,val_loss,val_f1,stale_epochs"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 7
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    margin: float = 1.25  # above the d=1 decision distance, so negatives clear it
    pairs_per_epoch: Optional[int] = None  # None: derived from the train partition size
    val_pairs: Optional[int] = None        # None: derived from the validation partition size
    pos_ratio: float = 0.5
    seed: int = 0
    backbone: str = "builtin"
    normalize: bool = True
    input_size: int = 64
    dropout: float = 0.2
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 <= self.pos_ratio <= 1:
            raise ValueError("pos_ratio must lie in [0, 1]")
        if self.backbone not in net.BACKBONES:
            raise ValueError(f"backbone must be one of {net.BACKBONES}")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")
        for name in ("pairs_per_epoch", "val_pairs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1")
        LossConfig(self.margin)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.margin)


def default_pairs_per_epoch(n_train: int) -> int:
    # two images per pair: one epoch shows each training image once on average
    return max(1, min(n_train // 2, 50000))


def default_val_pairs(n_val: int) -> int:
    return min(2 * n_val, 10000)


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, tensors: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            t.data -= update.astype(t.data.dtype, copy=False)
            t.grad = None


class EarlyStopping:
    """Tracks the best validation loss; ``stale`` resets only on strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.stale = val_loss, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    stale_epochs: int


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = [LOG_HEADER]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.8f},{r.val_loss:.8f},{r.val_f1:.6f},"
                         f"{r.stale_epochs}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


# --------------------------------------------------------------------------
# inputs


class InputSource:
    """Resolves sample ids to network inputs (pixels or precomputed features)."""

    def __init__(self, dataset: Dataset, store: Optional[EmbeddingStore] = None):
        self.dataset = dataset
        self.store = store

    def batch(self, ids: Sequence[str], backbone: str,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if backbone == "precomputed":
            if self.store is None:
                raise DataError("precomputed backbone needs an embedding store")
            return np.stack([self.store[i] for i in ids])
        imgs = []
        for i in ids:
            px = self.dataset.pixels(i)
            if rng is not None:
                px = transform(px, *draw_transform(rng))
            imgs.append(px)
        return np.stack(imgs).astype(np.float32, copy=False)


def embed_ids(params: net.ModelParameters, source: InputSource, ids: Sequence[str],
              batch_size: int = 128) -> dict[str, np.ndarray]:
    """Infer-mode embeddings for unique ids, in the given order."""
    unique = list(dict.fromkeys(ids))
    out: dict[str, np.ndarray] = {}
    for start in range(0, len(unique), batch_size):
        chunk = unique[start:start + batch_size]
        e = net.embed(params, source.batch(chunk, params.backbone), "infer").data
        out.update(zip(chunk, e))
    return out


def pair_distances(params: net.ModelParameters, source: InputSource,
                   pairs: Sequence[Pair]) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    for p in pairs:
        source.dataset.species_of(p.id_a), source.dataset.species_of(p.id_b)
    emb = embed_ids(params, source, [i for p in pairs for i in (p.id_a, p.id_b)])
    a = np.stack([emb[p.id_a] for p in pairs])
    b = np.stack([emb[p.id_b] for p in pairs])
    return net.energy(a, b)


def make_scorer(params: net.ModelParameters, dataset: Dataset,
                store: Optional[EmbeddingStore] = None) -> Callable[[Sequence[Pair]], np.ndarray]:
    source = InputSource(dataset, store)

    def scorer(pairs):
        return net.similarity_score(pair_distances(params, source, pairs), params.normalize)

    return scorer


# --------------------------------------------------------------------------
# training


def _pool(split: SplitManifest, partition: str) -> dict[str, list[str]]:
    pool: dict[str, list[str]] = {}
    for sid, sp, part in split.entries:
        if part == partition:
            pool.setdefault(sp, []).append(sid)
    return {sp: sorted(ids) for sp, ids in sorted(pool.items())}


def _fit(n_pairs: int, pool: dict[str, list[str]], pos_ratio: float) -> int:
    """Shrink a default pair count until the pool can supply it without repeats."""
    pos_cap, neg_cap = pair_capacity(pool)
    while n_pairs > 1:
        n_pos = int(math.floor(pos_ratio * n_pairs + 0.5))
        if n_pos <= pos_cap and n_pairs - n_pos <= neg_cap:
            break
        n_pairs -= 1
    return n_pairs


def _feature_dim(cfg: TrainConfig, store: Optional[EmbeddingStore]) -> int:
    if cfg.backbone != "precomputed":
        return 0
    if store is None:
        raise ValueError("precomputed backbone needs an embedding store")
    return store.dim


def train(dataset: Dataset, split: SplitManifest, cfg: TrainConfig,
          store: Optional[EmbeddingStore] = None,
          params: Optional[net.ModelParameters] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          ) -> tuple[net.ModelParameters, TrainLog]:
    """Fit the twin embedder; returns the parameters of the best validation epoch."""
    train_pool = _pool(split, "train")
    val_pool = _pool(split, "validation")
    if not train_pool or not val_pool:
        raise TrainingError("split needs nonempty train and validation partitions")
    n_train = sum(map(len, train_pool.values()))
    n_val = sum(map(len, val_pool.values()))
    n_pairs = cfg.pairs_per_epoch or _fit(default_pairs_per_epoch(n_train), train_pool,
                                          cfg.pos_ratio)
    n_val_pairs = cfg.val_pairs or _fit(default_val_pairs(n_val), val_pool, cfg.pos_ratio)

    if params is None:
        params = net.init_params(derive_rng(cfg.seed, "init"), cfg.input_size, 3, cfg.backbone,
                                 cfg.normalize, _feature_dim(cfg, store), 1.0 - cfg.dropout)
    source = InputSource(dataset, store)
    loss_cfg = cfg.loss
    optimizer = Adam(params.tensors(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    stopper = EarlyStopping(cfg.patience)
    log = TrainLog()
    best = params.copy()

    val_pairs = sample_pairs_from_pool(val_pool, n_val_pairs, cfg.pos_ratio,
                                       derive_rng(cfg.seed, "val-pairs"))
    val_y = np.array([p.label for p in val_pairs])
    augment = cfg.augment and params.backbone == "builtin"

    for epoch in range(1, cfg.max_epochs + 1):
        pairs = sample_pairs_from_pool(train_pool, n_pairs, cfg.pos_ratio,
                                       derive_rng(cfg.seed, "train-pairs", epoch))
        aug_rng = derive_rng(cfg.seed, "augment", epoch) if augment else None
        drop_rng = derive_rng(cfg.seed, "dropout", epoch)
        batch_losses = []
        for b, start in enumerate(range(0, len(pairs), cfg.batch_size)):
            chunk = pairs[start:start + cfg.batch_size]
            ids = [p.id_a for p in chunk] + [p.id_b for p in chunk]
            x = source.batch(ids, params.backbone, aug_rng)
            y = np.array([p.label for p in chunk])
            with Tape() as tape:
                e = net.embed(params, x, "train", drop_rng)
                loss = pair_loss(e, y, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                    f"(pairs {start}..{start + len(chunk) - 1})")
            tape.backward(loss)
            optimizer.step()
            batch_losses.append((value, len(chunk)))
        train_loss = sum(v * n for v, n in batch_losses) / sum(n for _, n in batch_losses)

        d = pair_distances(params, source, val_pairs)
        val_loss = float(np.mean(contrastive_loss(d, val_y, loss_cfg)))
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_f1 = evaluate_scores(val_y, net.similarity_score(d, params.normalize), 0.5).f1
        if stopper.update(epoch, val_loss):
            best = params.copy()
        record = EpochRecord(epoch, train_loss, val_loss, val_f1, stopper.stale)
        log.records.append(record)
        logger.info("epoch %d train_loss %.5f val_loss %.5f val_f1 %.4f stale %d",
                    epoch, train_loss, val_loss, val_f1, stopper.stale)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            break
    log.best_epoch = stopper.best_epoch
    return best, log


# --------------------------------------------------------------------------
# evaluation


def evaluate_model(params: net.ModelParameters, dataset: Dataset, pairs: Sequence[Pair],
                   threshold: float = 0.5, store: Optional[EmbeddingStore] = None,
                   report_path=None) -> tuple[MetricsReport, ConfusionMatrix]:
    if not pairs:
        raise DataError("no pairs to evaluate")
    scorer = make_scorer(params, dataset, store)
    report = evaluate_scores(pairs, scorer(pairs), threshold)
    if report_path is not None:
        write_reports([report], report_path)
    return report, report.confusion


PROTOCOL_SCOPES = ("unseen", "all", "seen")


def protocol_label(split: SplitManifest, scope: str) -> str:
    unseen = set(split.unseen_species)
    species = {sp for _, sp, p in split.entries if p == "test"}
    n = {"unseen": len(species & unseen), "seen": len(species - unseen),
         "all": len(species)}[scope]
    suffix = {"unseen": " (Zero-Shot)", "all": " (ALL)", "seen": ""}[scope]
    return f"{n} species{suffix}"


def evaluate_protocols(params: net.ModelParameters, dataset: Dataset, split: SplitManifest,
                       n_pairs: int = 1000, seed: int = 0, threshold: float = 0.5,
                       pos_ratio: float = 0.5, store: Optional[EmbeddingStore] = None,
                       ) -> dict[str, tuple[MetricsReport, list[Pair]]]:
    """Reports on test-partition pairs for the unseen (conventional zero-shot),
    all-species (generalised zero-shot) and seen scopes."""
    if not split.unseen_species:
        raise DataError("split has no unseen species")
    out = {}
    for scope in PROTOCOL_SCOPES:
        pairs = sample_pairs(split, n_pairs, pos_ratio, scope, seed, partition="test")
        report, _ = evaluate_model(params, dataset, pairs, threshold, store)
        out[scope] = (report, pairs)
    return out
