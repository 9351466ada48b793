"""Finite-difference gradient checks for every op and the full network loss.

Analytic gradients come from the tape in the dtype under test (float32, or
float64 for the check mode).  The reference is always a float64 central
difference.  Coordinates whose +/-eps perturbation straddles a kink (relu
zero, max-pool tie) are detected through disagreeing one-sided slopes and
left out; their count is reported.

Error per check = max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import network as net
from . import tensor as T
from .loss import LossConfig, pair_loss
from .tensor import Tape, Tensor

TOLERANCE = {"float32": 1e-3, "float64": 1e-5}
EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    dtype: str
    seed: int
    error: float
    checked: int
    skipped: int

    @property
    def tolerance(self) -> float:
        return TOLERANCE[self.dtype]

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance and self.checked > 0

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status:4} {self.name:18} {self.dtype} seed={self.seed:<3} "
                f"err={self.error:.2e} (tol {self.tolerance:.0e}) "
                f"checked={self.checked} kinks={self.skipped}")


def check_gradients(name: str, build: Callable[[list[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray], dtype: str = "float64", seed: int = 0,
                    max_coords: Optional[int] = None, eps: float = EPS) -> CheckResult:
    """Compare tape gradients of ``build(tensors)`` against central differences.

    ``build`` must be deterministic (reseed any generator inside it).  With
    ``max_coords`` only that many random coordinates per array are probed.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(leaves)
    tape.backward(loss)
    analytic = [np.zeros(a.shape) if t.grad is None else t.grad.astype(np.float64)
                for a, t in zip(arrays, leaves)]

    def f(values):
        return build([Tensor(v, dtype=np.float64) for v in values]).item()

    rng = np.random.default_rng(seed)
    base = f(arrays)
    numeric, ana, skipped = [], [], 0
    for k, a in enumerate(arrays):
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = rng.choice(a.size, size=max_coords, replace=False)
        for c in coords:
            values = [v.copy() for v in arrays]
            flat = values[k].reshape(-1)
            orig = flat[c]
            flat[c] = orig + eps
            up = f(values)
            flat[c] = orig - eps
            down = f(values)
            right, left = (up - base) / eps, (base - down) / eps
            if abs(right - left) > 1e-3 * max(1.0, abs(right), abs(left)):
                skipped += 1
                continue
            numeric.append((up - down) / (2 * eps))
            ana.append(analytic[k].reshape(-1)[c])
    numeric, ana = np.array(numeric), np.array(ana)
    if numeric.size == 0:
        return CheckResult(name, dtype, seed, float("inf"), 0, skipped)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(ana)), 1e-12)
    error = float(np.max(np.abs(numeric - ana)) / scale)
    return CheckResult(name, dtype, seed, error, int(numeric.size), skipped)


def _projection(rng, shape):
    return rng.standard_normal(shape)


def op_cases(seed: int) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """Random small instances (spatial size <= 6x6) for every differentiable op."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cases = []

    x = rng.standard_normal((n, h, w, cin))
    k = rng.standard_normal((3, 3, cin, cout))
    b = rng.standard_normal(cout)
    proj = _projection(rng, (n, h, w, cout))
    cases.append(("conv2d", lambda t: T.weighted_sum(T.conv2d(t[0], t[1], t[2]), proj), [x, k, b]))

    xp = rng.standard_normal((n, h, w, cin))
    proj_p = _projection(rng, (n, (h + 1) // 2, (w + 1) // 2, cin))
    cases.append(("maxpool2d", lambda t: T.weighted_sum(T.maxpool2d(t[0]), proj_p), [xp]))

    xr = rng.standard_normal((n, h, w, cin))
    proj_r = _projection(rng, xr.shape)
    cases.append(("relu", lambda t: T.weighted_sum(T.relu(t[0]), proj_r), [xr]))

    din, dout = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    xd, wd, bd = rng.standard_normal((n, din)), rng.standard_normal((din, dout)), rng.standard_normal(dout)
    proj_d = _projection(rng, (n, dout))
    cases.append(("dense", lambda t: T.weighted_sum(T.dense(t[0], t[1], t[2]), proj_d), [xd, wd, bd]))

    xo = rng.standard_normal((n, din))
    proj_o = _projection(rng, xo.shape)
    drop_seed = int(rng.integers(1 << 31))
    cases.append(("dropout", lambda t: T.weighted_sum(
        T.dropout(t[0], 0.8, "train", np.random.default_rng(drop_seed)), proj_o), [xo]))

    xf = rng.standard_normal((n, h, w, cin))
    proj_f = _projection(rng, (n, h * w * cin))
    cases.append(("flatten", lambda t: T.weighted_sum(T.flatten(t[0]), proj_f), [xf]))

    xn = rng.standard_normal((n, din + 1))
    proj_n = _projection(rng, xn.shape)
    cases.append(("l2_normalize", lambda t: T.weighted_sum(T.l2_normalize(t[0]), proj_n), [xn]))

    xs = rng.standard_normal((n, din))
    cases.append(("square+sum", lambda t: T.tsum(T.square(t[0])), [xs]))
    cases.append(("mean", lambda t: T.mean(T.square(t[0])), [xs.copy()]))

    pairs = int(rng.integers(1, 4))
    emb = rng.standard_normal((2 * pairs, 4)) * 0.4
    y = rng.integers(0, 2, pairs)
    cases.append(("contrastive_loss", lambda t: pair_loss(t[0], y, LossConfig(1.0)), [emb]))
    return cases


def network_case(seed: int, input_size: int = 8, n_pairs: int = 2):
    """embed -> energy -> contrastive loss on a small builtin network, train-mode dropout."""
    rng = np.random.default_rng(seed)
    params = net.init_params(rng, input_size=input_size)
    images = rng.random((2 * n_pairs, input_size, input_size, 3))
    y = np.arange(n_pairs) % 2
    drop_seed = int(rng.integers(1 << 31))
    arrays = [t.data.astype(np.float64) for t in params.tensors()]

    def build(tensors):
        clone = params.copy()
        pos = 0
        for layer in clone.layers:
            layer.weight, layer.bias = tensors[pos], tensors[pos + 1]
            pos += 2
        e = net.embed(clone, Tensor(images, dtype=tensors[0].dtype), "train",
                      np.random.default_rng(drop_seed))
        return pair_loss(e, y, LossConfig(1.0))

    return "network", build, arrays


def run_suite(seeds: Iterable[int] = range(20), dtypes: Sequence[str] = ("float32", "float64"),
              network_coords: int = 12, include_network: bool = True) -> list[CheckResult]:
    results = []
    for seed in seeds:
        cases = op_cases(seed)
        if include_network:
            cases.append(network_case(seed))
        for name, build, arrays in cases:
            for dtype in dtypes:
                coords = network_coords if name == "network" else None
                results.append(check_gradients(name, build, arrays, dtype, seed, coords))
    return results
