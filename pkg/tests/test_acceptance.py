"""Acceptance checks.  Each test prints one ``PASS``/``FAIL`` line.

The end-to-end tests (synthetic run, determinism, sweep) drive the command
line exactly as a user would and take several minutes on one core.
"""

import csv
import time

import numpy as np
import pytest

from siamese_zsl import cli
from siamese_zsl import data as D
from siamese_zsl import gradcheck as G
from siamese_zsl import network as net
from siamese_zsl.loss import LossConfig, contrastive_loss
from siamese_zsl.metrics import ConfusionMatrix, metrics_from_confusion


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, detail
    return emit


# -- reference confusion matrices -------------------------------------------------

ROUNDING = 0.015


def test_metrics_reproduce_reference_rows(verdict):
    t0 = time.perf_counter()
    rows = []
    ok = True

    def check(name, cm, want):
        nonlocal ok
        r = metrics_from_confusion(ConfusionMatrix(*cm), 0.5)
        got = {"precision": r.precision, "recall": r.recall, "f1": r.f1, "accuracy": r.accuracy}
        for key, value in want.items():
            hit = abs(got[key] - value) <= ROUNDING
            ok &= hit
            rows.append(f"{name} {key} {got[key]:.4f} vs {value}")

    check("24/18/15/27", (24, 18, 15, 27),
          {"precision": 0.61, "recall": 0.61, "f1": 0.61, "accuracy": 0.61})
    check("3725/1267/1514/3478", (3725, 1267, 1514, 3478),
          {"accuracy": 0.72, "recall": 0.72, "precision": 0.73})
    check("61/29/43/47", (61, 29, 43, 47), {"accuracy": 0.60})
    check("3197/1123/1243/3077", (3197, 1123, 1243, 3077), {"accuracy": 0.72})
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    verdict("1 metrics oracle", ok, f"{len(rows)} values within {ROUNDING}, {elapsed * 1e3:.1f} ms")


# -- split census -----------------------------------------------------------------

# per-species sample counts of a 45-species long-tailed collection
FEW_SHOT = [
    888, 457, 21, 147, 9, 3, 419, 14, 424, 179, 12, 5, 69, 276, 3, 943, 11, 163, 647, 366, 625,
]
MANY_SHOT = [
    1855, 5237, 7595, 2256, 1449, 1755, 1047, 3866, 5020, 8787, 10008, 1241, 5892, 3359, 1982,
    6522, 2503, 4719, 3335, 6467, 2145, 3546, 6284, 2219,
]


def test_split_reproduces_reference_census(verdict):
    counts = {f"sp{i:02d}": n for i, n in enumerate(FEW_SHOT + MANY_SHOT)}
    assert sum(counts.values()) == 104770
    ds = D.Dataset.from_records((f"{sp}#{j}", sp) for sp, n in counts.items() for j in range(n))
    t0 = time.perf_counter()
    c = D.make_split(ds, min_count=1000, seed=0).census()
    elapsed = time.perf_counter() - t0
    train_val = c["train"] + c["validation"]
    ok = (c["unseen_species"] == 21 and c["unseen_samples"] == 5681
          and c["seen_species"] == 24 and abs(train_val - 79280) <= 24
          and abs(c["test"] - 25490) <= 24 and elapsed < 1.0)
    verdict("2 split oracle", ok,
            f"{c['unseen_species']} unseen ({c['unseen_samples']} samples), "
            f"{c['seen_species']} seen, train+val {train_val}, test {c['test']}, "
            f"{elapsed:.2f} s")


# -- gradients --------------------------------------------------------------------


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = G.run_suite(seeds=range(20))
    elapsed = time.perf_counter() - t0
    failed = [str(r) for r in results if not r.passed]
    worst = {dt: max(r.error for r in results if r.dtype == dt) for dt in G.TOLERANCE}
    ok = not failed and elapsed < 120
    verdict("3 gradient suite", ok,
            f"{len(results)} checks over 20 seeds, worst float32 {worst['float32']:.1e}, "
            f"float64 {worst['float64']:.1e}, {elapsed:.1f} s"
            + (f"; failures: {failed[:3]}" if failed else ""))


# -- loss invariants --------------------------------------------------------------


def test_loss_invariants(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10_000
    m = rng.uniform(0.1, 3.0, n)
    d = rng.uniform(0.0, 4.0, n)
    d[:500] = 0.0
    d[500:1000] = m[500:1000]  # exactly at the margin
    y = rng.integers(0, 2, n)
    L = np.array([contrastive_loss(di, yi, LossConfig(mi)) for di, yi, mi in zip(d, y, m)])

    nonneg = bool(np.all(L >= 0))
    zero_expected = ((y == 0) & (d == 0)) | ((y == 1) & (d >= m))
    zero_iff = bool(np.array_equal(L == 0, zero_expected))

    step = rng.uniform(1e-3, 0.5, n)
    L_up = np.array([contrastive_loss(di + si, yi, LossConfig(mi))
                     for di, si, yi, mi in zip(d, step, y, m)])
    sim = y == 0
    increasing = bool(np.all(L_up[sim] > L[sim]))
    dis = y == 1
    inside = dis & (d + step < m)
    decreasing = bool(np.all(L_up[dis] <= L[dis]) and np.all(L_up[inside] < L[inside]))
    elapsed = time.perf_counter() - t0
    ok = nonneg and zero_iff and increasing and decreasing and elapsed < 5
    verdict("4 loss properties", ok,
            f"nonneg={nonneg} zero-iff={zero_iff} similar-increasing={increasing} "
            f"dissimilar-decreasing={decreasing} over {n} samples, {elapsed:.2f} s")


# -- end-to-end synthetic run -----------------------------------------------------

SCOPES = ("seen", "unseen", "all")


def run_pipeline(root):
    """synth -> split -> train -> eval, all with defaults; returns wall time."""
    t0 = time.perf_counter()
    steps = [
        ["synth", "--out", f"{root}/synth"],
        ["split", "--manifest", f"{root}/synth/manifest.csv", "--out", f"{root}/split.csv",
         "--min-count", "1", "--unseen-list", f"{root}/synth/unseen_species.txt"],
        ["train", "--manifest", f"{root}/synth/manifest.csv", "--split", f"{root}/split.csv",
         "--out-dir", f"{root}/run"],
    ]
    for scope in SCOPES:
        steps.append(["eval", "--checkpoint", f"{root}/run/model.snnc",
                      "--manifest", f"{root}/synth/manifest.csv", "--split", f"{root}/split.csv",
                      "--out-dir", f"{root}/eval", "--scope", scope])
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return time.perf_counter() - t0


def read_f1(path):
    with open(path, newline="") as fh:
        return float(next(csv.DictReader(fh))["f1"])


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    return (a, run_pipeline(a)), (b, run_pipeline(b))


def test_end_to_end_zero_shot(pipeline_runs, verdict):
    (root, elapsed), _ = pipeline_runs
    f1 = {s: read_f1(root / "eval" / f"report_{s}.csv") for s in SCOPES}
    epochs = len((root / "run/train_log.csv").read_text().splitlines()) - 1
    ok = f1["seen"] >= 0.85 and f1["unseen"] >= 0.60 and f1["seen"] > f1["unseen"] \
        and elapsed <= 15 * 60
    verdict("5 end-to-end synthetic ZSL", ok,
            f"seen F1 {f1['seen']:.3f}, unseen F1 {f1['unseen']:.3f}, all F1 {f1['all']:.3f}, "
            f"{epochs} epochs, {elapsed / 60:.1f} min")


def test_rerun_is_byte_identical(pipeline_runs, verdict):
    (a, _), (b, _) = pipeline_runs
    files = ["split.csv", "run/train_log.csv", "run/model.snnc"]
    files += [f"eval/{kind}_{s}.csv" for s in SCOPES for kind in ("pairs", "report")]
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    verdict("6 determinism", not differ,
            f"{len(files) - len(differ)}/{len(files)} artifacts identical"
            + (f"; differ: {differ}" if differ else ""))


def test_sweep_consistency(pipeline_runs, tmp_path, verdict):
    (root, _), _ = pipeline_runs
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--checkpoint", str(root / "run/model.snnc"),
                     "--manifest", str(root / "synth/manifest.csv"),
                     "--pair-list", str(root / "eval/pairs_all.csv"),
                     "--grid", "0.1:0.9:0.1", "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    pos = {r["tp"] + r["fn"] for r in rows}
    neg = {r["fp"] + r["tn"] for r in rows}
    fn = [r["fn"] for r in rows]
    thresholds = [r["threshold"] for r in rows]
    ok = (len(rows) == 9 and len(pos) == 1 and len(neg) == 1
          and all(x >= y for x, y in zip(fn, fn[1:])) and thresholds == sorted(thresholds))
    verdict("8 sweep consistency", ok,
            f"{len(rows)} thresholds, positives {sorted(pos)}, negatives {sorted(neg)}, "
            f"fn {[int(x) for x in fn]}")


# -- file formats -----------------------------------------------------------------


def test_file_round_trips_and_truncation(tmp_path, verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    params = net.init_params(rng)
    ckpt = tmp_path / "m.snnc"
    net.save_checkpoint(params, ckpt)
    back = net.load_checkpoint(ckpt)
    ckpt_exact = all(a.data.tobytes() == b.data.tobytes()
                     for a, b in zip(params.tensors(), back.tensors()))
    ckpt_exact &= back.metadata() == params.metadata()

    store = D.EmbeddingStore(128, {f"s{i}": rng.standard_normal(128) for i in range(200)})
    emb = tmp_path / "e.embv"
    D.write_embeddings(store, emb)
    back_store = D.import_embeddings(emb)
    emb_exact = list(back_store.vectors) == list(store.vectors) and all(
        back_store[k].tobytes() == v.tobytes() for k, v in store.vectors.items())

    rejected = 0
    for path, load, err in ((ckpt, net.load_checkpoint, net.CheckpointError),
                            (emb, D.import_embeddings, D.EmbeddingFormatError)):
        raw = path.read_bytes()
        cut = tmp_path / ("cut" + path.suffix)
        for off in rng.choice(len(raw), size=50, replace=False):
            cut.write_bytes(raw[:off])
            result = None
            try:
                result = load(cut)
            except err:
                rejected += 1
            assert result is None
    elapsed = time.perf_counter() - t0
    ok = ckpt_exact and emb_exact and rejected == 100 and elapsed < 10
    verdict("7 file formats", ok,
            f"checkpoint exact={ckpt_exact}, embeddings exact={emb_exact}, "
            f"{rejected}/100 truncations rejected, {elapsed:.2f} s")
