"""Command-line workflow: synth -> split -> train -> eval / sweep / pairmatrix.

Every failure exits nonzero with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import data as D
from . import gradcheck as G
from . import metrics as M
from . import network as net
from . import trainer as TR

logger = logging.getLogger("siamese_zsl")

# key -> (TrainConfig field, parser)
def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


CONFIG_KEYS = {
    "margin": ("margin", float),
    "learning_rate": ("learning_rate", float),
    "batch_size": ("batch_size", int),
    "epochs": ("max_epochs", int),
    "patience": ("patience", int),
    "input_size": ("input_size", int),
    "normalize": ("normalize", _parse_bool),
    "backbone": ("backbone", str),
    "dropout": ("dropout", float),
    "pos_ratio": ("pos_ratio", float),
    "pairs_per_epoch": ("pairs_per_epoch", int),
    "seed": ("seed", int),
}


class CLIError(Exception):
    pass


def read_config_file(path) -> dict[str, object]:
    """``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise CLIError(f"{path}:{lineno}: expected key = value")
        if key not in CONFIG_KEYS:
            raise CLIError(f"{path}:{lineno}: unknown config key {key!r}")
        field_name, parse = CONFIG_KEYS[key]
        try:
            out[field_name] = parse(value)
        except ValueError as exc:
            raise CLIError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def build_train_config(args) -> TR.TrainConfig:
    """Merge built-in defaults < config file < command-line flags, then validate."""
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key, (field_name, _) in CONFIG_KEYS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            values[field_name] = flag
    try:
        return TR.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    manifest = D.synth_generate(args.out, args.seen, args.unseen, args.samples,
                                args.resolution, args.seed)
    print(f"wrote {args.seen + args.unseen} species x {args.samples} samples "
          f"to {manifest}")
    return 0


def _census_line(split: D.SplitManifest) -> str:
    c = split.census()
    return (f"{c['seen_species']} seen / {c['unseen_species']} unseen, "
            f"train={c['train']} validation={c['validation']} test={c['test']} "
            f"(unseen samples={c['unseen_samples']})")


def cmd_split(args) -> int:
    dataset = D.load_manifest(args.manifest, decode=False)
    unseen = list(args.unseen or [])
    if args.unseen_list:
        unseen += Path(args.unseen_list).read_text(encoding="utf-8").split()
    split = D.make_split(dataset, args.min_count, args.test_frac, args.val_frac, args.seed,
                         unseen)
    split.write(args.out)
    print(_census_line(split))
    return 0


def _load_dataset_for(params_or_cfg, manifest, embeddings) -> tuple[D.Dataset, Optional[D.EmbeddingStore]]:
    dataset = D.load_manifest(manifest, decode=params_or_cfg.backbone == "builtin")
    store = None
    if embeddings:
        store = D.import_embeddings(embeddings)
        store.join(dataset)
    return dataset, store


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    explicit_size = args.input_size is not None
    if cfg.backbone == "precomputed" and explicit_size:
        raise CLIError("--input-size conflicts with backbone=precomputed")
    if cfg.backbone == "precomputed" and not args.embeddings:
        raise CLIError("backbone=precomputed needs --embeddings")
    if cfg.backbone == "builtin" and args.embeddings:
        raise CLIError("--embeddings conflicts with backbone=builtin")
    split = D.SplitManifest.read(args.split)
    dataset, store = _load_dataset_for(cfg, args.manifest, args.embeddings)
    if cfg.backbone == "builtin" and len(dataset):
        side = dataset.pixels(dataset.samples[0].id).shape[0]
        if side != cfg.input_size:
            raise CLIError(f"images are {side}x{side} but input_size is {cfg.input_size}")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, log = TR.train(dataset, split, cfg, store,
                           on_epoch=lambda r: print(
                               f"epoch {r.epoch:3d}  train_loss {r.train_loss:.5f}  "
                               f"val_loss {r.val_loss:.5f}  val_f1 {r.val_f1:.4f}  "
                               f"stale {r.stale_epochs}", flush=True))
    net.save_checkpoint(params, out / "model.snnc")
    log.write(out / "train_log.csv")
    best = log.records[log.best_epoch - 1]
    print(f"best epoch {best.epoch}/{len(log.records)}: val_loss {best.val_loss:.5f} "
          f"val_f1@0.5 {best.val_f1:.4f}")
    return 0


def _load_model(args):
    params = net.load_checkpoint(args.checkpoint)
    dataset, store = _load_dataset_for(params, args.manifest, getattr(args, "embeddings", None))
    return params, dataset, store


def cmd_eval(args) -> int:
    params, dataset, store = _load_model(args)
    split = D.SplitManifest.read(args.split)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.pair_list:
        pairs = D.read_pairs(args.pair_list)
    else:
        pairs = D.sample_pairs(split, args.pairs, 0.5, args.scope, args.seed, partition="test")
    D.write_pairs(pairs, out / f"pairs_{args.scope}.csv")
    report, cm = TR.evaluate_model(params, dataset, pairs, args.threshold, store,
                                   out / f"report_{args.scope}.csv")
    (out / f"confusion_{args.scope}.csv").write_text(
        "actual,predicted_similar,predicted_dissimilar\n"
        f"similar,{cm.tp},{cm.fn}\ndissimilar,{cm.fp},{cm.tn}\n", encoding="utf-8")
    print(M.format_table([report], [TR.protocol_label(split, args.scope)]))
    return 0


def cmd_sweep(args) -> int:
    grid = M.parse_grid(args.grid)
    params, dataset, store = _load_model(args)
    pairs = D.read_pairs(args.pair_list)
    scores = TR.make_scorer(params, dataset, store)(pairs)
    reports = M.threshold_sweep(pairs, scores, grid)
    M.write_reports(reports, args.out)
    print(M.format_table(reports))
    return 0


def cmd_pairmatrix(args) -> int:
    params, dataset, store = _load_model(args)
    rows, cols = args.rows.split(","), args.cols.split(",")
    by_species = dataset.ids_by_species()
    if args.split:
        split = D.SplitManifest.read(args.split)
        test = set(split.ids(args.partition))
        by_species = {sp: [i for i in ids if i in test] for sp, ids in by_species.items()}
    missing = [sp for sp in rows + cols if sp not in by_species]
    if missing:
        raise CLIError(f"species not in dataset: {', '.join(missing)}")
    matrix = M.pair_f1_matrix(TR.make_scorer(params, dataset, store), by_species, rows, cols,
                              args.pairs_per_cell, args.seed, args.threshold)
    matrix.write(args.out)
    width = max(map(len, rows))
    print(" " * width + "  " + "  ".join(f"{c:>8}" for c in cols))
    for r, vals in zip(rows, matrix.values):
        print(f"{r:{width}}  " + "  ".join(f"{v:8.2f}" for v in vals))
    return 0


def cmd_embed(args) -> int:
    params = net.load_checkpoint(args.checkpoint)
    dataset, store = _load_dataset_for(params, args.manifest, args.embeddings)
    ids = [s.id for s in dataset.samples]
    emb = TR.embed_ids(params, TR.InputSource(dataset, store), ids)
    out = D.EmbeddingStore(net.EMBED_DIM, emb)
    D.write_embeddings(out, args.out)
    print(f"wrote {len(out)} embeddings of dim {out.dim} to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = G.run_suite(range(args.seeds))
    failed = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(r)
    worst = {}
    for r in results:
        key = (r.name, r.dtype)
        worst[key] = max(worst.get(key, 0.0), r.error)
    for (name, dtype), err in sorted(worst.items()):
        print(f"{name:18} {dtype}  max err {err:.2e}  (tol {G.TOLERANCE[dtype]:.0e})")
    if failed:
        print(f"error: {len(failed)} of {len(results)} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all checks passed ({len(results)} checks)")
    return 0


# --------------------------------------------------------------------------
# parser


def _d(text: str, default) -> str:
    return f"{text} (default: {default})"


def build_parser() -> argparse.ArgumentParser:
    defaults = TR.TrainConfig()
    parser = argparse.ArgumentParser(prog="siamese-zsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic striped-specimen corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seen", type=int, default=12, help=_d("seen species", 12))
    p.add_argument("--unseen", type=int, default=6, help=_d("unseen species", 6))
    p.add_argument("--samples", type=int, default=200, help=_d("samples per species", 200))
    p.add_argument("--resolution", type=int, default=64, help=_d("image side in pixels", 64))
    p.add_argument("--seed", type=int, default=0, help=_d("random seed", 0))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="zero-shot train/validation/test split")
    p.add_argument("--manifest", required=True, help="dataset manifest (id,species,path)")
    p.add_argument("--out", required=True, help="split manifest to write")
    p.add_argument("--min-count", type=int, default=1000,
                   help=_d("species below this count are unseen (test only)", 1000))
    p.add_argument("--test-frac", type=float, default=0.2, help=_d("test fraction per seen species", 0.2))
    p.add_argument("--val-frac", type=float, default=0.2, help=_d("validation fraction of the rest", 0.2))
    p.add_argument("--unseen", action="append", help="force a species unseen (repeatable)")
    p.add_argument("--unseen-list", help="file listing species to force unseen, one per line")
    p.add_argument("--seed", type=int, default=0, help=_d("random seed", 0))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the Siamese embedder with early stopping")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--split", required=True, help="split manifest")
    p.add_argument("--out-dir", required=True, help="directory for model.snnc and train_log.csv")
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--embeddings", help="EMBV feature file for backbone=precomputed")
    p.add_argument("--epochs", type=int, help=_d("maximum epochs", defaults.max_epochs))
    p.add_argument("--patience", type=int, help=_d("early-stopping patience", defaults.patience))
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help=_d("pairs per batch", defaults.batch_size))
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   help=_d("Adam learning rate", defaults.learning_rate))
    p.add_argument("--margin", type=float, help=_d("contrastive margin", defaults.margin))
    p.add_argument("--input-size", dest="input_size", type=int,
                   help=_d("image side", defaults.input_size))
    p.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                   help=_d("L2-normalise embeddings", defaults.normalize))
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.add_argument("--backbone", choices=net.BACKBONES, help=_d("backbone", defaults.backbone))
    p.add_argument("--dropout", type=float, help=_d("dropout probability", defaults.dropout))
    p.add_argument("--pos-ratio", dest="pos_ratio", type=float,
                   help=_d("share of same-species pairs", defaults.pos_ratio))
    p.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int,
                   help=_d("training pairs per epoch", "train samples / 2"))
    p.add_argument("--seed", type=int, help=_d("random seed", defaults.seed))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on seen, unseen or all test species")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out-dir", required=True, help="directory for pairs/report/confusion files")
    p.add_argument("--scope", choices=D.SCOPES, default="all", help=_d("test scope", "all"))
    p.add_argument("--threshold", type=float, default=0.5, help=_d("decision threshold", 0.5))
    p.add_argument("--pairs", type=int, default=1000, help=_d("balanced pairs to draw", 1000))
    p.add_argument("--pair-list", help="evaluate this pair list instead of drawing pairs")
    p.add_argument("--embeddings", help="EMBV feature file for precomputed models")
    p.add_argument("--seed", type=int, default=0, help=_d("random seed", 0))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metrics over a threshold grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pair-list", required=True)
    p.add_argument("--grid", default="0.1:0.9:0.1", help=_d("start:stop:step", "0.1:0.9:0.1"))
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--embeddings", help="EMBV feature file for precomputed models")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pairmatrix", help="per species-pair F1 matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rows", required=True, help="comma-separated row species")
    p.add_argument("--cols", required=True, help="comma-separated column species")
    p.add_argument("--split", help="restrict samples to one partition of this split")
    p.add_argument("--partition", default="test", choices=D.PARTITIONS,
                   help=_d("partition used with --split", "test"))
    p.add_argument("--pairs-per-cell", type=int, default=40, help=_d("pairs per cell", 40))
    p.add_argument("--threshold", type=float, default=0.5, help=_d("decision threshold", 0.5))
    p.add_argument("--out", required=True, help="matrix CSV")
    p.add_argument("--embeddings", help="EMBV feature file for precomputed models")
    p.add_argument("--seed", type=int, default=0, help=_d("random seed", 0))
    p.set_defaults(func=cmd_pairmatrix)

    p = sub.add_parser("embed", help="export per-sample embeddings as an EMBV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="EMBV feature file for precomputed models")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    p.add_argument("--seeds", type=int, default=20, help=_d("random instances per op", 20))
    p.add_argument("--verbose", action="store_true", help="print every check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, D.DataError, net.CheckpointError, TR.TrainingError, ValueError,
            FileNotFoundError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
