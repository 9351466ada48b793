"""Datasets, the zero-shot split, pair sampling, augmentation and file formats.

File formats (all UTF-8, comma separated unless binary):

* dataset manifest: ``id,species,path`` (paths relative to the manifest)
* split manifest:   ``id,species,partition`` followed by ``# key=value`` lines
* pair list:        ``id_a,id_b,label``
* embedding file:   binary ``EMBV``, see :func:`write_embeddings`
"""

from __future__ import annotations

import colorsys
import csv
import io
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .seeding import derive_rng

PARTITIONS = ("train", "validation", "test")
SCOPES = ("seen", "unseen", "all")


class DataError(ValueError):
    """Invalid dataset, split, pair or embedding input."""


class EmbeddingFormatError(DataError):
    pass


class EmbeddingTruncated(EmbeddingFormatError):
    pass


# --------------------------------------------------------------------------
# samples and datasets


@dataclass
class ImageSample:
    id: str
    species: str
    path: Optional[Path] = None
    pixels: Optional[np.ndarray] = None  # H x W x 3 float32 in [0, 1]


@dataclass
class SpeciesCatalog:
    counts: dict[str, int]
    unseen: set[str] = field(default_factory=set)

    @property
    def seen(self) -> list[str]:
        return [s for s in self.counts if s not in self.unseen]

    def total(self) -> int:
        return sum(self.counts.values())


def decode_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return arr / np.float32(255.0)


class Dataset:
    """Ordered collection of samples with lazy, cached pixel decoding."""

    def __init__(self, samples: Sequence[ImageSample]):
        self.samples = list(samples)
        self.by_id: dict[str, ImageSample] = {}
        for s in self.samples:
            if s.id in self.by_id:
                raise DataError(f"duplicate sample id {s.id!r}")
            self.by_id[s.id] = s
        self.catalog = SpeciesCatalog(dict(Counter(s.species for s in self.samples)))

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str]]) -> "Dataset":
        """Image-less dataset from ``(id, species)`` pairs, for census-only work."""
        return cls([ImageSample(i, sp) for i, sp in records])

    def __len__(self) -> int:
        return len(self.samples)

    def species_of(self, sample_id: str) -> str:
        try:
            return self.by_id[sample_id].species
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None

    def ids_by_species(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for s in self.samples:
            out.setdefault(s.species, []).append(s.id)
        return out

    def pixels(self, sample_id: str) -> np.ndarray:
        try:
            s = self.by_id[sample_id]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None
        if s.pixels is None:
            if s.path is None:
                raise DataError(f"sample {sample_id!r} has no image")
            s.pixels = decode_image(s.path)
        return s.pixels

    def preload(self, workers: int = 4) -> None:
        """Decode every image; completion order never affects the result."""
        todo = [s for s in self.samples if s.pixels is None and s.path is not None]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for s, px in zip(todo, pool.map(lambda s: decode_image(s.path), todo)):
                s.pixels = px


def load_manifest(path, decode: bool = True) -> Dataset:
    """Read a dataset manifest; with ``decode`` every image is decoded up front."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Dataset([])
        if [h.strip() for h in header] != ["id", "species", "path"]:
            raise DataError(f"manifest header must be id,species,path, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sid, species, rel = row
            samples.append(ImageSample(sid, species, root / rel if rel else None))
    ds = Dataset(samples)
    if decode:
        ds.preload()
    return ds


def write_manifest(samples: Sequence[ImageSample], path, root=None) -> None:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "species", "path"])
    for s in samples:
        rel = Path(s.path).relative_to(root).as_posix() if s.path is not None else ""
        w.writerow([s.id, s.species, rel])
    path.write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# zero-shot split


@dataclass
class SplitManifest:
    entries: list[tuple[str, str, str]]  # (id, species, partition)
    params: dict[str, str] = field(default_factory=dict)

    def ids(self, partition: str) -> list[str]:
        return [i for i, _, p in self.entries if p == partition]

    def species(self) -> dict[str, str]:
        return {i: sp for i, sp, _ in self.entries}

    @property
    def unseen_species(self) -> list[str]:
        raw = self.params.get("unseen_species", "")
        return [s for s in raw.split(";") if s]

    def census(self) -> dict[str, int]:
        species = {sp for _, sp, _ in self.entries}
        unseen = set(self.unseen_species)
        counts = Counter(p for _, _, p in self.entries)
        return {
            "seen_species": len(species - unseen),
            "unseen_species": len(unseen & species),
            "unseen_samples": sum(1 for _, sp, _ in self.entries if sp in unseen),
            **{p: counts.get(p, 0) for p in PARTITIONS},
        }

    def write(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "species", "partition"])
        w.writerows(self.entries)
        for k in sorted(self.params):
            buf.write(f"# {k}={self.params[k]}\n")
        Path(path).write_text(buf.getvalue(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "SplitManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"split manifest not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        params = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                params[k] = v
            elif line:
                body.append(line)
        rows = list(csv.reader(body))
        if not rows or rows[0] != ["id", "species", "partition"]:
            raise DataError(f"{path}: split header must be id,species,partition")
        entries = []
        for row in rows[1:]:
            if len(row) != 3 or row[2] not in PARTITIONS:
                raise DataError(f"{path}: bad split row {row}")
            entries.append((row[0], row[1], row[2]))
        return cls(entries, params)


def make_split(dataset: Dataset, min_count: int = 1000, test_frac: float = 0.2,
               val_frac: float = 0.2, seed: int = 0,
               unseen: Iterable[str] = ()) -> SplitManifest:
    """Zero-shot split.

    Species with fewer than ``min_count`` samples, plus any listed in
    ``unseen``, go entirely to test.  Every other species sends
    ``floor(test_frac * count)`` random samples to test and then
    ``floor(val_frac * rest)`` of the remainder to validation.
    """
    if not 0 < test_frac < 1 or not 0 < val_frac < 1:
        raise DataError("test_frac and val_frac must lie in (0, 1)")
    by_species = dataset.ids_by_species()
    if not by_species:
        raise DataError("cannot split an empty dataset")
    forced = set(unseen)
    missing = forced - set(by_species)
    if missing:
        raise DataError(f"unseen species not in dataset: {sorted(missing)}")
    unseen_set = {sp for sp, ids in by_species.items() if len(ids) < min_count} | forced
    if len(unseen_set) == len(by_species):
        raise DataError("every species is unseen; nothing left to train on")

    partition: dict[str, str] = {}
    for sp in sorted(by_species):
        ids = sorted(by_species[sp])
        if sp in unseen_set:
            partition.update((i, "test") for i in ids)
            continue
        rng = derive_rng(seed, "split", sp)
        order = [ids[j] for j in rng.permutation(len(ids))]
        n_test = math.floor(test_frac * len(ids))
        rest = order[n_test:]
        n_val = math.floor(val_frac * len(rest))
        partition.update((i, "test") for i in order[:n_test])
        partition.update((i, "validation") for i in rest[:n_val])
        partition.update((i, "train") for i in rest[n_val:])

    entries = [(s.id, s.species, partition[s.id]) for s in dataset.samples]
    if not any(p == "train" for _, _, p in entries):
        raise DataError("split left the train partition empty")
    params = {
        "seed": str(seed),
        "min_count": str(min_count),
        "test_frac": repr(test_frac),
        "val_frac": repr(val_frac),
        "unseen_species": ";".join(sorted(unseen_set)),
    }
    dataset.catalog.unseen = set(unseen_set)
    return SplitManifest(entries, params)


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class Pair:
    id_a: str
    id_b: str
    label: int  # 0 same species, 1 different


def write_pairs(pairs: Sequence[Pair], path) -> None:
    lines = ["id_a,id_b,label"] + [f"{p.id_a},{p.id_b},{p.label}" for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path) -> list[Pair]:
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows or rows[0] != ["id_a", "id_b", "label"]:
        raise DataError(f"{path}: pair list header must be id_a,id_b,label")
    pairs = []
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 3 or row[2] not in ("0", "1"):
            raise DataError(f"{path}: bad pair row {row}")
        pairs.append(Pair(row[0], row[1], int(row[2])))
    return pairs


def _scope_pool(split: SplitManifest, partition: Optional[str], scope: str) -> dict[str, list[str]]:
    if scope not in SCOPES:
        raise DataError(f"scope must be one of {SCOPES}, got {scope!r}")
    if partition is not None and partition not in PARTITIONS:
        raise DataError(f"unknown partition {partition!r}")
    unseen = set(split.unseen_species)
    pool: dict[str, list[str]] = {}
    for sid, sp, part in split.entries:
        if partition is not None and part != partition:
            continue
        if scope == "seen" and sp in unseen or scope == "unseen" and sp not in unseen:
            continue
        pool.setdefault(sp, []).append(sid)
    return {sp: sorted(ids) for sp, ids in sorted(pool.items())}


def pair_capacity(pool: dict[str, list[str]]) -> tuple[int, int]:
    """Number of distinct unordered (positive, negative) pairs a pool can supply."""
    sizes = [len(ids) for ids in pool.values()]
    pos = sum(n * (n - 1) // 2 for n in sizes)
    neg = (sum(sizes) ** 2 - sum(n * n for n in sizes)) // 2
    return pos, neg


def sample_pairs_from_pool(pool: dict[str, list[str]], n_pairs: int, pos_ratio: float = 0.5,
                           rng: Optional[np.random.Generator] = None) -> list[Pair]:
    """Balanced pairs from a species -> ids pool, without duplicate unordered pairs.

    Positives: uniform species (with at least two samples), then two distinct
    samples.  Negatives: two distinct uniform species, one sample from each.
    """
    if not 0.0 <= pos_ratio <= 1.0:
        raise DataError(f"pos_ratio must be in [0, 1], got {pos_ratio}")
    if n_pairs < 0:
        raise DataError("n_pairs must be nonnegative")
    rng = rng if rng is not None else np.random.default_rng(0)
    species = sorted(pool)
    n_pos = int(math.floor(pos_ratio * n_pairs + 0.5))
    n_neg = n_pairs - n_pos
    if len(species) < 2 and n_neg > 0:
        raise DataError(f"negative pairs need at least 2 species, scope has {len(species)}")
    pos_species = [sp for sp in species if len(pool[sp]) >= 2]
    pos_cap, neg_cap = pair_capacity(pool)
    if n_pos > pos_cap or n_neg > neg_cap:
        raise DataError(
            f"cannot draw {n_pos} positive / {n_neg} negative distinct pairs; "
            f"pool allows {pos_cap} / {neg_cap}")

    seen: set[tuple[str, str]] = set()
    pairs: list[Pair] = []

    def draw(count, make, what):
        budget = 50 * count + 1000
        got = 0
        while got < count:
            if budget == 0:
                raise DataError(f"could not find {count} distinct {what} pairs "
                                f"(pool too small for the request)")
            budget -= 1
            a, b = make()
            key = (a, b) if a < b else (b, a)
            if key in seen:
                continue
            seen.add(key)
            pairs.append(Pair(a, b, 0 if what == "positive" else 1))
            got += 1

    def make_pos():
        ids = pool[pos_species[rng.integers(len(pos_species))]]
        i, j = rng.choice(len(ids), size=2, replace=False)
        return ids[i], ids[j]

    def make_neg():
        s, t = rng.choice(len(species), size=2, replace=False)
        ids_s, ids_t = pool[species[s]], pool[species[t]]
        return ids_s[rng.integers(len(ids_s))], ids_t[rng.integers(len(ids_t))]

    draw(n_pos, make_pos, "positive")
    draw(n_neg, make_neg, "negative")
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def sample_pairs(split: SplitManifest, n_pairs: int, pos_ratio: float = 0.5,
                 scope: str = "all", seed: int = 0,
                 partition: Optional[str] = "test") -> list[Pair]:
    """Balanced pairs from one partition of ``split`` restricted to ``scope``."""
    pool = _scope_pool(split, partition, scope)
    if len(pool) < 2:
        raise DataError(f"scope {scope!r} of partition {partition!r} has {len(pool)} species; "
                        f"need at least 2")
    rng = derive_rng(seed, "pairs", partition, scope)
    return sample_pairs_from_pool(pool, n_pairs, pos_ratio, rng)


# --------------------------------------------------------------------------
# augmentation


def transform(pixels: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    """Flip then rotate by ``k`` quarter turns; a pure permutation of pixels."""
    out = pixels
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    if k % 4:
        out = np.rot90(out, k % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def draw_transform(rng: np.random.Generator) -> tuple[bool, bool, int]:
    hflip, vflip = (rng.random(2) < 0.5).tolist()
    return hflip, vflip, int(rng.integers(4))


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    if sample.pixels is None:
        raise DataError(f"sample {sample.id!r} has no decoded pixels")
    return ImageSample(sample.id, sample.species, sample.path,
                       transform(sample.pixels, *draw_transform(rng)))


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SpeciesStyle:
    hue: float            # [0, 1)
    stripes: int          # 2..6
    stripe_width: float   # dark fraction of each stripe period
    aspect: float         # body length / width
    noise: float          # texture noise std

    def vector(self) -> np.ndarray:
        return np.array([self.hue, (self.stripes - 2) / 4, (self.stripe_width - 0.3) / 0.4,
                         (self.aspect - 1.3) / 0.9, (self.noise - 0.02) / 0.1])


def style_distance(a: SpeciesStyle, b: SpeciesStyle) -> float:
    va, vb = a.vector(), b.vector()
    dh = abs(va[0] - vb[0])
    diff = np.concatenate([[2 * min(dh, 1 - dh)], va[1:] - vb[1:]])
    return float(np.linalg.norm(diff))


def draw_styles(n: int, rng: np.random.Generator, min_distance: float = 0.35,
                max_tries: int = 20000) -> list[SpeciesStyle]:
    styles: list[SpeciesStyle] = []
    tries = 0
    while len(styles) < n:
        if tries >= max_tries:
            raise DataError(f"parameter space exhausted: placed {len(styles)} of {n} species "
                            f"at separation {min_distance}")
        tries += 1
        cand = SpeciesStyle(hue=float(rng.random()), stripes=int(rng.integers(2, 7)),
                            stripe_width=float(rng.uniform(0.3, 0.7)),
                            aspect=float(rng.uniform(1.3, 2.2)),
                            noise=float(rng.uniform(0.02, 0.12)))
        if all(style_distance(cand, s) >= min_distance for s in styles):
            styles.append(cand)
    return styles


def render(style: SpeciesStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    """One specimen: a striped ellipse on a light textured background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-0.06, 0.06) * size
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    theta = rng.uniform(-0.25, 0.25)
    half_len = size * 0.36 * rng.uniform(0.9, 1.05)
    half_wid = half_len / (style.aspect * rng.uniform(0.95, 1.05))
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / half_len
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / half_wid
    body = u * u + v * v <= 1.0

    hue = (style.hue + rng.normal(0, 0.015)) % 1.0
    base = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.85 + rng.uniform(-0.05, 0.05)))
    phase = ((u + 1) / 2 * style.stripes + rng.uniform(-0.1, 0.1)) % 1.0
    dark = body & (phase < style.stripe_width)

    img = np.empty((size, size, 3))
    img[:] = 0.88 + rng.normal(0, 0.02, size=(size, size, 1))
    img[body] = base
    img[dark] = 0.12
    img[body] += rng.normal(0, style.noise, size=(int(body.sum()), 3))
    return np.clip(img, 0.0, 1.0)


def synth_generate(out_dir, n_seen_species: int = 12, n_unseen_species: int = 6,
                   samples_per_species: int = 200, resolution: int = 64, seed: int = 0,
                   min_distance: float = 0.35) -> Path:
    """Write a synthetic corpus: PNGs, ``manifest.csv`` and ``unseen_species.txt``.

    Returns the manifest path.  Output bytes depend only on the arguments.
    """
    if min(n_seen_species, samples_per_species) < 1 or n_unseen_species < 0:
        raise DataError("species and sample counts must be positive")
    if resolution < 16:
        raise DataError(f"resolution must be at least 16, got {resolution}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_species = n_seen_species + n_unseen_species
    styles = draw_styles(n_species, derive_rng(seed, "synth-styles"), min_distance)
    names = [f"seen{i:02d}" for i in range(n_seen_species)] + \
            [f"unseen{i:02d}" for i in range(n_unseen_species)]
    samples = []
    for si, (name, style) in enumerate(zip(names, styles)):
        for j in range(samples_per_species):
            rng = derive_rng(seed, "synth-sample", si, j)
            img = render(style, resolution, rng)
            sid = f"{name}_{j:04d}"
            path = out / "images" / f"{sid}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path, format="PNG")
            samples.append(ImageSample(sid, name, path))
    manifest = out / "manifest.csv"
    write_manifest(samples, manifest, root=out)
    (out / "unseen_species.txt").write_text(
        "".join(f"{n}\n" for n in names[n_seen_species:]), encoding="utf-8")
    (out / "styles.csv").write_text(
        "species,hue,stripes,stripe_width,aspect,noise\n" + "".join(
            f"{n},{s.hue:.6f},{s.stripes},{s.stripe_width:.6f},{s.aspect:.6f},{s.noise:.6f}\n"
            for n, s in zip(names, styles)), encoding="utf-8")
    return manifest


# --------------------------------------------------------------------------
# precomputed embeddings

EMBEDDING_MAGIC = b"EMBV"
EMBEDDING_VERSION = 1


class EmbeddingStore:
    """Fixed-dimension feature vectors keyed by sample id."""

    def __init__(self, dim: int, vectors: Optional[dict[str, np.ndarray]] = None):
        self.dim = int(dim)
        self.vectors: dict[str, np.ndarray] = {}
        for k, v in (vectors or {}).items():
            self.add(k, v)

    def add(self, sample_id: str, vector) -> None:
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise DataError(f"vector for {sample_id!r} has shape {v.shape}, store dim is {self.dim}")
        self.vectors[sample_id] = v

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, sample_id: str) -> np.ndarray:
        try:
            return self.vectors[sample_id]
        except KeyError:
            raise DataError(f"no embedding for id {sample_id!r}") from None

    def join(self, dataset: Dataset) -> None:
        """Check every stored id resolves against ``dataset``."""
        unknown = [k for k in self.vectors if k not in dataset.by_id]
        if unknown:
            raise DataError(f"{len(unknown)} embedding ids not in dataset, e.g. {unknown[0]!r}")


def write_embeddings(store: EmbeddingStore, path) -> None:
    """EMBV layout: magic, version u32, count u32, dim u32, then per record
    id length u16, UTF-8 id, ``dim`` little-endian float32 values."""
    parts = [EMBEDDING_MAGIC, struct.pack("<III", EMBEDDING_VERSION, len(store), store.dim)]
    for sid, vec in store.vectors.items():
        raw = sid.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, vec.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def import_embeddings(path) -> EmbeddingStore:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise EmbeddingTruncated(f"embedding file truncated in {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != EMBEDDING_MAGIC:
        raise EmbeddingFormatError("bad magic, expected b'EMBV'")
    version, count, dim = struct.unpack("<III", take(12, "header"))
    if version != EMBEDDING_VERSION:
        raise EmbeddingFormatError(f"unsupported embedding file version {version}")
    store = EmbeddingStore(dim)
    records = {}
    for i in range(count):
        (n,) = struct.unpack("<H", take(2, f"record {i} id length"))
        try:
            sid = take(n, f"record {i} id").decode("utf-8")
        except UnicodeDecodeError:
            raise EmbeddingFormatError(f"record {i} id is not UTF-8") from None
        vec = np.frombuffer(take(4 * dim, f"record {i} vector"), dtype="<f4").astype(np.float32)
        if sid in records:
            raise EmbeddingFormatError(f"duplicate id {sid!r}")
        records[sid] = vec
    if pos != len(buf):
        raise EmbeddingFormatError(f"{len(buf) - pos} trailing bytes after {count} records")
    store.vectors = records
    return store
