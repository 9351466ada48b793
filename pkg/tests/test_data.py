import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamese_zsl import data as D


def census_dataset(counts):
    records = [(f"{sp}_{j}", sp) for sp, n in counts.items() for j in range(n)]
    return D.Dataset.from_records(records)


# -- datasets and manifests -------------------------------------------------------


def test_duplicate_ids_rejected():
    with pytest.raises(D.DataError, match="duplicate"):
        D.Dataset.from_records([("a", "x"), ("a", "y")])


def test_manifest_round_trip(tmp_path):
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    img[0, 0] = [255, 0, 0]
    from PIL import Image
    (tmp_path / "im").mkdir()
    Image.fromarray(img).save(tmp_path / "im" / "a.png")
    Image.fromarray(img[::-1]).save(tmp_path / "im" / "b.png")
    samples = [D.ImageSample("a", "sp1", tmp_path / "im" / "a.png"),
               D.ImageSample("b", "sp2", tmp_path / "im" / "b.png")]
    D.write_manifest(samples, tmp_path / "manifest.csv")
    ds = D.load_manifest(tmp_path / "manifest.csv")
    assert [(s.id, s.species) for s in ds.samples] == [("a", "sp1"), ("b", "sp2")]
    px = ds.pixels("a")
    assert px.dtype == np.float32 and px.shape == (4, 4, 3)
    np.testing.assert_array_equal(px[0, 0], [1, 0, 0])
    assert ds.pixels("b")[3, 0, 0] == 1.0


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_manifest(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("name,label\nx,y\n")
    with pytest.raises(D.DataError, match="header"):
        D.load_manifest(bad)
    bad.write_text("id,species,path\nx,y\n")
    with pytest.raises(D.DataError, match="3 fields"):
        D.load_manifest(bad)


def test_undecodable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    (tmp_path / "m.csv").write_text("id,species,path\nx,s,x.png\n")
    ds = D.load_manifest(tmp_path / "m.csv", decode=False)
    with pytest.raises(D.DataError, match="decode"):
        ds.pixels("x")


# -- split ------------------------------------------------------------------------


def test_split_rules_on_small_dataset():
    ds = census_dataset({"a": 50, "b": 37, "c": 9})
    split = D.make_split(ds, min_count=10, seed=3)
    parts = {}
    for _, sp, p in split.entries:
        parts.setdefault(sp, []).append(p)
    assert parts["c"] == ["test"] * 9
    for sp, n in (("a", 50), ("b", 37)):
        n_test = math.floor(0.2 * n)
        n_val = math.floor(0.2 * (n - n_test))
        assert parts[sp].count("test") == n_test
        assert parts[sp].count("validation") == n_val
        assert parts[sp].count("train") == n - n_test - n_val
    assert split.unseen_species == ["c"]


def test_split_is_deterministic_and_seed_sensitive():
    ds = census_dataset({"a": 40, "b": 40})
    a = D.make_split(ds, min_count=1, seed=1)
    b = D.make_split(ds, min_count=1, seed=1)
    c = D.make_split(ds, min_count=1, seed=2)
    assert a.entries == b.entries
    assert a.entries != c.entries


def test_split_forced_unseen():
    ds = census_dataset({"a": 40, "b": 40, "c": 40})
    split = D.make_split(ds, min_count=1, unseen=["b"])
    assert split.unseen_species == ["b"]
    assert {p for _, sp, p in split.entries if sp == "b"} == {"test"}
    with pytest.raises(D.DataError, match="not in dataset"):
        D.make_split(ds, min_count=1, unseen=["zzz"])


def test_split_refuses_all_unseen():
    with pytest.raises(D.DataError, match="every species"):
        D.make_split(census_dataset({"a": 5, "b": 5}), min_count=10)


def test_split_file_round_trip(tmp_path):
    split = D.make_split(census_dataset({"a": 30, "b": 20, "c": 3}), min_count=5, seed=7)
    split.write(tmp_path / "split.csv")
    back = D.SplitManifest.read(tmp_path / "split.csv")
    assert back.entries == split.entries
    assert back.params == split.params
    text = (tmp_path / "split.csv").read_text()
    assert text.startswith("id,species,partition\n")
    assert "# seed=7" in text


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(1, 60), min_size=2),
       st.integers(1, 30), st.integers(0, 1000))
def test_split_partitions_every_sample_once(counts, min_count, seed):
    ds = census_dataset(counts)
    if all(n < min_count for n in counts.values()):
        return
    split = D.make_split(ds, min_count=min_count, seed=seed)
    assert sorted(i for i, _, _ in split.entries) == sorted(s.id for s in ds.samples)
    c = split.census()
    assert c["train"] + c["validation"] + c["test"] == sum(counts.values())
    for _, sp, p in split.entries:
        if sp in split.unseen_species:
            assert p == "test"


# -- pairs ------------------------------------------------------------------------


POOL = {"a": [f"a{i}" for i in range(6)], "b": [f"b{i}" for i in range(5)],
        "c": [f"c{i}" for i in range(4)]}


def test_pairs_are_balanced_labelled_and_distinct():
    pairs = D.sample_pairs_from_pool(POOL, 30, 0.5, np.random.default_rng(0))
    assert len(pairs) == 30
    assert sum(p.label == 0 for p in pairs) == 15
    species = {i: sp for sp, ids in POOL.items() for i in ids}
    for p in pairs:
        assert p.id_a != p.id_b
        assert (species[p.id_a] == species[p.id_b]) == (p.label == 0)
    keys = {frozenset((p.id_a, p.id_b)) for p in pairs}
    assert len(keys) == 30


def test_pair_capacity_errors():
    # positive capacity: 15 + 10 + 6 = 31
    D.sample_pairs_from_pool(POOL, 62, 0.5, np.random.default_rng(0))
    with pytest.raises(D.DataError, match="cannot draw"):
        D.sample_pairs_from_pool(POOL, 64, 0.5, np.random.default_rng(0))
    with pytest.raises(D.DataError, match="at least 2 species"):
        D.sample_pairs_from_pool({"a": POOL["a"]}, 4, 0.5)
    with pytest.raises(D.DataError):
        D.sample_pairs_from_pool(POOL, 4, 1.5)


def test_exhausting_every_positive_pair():
    pairs = D.sample_pairs_from_pool({"a": POOL["a"]}, 15, 1.0, np.random.default_rng(1))
    assert len({frozenset((p.id_a, p.id_b)) for p in pairs}) == 15


def test_sample_pairs_respects_scope():
    ds = census_dataset({"a": 30, "b": 30, "u": 10, "v": 10})
    split = D.make_split(ds, min_count=20, seed=0)
    for scope in D.SCOPES:
        pairs = D.sample_pairs(split, 20, scope=scope, seed=1)
        used = {i.split("_")[0] for p in pairs for i in (p.id_a, p.id_b)}
        if scope == "seen":
            assert used <= {"a", "b"}
        elif scope == "unseen":
            assert used <= {"u", "v"}
    test_ids = set(split.ids("test"))
    assert all(p.id_a in test_ids and p.id_b in test_ids for p in D.sample_pairs(split, 20))
    with pytest.raises(D.DataError, match="scope"):
        D.sample_pairs(split, 10, scope="weird")


def test_pair_file_round_trip(tmp_path):
    pairs = D.sample_pairs_from_pool(POOL, 10, 0.5, np.random.default_rng(2))
    D.write_pairs(pairs, tmp_path / "p.csv")
    assert D.read_pairs(tmp_path / "p.csv") == pairs
    (tmp_path / "bad.csv").write_text("id_a,id_b,label\nx,y,2\n")
    with pytest.raises(D.DataError):
        D.read_pairs(tmp_path / "bad.csv")


# -- augmentation -----------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.booleans(), st.integers(0, 3), st.integers(0, 2**31))
def test_transform_is_a_pixel_permutation(hflip, vflip, k, seed):
    img = np.random.default_rng(seed).random((6, 6, 3))
    out = D.transform(img, hflip, vflip, k)
    assert out.shape == img.shape
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


def test_augment_keeps_identity():
    s = D.ImageSample("x", "sp", None, np.arange(48, dtype=np.float32).reshape(4, 4, 3))
    out = D.augment(s, np.random.default_rng(0))
    assert (out.id, out.species) == ("x", "sp")


# -- synthetic corpus -------------------------------------------------------------


def test_synth_generate_is_reproducible(tmp_path):
    a = D.synth_generate(tmp_path / "a", 3, 2, 4, 16, seed=5)
    b = D.synth_generate(tmp_path / "b", 3, 2, 4, 16, seed=5)
    assert a.read_bytes() == b.read_bytes()
    for name in ("seen00_0000", "unseen01_0003"):
        assert ((tmp_path / "a/images" / f"{name}.png").read_bytes()
                == (tmp_path / "b/images" / f"{name}.png").read_bytes())
    ds = D.load_manifest(a)
    assert len(ds) == 20
    assert ds.pixels("seen00_0000").shape == (16, 16, 3)
    assert (tmp_path / "a/unseen_species.txt").read_text().split() == ["unseen00", "unseen01"]


def test_draw_styles_reports_exhaustion():
    with pytest.raises(D.DataError, match="exhausted"):
        D.draw_styles(50, np.random.default_rng(0), min_distance=1.5, max_tries=500)


# -- embedding files --------------------------------------------------------------


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    store = D.EmbeddingStore(8, {f"id{i}": rng.standard_normal(8) for i in range(5)})
    D.write_embeddings(store, tmp_path / "e.embv")
    back = D.import_embeddings(tmp_path / "e.embv")
    assert back.dim == 8
    assert list(back.vectors) == list(store.vectors)
    for k in store.vectors:
        assert back[k].tobytes() == store[k].tobytes()


def test_embedding_truncation_fuzz(tmp_path):
    rng = np.random.default_rng(1)
    store = D.EmbeddingStore(16, {f"s{i}": rng.standard_normal(16) for i in range(20)})
    D.write_embeddings(store, tmp_path / "e.embv")
    raw = (tmp_path / "e.embv").read_bytes()
    for off in rng.choice(len(raw), size=50, replace=False):
        (tmp_path / "t.embv").write_bytes(raw[:off])
        with pytest.raises(D.EmbeddingTruncated):
            D.import_embeddings(tmp_path / "t.embv")


def test_embedding_store_checks():
    store = D.EmbeddingStore(3)
    with pytest.raises(D.DataError, match="shape"):
        store.add("x", np.zeros(4))
    store.add("x", np.zeros(3))
    with pytest.raises(D.DataError, match="not in dataset"):
        store.join(D.Dataset.from_records([("y", "s")]))


def test_synthetic_species_are_separable_by_nearest_centroid(tmp_path):
    manifest = D.synth_generate(tmp_path, 5, 0, 50, 32, seed=0)
    ds = D.load_manifest(manifest)
    species = sorted(ds.catalog.counts)
    X = np.stack([ds.pixels(s.id).ravel() for s in ds.samples])
    y = np.array([species.index(s.species) for s in ds.samples])
    train = np.arange(len(y)) % 2 == 0
    centroids = np.stack([X[train & (y == k)].mean(axis=0) for k in range(len(species))])
    dist = ((X[~train, None, :] - centroids[None]) ** 2).sum(axis=-1)
    accuracy = np.mean(dist.argmin(axis=1) == y[~train])
    assert accuracy >= 0.8
