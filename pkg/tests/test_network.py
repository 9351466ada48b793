import numpy as np
import pytest

from siamese_zsl import network as net
from siamese_zsl import tensor as T
from siamese_zsl.tensor import ShapeError


@pytest.fixture(scope="module")
def params():
    return net.init_params(np.random.default_rng(0), input_size=64)


def test_parameter_shapes(params):
    shapes = [(l.role, l.weight.shape, l.bias.shape) for l in params.layers]
    assert shapes == [
        ("conv1", (3, 3, 3, 16), (16,)),
        ("conv2", (3, 3, 16, 32), (32,)),
        ("conv3", (3, 3, 32, 64), (64,)),
        ("head", (4096, 128), (128,)),
    ]
    assert all(t.dtype == np.float32 for t in params.tensors())


def test_intermediate_shapes(params):
    x = np.random.default_rng(1).random((2, 64, 64, 3), dtype=np.float32)
    seen = []
    h = T.Tensor(x)
    for role in ("conv1", "conv2", "conv3"):
        layer = params.layer(role)
        h = T.conv2d(h, layer.weight, layer.bias)
        seen.append(h.shape[1:])
        h = T.maxpool2d(T.relu(h))
        seen.append(h.shape[1:])
    assert seen == [(64, 64, 16), (32, 32, 16), (32, 32, 32), (16, 16, 32), (16, 16, 64), (8, 8, 64)]
    assert T.flatten(h).shape == (2, 4096)
    head = params.layer("head")
    expected = T.l2_normalize(T.dense(T.flatten(h), head.weight, head.bias)).data
    got = net.embed(params, x).data
    assert got.shape == (2, 128)
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-6)


def test_infer_mode_is_deterministic(params):
    x = np.random.default_rng(2).random((3, 64, 64, 3), dtype=np.float32)
    a = net.embed(params, x, "infer").data
    b = net.embed(params, x.copy(), "infer").data
    assert a.tobytes() == b.tobytes()


def test_train_mode_uses_dropout(params):
    x = np.random.default_rng(2).random((2, 64, 64, 3), dtype=np.float32)
    a = net.embed(params, x, "train", np.random.default_rng(0)).data
    b = net.embed(params, x, "infer").data
    assert not np.array_equal(a, b)


def test_normalized_embeddings_have_unit_norm_and_bounded_distance():
    p = net.init_params(np.random.default_rng(5), input_size=16)
    x = np.random.default_rng(6).random((1000, 16, 16, 3), dtype=np.float32)
    e = net.embed(p, x).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    d = net.energy(e[:500], e[500:])
    assert np.all(d <= 2.0 + 1e-6)
    scores = net.similarity_score(d)
    assert np.all((scores >= 0) & (scores <= 1.0 + 1e-6))


def test_unnormalized_mode():
    p = net.init_params(np.random.default_rng(5), input_size=16, normalize=False)
    e = net.embed(p, np.random.default_rng(6).random((4, 16, 16, 3), dtype=np.float32)).data
    assert not np.allclose(np.linalg.norm(e, axis=1), 1.0)


def test_embed_rejects_wrong_resolution(params):
    with pytest.raises(ShapeError):
        net.embed(params, np.zeros((1, 32, 32, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        net.embed(params, np.zeros((1, 2048), dtype=np.float32))


def test_precomputed_backbone():
    p = net.init_params(np.random.default_rng(0), backbone="precomputed", feature_dim=2048)
    assert [l.role for l in p.layers] == ["head"]
    e = net.embed(p, np.random.default_rng(1).standard_normal((5, 2048)).astype(np.float32))
    assert e.shape == (5, 128)
    with pytest.raises(ShapeError):
        net.embed(p, np.zeros((1, 64, 64, 3), dtype=np.float32))


# -- energy / score -------------------------------------------------------------


def test_energy_values():
    e = np.random.default_rng(0).standard_normal(128)
    assert net.energy(e, e) == 0.0
    a = np.zeros(128)
    b = np.zeros(128)
    a[:2] = [3, 4]
    assert net.energy(a, b) == 5.0
    with pytest.raises(ShapeError):
        net.energy(np.zeros(3), np.zeros(4))


def test_energy_is_a_metric_on_sampled_triples():
    rng = np.random.default_rng(11)
    a, b, c = (rng.standard_normal((1000, 128)) for _ in range(3))
    dab, dba = net.energy(a, b), net.energy(b, a)
    np.testing.assert_array_equal(dab, dba)
    assert np.all(dab > 0)
    assert np.all(net.energy(a, c) <= dab + net.energy(b, c) + 1e-12)


def test_similarity_score():
    assert net.similarity_score(0.0) == 0.0
    assert net.similarity_score(2.0) == 1.0
    assert net.similarity_score(1.0) == 0.5
    assert net.similarity_score(3.0, normalized=False) == 3.0
    with pytest.raises(ValueError):
        net.similarity_score(-0.1)


def test_decision_invariant_under_common_rotation():
    rng = np.random.default_rng(4)
    e1 = rng.standard_normal((200, 128))
    e2 = rng.standard_normal((200, 128))
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
    q, _ = np.linalg.qr(rng.standard_normal((128, 128)))
    before = net.similarity_score(net.energy(e1, e2)) < 0.5
    after = net.similarity_score(net.energy(e1 @ q, e2 @ q)) < 0.5
    np.testing.assert_array_equal(before, after)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path, params):
    path = tmp_path / "model.snnc"
    net.save_checkpoint(params, path)
    loaded = net.load_checkpoint(path)
    assert loaded.metadata() == params.metadata()
    for (na, a), (nb, b) in zip(params.named_tensors(), loaded.named_tensors()):
        assert na == nb
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_layout(tmp_path):
    p = net.init_params(np.random.default_rng(0), backbone="precomputed", feature_dim=4)
    path = tmp_path / "m.snnc"
    net.save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SNNC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    meta_len = int.from_bytes(raw[12:16], "little")
    meta = raw[16:16 + meta_len].decode()
    assert "backbone=precomputed" in meta.splitlines()
    pos = 16 + meta_len
    name_len = int.from_bytes(raw[pos:pos + 2], "little")
    assert raw[pos + 2:pos + 2 + name_len] == b"head.weight"
    assert raw[pos + 2 + name_len] == 2
    expected = 4 * 128 * 4 + 128 * 4 + (2 + 11 + 1 + 8) + (2 + 9 + 1 + 4)
    assert len(raw) == pos + expected


def test_checkpoint_rejects_wrong_magic(tmp_path, params):
    path = tmp_path / "m.snnc"
    net.save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(net.CheckpointError, match="magic"):
        net.load_checkpoint(path)


def test_checkpoint_rejects_wrong_version(tmp_path, params):
    path = tmp_path / "m.snnc"
    net.save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (7).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(net.CheckpointError, match="version"):
        net.load_checkpoint(path)


def test_checkpoint_truncation_fuzz(tmp_path):
    p = net.init_params(np.random.default_rng(0), input_size=16)
    good = tmp_path / "good.snnc"
    net.save_checkpoint(p, good)
    raw = good.read_bytes()
    bad = tmp_path / "bad.snnc"
    offsets = np.random.default_rng(99).choice(len(raw), size=50, replace=False)
    for off in offsets:
        bad.write_bytes(raw[:off])
        with pytest.raises(net.CheckpointError):
            net.load_checkpoint(bad)


def test_checkpoint_mid_tensor_truncation_is_truncation_error(tmp_path, params):
    path = tmp_path / "m.snnc"
    net.save_checkpoint(params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(net.CheckpointTruncated):
        net.load_checkpoint(path)


def test_checkpoint_rejects_inconsistent_shapes(tmp_path):
    p = net.init_params(np.random.default_rng(0), input_size=16)
    path = tmp_path / "m.snnc"
    net.save_checkpoint(p, path)
    raw = path.read_bytes().replace(b"input_size=16", b"input_size=32")
    path.write_bytes(raw)
    with pytest.raises(net.CheckpointError, match="inconsistent"):
        net.load_checkpoint(path)
