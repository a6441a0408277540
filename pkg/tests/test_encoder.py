import numpy as np
import pytest

from swaro import diffcore as dc
from swaro.contrastive import cosine_sim
from swaro.encoder import (CheckpointError, EncoderParams, checkpoint_bytes, embed_numpy, encode,
                           head, init_params, load_checkpoint, parse_checkpoint, save_checkpoint)


def _layer(w):
    w = np.asarray(w, dtype=float)
    return dc.Tensor(w), dc.Tensor(np.zeros(w.shape[1]))


def test_same_seed_bit_identical():
    a = init_params([8, 16, 16], [16, 128], seed=3)
    b = init_params([8, 16, 16], [16, 128], seed=3)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))


def test_different_seeds_differ():
    a = init_params([8, 16], [16, 128], seed=1)
    b = init_params([8, 16], [16, 128], seed=2)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a.tensors(), b.tensors()))


def test_head_output_dim_is_128():
    params = init_params([8, 16, 16], [16, 128], seed=0)
    z = encode(params, dc.Tensor(np.ones((3, 8)))).embedding
    assert z.shape == (3, 128)
    assert params.embedding_dim == 128


def test_parameter_count_matches_layout():
    params = init_params([8, 16, 16], [16, 128], seed=0)
    widths = [8, 16, 16, 16, 128]
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    assert params.num_parameters() == expected


def test_weight_scale_is_variance_scaled():
    params = init_params([400, 300], [300, 128], seed=0)
    w = params.backbone[0][0].data
    assert w.std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)


@pytest.mark.parametrize("layout,head_", [([8], [16, 128]), ([8, 16], [128]), ([8, 0], [4, 4])])
def test_bad_layouts_rejected(layout, head_):
    with pytest.raises(ValueError):
        init_params(layout, head_, seed=0)


def test_identity_network_returns_input():
    eye = np.eye(4)
    params = EncoderParams((_layer(eye),), (_layer(eye), _layer(eye)), activation="identity")
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(encode(params, dc.Tensor(x)).embedding.data, x)


def test_zero_network_gives_zero_embedding_and_defined_cosine():
    zero = np.zeros((4, 4))
    params = EncoderParams((_layer(zero),), (_layer(zero), _layer(zero)))
    z = encode(params, dc.Tensor(np.ones(4))).embedding
    assert np.array_equal(z.data, np.zeros((1, 4)))
    s = cosine_sim(dc.Tensor(z.data[0]), dc.Tensor(np.ones(4))).item()
    assert np.isfinite(s) and s == 0.0


def test_width_mismatch_rejected():
    params = init_params([8, 16], [16, 8], seed=0)
    with pytest.raises(dc.ShapeError):
        encode(params, dc.Tensor(np.ones((2, 7))))


def test_input_gradient_matches_finite_differences():
    params = init_params([5, 7, 6], [6, 4], seed=1, activation="relu")
    x = np.random.default_rng(4).standard_normal((3, 5))
    assert dc.grad_check(lambda t: dc.sum(encode(params, t).embedding), x) < 1e-4


def test_head_of_backbone_is_encode():
    params = init_params([5, 7], [6, 4], seed=2)
    x = dc.Tensor(np.random.default_rng(5).random((4, 5)))
    enc = encode(params, x)
    assert np.array_equal(head(params, enc.representation).data, enc.embedding.data)


def test_encode_is_deterministic():
    params = init_params([5, 7], [6, 4], seed=2)
    x = np.random.default_rng(5).random((4, 5))
    assert np.array_equal(embed_numpy(params, x), embed_numpy(params, x))


def test_parameter_gradients_flow():
    params = init_params([3, 4], [4, 2], seed=0).tracked()
    x = dc.Tensor(np.random.default_rng(0).random((6, 3)))
    with dc.Tape() as tape:
        loss = dc.sum(dc.square(encode(params, x).embedding))
    grads = dc.backward(tape, loss, params.tensors())
    assert any(np.any(g != 0) for g in grads)


def test_checkpoint_roundtrip_bytes(tmp_path):
    params = init_params([5, 7], [6, 4], seed=2)
    meta = {"config": {"lr": 0.05, "name": "x"}, "epoch": 3}
    extra = {"clusters.centroids": np.arange(12.0).reshape(3, 4)}
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, params, meta, extra)
    ck = load_checkpoint(path)
    again = checkpoint_bytes(ck.params, ck.metadata, ck.extra)
    assert again == path.read_bytes()
    assert np.array_equal(ck.extra["clusters.centroids"], extra["clusters.centroids"])
    assert ck.metadata == meta


def test_checkpoint_layout_prefix():
    raw = checkpoint_bytes(init_params([2, 3], [3, 2], seed=0))
    assert raw[:8] == b"SWAROCKP"
    assert int.from_bytes(raw[8:12], "little") == 1


@pytest.mark.parametrize("mutate", [lambda r: b"NOTACKPT" + r[8:], lambda r: r[:-5],
                                    lambda r: r + b"\x00"])
def test_corrupt_checkpoints_rejected(mutate):
    raw = checkpoint_bytes(init_params([2, 3], [3, 2], seed=0))
    with pytest.raises(CheckpointError):
        parse_checkpoint(mutate(raw))
