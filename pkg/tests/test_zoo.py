import struct

import numpy as np
import pytest

from grokunlearn import gradcheck as gc
from grokunlearn import zoo
from grokunlearn.numkernel import ShapeError
from grokunlearn.zoo import ModelSpec, Params

MLP = ModelSpec("mlp", layer_sizes=(10, 16, 16, 5), seed=1)
CNN = ModelSpec("cnn_lite", in_channels=1, image_size=8, n_classes=4, seed=1)
TF = ModelSpec("transformer_lite", vocab_size=11, seq_len=5, embed_dim=16, heads=2, n_blocks=2, n_classes=11, seed=1)
FAMILIES = [MLP, CNN, TF]


def test_mlp_param_names_and_count():
    shapes = zoo.param_shapes(MLP)
    assert list(shapes) == ["fc0.w", "fc0.b", "fc1.w", "fc1.b", "head.w", "head.b"]
    p = zoo.build_model(MLP)
    assert p.total_count == 10 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5


def test_transformer_param_names():
    shapes = zoo.param_shapes(TF)
    assert shapes["embed.tok"] == (11, 16) and shapes["embed.pos"] == (5, 16)
    assert shapes["blocks.1.mlp.w1"] == (16, 64)
    assert "blocks.1.attn.wo" in shapes


def test_cnn_flatten_width():
    assert zoo.param_shapes(CNN)["fc0.w"] == (16 * 2 * 2, 32)


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: s.family)
def test_forward_shapes_and_determinism(spec):
    x, _ = gc.random_inputs(spec, 3)
    a = zoo.build_model(spec)
    b = zoo.build_model(spec)
    assert a.equal(b)
    out = zoo.predict(spec, a, x)
    assert out.shape == (3, spec.num_classes) and out.dtype == np.float32


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: s.family)
def test_backward_matches_finite_differences(spec):
    x, y = gc.random_inputs(spec, 3, seed=2)
    res = gc.gradcheck(spec, zoo.build_model(spec), x, y, n_coords=40)
    assert res.max_rel_error <= 1e-3


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        ModelSpec("rnn").validate()
    with pytest.raises(ValueError):
        ModelSpec("mlp", layer_sizes=(4,)).validate()
    with pytest.raises(ValueError):
        ModelSpec("transformer_lite", vocab_size=5, seq_len=3, embed_dim=10, heads=3, n_classes=5).validate()


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        zoo.predict(MLP, zoo.build_model(MLP), np.zeros((2, 9), np.float32))
    with pytest.raises(ShapeError):
        zoo.predict(TF, zoo.build_model(TF), np.zeros((2, 6), np.int64))


def test_causal_mask_prefix_invariance():
    p = zoo.build_model(TF)
    tok = np.array([[1, 2, 3, 4, 5]])
    full = zoo.sequence_logits(TF, p, tok).data
    short = zoo.sequence_logits(TF, p, tok[:, :3]).data
    np.testing.assert_allclose(full[:, :3], short, atol=1e-5)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = zoo.build_model(TF)
    path = zoo.save_checkpoint(tmp_path / "a.grkf", p, {"step": 7, "spec": TF})
    q, meta = zoo.load_checkpoint(path)
    assert q.equal(p)
    assert meta["step"] == 7 and ModelSpec.from_dict(meta["spec"]) == TF
    assert not (tmp_path / "a.grkf.tmp").exists()


def test_checkpoint_header_layout(tmp_path):
    p = Params({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = zoo.save_checkpoint(tmp_path / "w.grkf", p).read_bytes()
    assert raw[:4] == b"GRKF"
    assert struct.unpack_from("<HI", raw, 4) == (1, 1)
    assert struct.unpack_from("<H", raw, 10) == (1,)
    assert raw[12:13] == b"w"
    assert struct.unpack_from("<BB2IQ", raw, 13) == (1, 2, 2, 3, 0)
    np.testing.assert_array_equal(np.frombuffer(raw[-24:], "<f4"), np.arange(6))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.grkf").write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ValueError):
        zoo.load_checkpoint(tmp_path / "x.grkf")


def test_flatten_unflatten_roundtrip():
    p = zoo.build_model(CNN)
    q = p.unflatten(p.flatten())
    assert q.equal(p)
    with pytest.raises(ShapeError):
        p.unflatten(np.zeros(3))


def test_init_scale_multiplies_weights_only():
    big = zoo.build_model(ModelSpec("mlp", layer_sizes=(10, 16, 5), seed=1, init_scale=3.0))
    base = zoo.build_model(ModelSpec("mlp", layer_sizes=(10, 16, 5), seed=1))
    np.testing.assert_allclose(big["fc0.w"], 3.0 * base["fc0.w"], rtol=1e-6)


def test_penultimate_and_preactivations():
    p = zoo.build_model(MLP)
    x, _ = gc.random_inputs(MLP, 4)
    pen = zoo.penultimate_activations(MLP, p, x.astype(np.float32))
    pre = zoo.preactivations(MLP, p, x.astype(np.float32))
    assert pen.shape == (4, 16) and len(pre) == 2
    np.testing.assert_allclose(pen, np.maximum(pre[-1], 0), atol=1e-6)
    with pytest.raises(ValueError):
        zoo.preactivations(TF, zoo.build_model(TF), np.zeros((1, 3), np.int64))
