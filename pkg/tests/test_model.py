import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion.encoders import Vocabulary
from mmfusion.errors import ModalityError, ParseError, ShapeError
from mmfusion.model import (
    FusionConfig,
    Sample,
    forward,
    fuse,
    init_params,
    late_fuse,
    load_checkpoint,
    param_shapes,
    predict,
    save_checkpoint,
)
from mmfusion.numkit import SeededRng


def tiny(mode, **kw):
    base = dict(mode=mode, d=2, h=2, image_dim=3, class_count=2, g=1)
    base.update(kw)
    return FusionConfig(**base)


def test_fuse_examples():
    cfg = tiny("joint")
    np.testing.assert_array_equal(fuse(np.array([1.0, 3.0]), np.array([2.0, 2.0]), cfg).vector, [2, 3])
    single = fuse(np.array([4.0, 6.0]), None, cfg.replace(pooling="avg"))
    np.testing.assert_array_equal(single.vector, [4, 6])
    assert single.provenance == "text_only"
    early = fuse(np.array([4.0, 5.0]), np.array([1.0, 2.0, 3.0]), tiny("early"))
    np.testing.assert_array_equal(early.vector, [1, 2, 3, 4, 5])
    assert early.vector.shape == (5,)


def test_fuse_errors():
    with pytest.raises(ModalityError):
        fuse(np.array([1.0, 2.0]), None, tiny("early"))
    with pytest.raises(ModalityError):
        fuse(None, None, tiny("joint"))
    with pytest.raises(ShapeError):
        fuse(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0]), tiny("joint"))


@pytest.mark.parametrize("pooling", ["max", "avg"])
@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_pooling_commutative(pooling, vals):
    cfg = tiny("joint", pooling=pooling)
    a, b = np.array(vals[:2]), np.array(vals[2:])
    np.testing.assert_array_equal(fuse(a, b, cfg).vector, fuse(b, a, cfg).vector)


def test_forward_zero_weights_uniform():
    for mode in ("text_only", "image_only", "early", "joint", "common_space", "late"):
        cfg = tiny(mode, class_count=4)
        params = {k: np.zeros(v) for k, v in param_shapes(cfg, 3).items()}
        s = Sample(np.array([0, 2]), np.array([1.0, -2.0, 0.5]), 0)
        probs, _ = forward(s, params, cfg)
        np.testing.assert_array_equal(probs, [0.25] * 4)


def test_text_only_ignores_image():
    cfg = tiny("text_only")
    params = init_params(cfg, 4, 0)
    a = forward(Sample(np.array([1, 3]), np.array([1.0, 2.0, 3.0])), params, cfg)[0]
    b = forward(Sample(np.array([1, 3]), np.array([-9.0, 0.0, 7.0])), params, cfg)[0]
    np.testing.assert_array_equal(a, b)


def _manual_forward(E, ids, image, P):
    """Loop-by-loop joint-fusion forward pass with max aggregation and max pooling."""
    d = len(E[0])
    text = [max(E[t][k] for t in ids) for k in range(d)]
    proj = [sum(P["W_proj"][k][j] * image[j] for j in range(len(image))) + P["b_proj"][k] for k in range(d)]
    x = [max(proj[k], text[k]) for k in range(d)]
    hid = [sum(P["W_h"][r][c] * x[c] for c in range(d)) + P["b_h"][r] for r in range(len(P["b_h"]))]
    logits = [sum(P["W_out"][r][c] * hid[c] for c in range(len(hid))) + P["b_out"][r] for r in range(len(P["b_out"]))]
    exps = [math.exp(z) for z in logits]
    return [e / sum(exps) for e in exps]


def test_forward_matches_manual_oracle():
    cfg = tiny("joint")
    P = {
        "E": np.array([[0.5, -1.0], [0.25, 0.75], [-0.5, 2.0]]),
        "W_proj": np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]]),
        "b_proj": np.array([0.1, -0.2]),
        "W_h": np.array([[1.0, -2.0], [0.5, 0.25]]),
        "b_h": np.array([0.0, 0.3]),
        "W_out": np.array([[1.5, -0.5], [-1.0, 2.0]]),
        "b_out": np.array([0.2, -0.1]),
    }
    image = [1.0, 2.0, -0.5]
    expected = _manual_forward(P["E"].tolist(), [0, 1], image, {k: v.tolist() for k, v in P.items()})
    probs, cache = forward(Sample(np.array([0, 1]), np.array(image)), P, cfg)
    np.testing.assert_allclose(probs, expected, atol=1e-12, rtol=0)
    assert abs(probs.sum() - 1) <= 1e-12
    assert cache.x.shape == (cfg.d,)


def test_late_fuse_examples():
    scores, k = late_fuse([0.6, 0.4], [0.3, 0.7])
    np.testing.assert_allclose(scores, [0.18, 0.28])
    assert k == 1
    p_text = np.array([0.1, 0.5, 0.4])
    assert late_fuse(np.full(3, 1 / 3), p_text)[1] == 1
    one_hot = np.eye(4)[2]
    assert late_fuse(one_hot, one_hot)[1] == 2
    with pytest.raises(ShapeError):
        late_fuse([0.5, 0.5], [1.0, 0.0, 0.0])


def _params_with_output_bias(cfg, logits):
    params = {k: np.zeros(v) for k, v in param_shapes(cfg, 2).items()}
    params["b_out"] = np.asarray(logits, dtype=float)
    return params


def test_predict_argmax_and_tie_break():
    cfg = tiny("text_only", class_count=3)
    s = Sample(np.array([0]))
    assert predict(s, _params_with_output_bias(cfg, np.log([0.1, 0.7, 0.2])), cfg) == 1
    cfg2 = tiny("text_only")
    assert predict(s, _params_with_output_bias(cfg2, [0.0, 0.0]), cfg2) == 0


@settings(max_examples=50)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(-100, 100))
def test_predict_shift_invariant(logits, c):
    cfg = tiny("text_only", class_count=3)
    s = Sample(np.array([0]))
    a = predict(s, _params_with_output_bias(cfg, logits), cfg)
    b = predict(s, _params_with_output_bias(cfg, np.array(logits) + c), cfg)
    assert a == b


def test_common_space_handles_single_modality():
    cfg = tiny("common_space", class_count=4)
    params = init_params(cfg, 5, 1)
    assert 0 <= predict(Sample(None, np.array([0.3, 0.1, -2.0])), params, cfg) < 4
    assert 0 <= predict(Sample(np.array([2, 4]), None), params, cfg) < 4


def test_missing_modality_errors():
    with pytest.raises(ModalityError):
        forward(Sample(np.array([0]), None), init_params(tiny("early"), 2, 0), tiny("early"))
    with pytest.raises(ModalityError):
        forward(Sample(None, np.ones(3)), init_params(tiny("text_only"), 2, 0), tiny("text_only"))


def test_fully_oov_text_becomes_zero_vector():
    cfg = tiny("text_only")
    params = init_params(cfg, 3, 0)
    _, cache = forward(Sample(np.array([], dtype=np.int64)), params, cfg)
    np.testing.assert_array_equal(cache.x, [0.0, 0.0])


@pytest.mark.parametrize("mode,dim", [("early", 5), ("joint", 2), ("common_space", 2), ("text_only", 2), ("image_only", 3)])
def test_post_vector_dims(mode, dim):
    cfg = tiny(mode)
    _, cache = forward(Sample(np.array([0, 1]), np.ones(3)), init_params(cfg, 2, 0), cfg)
    assert cache.x.shape == (dim,)


def test_eval_forward_is_pure():
    cfg = tiny("common_space")
    params = init_params(cfg, 4, 3)
    s = Sample(np.array([0, 3]), np.array([0.2, -0.4, 1.0]))
    a = forward(s, params, cfg)[0]
    b = forward(s, params, cfg)[0]
    assert a.tobytes() == b.tobytes()


def test_late_mode_uses_product_of_branches():
    cfg = tiny("late", class_count=3)
    params = init_params(cfg, 4, 2)
    for k in ("text.b_out", "image.b_out"):
        params[k] = SeededRng(7).normal(size=3)
    s = Sample(np.array([0, 1]), np.array([1.0, 0.0, -1.0]))
    probs, cache = forward(s, params, cfg)
    pi, pt = cache.branches["image"].probs, cache.branches["text"].probs
    np.testing.assert_allclose(probs, pi * pt / (pi * pt).sum(), atol=1e-15)
    assert predict(s, params, cfg) == int(np.argmax(pi * pt))
    # one modality missing: the other branch decides alone
    assert predict(s.without_image(), params, cfg) == int(np.argmax(cache.branches["text"].probs))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = FusionConfig(mode="common_space", d=3, h=2, image_dim=4, class_count=3)
    params = init_params(cfg, 5, 11)
    vocab = Vocabulary(["a", "b", "c", "d", "ü"])
    path = tmp_path / "m.mmck"
    save_checkpoint(path, cfg, params, ["x", "y", "z"], vocab)
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.classes == ["x", "y", "z"] and ck.vocab.tokens == vocab.tokens
    assert set(ck.params) == set(params)
    for k in params:
        assert ck.params[k].shape == params[k].shape
        assert ck.params[k].tobytes() == params[k].tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"MMCK" and int.from_bytes(raw[4:8], "little") == 1
    save_checkpoint(tmp_path / "m2.mmck", ck.config, ck.params, ck.classes, ck.vocab)
    assert (tmp_path / "m2.mmck").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mmck"
    path.write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        load_checkpoint(path)
    cfg = tiny("text_only")
    save_checkpoint(path, cfg, init_params(cfg, 2, 0), ["a", "b"], Vocabulary(["p", "q"]))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        load_checkpoint(path)
