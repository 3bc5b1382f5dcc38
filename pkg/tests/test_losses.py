import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion.cli import gradcheck_fixture
from mmfusion.errors import CapacityError, ClassIndexError, StateError
from mmfusion.losses import (
    PairBatch,
    aux_loss,
    aux_terms,
    backward,
    check_gradient,
    combined_loss,
    dense,
    grad_check,
    loss_and_grad,
    nll_from_logits,
    nll_loss,
    sample_loss,
    sgd_step,
)
from mmfusion.model import FusionConfig, Sample, forward, init_params
from mmfusion.numkit import SeededRng

LN2 = math.log(2)


def test_nll_examples():
    assert nll_loss([0.0, 1.0, 0.0], 1) == 0
    assert nll_loss([0.25] * 4, 2) == pytest.approx(1.3862943611198906188, abs=1e-15)
    assert nll_loss([0.7, 0.2, 0.1], 1) == pytest.approx(1.6094379124341003746, abs=1e-15)
    with pytest.raises(ClassIndexError):
        nll_loss([0.5, 0.5], 2)


def test_nll_from_logits_matches_probabilities():
    z = np.array([0.3, -1.0, 2.0])
    p = np.exp(z) / np.exp(z).sum()
    assert nll_from_logits(z, 0) == pytest.approx(-np.log(p[0]), rel=1e-14)
    assert math.isfinite(nll_from_logits([1000.0, -1000.0], 1))


def _batch_with_distances(d_pos, d_negs):
    # anchor at the origin, each partner at sqrt(distance) along the first axis
    return PairBatch(np.zeros(2), np.array([math.sqrt(d_pos), 0.0]), [np.array([0.0, math.sqrt(d)]) for d in d_negs])


def test_aux_loss_examples():
    assert abs(aux_loss(_batch_with_distances(1.5, [1.5, 1.5, 1.5])) - 2.0794415416798359283) <= 1e-12
    assert aux_loss(_batch_with_distances(0.0, [50.0, 60.0, 75.0])) < 1e-20
    assert aux_loss(_batch_with_distances(1.0, [0.0])) == pytest.approx(1.313261687518222834, abs=1e-14)
    with pytest.raises(CapacityError):
        aux_loss(PairBatch(np.zeros(2), np.zeros(2), []))


@settings(max_examples=200)
@given(st.floats(0, 50), st.floats(0, 50))
def test_aux_term_range_and_ln2(d_pos, d_neg):
    term = aux_terms(d_pos, [d_neg])[0]
    assert term > 0 or d_pos - d_neg < -700
    assert aux_terms(d_pos, [d_pos])[0] == pytest.approx(LN2, abs=1e-15)


@settings(max_examples=200)
@given(st.floats(0.01, 30), st.floats(0.001, 5), st.lists(st.floats(0, 30), min_size=1, max_size=5))
def test_aux_monotone_in_positive_distance(d_pos, delta, d_negs):
    hi = aux_terms(d_pos, d_negs).sum()
    lo = aux_terms(max(d_pos - delta, 0.0), d_negs).sum()
    assert lo < hi


def _common_fixture(seed, lam=3.0):
    config, params, sample, negatives = gradcheck_fixture("common_space", seed)
    return config.replace(lam=lam), params, sample, negatives


def test_combined_loss_degenerate_weight_is_aux():
    config, params, sample, negatives = _common_fixture(0, lam=0.0)
    value = combined_loss(sample, negatives, params, config)
    _, cache = forward(sample, params, config)
    from mmfusion.model import encode_sample_text

    pos = encode_sample_text(sample, params["E"], config)[0]
    negs = [encode_sample_text(Sample(n), params["E"], config)[0] for n in negatives]
    assert value == aux_loss(PairBatch(cache.image_proj, pos, negs))


def test_combined_loss_weighted_sum():
    config, params, sample, negatives = _common_fixture(1)
    _, cache = forward(sample, params, config)
    nll = nll_from_logits(cache.logits, sample.label)
    aux = combined_loss(sample, negatives, params, config.replace(lam=0.0))
    assert combined_loss(sample, negatives, params, config) == pytest.approx(3.0 * nll + aux, abs=1e-12)


def test_combined_loss_separated_pairs_reduce_to_weighted_nll():
    config, params, sample, negatives = _common_fixture(2)
    # positive text sits exactly on the projected image; negatives far away
    params["W_proj"][:] = 0.0
    params["b_proj"][:] = params["E"][sample.token_ids].max(axis=0)
    for n in negatives:
        params["E"][n] += 100.0
    _, cache = forward(sample, params, config)
    nll = nll_from_logits(cache.logits, sample.label)
    assert combined_loss(sample, negatives, params, config) == pytest.approx(config.lam * nll, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10), st.floats(0, 10))
def test_combined_loss_affine_in_lambda(seed, lam1, lam2):
    config, params, sample, negatives = _common_fixture(seed)
    _, cache = forward(sample, params, config)
    nll = nll_from_logits(cache.logits, sample.label)
    c1 = combined_loss(sample, negatives, params, config.replace(lam=lam1))
    c2 = combined_loss(sample, negatives, params, config.replace(lam=lam2))
    assert abs((c2 - c1) - (lam2 - lam1) * nll) <= 1e-9


def test_gradient_path_isolation():
    config, params, sample, negatives = gradcheck_fixture("joint", 3)
    _, grads, _ = loss_and_grad(sample.without_image(), params, config, train=False)
    assert not np.any(grads["W_proj"]) and not np.any(grads["b_proj"])
    _, grads, _ = loss_and_grad(sample.without_text(), params, config, train=False)
    assert dense(grads["E"]).sum() == 0 and len(grads["E"].ids) == 0
    config, params, sample, negatives = gradcheck_fixture("text_only", 3)
    assert "W_proj" not in params
    _, g1, _ = loss_and_grad(sample, params, config, train=False)
    _, g2, _ = loss_and_grad(Sample(sample.token_ids, np.full(6, 9.0), sample.label), params, config, train=False)
    for k in g1:
        np.testing.assert_array_equal(dense(g1[k]), dense(g2[k]))


def test_gradient_vanishes_at_optimum():
    config, params, sample, _ = gradcheck_fixture("joint", 4)
    norms = []
    for scale in (5.0, 10.0, 20.0, 40.0):
        p = {k: v.copy() for k, v in params.items()}
        p["b_out"][:] = 0.0
        p["b_out"][sample.label] = scale
        _, grads, _ = loss_and_grad(sample, p, config, train=False)
        norms.append(sum(np.abs(dense(g)).sum() for g in grads.values()))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-15


def test_backward_rejects_mismatched_cache():
    config, params, sample, negatives = gradcheck_fixture("joint", 0)
    _, cache = forward(sample, params, config)
    with pytest.raises(StateError):
        backward(sample, negatives, params, config.replace(mode="common_space"), cache)


def test_check_gradient_quadratic_probe():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    params = {"x": np.array([0.4, -1.3]), "y": np.array([[2.0, -1.0]])}

    def f(ps):
        x, y = ps["x"], ps["y"][0]
        return float(0.5 * x @ A @ x + (y * y).sum() + x @ y)

    analytic = {"x": A @ params["x"] + params["y"][0], "y": (2 * params["y"][0] + params["x"])[None]}
    assert check_gradient(f, params, analytic, 1e-5, 1e-6).passed


def test_grad_check_joint_random_init():
    config, params, sample, negatives = gradcheck_fixture("joint", 11)
    report = grad_check(params, sample, negatives, config, 1e-5, 1e-4)
    assert report.passed, report.to_text()


def test_grad_check_detects_corrupted_coordinate():
    config, params, sample, negatives = gradcheck_fixture("common_space", 5)
    _, grads, _ = loss_and_grad(sample, params, config, negatives, train=True, rng=SeededRng(0))
    grads["W_h"][1, 2] *= 2.0

    def f(ps):
        return sample_loss(sample, ps, config, negatives, train=True, rng=SeededRng(0))[0]

    report = check_gradient(f, params, grads, 1e-5, 1e-4)
    assert not report.passed
    [bad] = report.failures()
    assert bad.name == "W_h" and bad.worst_index == (1, 2)
    assert "FAIL" in report.to_text() and "[1, 2]" in report.to_text()


def test_grad_check_jsonl_summary():
    config, params, sample, negatives = gradcheck_fixture("early", 1)
    report = grad_check(params, sample, negatives, config)
    rows = [json.loads(line) for line in report.to_jsonl().splitlines()]
    assert {r["tensor"] for r in rows} == set(params)
    assert all({"tensor", "max_rel_error", "pass"} <= set(r) for r in rows)


@pytest.mark.parametrize("mode", ["text_only", "image_only", "early", "late", "joint", "common_space"])
@pytest.mark.parametrize("pooling", ["max", "avg"])
def test_grad_check_all_modes(mode, pooling):
    for seed in range(5):
        config, params, sample, negatives = gradcheck_fixture(mode, seed, pooling)
        report = grad_check(params, sample, negatives, config, 1e-5, 1e-4, dropout_seed=seed)
        assert report.passed, report.to_text()


def test_frozen_embeddings_get_no_gradient():
    config, params, sample, negatives = gradcheck_fixture("common_space", 2)
    config = config.replace(freeze_embeddings=True)
    _, grads, _ = loss_and_grad(sample, params, config, negatives, train=False)
    assert len(grads["E"].ids) == 0


@pytest.mark.parametrize("mode", ["text_only", "image_only", "early", "late", "joint", "common_space"])
def test_small_sgd_step_decreases_loss(mode):
    failures = 0
    for seed in range(100 if mode == "common_space" else 20):
        config, params, sample, negatives = gradcheck_fixture(mode, seed)

        def f(ps):
            return sample_loss(sample, ps, config, negatives, train=True, rng=SeededRng(seed))[0]

        before, grads, _ = loss_and_grad(sample, params, config, negatives, train=True, rng=SeededRng(seed))
        directional = sum(float((dense(g) ** 2).sum()) for g in grads.values())
        sgd_step(params, grads, 1e-4)
        if not f(params) < before and directional >= 1e-12:
            failures += 1
    assert failures == 0
