import math

import numpy as np
import pytest

from dgw import numcore as nc
from dgw.numcore import ContractError, Tensor
from dgw.objective import (LossWeights, ce, difficulty_weight, entropy_loss, entropy_of, gce, loss_re,
                           loss_swap, loss_total, mask_entropy)
from dgw.workspace import AttentionRecord

from .oracles import scalar


def _logits_for_p(p):
    """Two-class logits whose softmax puts probability ``p`` on class 0."""
    return Tensor([[math.log(p), math.log(1 - p)]])


def _record(a):
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.where(a > 0, np.log(np.maximum(a, 1e-300)), -700.0)
    return AttentionRecord(a_asa=None, a_ca=Tensor(a), ca_logits=Tensor(logits), branch_tag="i")


def test_ce_uniform_and_confident():
    np.testing.assert_allclose(ce(Tensor(np.zeros((3, 10))), [0, 4, 9]).data, math.log(10), atol=1e-12)
    assert ce(Tensor([[60.0, 0.0, 0.0]]), [0]).data[0] < 1e-20


def test_ce_rejects_bad_labels():
    with pytest.raises(ContractError):
        ce(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        ce(Tensor(np.zeros((2, 1))), [0, 0])


def test_gce_examples():
    np.testing.assert_allclose(gce(_logits_for_p(0.5), [0], 0.7).data, 0.54918, atol=5e-6)
    np.testing.assert_allclose(gce(Tensor([[math.log(0.25), math.log(0.75)]]), [0], 1.0).data, 0.75, atol=1e-12)
    assert gce(Tensor([[80.0, 0.0]]), [0], 0.3).data[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        gce(Tensor(np.zeros((1, 2))), [0], 0.0)


def test_gce_bounded_and_monotone():
    ps = np.linspace(0.001, 0.999, 200)
    for q in (0.1, 0.7, 1.0):
        vals = np.array([gce(_logits_for_p(p), [0], q).data[0] for p in ps])
        assert (vals >= 0).all() and (vals <= 1 / q).all()
        assert (np.diff(vals) < 0).all()


def test_gce_small_q_approaches_ce():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((20, 5)))
    y = rng.integers(0, 5, 20)
    np.testing.assert_allclose(gce(logits, y, 1e-4).data, ce(logits, y).data, atol=1e-3)


def test_difficulty_weight_examples():
    np.testing.assert_allclose(difficulty_weight([1.0], [3.0]), [0.75])
    np.testing.assert_allclose(difficulty_weight([2.0], [2.0]), [0.5], atol=1e-9)
    assert difficulty_weight([0.0], [0.0])[0] == 0.0
    with pytest.raises(ContractError):
        difficulty_weight([-1.0], [1.0])


def test_weight_carries_no_gradient():
    li = Tensor(np.random.default_rng(0).standard_normal((4, 3)), requires_grad=True)
    lb = Tensor(np.random.default_rng(1).standard_normal((4, 3)), requires_grad=True)
    y = [0, 1, 2, 0]
    terms = loss_re(li, lb, y, None, None, LossWeights(lambda_re=0.0, lambda_ent=0.0))
    nc.backward(terms.total)
    assert not lb.grad.any()
    assert li.grad.any()


def test_entropy_examples():
    assert entropy_of(np.eye(2)) == 0.0
    assert entropy_of([[0.5, 0.5]]) == pytest.approx(0.34657, abs=5e-6)
    np.testing.assert_allclose(mask_entropy(_record([[[0.5, 0.5]]])).data, math.log(2) / 2, atol=1e-12)


def test_entropy_uniform_row_is_maximal():
    rng = np.random.default_rng(5)
    n = 6
    best = entropy_of(np.full((1, n), 1.0 / n))
    for _ in range(1000):
        a = rng.dirichlet(np.full(n, rng.uniform(0.1, 5.0)))[None]
        assert entropy_of(a) <= best + 1e-12


def test_entropy_loss_sums_branches():
    a = _record([[[0.5, 0.5], [1.0, 0.0]]])
    b = _record([[[0.25, 0.75], [0.5, 0.5]]])
    expect = scalar.entropy([0.5, 0.5, 1.0, 0.0]) + scalar.entropy([0.25, 0.75, 0.5, 0.5])
    np.testing.assert_allclose(entropy_loss(a, b).data, expect, atol=1e-12)


def test_losses_match_scalar_oracle_50_cases():
    rng = np.random.default_rng(2024)
    for case in range(50):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        li = rng.normal(0, 3, (n, k))
        lb = rng.normal(0, 3, (n, k))
        y = rng.integers(0, k, n)
        q = float(rng.uniform(0.05, 1.0))
        ce_i, ce_b = ce(Tensor(li), y).data, ce(Tensor(lb), y).data
        g = gce(Tensor(lb), y, q).data
        w = difficulty_weight(ce_i, ce_b)
        for r in range(n):
            assert abs(ce_i[r] - scalar.ce(list(li[r]), y[r])) < 1e-10
            assert abs(g[r] - scalar.gce(list(lb[r]), y[r], q)) < 1e-10
            assert abs(w[r] - scalar.weight(scalar.ce(list(li[r]), y[r]), scalar.ce(list(lb[r]), y[r]))) < 1e-10
        a = rng.dirichlet(np.ones(k), size=(1, n))
        assert abs(entropy_of(a) - scalar.entropy(a.ravel().tolist())) < 1e-10
        assert abs(mask_entropy(_record(a)).data - scalar.entropy(a.ravel().tolist())) < 1e-10, case


def test_loss_re_composition_and_reductions():
    rng = np.random.default_rng(7)
    li, lb = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 4)))
    y = rng.integers(0, 4, 5)
    rec_i = _record(rng.dirichlet(np.ones(3), size=(5, 2)))
    rec_b = _record(rng.dirichlet(np.ones(3), size=(5, 2)))
    w = LossWeights(lambda_re=2.5, lambda_ent=0.3, gce_q=0.6)
    t = loss_re(li, lb, y, rec_i, rec_b, w)
    manual = np.mean(t.weight * t.ce_i.data) + 2.5 * np.mean(t.gce_b.data) + 0.3 * t.ent.data
    assert abs(t.total.data - manual) < 1e-10
    bare = loss_re(li, lb, y, rec_i, rec_b, LossWeights(lambda_re=0.0, lambda_ent=0.0))
    assert abs(bare.total.data - np.mean(bare.weight * bare.ce_i.data)) < 1e-12


def test_loss_re_confident_leaves_entropy_only():
    big = np.full((3, 3), -60.0)
    big[np.arange(3), [0, 1, 2]] = 60.0
    rec = _record(np.full((3, 2, 2), 0.5))
    w = LossWeights(lambda_re=4.0, lambda_ent=0.5)
    t = loss_re(Tensor(big), Tensor(big), [0, 1, 2], rec, rec, w)
    assert abs(t.total.data - 0.5 * 2 * math.log(2) / 2) < 1e-9


def test_loss_swap_identity_and_zero_weight():
    rng = np.random.default_rng(9)
    li, lb = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((6, 3)))
    y = rng.integers(0, 3, 6)
    w = LossWeights(lambda_re=3.0, lambda_swap_b=3.0, lambda_ent=0.7)
    re = loss_re(li, lb, y, None, None, w)
    sw = loss_swap(li, lb, y, y, re.weight, w)
    assert abs(sw.data - re.total.data) < 1e-12
    only_i = loss_swap(li, lb, y, y[::-1], re.weight, LossWeights(lambda_swap_b=0.0))
    assert abs(only_i.data - np.mean(re.weight * re.ce_i.data)) < 1e-12
    tot = loss_total(re.total, sw, LossWeights(lambda_swap=1.5))
    assert abs(tot.data - (re.total.data + 1.5 * sw.data)) < 1e-12
    assert loss_total(re.total, None, w) is re.total


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(lambda_re=-1.0)
    with pytest.raises(ContractError):
        LossWeights(gce_q=1.5)
