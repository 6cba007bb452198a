import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actclip.disentangle import ClassProbabilities
from actclip.objective import (LabelError, LossWeights, ParameterError, aux_loss, clip_loss, disent_enhanced,
                               info_nce, total_loss)


def test_single_pair_is_zero():
    assert float(clip_loss(torch.randn(1, 6), torch.randn(1, 6), 0.07)) == pytest.approx(0.0, abs=1e-7)


def test_identity_similarity():
    eye = torch.eye(2, dtype=torch.float64)
    expected = -math.log(math.e / (math.e + 1))
    assert expected == pytest.approx(0.3133, abs=1e-4)
    assert float(clip_loss(eye, eye, 1.0)) == pytest.approx(expected, abs=1e-6)
    assert float(clip_loss(eye, eye, torch.tensor(1.0, dtype=torch.float64))) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("n", [2, 3, 7, 32])
def test_uniform_is_log_n(n):
    v = torch.ones(n, 4, dtype=torch.float64)
    assert float(clip_loss(v, v, 0.07)) == pytest.approx(math.log(n), abs=1e-6)
    assert float(clip_loss(v, v, 0.07, symmetric=True)) == pytest.approx(math.log(n), abs=1e-6)


def test_direction_and_symmetric_mode():
    g = torch.Generator().manual_seed(1)
    v, t = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
    one_way = clip_loss(v, t, 0.5)
    other_way = clip_loss(t, v, 0.5)
    assert not torch.allclose(one_way, other_way)
    assert torch.allclose(clip_loss(v, t, 0.5, symmetric=True), 0.5 * (one_way + other_way))


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_bad_temperature(tau):
    with pytest.raises(ParameterError):
        info_nce(torch.randn(2, 3), torch.randn(2, 3), tau)


def test_monotone_in_positive_margin():
    neg = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    values = []
    for m in [0.0, 0.5, 1.0, 2.0, 4.0]:
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        k = torch.cat([torch.tensor([[1.0, 1.0 / (1 + m)]], dtype=torch.float64), neg])
        values.append(float(clip_loss(q, k, 0.1)))
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v >= 0 for v in values)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000), st.floats(0.01, 1.0))
def test_finite_and_nonnegative(n, seed, tau):
    g = torch.Generator().manual_seed(seed)
    loss = clip_loss(torch.randn(n, 6, generator=g), torch.randn(n, 6, generator=g), tau)
    assert math.isfinite(float(loss)) and float(loss) >= -1e-6


def _probs(*rows):
    return ClassProbabilities(*(torch.tensor(r, dtype=torch.float64) for r in rows))


def test_aux_uniform_and_perfect():
    uni = _probs([[1 / 3] * 3], [[1 / 6] * 6], [[1 / 8] * 8])
    labels = torch.tensor([[0, 4, 7]])
    assert float(aux_loss(uni, labels)) == pytest.approx(math.log(3) + math.log(6) + math.log(8), abs=1e-9)
    onehot = _probs([[1.0, 0, 0]], [[0, 0, 0, 0, 1.0, 0]], [[0] * 7 + [1.0]])
    assert float(aux_loss(onehot, labels)) == pytest.approx(0.0, abs=1e-12)
    assert float(aux_loss(uni, labels, alpha_action=0.0)) == pytest.approx(math.log(3) + math.log(8), abs=1e-9)


def test_aux_label_error():
    with pytest.raises(LabelError):
        aux_loss(_probs([[0.5, 0.5]], [[1.0]], [[1.0]]), torch.tensor([[2, 0, 0]]))


def test_disent_enhanced():
    assert disent_enhanced(0.3, 0.1, 0.7, 0.0, 0.0) == 0.0
    value = disent_enhanced(1 / 3, 0.03, math.log(2), 1.0, 0.5)
    assert value == pytest.approx(1 / 3 + 0.03 + 0.5 * math.log(2), abs=1e-12)
    assert value == pytest.approx(0.7099, abs=1e-4)


def test_total_loss():
    assert total_loss(0.3133, 0.7099, 4.0, 0.0, 0.0) == 0.3133
    aux = 3 * math.log(6)
    assert total_loss(0.3133, 0.7099, aux, 0.5, 0.5) == pytest.approx(0.3133 + 0.5 * 0.7099 + 0.5 * aux, abs=1e-12)


def test_total_gradient_is_weighted_sum():
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    parts = [(w ** 2).sum(), w.sin().sum(), (w * 3).sum(), w.exp().sum(), w.cos().sum()]
    clip, sim, l2, recomb, aux = parts
    total = total_loss(clip, disent_enhanced(sim, l2, recomb, 1.0, 0.5), aux, 0.5, 0.5)
    (g_total,) = torch.autograd.grad(total, w, retain_graph=True)
    coeffs = [1.0, 0.5, 0.5, 0.25, 0.5]
    g_sum = sum(c * torch.autograd.grad(p, w, retain_graph=True)[0] for c, p in zip(coeffs, parts))
    assert torch.allclose(g_total, g_sum, atol=1e-12)


def test_weights_nonnegative():
    assert LossWeights().disent == 0.5
    with pytest.raises(ParameterError):
        LossWeights(recomb=-1.0)
