import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actclip.disentangle import (BranchProjector, ClassifierHeads, DegenerateFeatureError, SelfAttention,
                                 l2_penalty, orthogonality_loss)
from actclip.layers import BranchFeatures
from actclip.objective import aux_loss


def _zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            torch.nn.init.zeros_(p)


def test_single_key_weight_is_one():
    attn = SelfAttention(16, 4)
    attn(torch.randn(5, 16))
    assert torch.equal(attn.last_weights, torch.ones(5, 4, 1, 1))


def test_single_mode_is_linear_map_plus_residual():
    attn = SelfAttention(16, 4)
    x = torch.randn(3, 16)
    expected = x + attn.out(attn.v(x))
    assert torch.allclose(attn(x), expected, atol=1e-6)


def test_attention_zero_and_homogeneity():
    attn = SelfAttention(16, 4)
    _zero_biases(attn)
    assert torch.equal(attn(torch.zeros(2, 16)), torch.zeros(2, 16))
    x = torch.randn(2, 16)
    assert torch.allclose(attn(2.5 * x), 2.5 * attn(x), atol=1e-5)


def test_tokens_mode():
    attn = SelfAttention(16, 4, mode="tokens")
    toks = [torch.randn(3, 16) for _ in range(4)]
    out = attn(torch.randn(3, 16), toks)
    assert out.shape == (3, 16)
    assert attn.last_weights.shape == (3, 4, 4, 4)
    assert torch.allclose(attn.last_weights.sum(-1), torch.ones(3, 4, 4))


def test_branch_shapes_and_independence():
    proj = BranchProjector(16, 8)
    x = torch.randn(4, 16)
    before = proj(x)
    assert [tuple(t.shape) for t in before] == [(4, 8)] * 3
    with torch.no_grad():
        proj.object[2].weight.mul_(3.0)
    after = proj(x)
    assert torch.equal(before.subject, after.subject) and torch.equal(before.action, after.action)
    assert not torch.equal(before.object, after.object)


def test_ortho_orthogonal_is_zero():
    e = torch.eye(3)
    assert float(orthogonality_loss(BranchFeatures(e[0], e[1], e[2]))) == pytest.approx(0.0, abs=1e-12)


def test_ortho_identical_is_one():
    v = torch.tensor([0.6, 0.8])
    assert float(orthogonality_loss(BranchFeatures(v, v, v))) == pytest.approx(1.0, abs=1e-6)


def test_ortho_hand_value():
    s = torch.tensor([1.0, 0.0], dtype=torch.float64)
    a = torch.tensor([1.0, 1.0], dtype=torch.float64) / math.sqrt(2)
    o = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert float(orthogonality_loss(BranchFeatures(s, a, o))) == pytest.approx(1 / 3, abs=1e-12)
    # signed mode: -(cos(s,a) + cos(s,o) + cos(a,o)) / 3
    assert float(orthogonality_loss(BranchFeatures(s, a, o), "signed")) == pytest.approx(-math.sqrt(2) / 3, abs=1e-12)


def test_ortho_degenerate():
    with pytest.raises(DegenerateFeatureError):
        orthogonality_loss(BranchFeatures(torch.zeros(2, 4), torch.ones(2, 4), torch.ones(2, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.integers(0, 2))
def test_ortho_scale_invariant(seed, alpha, which):
    g = torch.Generator().manual_seed(seed)
    parts = [torch.randn(4, 6, generator=g, dtype=torch.float64) for _ in range(3)]
    scaled = list(parts)
    scaled[which] = alpha * scaled[which]
    assert float(orthogonality_loss(BranchFeatures(*parts))) == \
        pytest.approx(float(orthogonality_loss(BranchFeatures(*scaled))), rel=1e-9, abs=1e-12)


def test_ortho_dynamics_reach_orthogonality():
    torch.manual_seed(0)
    # unit-scale start: entries N(0, 1/d_b)
    free = [(torch.randn(8, 16) / 4).requires_grad_() for _ in range(3)]
    opt = torch.optim.SGD(free, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        orthogonality_loss(BranchFeatures(*free)).backward()
        opt.step()
    s, a, o = (torch.nn.functional.normalize(t.detach(), dim=-1) for t in free)
    worst = max(float((x * y).sum(-1).abs().max()) for x, y in ((s, a), (s, o), (a, o)))
    assert worst < 0.05


def test_l2_values():
    z = torch.zeros(2, 4)
    assert float(l2_penalty(BranchFeatures(z, z, z))) == 0.0
    u = torch.tensor([[1.0, 0.0]])
    assert float(l2_penalty(BranchFeatures(u, u, u))) == pytest.approx(0.03)
    assert float(l2_penalty(BranchFeatures(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2), torch.zeros(1, 2)))) == \
        pytest.approx(0.05)


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_l2_homogeneous(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    parts = [torch.randn(3, 5, generator=g, dtype=torch.float64) for _ in range(3)]
    base = float(l2_penalty(BranchFeatures(*parts)))
    assert float(l2_penalty(BranchFeatures(*(alpha * p for p in parts)))) == pytest.approx(alpha * base, rel=1e-9)


def test_classifier_heads_uniform_at_zero():
    heads = ClassifierHeads(16, 3, 6, 8)
    for p in heads.parameters():
        torch.nn.init.zeros_(p)
    probs = heads(torch.randn(4, 16))
    for p, k in zip(probs, (3, 6, 8)):
        assert torch.allclose(p, torch.full((4, k), 1 / k))
    loss = aux_loss(probs, torch.tensor([[0, 1, 2]] * 4))
    assert float(loss.detach()) == pytest.approx(math.log(3) + math.log(6) + math.log(8), abs=1e-5)


def test_classifier_heads_normalized():
    probs = ClassifierHeads(16, 3, 6, 8)(10 * torch.randn(5, 16))
    for p in probs:
        assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)
        assert bool(((p >= 0) & (p <= 1)).all())
