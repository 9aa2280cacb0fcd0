import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddeseg.errors import ContractError, GradCheckError
from ddeseg.nn import (
    AttentionConfig,
    FeedForward,
    MultiHeadCrossAttention,
    gelu,
    grad_check,
    softmax,
)


def test_gelu_zero():
    assert gelu(torch.tensor(0.0)).item() == 0.0


def test_gelu_saturation_tail():
    # erf(-10/sqrt(2)) rounds to exactly -1 at 64-bit, so the tail value
    # underflows to (signed) zero
    v = gelu(torch.tensor(-10.0, dtype=torch.float64)).item()
    assert -1e-6 < v <= 0.0


def test_gelu_at_one_matches_erf_formula():
    expected = 0.5 * 1.0 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(gelu(torch.tensor(1.0, dtype=torch.float64)).item() - expected) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    out = softmax(torch.tensor(vals, dtype=torch.float64))
    assert abs(out.sum().item() - 1.0) < 1e-10
    assert (out >= 0).all()


@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    st.floats(-100, 100),
)
@settings(max_examples=100, deadline=None)
def test_softmax_shift_invariance(vals, shift):
    x = torch.tensor(vals, dtype=torch.float64)
    a = softmax(x)
    b = softmax(x + shift)
    assert torch.allclose(a, b, atol=1e-10)


def test_softmax_handles_extreme_logits():
    out = softmax(torch.tensor([1000.0, 0.0, -1000.0], dtype=torch.float64))
    assert torch.isfinite(out).all()
    assert abs(out[0].item() - 1.0) < 1e-12


def test_attention_config_divisibility():
    with pytest.raises(ContractError):
        AttentionConfig(10, 3)
    assert AttentionConfig(8, 2).head_dim == 4


def test_attention_shapes_batched_and_unbatched():
    mca = MultiHeadCrossAttention(AttentionConfig(8, 2))
    q = torch.randn(3, 8)
    kv = torch.randn(5, 8)
    assert mca(q, kv).shape == (3, 8)
    qb = torch.randn(2, 3, 8)
    kvb = torch.randn(2, 5, 8)
    assert mca(qb, kvb).shape == (2, 3, 8)


def test_attention_rejects_dim_mismatch():
    mca = MultiHeadCrossAttention(AttentionConfig(8, 2))
    with pytest.raises(ContractError):
        mca(torch.randn(3, 8), torch.randn(5, 4))


def test_attention_permutation_invariant_in_keyvalue():
    torch.manual_seed(0)
    mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
    q = torch.randn(3, 8, dtype=torch.float64)
    kv = torch.randn(6, 8, dtype=torch.float64)
    perm = torch.randperm(6)
    assert torch.allclose(mca(q, kv), mca(q, kv[perm]), atol=1e-12)


def test_feed_forward_shape():
    ffn = FeedForward(8)
    assert ffn(torch.randn(5, 8)).shape == (5, 8)
    assert ffn.fc1.out_features == 32  # default hidden = 4 * dim


def test_grad_check_passes_on_linear():
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 3).double()
    x = torch.randn(2, 4, dtype=torch.float64)
    report = grad_check(lambda: lin(x).sum(), lin)
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_grad_check_negative_control():
    # deliberately wrong analytic gradients must fail
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 3).double()
    x = torch.randn(2, 4, dtype=torch.float64)
    wrong = {
        name: torch.full_like(p, 7.7) for name, p in lin.named_parameters()
    }
    report = grad_check(lambda: lin(x).sum(), lin, analytic_grads=wrong)
    assert not report.passed


def test_grad_check_rejects_float32():
    lin = torch.nn.Linear(4, 3)
    with pytest.raises(GradCheckError):
        grad_check(lambda: lin(torch.randn(2, 4)).sum(), lin)


def test_grad_check_rejects_nonscalar():
    lin = torch.nn.Linear(4, 3).double()
    x = torch.randn(2, 4, dtype=torch.float64)
    with pytest.raises(GradCheckError):
        grad_check(lambda: lin(x), lin)


def test_grad_check_aborts_on_nonfinite():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    with pytest.raises(GradCheckError):
        grad_check(lambda: (p / 0.0).sum(), {"p": p})


def test_grad_check_sampled_entries():
    torch.manual_seed(0)
    lin = torch.nn.Linear(10, 10).double()
    x = torch.randn(4, 10, dtype=torch.float64)
    report = grad_check(lambda: lin(x).sum(), lin, max_entries_per_tensor=5)
    assert report.passed
    assert all(e.num_checked <= 5 for e in report.entries)
