"""Differentiable primitives and the finite-difference gradient checker.

Everything learnable in the package is built from plain linear maps,
exact-erf GELU, stable softmax and multi-head cross-attention.  The
gradient checker compares autograd gradients against central finite
differences and is the independent oracle for every differentiable
operation in the repository.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
from torch import nn

from .errors import ContractError, GradCheckError

# torch.nn.Parameter / torch.nn.Linear already satisfy the contracts we
# need (gradient buffer of identical shape, weight of shape out x in,
# optional bias); re-exported so callers depend on one surface.
Parameter = nn.Parameter
LinearMap = nn.Linear


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact-erf GELU, 0.5 * x * (1 + erf(x / sqrt(2)))."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max-subtraction)."""
    shifted = logits - logits.max(dim=axis, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    num_heads: int

    def __post_init__(self):
        if self.dim <= 0 or self.num_heads <= 0:
            raise ContractError("dim and num_heads must be positive")
        if self.dim % self.num_heads != 0:
            raise ContractError(
                f"dim {self.dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention with learnable Q/K/V/output projections.

    Accepts unbatched (Q x d, N x d) or batched (B x Q x d, B x N x d)
    inputs; query and key/value must share the model dimension d.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, query: torch.Tensor, keyvalue: torch.Tensor) -> torch.Tensor:
        d = self.cfg.dim
        if query.shape[-1] != d or keyvalue.shape[-1] != d:
            raise ContractError(
                f"expected feature dim {d}, got query {query.shape[-1]}, "
                f"keyvalue {keyvalue.shape[-1]}"
            )
        unbatched = query.dim() == 2
        q = query.unsqueeze(0) if unbatched else query
        kv = keyvalue.unsqueeze(0) if unbatched else keyvalue

        h, hd = self.cfg.num_heads, self.cfg.head_dim
        b, nq, _ = q.shape
        nk = kv.shape[1]
        qh = self.q_proj(q).view(b, nq, h, hd).transpose(1, 2)
        kh = self.k_proj(kv).view(b, nk, h, hd).transpose(1, 2)
        vh = self.v_proj(kv).view(b, nk, h, hd).transpose(1, 2)

        scores = qh @ kh.transpose(-2, -1) / math.sqrt(hd)
        weights = softmax(scores, axis=-1)
        out = (weights @ vh).transpose(1, 2).reshape(b, nq, d)
        out = self.out_proj(out)
        return out.squeeze(0) if unbatched else out


class FeedForward(nn.Module):
    """Two-layer MLP with exact-erf GELU."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    num_checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.1e}) over {len(self.entries)} tensors"
        )


def _named_tensors(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, item in enumerate(params):
        if isinstance(item, tuple):
            out.append(item)
        else:
            out.append((f"param{i}", item))
    return out


def grad_check(
    op: Callable[[], torch.Tensor],
    params: nn.Module | dict | Iterable,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-7,
    max_entries_per_tensor: int | None = None,
    analytic_grads: dict[str, torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar computation to central differences.

    ``op`` re-evaluates the forward pass from the current parameter values
    and returns a scalar.  Finite differences use step ``epsilon``; an
    element passes when |fd - analytic| <= tolerance * max(|fd|, |analytic|)
    or |fd - analytic| <= abs_floor (near-zero gradients).  Parameters must
    be float64: finite differences are unreliable at 32-bit.

    ``analytic_grads`` overrides autograd (used by negative-control tests).
    """
    named = _named_tensors(params)
    for name, p in named:
        if p.dtype != torch.float64:
            raise GradCheckError(f"grad_check requires float64 params; {name} is {p.dtype}")

    value = op()
    if value.numel() != 1:
        raise GradCheckError("op must return a scalar")
    if not torch.isfinite(value).all():
        raise GradCheckError(f"non-finite forward value {value.item()!r}; check aborted")

    if analytic_grads is None:
        for _, p in named:
            if p.grad is not None:
                p.grad = None
        value.backward()
        analytic_grads = {
            name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in named
        }

    report = GradCheckReport(tolerance=tolerance)
    # denominator folds the absolute floor into the relative criterion:
    # |fd - g| <= abs_floor  <=>  rel <= tolerance
    floor_den = abs_floor / tolerance
    for name, p in named:
        grad = analytic_grads[name]
        flat = p.detach().view(-1)
        gflat = grad.view(-1)
        idxs = range(flat.numel())
        if max_entries_per_tensor is not None and flat.numel() > max_entries_per_tensor:
            step = flat.numel() / max_entries_per_tensor
            idxs = [int(i * step) for i in range(max_entries_per_tensor)]
        max_rel = 0.0
        checked = 0
        with torch.no_grad():
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = op().item()
                flat[i] = orig - epsilon
                f_minus = op().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise GradCheckError(
                        f"non-finite forward while perturbing {name}[{i}]"
                    )
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                g = gflat[i].item()
                rel = abs(fd - g) / max(abs(fd), abs(g), floor_den)
                max_rel = max(max_rel, rel)
                checked += 1
        report.entries.append(GradCheckEntry(name, max_rel, checked))
    return report
