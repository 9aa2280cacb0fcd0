"""Dynamic derivation of per-source audio representations.

From a mixed audio feature, retrieve the K nearest semantic classes and
derive one representation per class: an additive compensation built from
weighted edge features against the class centroids, followed by a
multiplicative intra-class refinement against the representatives of the
nearest sub-cluster.  With all learnable tensors at zero the whole module
is the identity (K copies of the input).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError
from .memory import ClassMemory, SemanticMemory, nearest_classes
from .nn import gelu, softmax


class DerivationParams(nn.Module):
    """The six learnable maps of the derivation module (all d -> d or d -> 1)."""

    def __init__(self, dim: int):
        super().__init__()
        self.edge_map = nn.Linear(dim, dim)
        self.edge_score = nn.Linear(dim, 1, bias=False)
        self.offset_map = nn.Linear(dim, dim)
        self.intra_edge_map = nn.Linear(dim, dim)
        self.intra_score = nn.Linear(dim, 1, bias=False)
        self.intra_offset_map = nn.Linear(dim, dim)
        self.dim = dim

    def zero_(self) -> "DerivationParams":
        """Zero every tensor; derivation becomes the exact identity."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


@dataclass
class DerivedSet:
    raw: torch.Tensor  # (K, d)
    refined: torch.Tensor  # (K, d)
    class_ids: list[int]  # retrieval order (ascending distance)
    distances: list[float]

    @property
    def K(self) -> int:
        return self.raw.shape[0]


def derive_prototypes(
    f_a: torch.Tensor, centers: torch.Tensor, params: DerivationParams
) -> torch.Tensor:
    """Additive compensation toward each retrieved center.

    Edge features are GELU(edge_map(center - f_a)); their scalar scores are
    softmaxed jointly across the K centers; each weighted edge feature is
    folded back through a tanh-bounded offset added to f_a.
    """
    if centers.dim() != 2 or centers.shape[0] < 1:
        raise ContractError("centers must be a non-empty K x d matrix")
    if centers.shape[1] != f_a.shape[-1]:
        raise ContractError("centers and f_a disagree in dim")
    e = gelu(params.edge_map(centers - f_a))  # (K, d)
    logits = params.edge_score(e).squeeze(-1)  # (K,)
    w = softmax(logits, axis=0)
    e_hat = w.unsqueeze(-1) * e
    delta = torch.tanh(params.offset_map(f_a + e_hat))
    return f_a + delta


def select_subcluster(
    a_i: torch.Tensor, class_mem: ClassMemory
) -> tuple[int, torch.Tensor]:
    """Nearest sub-centroid by Euclidean distance (ties to lowest index);
    returns its index and the m representatives of that sub-cluster."""
    sub = torch.as_tensor(class_mem.sub_centroids, dtype=a_i.dtype, device=a_i.device)
    dists = torch.linalg.norm(sub - a_i.detach(), dim=1)
    j = int(torch.argmin(dists).item())
    reps = torch.as_tensor(
        class_mem.representatives[j], dtype=a_i.dtype, device=a_i.device
    )
    return j, reps


def enhance_discriminative(
    A: torch.Tensor,
    class_ids: list[int],
    memory: SemanticMemory,
    params: DerivationParams,
    pool_all_representatives: bool = False,
) -> torch.Tensor:
    """Multiplicative intra-class refinement.

    Per row: edge features against the selected sub-cluster's m
    representatives, softmax-weighted into a single direction, squashed by
    tanh and applied as a componentwise (1 + delta) scaling, so the result
    is sign-preserving with factor in (0, 2).

    ``pool_all_representatives`` pools over all k*m representatives of the
    class instead of picking one sub-cluster (ablation variant).
    """
    rows = []
    for i, cid in enumerate(class_ids):
        if cid < 0 or cid >= memory.num_classes:
            raise ContractError(f"class {cid} not present in memory")
        cmem = memory.classes[cid]
        a_i = A[i]
        if pool_all_representatives:
            reps = torch.as_tensor(
                cmem.representatives.reshape(-1, memory.dim),
                dtype=A.dtype,
                device=A.device,
            )
        else:
            _, reps = select_subcluster(a_i, cmem)
        e = gelu(params.intra_edge_map(reps - a_i))  # (m, d)
        w = softmax(params.intra_score(e).squeeze(-1), axis=0)  # (m,)
        e_hat = (w.unsqueeze(-1) * e).sum(dim=0)  # (d,)
        delta = torch.tanh(params.intra_offset_map(e_hat))
        rows.append(a_i * (1.0 + delta))
    return torch.stack(rows)


def derive(
    f_a: torch.Tensor,
    memory: SemanticMemory,
    K: int,
    params: DerivationParams,
    pool_all_representatives: bool = False,
    enhance: bool = True,
) -> DerivedSet:
    """Full derivation: retrieval -> additive derivation -> refinement.

    Retrieval indices are constants in the backward pass (memory is
    frozen); everything else is differentiable in f_a and params.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    matched = nearest_classes(f_a.detach().cpu().numpy(), memory, K)
    class_ids = [cid for cid, _, _ in matched]
    distances = [dist for _, _, dist in matched]
    centers = torch.stack(
        [
            torch.as_tensor(mu, dtype=f_a.dtype, device=f_a.device)
            for _, mu, _ in matched
        ]
    )
    A = derive_prototypes(f_a, centers, params)
    refined = (
        enhance_discriminative(A, class_ids, memory, params, pool_all_representatives)
        if enhance
        else A
    )
    return DerivedSet(raw=A, refined=refined, class_ids=class_ids, distances=distances)
