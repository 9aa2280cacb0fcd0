"""Visual-guided elimination of non-matching audio representations.

Visual tokens are softly clustered onto K learnable centers
(Gumbel-Softmax assignment), the centers are refined as assignment-
weighted token means, and each derived audio row is scored in [0, 1] by
cross-attending to the refined centers.  Scores multiply the audio rows,
weakening (never removing) rows without visual support.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ContractError
from .nn import AttentionConfig, MultiHeadCrossAttention, gelu, softmax
from .rng import Xoshiro256

SCHEMES = ("none", "fc", "ca_fc", "sk_ca_fc", "gs_ca_fc")


class VisualCenters(nn.Module):
    """K learnable visual semantic centers with clustering temperature."""

    def __init__(self, num_centers: int, dim: int, temperature: float = 1.0):
        super().__init__()
        if temperature <= 0:
            raise ContractError("temperature must be positive")
        self.centers = nn.Parameter(torch.randn(num_centers, dim) / dim**0.5)
        self.temperature = temperature


def sample_gumbel(shape: tuple[int, ...], rng: Xoshiro256) -> torch.Tensor:
    """Gumbel(0, 1) noise from the portable generator (row-major order)."""
    flat = [rng.gumbel() for _ in range(math.prod(shape))]
    return torch.tensor(flat, dtype=torch.float64).reshape(shape)


def soft_cluster(
    V: torch.Tensor, centers: VisualCenters, noise: torch.Tensor | None = None
) -> torch.Tensor:
    """Assignment matrix O = row-softmax((V @ centers.T + g) / tau).

    ``noise`` is the Gumbel sample g (training); absent noise means g = 0
    (deterministic evaluation).  Every row sums to 1.
    """
    if centers.temperature <= 0:
        raise ContractError("temperature must be positive")
    logits = V @ centers.centers.t()
    if noise is not None:
        if noise.shape != logits.shape:
            raise ContractError(
                f"noise shape {tuple(noise.shape)} != logits {tuple(logits.shape)}"
            )
        logits = logits + noise.to(dtype=logits.dtype, device=logits.device)
    return softmax(logits / centers.temperature, axis=-1)


def soft_kmeans_assign(V: torch.Tensor, centers: VisualCenters) -> torch.Tensor:
    """Soft k-means assignment: softmax of negative squared distances / tau."""
    d2 = torch.cdist(V, centers.centers).pow(2)
    return softmax(-d2 / centers.temperature, axis=-1)


def aggregate_centers(O: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """Refined centers: assignment-weighted means of the visual tokens."""
    if O.shape[0] != V.shape[0]:
        raise ContractError("assignment rows must match token count")
    weights = O.t()  # (K, HW)
    return (weights @ V) / weights.sum(dim=1, keepdim=True)


class EliminationScorer(nn.Module):
    """Cross-attention against refined centers, then a small MLP to one
    sigmoid score per audio row."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.mca = MultiHeadCrossAttention(AttentionConfig(dim, num_heads))
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, 1)
        # gate starts open (scores near 1) so the row scaling begins close
        # to the identity and suppression is learned rather than imposed
        with torch.no_grad():
            self.fc2.bias.fill_(2.0)

    def score(self, fused: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(gelu(self.fc1(fused))).squeeze(-1))


def score_and_eliminate(
    A_hat: torch.Tensor, C_v: torch.Tensor, scorer: EliminationScorer
) -> tuple[torch.Tensor, torch.Tensor]:
    """Score each audio row against the visual centers and scale it.

    Returns (S in [0,1]^K, A' with A'_i = S_i * A_hat_i).
    """
    if A_hat.shape[-1] != C_v.shape[-1]:
        raise ContractError("audio and visual center dims differ")
    fused = scorer.mca(A_hat, C_v)
    S = scorer.score(fused)
    return S, S.unsqueeze(-1) * A_hat


class EliminationModule(nn.Module):
    """One elimination stage, configurable over the ablation schemes:

    none      pass-through (no elimination)
    fc        score from the audio rows alone
    ca_fc     cross-attention against raw visual tokens, then score
    sk_ca_fc  soft k-means clustering (no noise), then ca_fc
    gs_ca_fc  Gumbel-Softmax clustering (full method)
    """

    def __init__(
        self,
        num_centers: int,
        dim: int,
        num_heads: int,
        visual_dim: int | None = None,
        temperature: float = 1.0,
        scheme: str = "gs_ca_fc",
    ):
        super().__init__()
        if scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        self.scheme = scheme
        self.dim = dim
        if scheme == "none":
            return
        visual_dim = visual_dim or dim
        self.proj = (
            nn.Linear(visual_dim, dim) if visual_dim != dim else nn.Identity()
        )
        self.scorer = EliminationScorer(dim, num_heads)
        if scheme in ("sk_ca_fc", "gs_ca_fc"):
            self.centers = VisualCenters(num_centers, dim, temperature)

    def forward(
        self,
        A_hat: torch.Tensor,
        V_tokens: torch.Tensor,
        noise_rng: Xoshiro256 | None = None,
        noise_scale: float = 1.0,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Apply the configured scheme.  ``noise_rng`` enables Gumbel noise
        (training mode); None means deterministic evaluation.  ``noise_scale``
        anneals the training forward toward the eval forward from both ends:
        it scales the clustering noise, and it blends the applied gate from
        the identity (scale 1, at noise_scale 1) to the learned score (at
        noise_scale 0).  The blend keeps early training free of untrained
        row suppression; by the end of the anneal the training forward and
        the deterministic eval forward coincide.

        Returns (A', S) with S None for scheme "none".
        """
        if self.scheme == "none":
            return A_hat, None
        V = self.proj(V_tokens)
        if self.scheme == "fc":
            S = self.scorer.score(A_hat)
            if noise_rng is not None:
                S = self._phase(S, noise_rng, noise_scale).detach()
            return S.unsqueeze(-1) * A_hat, S
        if self.scheme == "ca_fc":
            keyvalue = V
        elif self.scheme == "sk_ca_fc":
            O = soft_kmeans_assign(V, self.centers)
            keyvalue = aggregate_centers(O, V)
        else:  # gs_ca_fc
            noise = None
            if noise_rng is not None:
                noise = sample_gumbel(
                    (V.shape[0], self.centers.centers.shape[0]), noise_rng
                )
                if noise_scale != 1.0:
                    noise = noise * noise_scale
            O = soft_cluster(V, self.centers, noise)
            keyvalue = aggregate_centers(O, V)
        S, A_out = score_and_eliminate(A_hat, keyvalue, self.scorer)
        if noise_rng is not None:
            # training: the phased gate applies as a stop-gradient value, so
            # the segmentation loss cannot push on the scorer (the detached
            # visibility supervision is its sole training signal) and the
            # gate cannot leak segmentation gradients into the shared
            # features; the deterministic eval forward stays fully attached
            S = self._phase(S, noise_rng, noise_scale).detach()
            A_out = S.unsqueeze(-1) * A_hat
        return A_out, S

    @staticmethod
    def _phase(
        S: torch.Tensor, noise_rng: Xoshiro256 | None, noise_scale: float
    ) -> torch.Tensor:
        """Training-time gate blend: identity at full noise, learned score
        once the anneal completes.  Stays a valid score in [0, 1]."""
        if noise_rng is None or noise_scale <= 0.0:
            return S
        return noise_scale + (1.0 - noise_scale) * S

    def supervision_scores(
        self, A_hat: torch.Tensor, V_tokens: torch.Tensor
    ) -> torch.Tensor | None:
        """Scores recomputed from gradient-detached inputs, deterministically
        (no clustering noise).  An auxiliary target on these trains only the
        elimination parameters (scorer, centers, projection); no gradient can
        reach the upstream audio or visual features, so the supervision
        cannot disturb the shared representation.
        """
        if self.scheme == "none":
            return None
        _, S = self.forward(A_hat.detach(), V_tokens.detach(), None)
        return S
