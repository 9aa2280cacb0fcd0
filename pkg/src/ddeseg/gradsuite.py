"""Gradient-check suite: every differentiable operation plus composites
and the full 2-stage micro-model, checked against central finite
differences in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .derivation import DerivationParams, derive
from .elimination import (
    EliminationScorer,
    VisualCenters,
    aggregate_centers,
    score_and_eliminate,
    soft_cluster,
)
from .memory import SemanticMemory, build_memory
from .model import DDESegModel, FusionBlock
from .nn import (
    AttentionConfig,
    FeedForward,
    GradCheckReport,
    MultiHeadCrossAttention,
    grad_check,
)


def micro_config(num_heads: int = 2) -> RunConfig:
    """2-stage, d=8, K=2, 8x8-image micro-model used for pipeline checks."""
    return RunConfig(
        dim=8,
        num_queries=2,
        num_heads=num_heads,
        stage_blocks=(1, 1),
        stage_dims=(8, 8),
        patch_size=4,
        num_classes=3,
        image_size=8,
        audio_shape=(8, 8),
        memory_subclusters=2,
        memory_representatives=2,
    )


def random_memory(
    dim: int, num_classes: int, k: int, m: int, seed: int, spread: float = 4.0
) -> SemanticMemory:
    """Well-separated random memory (large centroid gaps keep retrieval
    stable under finite-difference perturbations)."""
    rng = np.random.default_rng(seed)
    feats = {
        c: (spread * rng.normal(size=(1, dim)) + 0.3 * rng.normal(size=(k * m + 2, dim)))
        .astype(np.float32)
        for c in range(num_classes)
    }
    return build_memory(feats, k=k, m=m, seed=seed)


def _scalarize(t: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Fixed random projection of a tensor to a scalar."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(t.shape, generator=g, dtype=torch.float64)
    return (t * w).sum()


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_suite(
    seeds=(0, 1, 2),
    tolerance: float = 1e-4,
    pipeline_entries_per_tensor: int | None = 8,
) -> list[SuiteResult]:
    """All per-operation checks plus module composites and the full
    pipeline, across the given seeds."""
    results: list[SuiteResult] = []
    for seed in seeds:
        torch.manual_seed(1000 + seed)

        lin = torch.nn.Linear(6, 4).double()
        x = torch.randn(5, 6, dtype=torch.float64)
        results.append(
            SuiteResult(
                f"linear_map[seed={seed}]",
                grad_check(lambda: _scalarize(lin(x), seed), lin, tolerance=tolerance),
            )
        )

        mca = MultiHeadCrossAttention(AttentionConfig(8, 2)).double()
        q = torch.randn(3, 8, dtype=torch.float64)
        kv = torch.randn(5, 8, dtype=torch.float64)
        results.append(
            SuiteResult(
                f"cross_attention[seed={seed}]",
                grad_check(lambda: _scalarize(mca(q, kv), seed), mca, tolerance=tolerance),
            )
        )

        ffn = FeedForward(8, 16).double()
        results.append(
            SuiteResult(
                f"feed_forward[seed={seed}]",
                grad_check(lambda: _scalarize(ffn(q), seed), ffn, tolerance=tolerance),
            )
        )

        memory = random_memory(8, 3, 2, 2, seed)
        params = DerivationParams(8).double()
        f_a = torch.randn(8, dtype=torch.float64, requires_grad=True)
        results.append(
            SuiteResult(
                f"derivation[seed={seed}]",
                grad_check(
                    lambda: _scalarize(
                        derive(f_a, memory, 2, params).refined, seed
                    ),
                    dict(list(params.named_parameters()) + [("f_a", f_a)]),
                    tolerance=tolerance,
                ),
            )
        )

        centers = VisualCenters(2, 8).double()
        scorer = EliminationScorer(8, 2).double()
        V = torch.randn(6, 8, dtype=torch.float64)
        A_hat = torch.randn(2, 8, dtype=torch.float64)
        g_fixed = torch.randn(6, 2, dtype=torch.float64)  # frozen Gumbel draw

        def elim_forward():
            O = soft_cluster(V, centers, g_fixed)
            C_v = aggregate_centers(O, V)
            _, A_out = score_and_eliminate(A_hat, C_v, scorer)
            return _scalarize(A_out, seed)

        elim_params = dict(centers.named_parameters())
        elim_params.update(
            {f"scorer.{n}": p for n, p in scorer.named_parameters()}
        )
        results.append(
            SuiteResult(
                f"elimination[seed={seed}]",
                grad_check(elim_forward, elim_params, tolerance=tolerance),
            )
        )

        block = FusionBlock(8, 2).double()
        results.append(
            SuiteResult(
                f"fusion_block[seed={seed}]",
                grad_check(
                    lambda: _scalarize(torch.cat(block(A_hat, V)), seed),
                    block,
                    tolerance=tolerance,
                ),
            )
        )

        model = DDESegModel(micro_config()).double()
        pipe_memory = random_memory(8, 3, 2, 2, seed)
        image = torch.rand(3, 8, 8, dtype=torch.float64)
        audio = torch.randn(8, 8, dtype=torch.float64)

        def pipeline_forward():
            out = model(image, audio, pipe_memory)
            return _scalarize(out.mask_logits, seed) + _scalarize(
                out.query_logits, seed + 1
            )

        results.append(
            SuiteResult(
                f"pipeline[seed={seed}]",
                grad_check(
                    pipeline_forward,
                    model,
                    tolerance=tolerance,
                    max_entries_per_tensor=pipeline_entries_per_tensor,
                ),
            )
        )
    return results
