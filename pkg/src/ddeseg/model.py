"""Multi-stage fusion pipeline and segmentation head.

Small trainable encoders stand in for pretrained backbones: a conv patch
embed for images and a two-layer conv pooling encoder for the
spectrogram-like audio arrays.  Stages interleave fusion blocks
(audio-query cross-attention, visual-query cross-attention,
self-attention + FFN, all pre-norm residual) with stride-2 transitions;
elimination runs on each transition output.  A mask-classification head
decodes per-query soft masks and class logits from the aggregated
multi-stage visual features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .derivation import DerivationParams, DerivedSet, derive
from .elimination import EliminationModule
from .errors import ContractError
from .memory import SemanticMemory, nearest_classes
from .nn import AttentionConfig, FeedForward, MultiHeadCrossAttention, gelu
from .rng import Xoshiro256


class VisualEncoder(nn.Module):
    """Conv patch embed: H x W x 3 image -> (H/patch) x (W/patch) x d map."""

    def __init__(self, dim: int, patch_size: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ContractError(f"expected 3 x H x W image, got {tuple(image.shape)}")
        if image.shape[1] % self.patch_size or image.shape[2] % self.patch_size:
            raise ContractError("image sides must be divisible by the patch size")
        return self.proj(image.unsqueeze(0)).squeeze(0)  # (d, H', W')


class AudioEncoder(nn.Module):
    """Two conv + average-pool layers, then a linear map to a d-vector.

    The pooling averages out per-bin noise while the band-limited class
    templates survive; the encoder is kept frozen during training so the
    semantic memory stays consistent with training-time features.
    """

    def __init__(self, dim: int, audio_shape: tuple[int, int] = (16, 16)):
        super().__init__()
        t, f = audio_shape
        if t % 4 or f % 4:
            raise ContractError("audio shape must be divisible by 4")
        self.audio_shape = tuple(audio_shape)
        # bias-free layers: with unit-norm inputs spread over t*f bins the
        # per-bin signal is tiny, and additive biases would swamp it once
        # the output is length-normalized
        self.input_gain = float(t * f) ** 0.5
        self.conv1 = nn.Conv2d(1, 8, kernel_size=3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, padding=1, bias=False)
        self.fc = nn.Linear(16 * (t // 4) * (f // 4), dim, bias=False)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if tuple(audio.shape) != self.audio_shape:
            raise ContractError(
                f"expected audio shape {self.audio_shape}, got {tuple(audio.shape)}"
            )
        # input length normalization removes source gain up front (the
        # layers are nonlinear, so output normalization alone would not)
        x = audio.unsqueeze(0).unsqueeze(0)
        x = x / (torch.linalg.norm(x) + 1e-6) * self.input_gain
        # fixed front-end smoothing: white per-bin noise averages down,
        # band-limited signal content survives
        x = F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)
        x = F.avg_pool2d(x, 2)
        x = F.avg_pool2d(gelu(self.conv1(x)), 2)
        x = gelu(self.conv2(x))
        v = self.fc(x.reshape(-1))
        # L2 normalization makes the embedding robust to source gain; the
        # epsilon keeps zero input at exactly zero output
        return v / (torch.linalg.norm(v) + 1e-6)


class FusionBlock(nn.Module):
    """Pre-norm residual fusion of the audio and visual token streams."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        cfg = AttentionConfig(dim, num_heads)
        self.norm_a = nn.LayerNorm(dim)
        self.norm_v_for_a = nn.LayerNorm(dim)
        self.mca_audio = MultiHeadCrossAttention(cfg)
        self.norm_v = nn.LayerNorm(dim)
        self.norm_a_for_v = nn.LayerNorm(dim)
        self.mca_visual = MultiHeadCrossAttention(cfg)
        self.norm_sa = nn.LayerNorm(dim)
        self.self_attn = MultiHeadCrossAttention(cfg)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(
        self, A: torch.Tensor, V: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if A.shape[-1] != V.shape[-1]:
            raise ContractError("audio and visual dims differ")
        A = A + self.mca_audio(self.norm_a(A), self.norm_v_for_a(V))
        V = V + self.mca_visual(self.norm_v(V), self.norm_a_for_v(A))
        V = V + self.self_attn(self.norm_sa(V), self.norm_sa(V))
        V = V + self.ffn(self.norm_ffn(V))
        return A, V

    def zero_residual_init_(self) -> "FusionBlock":
        """Zero every residual output projection; the block becomes identity."""
        with torch.no_grad():
            for attn in (self.mca_audio, self.mca_visual, self.self_attn):
                attn.out_proj.weight.zero_()
                attn.out_proj.bias.zero_()
            self.ffn.fc2.weight.zero_()
            self.ffn.fc2.bias.zero_()
        return self


class StageTransition(nn.Module):
    """Stride-2 convolution halving spatial dims, mapping d_l -> d_next."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, kernel_size=3, stride=2, padding=1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.shape[1] % 2 or fmap.shape[2] % 2:
            raise ContractError("spatial dims must be even for a stride-2 transition")
        return self.conv(fmap.unsqueeze(0)).squeeze(0)


@dataclass
class SegmentationOutput:
    query_masks: torch.Tensor  # (K, H, W) probabilities
    query_logits: torch.Tensor  # (K, C+1); index C is "no object"
    assembled: torch.Tensor  # (H, W) labels in [0, C]; 0 = background
    mask_logits: torch.Tensor  # (K, H, W) pre-sigmoid, for losses
    class_ids: list[int] = field(default_factory=list)
    derived: DerivedSet | None = None
    elimination_scores: list[torch.Tensor] = field(default_factory=list)
    # detached-input recomputation of the scores, populated in training
    # forwards only; auxiliary targets on these reach just the elimination
    # parameters (see EliminationModule.supervision_scores)
    gate_supervision_scores: list[torch.Tensor] = field(default_factory=list)


def assemble_semantic(
    query_masks: torch.Tensor,
    query_logits: torch.Tensor,
    threshold: float = 0.5,
    ignore_classes: bool = False,
) -> torch.Tensor:
    """Pixelwise winner-take-all over queries.

    Each pixel takes the query with the highest class-confidence x
    mask-probability, emitting that query's argmax class (+1, since 0 is
    background); pixels where every query scores below the threshold are
    background.  With ``ignore_classes`` confidences are 1 and all
    foreground collapses to label 1 (binary assembly).
    """
    num_classes = query_logits.shape[1] - 1
    probs = torch.softmax(query_logits, dim=1)
    if ignore_classes:
        conf = torch.ones(query_masks.shape[0], dtype=query_masks.dtype)
        labels = torch.ones(query_masks.shape[0], dtype=torch.long)
    else:
        conf, best_cls = probs[:, :num_classes].max(dim=1)
        labels = best_cls + 1
    scores = conf.view(-1, 1, 1) * query_masks  # (K, H, W)
    best_score, best_q = scores.max(dim=0)
    out = labels[best_q]
    out[best_score < threshold] = 0
    return out


def assemble_binary(query_masks: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Pixelwise max over query masks, thresholded."""
    return (query_masks.max(dim=0).values >= threshold).long()


class MaskHead(nn.Module):
    """Mask-classification head over aggregated multi-stage visual features."""

    def __init__(self, dim: int, stage_dims: tuple[int, ...], num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.stage_proj = nn.ModuleList(nn.Linear(sd, dim) for sd in stage_dims)
        self.mask_mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        # 2x refinement above the first stage's grid: boundary detail at the
        # patch resolution caps attainable overlap on small shapes
        self.refine = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.cls_mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, num_classes + 1)
        )

    def aggregate(self, stage_maps: list[torch.Tensor]) -> torch.Tensor:
        """Project every stage map to the head dim, upsample to the first
        stage's resolution and sum (FPN-style)."""
        target = stage_maps[0].shape[1:]
        total = None
        for proj, fmap in zip(self.stage_proj, stage_maps):
            tokens = fmap.flatten(1).t()  # (HW, d_l)
            projected = proj(tokens).t().reshape(-1, *fmap.shape[1:])
            up = F.interpolate(
                projected.unsqueeze(0), size=target, mode="bilinear", align_corners=False
            ).squeeze(0)
            total = up if total is None else total + up
        doubled = F.interpolate(
            total.unsqueeze(0),
            scale_factor=2,
            mode="bilinear",
            align_corners=False,
        )
        return (doubled + gelu(self.refine(doubled))).squeeze(0)  # (dim, 2*H1, 2*W1)

    def decode(
        self,
        A_final: torch.Tensor,
        V_map: torch.Tensor,
        out_size: tuple[int, int],
        class_ids: list[int] | None = None,
    ) -> SegmentationOutput:
        mask_embed = self.mask_mlp(A_final)  # (K, dim)
        logits_lowres = torch.einsum("kd,dhw->khw", mask_embed, V_map)
        mask_logits = F.interpolate(
            logits_lowres.unsqueeze(0), size=out_size, mode="bilinear", align_corners=False
        ).squeeze(0)
        query_masks = torch.sigmoid(mask_logits)
        query_logits = self.cls_mlp(A_final)
        assembled = assemble_semantic(query_masks.detach(), query_logits.detach())
        return SegmentationOutput(
            query_masks=query_masks,
            query_logits=query_logits,
            assembled=assembled,
            mask_logits=mask_logits,
            class_ids=list(class_ids or []),
        )


class DDESegModel(nn.Module):
    """The full pipeline: encoders, derivation, staged fusion with
    interleaved elimination, and the mask-classification head."""

    def __init__(self, config: RunConfig):
        super().__init__()
        config.validate()
        self.config = config
        L = len(config.stage_blocks)
        dims = config.stage_dims
        self.visual_encoder = VisualEncoder(dims[0], config.patch_size)
        self.audio_encoder = AudioEncoder(config.dim, config.audio_shape)
        self.derivation = DerivationParams(config.dim)
        self.stages = nn.ModuleList(
            nn.ModuleList(
                FusionBlock(dims[l], config.num_heads)
                for _ in range(config.stage_blocks[l])
            )
            for l in range(L)
        )
        self.transitions = nn.ModuleList(
            StageTransition(dims[l], dims[l + 1]) for l in range(L - 1)
        )
        # audio rows and stage tokens share dims here (stage_dims == dim at
        # desk scale); a projection guards the general case
        self.audio_to_stage = nn.ModuleList(
            nn.Linear(config.dim, dims[l]) if dims[l] != config.dim else nn.Identity()
            for l in range(L)
        )
        self.stage_to_audio = nn.ModuleList(
            nn.Linear(dims[l], config.dim) if dims[l] != config.dim else nn.Identity()
            for l in range(L)
        )
        self.head = MaskHead(config.dim, dims, config.num_classes)
        # built last so the shared parameters above get identical draws
        # whether or not the elimination scheme allocates parameters
        if config.share_centers:
            shared = EliminationModule(
                config.num_queries,
                config.dim,
                config.num_heads,
                visual_dim=max(dims),
                temperature=config.temperature,
                scheme=config.dem_scheme,
            )
            self.eliminations = nn.ModuleList(shared for _ in range(L - 1))
        else:
            self.eliminations = nn.ModuleList(
                EliminationModule(
                    config.num_queries,
                    config.dim,
                    config.num_heads,
                    visual_dim=dims[l + 1],
                    temperature=config.temperature,
                    scheme=config.dem_scheme,
                )
                for l in range(L - 1)
            )
        # the derivation offsets start at zero: derived queries begin as
        # exact copies of F_a and the refinement factor begins at 1, so the
        # extra capacity trains from the plain-copy behavior instead of
        # perturbing the queries at initialization
        with torch.no_grad():
            for lin in (self.derivation.offset_map, self.derivation.intra_offset_map):
                lin.weight.zero_()
                lin.bias.zero_()

    def encode_audio(self, audio: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(audio)

    def derive_queries(self, f_a: torch.Tensor, memory: SemanticMemory) -> DerivedSet:
        """Derivation module, honoring the ablation flags."""
        cfg = self.config
        if cfg.derivation:
            return derive(
                f_a,
                memory,
                cfg.num_queries,
                self.derivation,
                pool_all_representatives=cfg.pool_all_representatives,
                enhance=cfg.enhancement,
            )
        # baseline: K copies of F_a; retrieval still names the classes so
        # query-to-ground-truth matching stays defined
        matched = nearest_classes(f_a.detach().cpu().numpy(), memory, cfg.num_queries)
        rows = f_a.unsqueeze(0).expand(cfg.num_queries, -1)
        return DerivedSet(
            raw=rows,
            refined=rows,
            class_ids=[cid for cid, _, _ in matched],
            distances=[dist for _, _, dist in matched],
        )

    def forward(
        self,
        image: torch.Tensor,
        audio: torch.Tensor,
        memory: SemanticMemory,
        noise_rng: Xoshiro256 | None = None,
        noise_scale: float = 1.0,
    ) -> SegmentationOutput:
        """Run the full pipeline on one audio-visual pair.

        ``noise_rng`` enables Gumbel noise in the elimination stages
        (training); None gives deterministic evaluation.  ``noise_scale``
        supports annealing the training noise toward the eval forward.
        """
        cfg = self.config
        f_a = self.encode_audio(audio)
        derived = self.derive_queries(f_a, memory)
        A = derived.refined
        v_map = self.visual_encoder(image)

        stage_maps: list[torch.Tensor] = []
        scores: list[torch.Tensor] = []
        sup_scores: list[torch.Tensor] = []
        L = len(cfg.stage_blocks)
        for l in range(L):
            tokens = v_map.flatten(1).t()  # (HW, d_l)
            A_stage = self.audio_to_stage[l](A)
            for block in self.stages[l]:
                A_stage, tokens = block(A_stage, tokens)
            A = self.stage_to_audio[l](A_stage)
            fused_map = tokens.t().reshape(v_map.shape)
            stage_maps.append(fused_map)
            if l < L - 1:
                v_map = self.transitions[l](fused_map)
                next_tokens = v_map.flatten(1).t()
                A_next, S = self.eliminations[l](A, next_tokens, noise_rng, noise_scale)
                if S is not None:
                    scores.append(S)
                    if noise_rng is not None:
                        sup_scores.append(
                            self.eliminations[l].supervision_scores(A, next_tokens)
                        )
                A = A_next

        v_agg = self.head.aggregate(stage_maps)
        out = self.head.decode(
            A, v_agg, (image.shape[1], image.shape[2]), derived.class_ids
        )
        out.derived = derived
        out.elimination_scores = scores
        out.gate_supervision_scores = sup_scores
        return out

    def zero_residual_init_(self) -> "DDESegModel":
        for stage in self.stages:
            for block in stage:
                block.zero_residual_init_()
        return self
