"""Run configuration: one dataclass holding every knob, JSON round-trip,
and the ablation toggles used by the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ContractError


@dataclass
class RunConfig:
    # feature / model dims
    dim: int = 32
    num_queries: int = 4  # K derived audio representations
    num_heads: int = 4
    stage_blocks: tuple[int, ...] = (1, 1, 2, 1)
    stage_dims: tuple[int, ...] = (32, 32, 32, 32)
    patch_size: int = 4
    temperature: float = 1.0
    share_centers: bool = False  # share elimination centers across stages

    # semantic memory
    memory_subclusters: int = 3  # k
    memory_representatives: int = 4  # m
    kmeans_restarts: int = 10

    # data
    num_classes: int = 6
    image_size: int = 64
    audio_shape: tuple[int, int] = (16, 16)
    train_pairs: int = 200
    val_pairs: int = 50
    test_pairs: int = 50
    singlesource_per_class: int = 30
    offscreen_prob: float = 0.3
    noise_sigma: float = 0.05

    # training
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0  # max gradient norm; 0 disables clipping
    warmup_steps: int = 100  # linear learning-rate warmup
    lr_schedule: str = "cosine"  # cosine | constant
    lr_hold_steps: int = 800  # keep the peak rate this long before decaying
    steps: int = 2000
    batch_size: int = 4
    eval_every: int = 250
    seed: int = 0

    # losses / metrics
    lambda_dice: float = 5.0
    lambda_bce: float = 5.0
    lambda_iou: float = 2.0
    lambda_gate: float = 0.5  # visibility target on the elimination scores
    beta_sq: float = 0.3
    literal_beta: bool = False  # use beta=0.3 literally instead of beta^2=0.3

    # ablations
    derivation: bool = True  # off: queries are K copies of F_a
    enhancement: bool = True  # discriminative refinement on/off
    dem_scheme: str = "gs_ca_fc"  # none | fc | ca_fc | sk_ca_fc | gs_ca_fc
    pool_all_representatives: bool = False

    def apply_ablations(self, pairs: dict[str, str]) -> "RunConfig":
        """Return a copy with KEY=VAL ablation overrides applied."""
        cfg = dataclasses.replace(self)
        for key, val in pairs.items():
            if not hasattr(cfg, key):
                raise ContractError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                parsed = val.lower() in ("1", "true", "on", "yes")
            elif isinstance(current, int):
                parsed = int(val)
            elif isinstance(current, float):
                parsed = float(val)
            elif isinstance(current, tuple):
                parsed = tuple(int(v) for v in val.split(","))
            else:
                parsed = val
            setattr(cfg, key, parsed)
        return cfg

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        for f in dataclasses.fields(cls):
            if isinstance(getattr(cls(), f.name), tuple):
                setattr(cfg, f.name, tuple(getattr(cfg, f.name)))
        return cfg

    def validate(self) -> "RunConfig":
        if len(self.stage_blocks) != len(self.stage_dims):
            raise ContractError("stage_blocks and stage_dims lengths differ")
        if len(self.stage_blocks) < 2:
            raise ContractError("need at least 2 stages (elimination runs for l > 1)")
        if self.dim % self.num_heads:
            raise ContractError("dim must be divisible by num_heads")
        if self.num_queries > self.num_classes:
            raise ContractError("num_queries cannot exceed num_classes")
        return self
