"""Training, evaluation and analysis probes.

The audio encoder is frozen after (seeded) initialization so the semantic
memory built from its features stays consistent throughout training;
everything else trains with Adam on the composite segmentation loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .data import ClassSpec, ScenePair, gen_scene, gen_singlesource_bank
from .errors import ContractError
from .losses import (
    LossWeights,
    bce_loss,
    dice_loss,
    fbeta_metric,
    iou_loss,
    jaccard_metric,
    matched_query_loss,
    MetricReport,
)
from .memory import SemanticMemory, build_memory
from .model import DDESegModel, SegmentationOutput
from .rng import Xoshiro256, mix_seed


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1).to(dtype)


def audio_to_tensor(audio: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.asarray(audio, dtype=np.float32)).to(dtype)


def build_model(config: RunConfig, seed: int | None = None) -> DDESegModel:
    torch.manual_seed(config.seed if seed is None else seed)
    return DDESegModel(config)


def build_memory_for_model(
    model: DDESegModel, bank: list[ClassSpec], config: RunConfig
) -> SemanticMemory:
    """Single-source features through the frozen audio encoder -> memory."""
    ss = gen_singlesource_bank(
        bank,
        config.singlesource_per_class,
        config.seed,
        encoder=model.audio_encoder,
        noise_sigma=config.noise_sigma,
    )
    return build_memory(
        ss.features,
        k=config.memory_subclusters,
        m=config.memory_representatives,
        seed=config.seed,
        restarts=config.kmeans_restarts,
    )


def loss_components(
    out: SegmentationOutput,
    gt_mask: torch.Tensor,
    weights: LossWeights,
    visible_classes: set[int] | None = None,
    gate_weight: float = 0.0,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Matched-query loss plus a per-component breakdown for logging.

    With ``visible_classes`` and a positive ``gate_weight``, the elimination
    scores get an auxiliary binary target: rows whose retrieved class is
    visible in the scene should score 1, off-screen rows 0.  The target is
    applied to the detached-input score recomputation, so its gradient
    trains only the elimination parameters and cannot disturb the shared
    features.  Visible targets are strongly up-weighted: while the derived
    rows are still near-identical the scorer cannot tell them apart, and an
    even-weighted target would then park every gate at the visibility base
    rate (~0.6), starving the audio pathway; the up-weighting moves that
    uninformed optimum next to 1 (gates open) without changing the optimum
    of a discriminating scorer.  The reported "total" stays the composite
    mask loss alone.
    """
    total = matched_query_loss(
        out.query_masks, out.query_logits, out.class_ids, gt_mask, weights
    )
    sup = out.gate_supervision_scores
    if gate_weight > 0.0 and visible_classes is not None and sup:
        targets = torch.tensor(
            [1.0 if cid in visible_classes else 0.0 for cid in out.class_ids],
            dtype=out.query_masks.dtype,
        )
        pos_weight = 30.0
        w = pos_weight * targets + (1.0 - targets)
        gate = 0.0
        for S in sup:
            p = S.clamp(1e-7, 1.0 - 1e-7)
            ll = targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p)
            gate = gate - (w * ll).sum() / w.sum()
        total = total + gate_weight * gate / len(sup)
    with torch.no_grad():
        present = set(int(v) - 1 for v in torch.unique(gt_mask).tolist() if v > 0)
        d = b = i = n = 0.0
        for q, cid in enumerate(out.class_ids):
            if cid not in present:
                continue
            target = (gt_mask == cid + 1).to(out.query_masks.dtype)
            d += dice_loss(out.query_masks[q], target).item()
            b += bce_loss(out.query_masks[q], target).item()
            i += iou_loss(out.query_masks[q], target).item()
            n += 1
        n = max(n, 1.0)
        parts = {"dice": d / n, "bce": b / n, "iou": i / n, "total": total.item()}
    return total, parts


@dataclass
class TrainResult:
    model: DDESegModel
    history: list[dict] = field(default_factory=list)
    best_val_jf: float = float("nan")
    best_state: dict | None = None


def train(
    config: RunConfig,
    model: DDESegModel,
    memory: SemanticMemory,
    train_pairs: list[ScenePair],
    val_pairs: list[ScenePair] | None = None,
    log_path=None,
) -> TrainResult:
    """Adam on the composite loss; keeps the best-validation state.

    The per-call Gumbel noise stream and batch sampling both derive from
    config.seed, so step-0 losses are reproducible run to run.
    """
    weights = LossWeights(config.lambda_dice, config.lambda_bce, config.lambda_iou)
    trunk, gates = [], []
    for name, p in model.named_parameters():
        if name.startswith("audio_encoder."):
            continue
        (gates if name.startswith("eliminations.") else trunk).append(p)
    trainable = trunk + gates
    # the elimination parameters keep a constant learning rate: their
    # discrimination signal only appears once the derived rows have
    # differentiated, late in the run, when a decayed trunk rate would
    # leave them no time to learn
    opt = torch.optim.Adam(
        [
            {"params": trunk},
            {"params": gates, "decay_lr": False},
        ],
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    batch_rng = Xoshiro256(mix_seed(config.seed, 0xBA7C4))
    noise_rng = Xoshiro256(mix_seed(config.seed, 0x60B31))

    result = TrainResult(model=model)
    rows = []
    for step in range(config.steps):
        idxs = [batch_rng.randint(len(train_pairs)) for _ in range(config.batch_size)]
        opt.zero_grad()
        agg = {"dice": 0.0, "bce": 0.0, "iou": 0.0, "total": 0.0}
        batch_loss = 0.0
        for idx in idxs:
            pair = train_pairs[idx]
            out = model(
                image_to_tensor(pair.image),
                audio_to_tensor(pair.audio),
                memory,
                noise_rng=noise_rng,
                # anneal the clustering noise linearly to zero so the final
                # network trains against the deterministic eval forward
                noise_scale=1.0 - step / config.steps,
            )
            loss, parts = loss_components(
                out,
                torch.from_numpy(pair.gt_mask.astype(np.int64)),
                weights,
                visible_classes=pair.visible_classes,
                gate_weight=config.lambda_gate,
            )
            (loss / len(idxs)).backward()
            batch_loss += loss.item() / len(idxs)
            for k in agg:
                agg[k] += parts[k] / len(idxs)
        if not np.isfinite(batch_loss):
            raise ContractError(f"non-finite loss {batch_loss} at step {step}")
        warm = (
            min(1.0, (step + 1) / config.warmup_steps)
            if config.warmup_steps > 0
            else 1.0
        )
        hold = min(config.lr_hold_steps, config.steps - 1)
        frac = max(0, step - hold) / max(1, config.steps - hold)
        decay = (
            0.5 * (1.0 + math.cos(math.pi * frac))
            if config.lr_schedule == "cosine"
            else 1.0
        )
        for group in opt.param_groups:
            g_decay = decay if group.get("decay_lr", True) else 1.0
            group["lr"] = config.learning_rate * warm * g_decay
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
        opt.step()

        record = {"step": step, **agg}
        if val_pairs and (
            (step + 1) % config.eval_every == 0 or step == config.steps - 1
        ):
            report = evaluate(model, memory, val_pairs, beta_sq=effective_beta_sq(config))
            record["val_j"] = report.jaccard
            record["val_f"] = report.fbeta
            if not (result.best_val_jf >= report.jf_mean):  # NaN-safe
                result.best_val_jf = report.jf_mean
                result.best_state = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
        rows.append(record)
    result.history = rows

    if log_path is not None:
        fields = ["step", "dice", "bce", "iou", "total", "val_j", "val_f"]
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result


def effective_beta_sq(config: RunConfig) -> float:
    """beta^2 = 0.3 convention by default; literal beta = 0.3 behind a flag."""
    return config.beta_sq**2 if config.literal_beta else config.beta_sq


def predict(
    model: DDESegModel, memory: SemanticMemory, pair: ScenePair
) -> SegmentationOutput:
    model.eval()
    with torch.no_grad():
        return model(
            image_to_tensor(pair.image), audio_to_tensor(pair.audio), memory
        )


def evaluate(
    model: DDESegModel,
    memory: SemanticMemory,
    pairs: list[ScenePair],
    beta_sq: float = 0.3,
) -> MetricReport:
    """Deterministic eval-mode metrics (no Gumbel noise), averaged over
    pairs, with per-class aggregates."""
    js, fs = [], []
    per_class: dict[int, list[tuple[float, float]]] = {}
    for pair in pairs:
        out = predict(model, memory, pair)
        pred = out.assembled.numpy().astype(np.int64)
        gt = pair.gt_mask.astype(np.int64)
        js.append(jaccard_metric(pred, gt))
        fs.append(fbeta_metric(pred, gt, beta_sq))
        for c in np.unique(gt):
            if c == 0:
                continue
            pj = jaccard_metric(pred == c, gt == c)
            pf = fbeta_metric(pred == c, gt == c, beta_sq)
            per_class.setdefault(int(c) - 1, []).append((pj, pf))
    agg = {
        c: (float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
        for c, vals in per_class.items()
    }
    return MetricReport(
        jaccard=float(np.mean(js)) if js else 0.0,
        fbeta=float(np.mean(fs)) if fs else 0.0,
        per_class=agg,
    )


def derived_features(
    model: DDESegModel, memory: SemanticMemory, clips: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(raw F_a, refined first derived row) for a stack of audio clips."""
    model.eval()
    raw, refined = [], []
    with torch.no_grad():
        for clip in clips:
            f_a = model.encode_audio(audio_to_tensor(clip))
            derived = model.derive_queries(f_a, memory)
            raw.append(f_a.numpy())
            refined.append(derived.refined[0].numpy())
    return np.stack(raw), np.stack(refined)


def linear_probe_accuracies(
    model: DDESegModel,
    memory: SemanticMemory,
    bank: list[ClassSpec],
    seed: int,
    train_per_class: int = 20,
    test_per_class: int = 20,
    noise_sigma: float = 0.05,
) -> tuple[float, float]:
    """Linear-classifier accuracy on held-out single-source clips, for raw
    audio features vs refined derived features.  Returns (raw, refined)."""
    from sklearn.linear_model import LogisticRegression

    def collect(split_seed, count):
        ss = gen_singlesource_bank(
            bank, count, split_seed, encoder=None, noise_sigma=noise_sigma
        )
        X_raw, X_ref, y = [], [], []
        for cid, clips in ss.clips.items():
            r, f = derived_features(model, memory, clips)
            X_raw.append(r)
            X_ref.append(f)
            y.extend([cid] * len(clips))
        return np.concatenate(X_raw), np.concatenate(X_ref), np.array(y)

    tr_raw, tr_ref, tr_y = collect(mix_seed(seed, 0x7A1), train_per_class)
    te_raw, te_ref, te_y = collect(mix_seed(seed, 0x7E5), test_per_class)

    def acc(train_x, test_x):
        clf = LogisticRegression(max_iter=2000)
        clf.fit(train_x, tr_y)
        return float(clf.score(test_x, te_y))

    return acc(tr_raw, te_raw), acc(tr_ref, te_ref)


def offscreen_score_gap(
    model: DDESegModel,
    memory: SemanticMemory,
    bank: list[ClassSpec],
    seed: int,
    n_scenes: int = 30,
    image_size: int = 64,
    noise_sigma: float = 0.05,
) -> tuple[float, float]:
    """Mean elimination score of off-screen audible rows vs on-screen
    audible rows, over scenes with exactly one off-screen source.

    Scores are averaged over the elimination stages; a derived row counts
    when its retrieved class id names the respective source.
    """
    model.eval()
    off_scores, on_scores = [], []
    made = 0
    attempt = 0
    while made < n_scenes and attempt < n_scenes * 20:
        scene_seed = mix_seed(seed, 0x0FF5C0 + attempt)
        attempt += 1
        pair = gen_scene(
            bank, 2, 1, 1.0, scene_seed, image_size=image_size, noise_sigma=noise_sigma
        )
        off = pair.audible_classes - pair.visible_classes
        on = pair.audible_classes & pair.visible_classes
        if len(off) != 1 or not on:
            continue
        made += 1
        out = predict(model, memory, pair)
        if not out.elimination_scores:
            raise ContractError("model has no elimination scores (scheme none?)")
        stacked = torch.stack(out.elimination_scores).mean(dim=0)  # (K,)
        for q, cid in enumerate(out.class_ids):
            if cid in off:
                off_scores.append(stacked[q].item())
            elif cid in on:
                on_scores.append(stacked[q].item())
    if not off_scores or not on_scores:
        raise ContractError("no usable off-screen probe scenes generated")
    return float(np.mean(off_scores)), float(np.mean(on_scores))
