"""Deterministic synthetic audio-visual benchmark.

Audio is represented directly as 16 x 16 nonnegative spectrogram-like
arrays.  Each class owns a band-limited base signature plus k sub-mode
variants (intra-class variation); scene mixtures sum randomly chosen
sub-modes with random gains and Gaussian noise, and may include audible
classes with no visual region (off-screen sources).  Images are rendered
geometric shapes; the ground-truth mask covers exactly the shapes of
classes that are both visible and audible.

All randomness flows through the portable xoshiro256** generator, so a
(config, seed) pair produces bit-identical datasets everywhere.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError
from .rng import Xoshiro256, mix_seed

MAGIC = b"DDSP1\x00\x00\x00"
VERSION = 1

PALETTE = [
    (220, 50, 50),
    (50, 180, 60),
    (60, 90, 220),
    (230, 200, 40),
    (180, 60, 200),
    (60, 200, 200),
    (240, 130, 40),
    (130, 220, 130),
]
SHAPES = ["circle", "square", "triangle", "diamond", "ring", "cross"]


@dataclass
class ClassSpec:
    class_id: int
    base_signature: np.ndarray  # (T, F), L2-normalized, nonnegative
    sub_modes: np.ndarray  # (k, T, F), each L2-normalized
    color: tuple[int, int, int]
    shape: str


@dataclass
class ScenePair:
    image: np.ndarray  # (H, W, 3) uint8
    audio: np.ndarray  # (T, F) float32
    gt_mask: np.ndarray  # (H, W) uint8, labels in [0, C] (0 = background)
    visible_classes: set[int]
    audible_classes: set[int]
    # generation metadata (not serialized): chosen (sub_mode, gain) per audible class
    components: dict[int, tuple[int, float]] = field(default_factory=dict)

    def core_equal(self, other: "ScenePair") -> bool:
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.gt_mask, other.gt_mask)
            and self.visible_classes == other.visible_classes
            and self.audible_classes == other.audible_classes
        )


def _bilinear_resize(a: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    h, w = a.shape
    oh, ow = out_shape
    ys = np.linspace(0, h - 1, oh)
    xs = np.linspace(0, w - 1, ow)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = a[np.ix_(y0, x0)]
    tr = a[np.ix_(y0, x0 + 1)]
    bl = a[np.ix_(y0 + 1, x0)]
    br = a[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * tl + fx * tr) + fy * ((1 - fx) * bl + fx * br)


def _smooth_texture(rng: Xoshiro256, shape: tuple[int, int], coarse: int = 4) -> np.ndarray:
    grid = np.array(
        [[rng.random() for _ in range(coarse)] for _ in range(coarse)], dtype=np.float64
    )
    return _bilinear_resize(grid, shape)


def _normalize(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a)
    return a / n if n > 0 else a


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(
        np.dot(a.ravel(), b.ravel())
        / (np.linalg.norm(a) * np.linalg.norm(b))
    )


def gen_class_bank(
    C: int,
    k: int,
    seed: int,
    audio_shape: tuple[int, int] = (16, 16),
    inter_band: tuple[float, float] = (0.1, 0.6),
    intra_band: tuple[float, float] = (0.5, 0.95),
) -> list[ClassSpec]:
    """Deterministic class bank with controlled spectral overlap.

    Base signatures are frequency-band bumps times smooth textures, lifted
    by a shared common component whose weight is searched so that every
    pairwise inter-class cosine similarity falls inside ``inter_band``.
    Sub-modes blend the base with a zero-mean perturbation, bisected to a
    per-mode target similarity inside (a safe interior of) ``intra_band``.
    """
    if C < 2 or k < 1:
        raise ContractError("need C >= 2 and k >= 1")
    rng = Xoshiro256(mix_seed(seed, 0xBA5E))
    T, F = audio_shape
    rows = np.arange(T, dtype=np.float64)[:, None]

    chosen = None
    for _attempt in range(25):  # fresh textures until the band is satisfiable
        common = _normalize(_smooth_texture(rng, audio_shape) + 0.3)
        bumps = []
        for c in range(C):
            center = 1.5 + c * (T - 4.0) / max(C - 1, 1)
            bump = np.exp(-((rows - center) ** 2) / (2 * 1.5**2)) * np.ones((1, F))
            texture = 0.3 + 0.7 * _smooth_texture(rng, audio_shape)
            bumps.append(_normalize(bump * texture))
        for w in np.linspace(0.05, 2.0, 400):
            sigs = [_normalize(b + float(w) * common) for b in bumps]
            sims = [
                _cos(sigs[i], sigs[j]) for i in range(C) for j in range(i + 1, C)
            ]
            if inter_band[0] <= min(sims) and max(sims) <= inter_band[1]:
                chosen = sigs
                break
        if chosen is not None:
            break
    if chosen is None:
        raise ContractError("could not place inter-class similarities in band")

    specs = []
    for c in range(C):
        base = chosen[c]
        subs = []
        used_perts: list[np.ndarray] = []
        for _ in range(k):
            target = rng.uniform(intra_band[0] + 0.02, intra_band[0] + 0.2)
            pert = _smooth_texture(rng, audio_shape)
            pert = pert - pert.mean()
            # decorrelate from earlier sub-mode directions so the planted
            # sub-clusters stay mutually separated
            for prev in used_perts:
                pert = pert - np.dot(pert.ravel(), prev.ravel()) * prev
            norm = np.linalg.norm(pert)
            if norm > 1e-9:
                pert = pert / norm
            used_perts.append(pert)
            lo, hi = 0.0, 20.0
            sub = base
            for _ in range(60):
                gamma = 0.5 * (lo + hi)
                cand = _normalize(np.clip(base + gamma * pert, 0.0, None))
                sim = _cos(cand, base)
                if sim > target:
                    lo = gamma
                else:
                    hi = gamma
                sub = cand
            subs.append(sub)
        specs.append(
            ClassSpec(
                class_id=c,
                base_signature=base.astype(np.float32),
                sub_modes=np.stack(subs).astype(np.float32),
                color=PALETTE[c % len(PALETTE)],
                shape=SHAPES[c % len(SHAPES)],
            )
        )
    return specs


def _draw_shape(mask: np.ndarray, shape: str, cy: int, cx: int, r: int) -> None:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        sel = dy**2 + dx**2 <= r**2
    elif shape == "square":
        sel = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "triangle":
        sel = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "diamond":
        sel = np.abs(dy) + np.abs(dx) <= r
    elif shape == "ring":
        d2 = dy**2 + dx**2
        sel = (d2 <= r**2) & (d2 >= (r * 0.45) ** 2)
    elif shape == "cross":
        arm = max(1, r // 3)
        sel = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        )
    else:
        raise ContractError(f"unknown shape {shape!r}")
    mask[sel] = True


def gen_scene(
    bank: list[ClassSpec],
    n_visible: int,
    n_audible: int,
    offscreen_prob: float,
    seed: int,
    image_size: int = 64,
    noise_sigma: float = 0.05,
) -> ScenePair:
    """One audio-visual pair.

    ``n_audible`` on-screen classes sound (subset of the visible ones);
    with probability ``offscreen_prob`` one additional non-visible class is
    audible.  Foreground ground truth covers exactly the shapes of classes
    that are both visible and audible.
    """
    C = len(bank)
    if not (1 <= n_visible <= C):
        raise ContractError("n_visible out of range")
    if n_audible < 1:
        raise ContractError("n_audible must be >= 1")
    n_audible = min(n_audible, n_visible)
    rng = Xoshiro256(seed)
    H = W = image_size

    visible = rng.sample_without_replacement(C, n_visible)
    audible = set(visible[i] for i in rng.sample_without_replacement(n_visible, n_audible))
    offscreen = [c for c in range(C) if c not in visible]
    if offscreen and rng.random() < offscreen_prob:
        audible.add(rng.choice(offscreen))

    # render: non-overlapping shapes on a textured dark background
    image = np.empty((H, W, 3), dtype=np.uint8)
    background = 18 + 14 * _smooth_texture(rng, (H, W), coarse=6)
    image[:] = np.clip(background, 0, 255).astype(np.uint8)[:, :, None]
    gt_mask = np.zeros((H, W), dtype=np.uint8)

    r_lo, r_hi = max(4, H // 9), max(6, H // 5)
    placed: list[tuple[int, int, int]] = []
    for cid in visible:
        spec = bank[cid]
        ok = False
        for _ in range(100):
            r = r_lo + rng.randint(r_hi - r_lo + 1)
            cy = r + 1 + rng.randint(max(1, H - 2 * r - 2))
            cx = r + 1 + rng.randint(max(1, W - 2 * r - 2))
            if all(
                math.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr in placed
            ):
                ok = True
                break
        if not ok:
            raise ContractError("could not place shapes without overlap in 100 tries")
        placed.append((cy, cx, r))
        sel = np.zeros((H, W), dtype=bool)
        _draw_shape(sel, spec.shape, cy, cx, r)
        image[sel] = spec.color
        if cid in audible:
            gt_mask[sel] = cid + 1

    # mixture: chosen sub-modes with random gains, plus Gaussian noise
    T, F = bank[0].base_signature.shape
    audio = np.zeros((T, F), dtype=np.float64)
    components: dict[int, tuple[int, float]] = {}
    for cid in sorted(audible):
        j = rng.randint(bank[cid].sub_modes.shape[0])
        gain = rng.uniform(0.5, 1.5)
        audio += gain * bank[cid].sub_modes[j].astype(np.float64)
        components[cid] = (j, gain)
    noise = np.array(
        [rng.normal(0.0, noise_sigma) for _ in range(T * F)], dtype=np.float64
    ).reshape(T, F)
    audio += noise

    return ScenePair(
        image=image,
        audio=audio.astype(np.float32),
        gt_mask=gt_mask,
        visible_classes=set(visible),
        audible_classes=audible,
        components=components,
    )


def gen_dataset(
    bank: list[ClassSpec],
    count: int,
    seed: int,
    image_size: int = 64,
    offscreen_prob: float = 0.3,
    noise_sigma: float = 0.05,
    max_visible: int = 3,
    max_audible: int = 2,
) -> tuple[list[ScenePair], list[int]]:
    """Generate ``count`` scenes with per-pair derived seeds; returns
    (pairs, per-pair seeds)."""
    pairs, seeds = [], []
    for i in range(count):
        pair_seed = mix_seed(seed, i)
        srng = Xoshiro256(mix_seed(pair_seed, 0x5CE0E))
        # scenes carry a full audio mixture (max_audible sources): separating
        # simultaneous sources is the core difficulty the benchmark probes
        n_vis = max_audible + srng.randint(max_visible - max_audible + 1)
        n_aud = min(max_audible, n_vis)
        pairs.append(
            gen_scene(
                bank,
                n_vis,
                n_aud,
                offscreen_prob,
                pair_seed,
                image_size=image_size,
                noise_sigma=noise_sigma,
            )
        )
        seeds.append(pair_seed)
    return pairs, seeds


@dataclass
class SingleSourceBank:
    """Single-source clips per class: raw audio, encoded features and the
    planted sub-mode labels."""

    clips: dict[int, np.ndarray]  # class -> (n, T, F)
    features: dict[int, np.ndarray] | None  # class -> (n, d) if encoded
    submode_labels: dict[int, np.ndarray]  # class -> (n,)


def gen_singlesource_bank(
    bank: list[ClassSpec],
    per_class: int,
    seed: int,
    encoder=None,
    noise_sigma: float = 0.05,
) -> SingleSourceBank:
    """Single-source clips (one sub-mode + noise) per class, optionally
    encoded to d-vectors by the frozen audio encoder."""
    import torch

    clips: dict[int, np.ndarray] = {}
    labels: dict[int, np.ndarray] = {}
    features: dict[int, np.ndarray] | None = {} if encoder is not None else None
    T, F = bank[0].base_signature.shape
    for spec in bank:
        rng = Xoshiro256(mix_seed(seed, 0x515 + spec.class_id))
        k = spec.sub_modes.shape[0]
        cls_clips = np.empty((per_class, T, F), dtype=np.float32)
        cls_labels = np.empty(per_class, dtype=np.int64)
        for i in range(per_class):
            j = i % k if i < k else rng.randint(k)  # every sub-mode represented
            gain = rng.uniform(0.5, 1.5)
            noise = np.array(
                [rng.normal(0.0, noise_sigma) for _ in range(T * F)], dtype=np.float64
            ).reshape(T, F)
            cls_clips[i] = (gain * spec.sub_modes[j].astype(np.float64) + noise).astype(
                np.float32
            )
            cls_labels[i] = j
        clips[spec.class_id] = cls_clips
        labels[spec.class_id] = cls_labels
        if encoder is not None:
            with torch.no_grad():
                feats = torch.stack(
                    [encoder(torch.from_numpy(c).to(torch.float32)) for c in cls_clips]
                )
            features[spec.class_id] = feats.cpu().numpy().astype(np.float32)
    return SingleSourceBank(clips=clips, features=features, submode_labels=labels)


def _pack_record(pair: ScenePair) -> bytes:
    h, w, _ = pair.image.shape
    t, f = pair.audio.shape
    vis = sorted(pair.visible_classes)
    aud = sorted(pair.audible_classes)
    payload = struct.pack("<7I", VERSION, h, w, t, f, len(vis), len(aud))
    payload += pair.image.astype(np.uint8).tobytes()
    payload += pair.audio.astype("<f4").tobytes()
    payload += pair.gt_mask.astype(np.uint8).tobytes()
    payload += struct.pack(f"<{len(vis)}I", *vis) if vis else b""
    payload += struct.pack(f"<{len(aud)}I", *aud) if aud else b""
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def _unpack_record(blob: bytes, name: str) -> ScenePair:
    if len(blob) < len(MAGIC) + 32 or blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{name}: bad magic")
    payload, (crc_stored,) = blob[len(MAGIC) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DataFormatError(f"{name}: CRC mismatch")
    version, h, w, t, f, n_vis, n_aud = struct.unpack_from("<7I", payload, 0)
    if version != VERSION:
        raise DataFormatError(f"{name}: unsupported version {version}")
    off = 28
    need = h * w * 3 + 4 * t * f + h * w + 4 * (n_vis + n_aud)
    if len(payload) - off != need:
        raise DataFormatError(f"{name}: truncated payload")
    image = np.frombuffer(payload, np.uint8, h * w * 3, off).reshape(h, w, 3).copy()
    off += h * w * 3
    audio = np.frombuffer(payload, "<f4", t * f, off).reshape(t, f).copy()
    off += 4 * t * f
    gt = np.frombuffer(payload, np.uint8, h * w, off).reshape(h, w).copy()
    off += h * w
    vis = set(struct.unpack_from(f"<{n_vis}I", payload, off)) if n_vis else set()
    off += 4 * n_vis
    aud = set(struct.unpack_from(f"<{n_aud}I", payload, off)) if n_aud else set()
    return ScenePair(image, audio, gt, vis, aud)


def save_dataset(pairs: list[ScenePair], directory, seeds: list[int] | None = None) -> None:
    """One DDSP1 record per pair plus a plain-text index (filename, seed)."""
    os.makedirs(directory, exist_ok=True)
    seeds = seeds or [0] * len(pairs)
    lines = []
    for i, (pair, seed) in enumerate(zip(pairs, seeds)):
        name = f"record_{i:05d}.ddsp"
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(_pack_record(pair))
        lines.append(f"{name} {seed}")
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(directory) -> list[ScenePair]:
    index = os.path.join(directory, "index.txt")
    if not os.path.exists(index):
        raise DataFormatError(f"missing index file {index}")
    pairs = []
    with open(index) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name = line.split()[0]
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise DataFormatError(f"{name}: listed in index but missing")
            with open(path, "rb") as rf:
                pairs.append(_unpack_record(rf.read(), name))
    return pairs
