"""Hierarchical audio semantic memory.

Per class: a global centroid, k sub-centroids from k-means, and the m
features nearest to each sub-centroid kept verbatim as representatives.
The memory is frozen after build and persisted in the "DDEM1" binary
container.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError

MAGIC = b"DDEM1\x00\x00\x00"
VERSION = 1


def kmeans(
    points: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iters: int = 100,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.

    Returns (centroids k x d, assignments n, inertia).  Empty clusters are
    re-seeded to the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if k < 1:
        raise ContractError("k must be >= 1")
    if n < k:
        raise ContractError(f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for _ in range(max(1, restarts)):
        centroids = _kmeanspp_init(points, k, rng)
        prev_assign = None
        for _ in range(max_iters):
            d2 = _sq_dists(points, centroids)
            assign = np.argmin(d2, axis=1)
            for j in range(k):
                members = points[assign == j]
                if len(members) == 0:
                    # farthest point from its own centroid becomes the new seed
                    worst = int(np.argmax(d2[np.arange(n), assign]))
                    centroids[j] = points[worst]
                    assign[worst] = j
                else:
                    centroids[j] = members.mean(axis=0)
            if prev_assign is not None and np.array_equal(assign, prev_assign):
                break
            prev_assign = assign
        d2 = _sq_dists(points, centroids)
        assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        if best is None or inertia < best[2]:
            best = (centroids.copy(), assign.copy(), inertia)
    return best


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
        else:
            centroids[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(points, centroids[j : j + 1])[:, 0])
    return centroids


@dataclass
class ClassMemory:
    class_id: int
    global_centroid: np.ndarray  # (d,)
    sub_centroids: np.ndarray  # (k, d)
    representatives: np.ndarray  # (k, m, d), verbatim input features
    sample_count: int

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ClassMemory)
            and self.class_id == other.class_id
            and self.sample_count == other.sample_count
            and np.array_equal(self.global_centroid, other.global_centroid)
            and np.array_equal(self.sub_centroids, other.sub_centroids)
            and np.array_equal(self.representatives, other.representatives)
        )


@dataclass
class SemanticMemory:
    dim: int
    classes: list[ClassMemory]
    build_config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def centroid_matrix(self) -> np.ndarray:
        return np.stack([c.global_centroid for c in self.classes])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SemanticMemory)
            and self.dim == other.dim
            and self.classes == other.classes
        )


def build_memory(
    features_by_class: dict[int, np.ndarray],
    k: int,
    m: int,
    seed: int = 0,
    restarts: int = 10,
) -> SemanticMemory:
    """Build the semantic memory: per-class mean, k-means sub-centroids and
    the m nearest members per sub-cluster (ties broken by lowest index)."""
    class_ids = sorted(features_by_class)
    if class_ids != list(range(len(class_ids))):
        raise ContractError(f"class ids must be contiguous from 0, got {class_ids}")
    dims = {np.asarray(f).shape[1] for f in features_by_class.values()}
    if len(dims) != 1:
        raise ContractError(f"inconsistent feature dims {sorted(dims)}")
    d = dims.pop()

    classes = []
    warnings: list[str] = []
    for cid in class_ids:
        feats = np.asarray(features_by_class[cid], dtype=np.float32)
        n_c = len(feats)
        if n_c < k:
            raise ContractError(f"class {cid} has {n_c} features, fewer than k={k}")
        mu = feats.astype(np.float64).mean(axis=0).astype(np.float32)
        centroids, assign, _ = kmeans(feats, k, restarts=restarts, seed=seed + cid)
        m_eff = m
        reps = np.zeros((k, m, d), dtype=np.float32)
        for j in range(k):
            member_idx = np.flatnonzero(assign == j)
            dists = np.linalg.norm(
                feats[member_idx].astype(np.float64) - centroids[j], axis=1
            )
            order = member_idx[np.argsort(dists, kind="stable")]
            take = order[:m]
            if len(take) < m:
                warnings.append(
                    f"class {cid} sub-cluster {j}: only {len(take)} members for m={m}; "
                    "padded by repeating the nearest member"
                )
                take = np.concatenate([take, np.full(m - len(take), take[0])])
            reps[j] = feats[take]
        classes.append(
            ClassMemory(
                class_id=cid,
                global_centroid=mu,
                sub_centroids=centroids.astype(np.float32),
                representatives=reps,
                sample_count=n_c,
            )
        )
    return SemanticMemory(
        dim=d,
        classes=classes,
        build_config={"k": k, "m": m, "restarts": restarts, "seed": seed},
        warnings=warnings,
    )


def nearest_classes(
    f_a: np.ndarray, memory: SemanticMemory, K: int
) -> list[tuple[int, np.ndarray, float]]:
    """The K classes with smallest Euclidean distance to f_a, ascending,
    ties broken by lower class id.  Returns (class_id, centroid, distance)."""
    if K > memory.num_classes:
        raise ContractError(f"K={K} exceeds number of classes {memory.num_classes}")
    f = np.asarray(f_a, dtype=np.float64).reshape(-1)
    if f.shape[0] != memory.dim:
        raise ContractError(f"feature dim {f.shape[0]} != memory dim {memory.dim}")
    dists = np.linalg.norm(memory.centroid_matrix().astype(np.float64) - f, axis=1)
    order = np.argsort(dists, kind="stable")[:K]
    return [(int(i), memory.classes[i].global_centroid, float(dists[i])) for i in order]


def save_memory(memory: SemanticMemory, path) -> None:
    """Write the DDEM1 container (payload CRC32 appended)."""
    k = memory.classes[0].sub_centroids.shape[0]
    m = memory.classes[0].representatives.shape[1]
    payload = struct.pack("<5I", VERSION, memory.dim, memory.num_classes, k, m)
    for c in memory.classes:
        payload += struct.pack("<2I", c.class_id, c.sample_count)
        payload += np.ascontiguousarray(c.global_centroid, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(c.sub_centroids, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(c.representatives, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_memory(path, expect_dim: int | None = None) -> SemanticMemory:
    """Read a DDEM1 container, verifying magic, version, CRC and optionally dim."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 24 or blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    payload, crc_bytes = blob[len(MAGIC) : -4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DataFormatError(f"{path}: CRC mismatch")
    version, d, num_classes, k, m = struct.unpack_from("<5I", payload, 0)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if expect_dim is not None and d != expect_dim:
        raise DataFormatError(f"{path}: memory dim {d} != expected {expect_dim}")
    off = 20
    classes = []
    try:
        for _ in range(num_classes):
            cid, n_c = struct.unpack_from("<2I", payload, off)
            off += 8
            mu = np.frombuffer(payload, dtype="<f4", count=d, offset=off).copy()
            off += 4 * d
            sub = (
                np.frombuffer(payload, dtype="<f4", count=k * d, offset=off)
                .reshape(k, d)
                .copy()
            )
            off += 4 * k * d
            reps = (
                np.frombuffer(payload, dtype="<f4", count=k * m * d, offset=off)
                .reshape(k, m, d)
                .copy()
            )
            off += 4 * k * m * d
            classes.append(ClassMemory(cid, mu, sub, reps, n_c))
    except ValueError as exc:
        raise DataFormatError(f"{path}: truncated payload") from exc
    if off != len(payload):
        raise DataFormatError(f"{path}: trailing bytes in payload")
    return SemanticMemory(dim=d, classes=classes, build_config={"k": k, "m": m})
