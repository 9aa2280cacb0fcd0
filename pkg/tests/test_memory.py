import numpy as np
import pytest

from references import exhaustive_kmeans_inertia

from ddeseg.errors import ContractError, DataFormatError
from ddeseg.memory import (
    build_memory,
    kmeans,
    load_memory,
    nearest_classes,
    save_memory,
)


def test_kmeans_two_cluster_example():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    centroids, assign, inertia = kmeans(pts, 2, restarts=10, seed=0)
    assert abs(inertia - 1.0) < 1e-12
    got = {tuple(np.round(c, 6)) for c in centroids}
    assert got == {(0.0, 0.5), (10.0, 0.5)}


def test_kmeans_k1_is_global_mean():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(12, 3))
    centroids, assign, _ = kmeans(pts, 1, seed=0)
    assert np.allclose(centroids[0], pts.mean(axis=0))
    assert (assign == 0).all()


def test_kmeans_k_equals_n():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(5, 2))
    _, assign, inertia = kmeans(pts, 5, restarts=20, seed=0)
    assert inertia < 1e-12
    assert len(set(assign.tolist())) == 5


def test_kmeans_rejects_bad_sizes():
    pts = np.zeros((2, 2))
    with pytest.raises(ContractError):
        kmeans(pts, 3)
    with pytest.raises(ContractError):
        kmeans(pts, 0)


def test_kmeans_duplicate_points_allowed():
    pts = np.array([[1.0, 1.0]] * 4 + [[5.0, 5.0]])
    _, _, inertia = kmeans(pts, 2, restarts=10, seed=0)
    assert inertia < 1e-12


def test_kmeans_matches_exhaustive_oracle():
    # the acceptance run uses 100 instances; a 30-instance spot check here
    rng = np.random.default_rng(7)
    hits = 0
    for i in range(30):
        n = int(rng.integers(3, 9))
        d = int(rng.integers(1, 4))
        k = int(rng.integers(2, min(n, 4) + 1))
        pts = rng.normal(size=(n, d))
        _, _, inertia = kmeans(pts, k, restarts=20, seed=i)
        oracle = exhaustive_kmeans_inertia(pts, k)
        if inertia <= oracle + 1e-9:
            hits += 1
    assert hits >= 29


def _features(seed=0, d=8, C=3, n=14):
    rng = np.random.default_rng(seed)
    return {
        c: (5 * rng.normal(size=(1, d)) + rng.normal(size=(n, d))).astype(np.float32)
        for c in range(C)
    }


def test_build_memory_shapes_and_centroid():
    feats = _features()
    mem = build_memory(feats, k=3, m=4, seed=0)
    assert mem.dim == 8 and mem.num_classes == 3
    for c in mem.classes:
        assert c.sub_centroids.shape == (3, 8)
        assert c.representatives.shape == (3, 4, 8)
        expect = feats[c.class_id].astype(np.float64).mean(axis=0).astype(np.float32)
        assert np.allclose(c.global_centroid, expect)


def test_build_memory_representatives_are_input_rows():
    feats = _features(seed=3)
    mem = build_memory(feats, k=2, m=3, seed=0)
    for c in mem.classes:
        pool = {tuple(row) for row in feats[c.class_id]}
        for rep in c.representatives.reshape(-1, mem.dim):
            assert tuple(rep) in pool


def test_build_memory_pads_short_subclusters():
    # 3 points, k=3 -> one point per sub-cluster, padded to m=2
    feats = {0: np.eye(3, dtype=np.float32) * 10, 1: -np.eye(3, dtype=np.float32) * 10}
    mem = build_memory(feats, k=3, m=2, seed=0)
    assert mem.warnings
    for c in mem.classes:
        for j in range(3):
            assert np.array_equal(c.representatives[j][0], c.representatives[j][1])


def test_build_memory_rejects_noncontiguous_ids():
    with pytest.raises(ContractError):
        build_memory({0: np.zeros((4, 2)), 2: np.zeros((4, 2))}, k=2, m=1)


def test_build_memory_rejects_too_few_points():
    with pytest.raises(ContractError):
        build_memory({0: np.zeros((2, 3), dtype=np.float32)}, k=3, m=1)


def test_nearest_classes_order_and_ties():
    feats = {
        0: np.full((3, 2), 4.0, dtype=np.float32),
        1: np.full((3, 2), -4.0, dtype=np.float32),
        2: np.full((3, 2), 4.0, dtype=np.float32),  # tie with class 0
    }
    mem = build_memory(feats, k=1, m=1, seed=0)
    got = nearest_classes(np.array([4.0, 4.0]), mem, 3)
    assert [cid for cid, _, _ in got] == [0, 2, 1]  # tie broken by lower id
    dists = [d for _, _, d in got]
    assert dists == sorted(dists)
    with pytest.raises(ContractError):
        nearest_classes(np.array([0.0, 0.0]), mem, 4)


def test_memory_roundtrip_bit_exact(tmp_path):
    mem = build_memory(_features(seed=5), k=3, m=4, seed=1)
    path = tmp_path / "mem.ddem"
    save_memory(mem, path)
    loaded = load_memory(path)
    assert loaded == mem
    # saving the loaded memory reproduces the file byte for byte
    path2 = tmp_path / "mem2.ddem"
    save_memory(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_memory_crc_detects_corruption(tmp_path):
    mem = build_memory(_features(), k=2, m=2, seed=0)
    path = tmp_path / "mem.ddem"
    save_memory(mem, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        load_memory(path)


def test_memory_bad_magic_and_dim_check(tmp_path):
    path = tmp_path / "mem.ddem"
    path.write_bytes(b"NOTAMEM0" + b"\x00" * 64)
    with pytest.raises(DataFormatError):
        load_memory(path)
    mem = build_memory(_features(), k=2, m=2, seed=0)
    good = tmp_path / "good.ddem"
    save_memory(mem, good)
    with pytest.raises(DataFormatError):
        load_memory(good, expect_dim=99)
