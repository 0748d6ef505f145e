import numpy as np
import pytest

from vloc.descriptors import (ann_knn, brute_force_knn, build_index, deserialize_index, normalize_descriptors,
                              perturb_descriptors, random_descriptors, ratio_test_match, serialize_index)
from vloc.errors import TruncatedFileError, VersionMismatchError


def scan(query, database, k):
    # independent exhaustive oracle: plain python loop, float64
    d = [(float(sum((float(a) - float(b)) ** 2 for a, b in zip(row, query))), i) for i, row in enumerate(database)]
    return sorted(d)[:k]


def test_normalize_clamps_and_scales():
    d = normalize_descriptors([[3.0, -1.0, 4.0], [0.0, 0.0, 0.0]])
    assert d.dtype == np.float32
    assert np.allclose(d[0], [0.6, 0.0, 0.8]) and not d[1].any()


def test_bf_self_match():
    db = random_descriptors(50, np.random.default_rng(0))
    m = brute_force_knn(db[17], db, 3)
    assert m[0].target_index == 17 and m[0].distance == 0.0


def test_bf_orthogonal_pair():
    db = np.eye(2, 128, dtype=np.float32)
    m = brute_force_knn(db[0], db, 5)
    assert [x.target_index for x in m] == [0, 1]
    assert [x.distance for x in m] == [0.0, 2.0]


def test_bf_matches_independent_scan():
    rng = np.random.default_rng(1)
    db = random_descriptors(1000, rng, dim=16)
    for q in random_descriptors(5, rng, dim=16):
        got = [(m.target_index, m.distance) for m in brute_force_knn(q, db, 4)]
        want = scan(q, db, 4)
        assert [i for i, _ in got] == [i for _, i in want]
        assert np.allclose([d for _, d in got], [d for d, _ in want], atol=1e-5)


def test_ratio_identical_singletons():
    d = random_descriptors(1, np.random.default_rng(2))
    m = ratio_test_match(d, d, 0.7)
    assert len(m) == 1 and m[0].distance == 0.0 and m[0].ratio == 0.0


def test_ratio_rejects_equidistant():
    b = np.eye(2, 4, dtype=np.float32)
    a = normalize_descriptors([[1.0, 1.0, 0.0, 0.0]])
    assert ratio_test_match(a, b, 0.7) == []


def test_ratio_threshold_validated():
    with pytest.raises(ValueError):
        ratio_test_match(np.eye(2), np.eye(2), 1.5)


def test_ratio_clusters_recover_identity():
    rng = np.random.default_rng(3)
    base = random_descriptors(100, rng)
    a = perturb_descriptors(base, 0.05, rng)
    b = perturb_descriptors(base, 0.05, rng)
    m = ratio_test_match(a, b, 0.7)
    assert sum(x.query_index == x.target_index for x in m) >= 95


def test_index_single_descriptor():
    db = random_descriptors(1, np.random.default_rng(4))
    idx = build_index(db, tree_count=1)
    assert idx.leaf_count == 1
    m = ann_knn(idx, db[0], k=3, checks=1)
    assert len(m) == 1 and m[0].target_index == 0 and m[0].distance == 0.0


def test_index_deterministic_bytes():
    db = random_descriptors(2000, np.random.default_rng(5))
    assert serialize_index(build_index(db, seed=9)) == serialize_index(build_index(db, seed=9))
    assert serialize_index(build_index(db, seed=9)) != serialize_index(build_index(db, seed=10))


def test_index_round_trip_same_answers():
    rng = np.random.default_rng(6)
    db = random_descriptors(3000, rng)
    idx = build_index(db, seed=1)
    back = deserialize_index(serialize_index(idx), db)
    assert serialize_index(back) == serialize_index(idx)
    for q in perturb_descriptors(db[:20], 0.05, rng):
        assert ann_knn(idx, q, 2, 32) == ann_knn(back, q, 2, 32)


def test_index_corrupt_blobs():
    db = random_descriptors(100, np.random.default_rng(7))
    blob = serialize_index(build_index(db))
    with pytest.raises(TruncatedFileError):
        deserialize_index(blob[:-10], db)
    with pytest.raises(VersionMismatchError):
        deserialize_index(b"XXXXXXX" + blob[7:], db)


def test_exhaustive_checks_equal_brute_force():
    rng = np.random.default_rng(8)
    db = random_descriptors(2000, rng)
    idx = build_index(db, seed=2)
    for q in perturb_descriptors(db[rng.choice(2000, 30)], 0.1, rng):
        assert ann_knn(idx, q, 5, idx.leaf_count) == brute_force_knn(q, db, 5)


def test_indexed_descriptor_found_exhaustively():
    db = random_descriptors(500, np.random.default_rng(9))
    idx = build_index(db, seed=0)
    m = ann_knn(idx, db[123], 1, idx.leaf_count)
    assert m[0].target_index == 123 and m[0].distance == 0.0


def test_k_clamped():
    db = random_descriptors(7, np.random.default_rng(10))
    assert len(brute_force_knn(db[0], db, 50)) == 7
    assert len(ann_knn(build_index(db), db[0], 50, 100)) == 7


def test_custom_ids_reported():
    db = random_descriptors(40, np.random.default_rng(11))
    idx = build_index(db, ids=np.arange(40) + 1000)
    assert ann_knn(idx, db[5], 1, idx.leaf_count)[0].target_index == 1005


def test_recall_at_scale():
    # oracle: brute force on the same queries; noisy copies of indexed rows
    rng = np.random.default_rng(12)
    db = random_descriptors(10_000, rng)
    idx = build_index(db, tree_count=4, seed=1)
    q = perturb_descriptors(db[rng.choice(len(db), 300, replace=False)], 0.05, rng)
    r1 = r2 = 0
    for x in q:
        best = brute_force_knn(x, db, 1)[0].target_index
        got = [m.target_index for m in ann_knn(idx, x, 2, 64)]
        r1 += got[0] == best
        r2 += best in got
    assert r1 / len(q) >= 0.9 and r2 / len(q) >= 0.85
