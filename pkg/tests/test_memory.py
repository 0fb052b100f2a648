import collections

import numpy as np
import pytest

from hicontrast.memory import MemoryPool, PoolError
from hicontrast.synth import DatasetSpec, SourceSpec, make_dataset


def _bank(pool, modality, vecs, ids=None):
    vecs = np.asarray(vecs, float)
    pool._set_bank(modality, np.arange(len(vecs)) if ids is None else np.asarray(ids), vecs)


def test_init_respects_masks():
    ds = make_dataset(DatasetSpec(sources=[SourceSpec(4, ("rgb", "keypoints"))], seed=0))
    pool = MemoryPool.init(ds, 8, seed=0)
    assert pool.size("rgb") == 4 and pool.size("depth") == 0
    assert sorted(pool.ids["rgb"].tolist()) == [s.sample_id for s in ds]


def test_init_unit_norm_and_seeded(small_dataset):
    a = MemoryPool.init(small_dataset, 8, seed=3)
    b = MemoryPool.init(small_dataset, 8, seed=3)
    for m in a.modalities():
        assert np.abs(np.linalg.norm(a.vectors[m], axis=1) - 1).max() <= 1e-9
        assert np.array_equal(a.vectors[m], b.vectors[m])


def test_zero_momentum_replaces_exactly():
    pool = MemoryPool(2, momentum=0.0)
    _bank(pool, "rgb", [[1.0, 0.0]])
    fresh = np.array([0.6, 0.8])
    pool.update("rgb", 0, fresh)
    assert np.array_equal(pool.get("rgb", 0), fresh)


def test_half_momentum_example():
    pool = MemoryPool(2, momentum=0.5)
    _bank(pool, "rgb", [[1.0, 0.0]])
    pool.update("rgb", 0, [0.0, 1.0])
    assert np.allclose(pool.get("rgb", 0), [np.sqrt(2) / 2] * 2, atol=1e-15)


def test_repeated_updates_converge_and_stay_unit():
    rng = np.random.default_rng(1)
    pool = MemoryPool(5)
    _bank(pool, "depth", rng.normal(size=(1, 5)) / 3)
    pool.vectors["depth"] /= np.linalg.norm(pool.vectors["depth"])
    fresh = rng.normal(size=5)
    fresh /= np.linalg.norm(fresh)
    for _ in range(50):
        pool.update("depth", 0, fresh)
        assert abs(np.linalg.norm(pool.get("depth", 0)) - 1) <= 1e-9
    angle = np.arccos(np.clip(pool.get("depth", 0) @ fresh, -1, 1))
    assert angle <= 1e-6


def test_unknown_entry():
    pool = MemoryPool(2)
    _bank(pool, "rgb", [[1.0, 0.0]])
    with pytest.raises(PoolError, match="sample_id=9"):
        pool.update("rgb", 9, [1.0, 0.0])
    with pytest.raises(PoolError):
        pool.update("depth", 0, [1.0, 0.0])


def test_momentum_range():
    with pytest.raises(ValueError):
        MemoryPool(2, momentum=1.0)


def test_negatives_exhaust_bank():
    pool = MemoryPool(5)
    _bank(pool, "rgb", np.eye(5), ids=[10, 11, 12, 13, 14])
    got = pool.sample_negatives("rgb", 12, 4, np.random.default_rng(0))
    assert sorted(map(tuple, got)) == sorted(map(tuple, np.eye(5)[[0, 1, 3, 4]]))
    # clamped to what is available
    assert len(pool.sample_negatives("rgb", 12, 100, np.random.default_rng(0))) == 4


def test_negatives_never_return_excluded():
    pool = MemoryPool(6)
    _bank(pool, "rgb", np.eye(6))
    rng = np.random.default_rng(2)
    for _ in range(1000):
        rows = pool.negative_rows("rgb", 3, 2, rng)
        assert 3 not in rows and len(set(rows.tolist())) == 2


def test_negatives_uniform():
    n, k, trials = 6, 2, 100_000
    pool = MemoryPool(n)
    _bank(pool, "rgb", np.eye(n))
    rng = np.random.default_rng(3)
    counts = collections.Counter()
    for _ in range(trials):
        counts.update(pool.negative_rows("rgb", 0, k, rng).tolist())
    p = k / (n - 1)
    sd = np.sqrt(trials * p * (1 - p))
    assert 0 not in counts
    for r in range(1, n):
        assert abs(counts[r] - trials * p) <= 3 * sd


def test_negatives_are_rng_deterministic():
    pool = MemoryPool(4)
    _bank(pool, "rgb", np.eye(4))
    a = pool.negative_rows("rgb", 0, 2, np.random.default_rng(5))
    b = pool.negative_rows("rgb", 0, 2, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_empty_bank():
    pool = MemoryPool(2)
    _bank(pool, "rgb", np.zeros((0, 2)))
    with pytest.raises(PoolError):
        pool.sample_negatives("rgb", 0, 1, np.random.default_rng(0))


def test_array_round_trip(small_dataset):
    pool = MemoryPool.init(small_dataset, 4, seed=1)
    back = MemoryPool.from_arrays(pool.to_arrays(), pool.meta())
    for m in pool.ids:
        assert np.array_equal(pool.ids[m], back.ids[m])
        assert np.array_equal(pool.vectors[m], back.vectors[m])
