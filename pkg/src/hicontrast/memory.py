"""Per-modality memory bank of momentum-updated global embeddings."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .synth import MODALITIES, MultiModalSample


class PoolError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if (n < 1e-12).any():
        raise ValueError("cannot normalise a zero vector into the pool")
    return v / n


class MemoryPool:
    """Banks of unit vectors keyed by sample id, one bank per modality.

    Each bank stores its ids in insertion order and a matching ``n×D`` matrix,
    so negatives can be drawn and dotted in bulk.
    """

    def __init__(self, dim: int, momentum: float = 0.5, negative_budget: int = 256):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.dim = dim
        self.momentum = momentum
        self.negative_budget = negative_budget
        self.ids: dict[str, np.ndarray] = {}
        self.vectors: dict[str, np.ndarray] = {}
        self._row: dict[str, dict[int, int]] = {}

    @classmethod
    def init(cls, dataset: Iterable[MultiModalSample], dim: int, seed: int,
             momentum: float = 0.5, negative_budget: int = 256,
             modalities: Sequence[str] = MODALITIES) -> "MemoryPool":
        pool = cls(dim, momentum, negative_budget)
        rng = np.random.default_rng(seed)
        samples = list(dataset)
        for m in modalities:
            ids = np.array([s.sample_id for s in samples if s.has(m)], dtype=np.int64)
            vecs = rng.normal(size=(len(ids), dim))
            pool._set_bank(m, ids, _normalize(vecs) if len(ids) else vecs)
        return pool

    def _set_bank(self, modality: str, ids: np.ndarray, vecs: np.ndarray) -> None:
        if len(np.unique(ids)) != len(ids):
            raise ValueError(f"duplicate sample ids in {modality} bank")
        self.ids[modality] = ids
        self.vectors[modality] = vecs.reshape(len(ids), self.dim)
        self._row[modality] = {int(i): k for k, i in enumerate(ids)}

    def size(self, modality: str) -> int:
        return len(self.ids.get(modality, ()))

    def modalities(self) -> list[str]:
        return [m for m in self.ids if self.size(m)]

    def has(self, modality: str, sample_id: int) -> bool:
        return int(sample_id) in self._row.get(modality, {})

    def row(self, modality: str, sample_id: int) -> int:
        try:
            return self._row[modality][int(sample_id)]
        except KeyError:
            raise PoolError(f"no pool entry for (sample_id={sample_id}, modality={modality!r})") from None

    def get(self, modality: str, sample_id: int) -> np.ndarray:
        return self.vectors[modality][self.row(modality, sample_id)]

    def update(self, modality: str, sample_id: int, fresh) -> None:
        """``stored <- normalize(m * stored + (1 - m) * fresh)`` on detached values."""
        r = self.row(modality, sample_id)
        fresh = np.asarray(getattr(fresh, "data", fresh), dtype=np.float64)
        if self.momentum == 0.0:
            self.vectors[modality][r] = fresh
            return
        blend = self.momentum * self.vectors[modality][r] + (1.0 - self.momentum) * fresh
        self.vectors[modality][r] = _normalize(blend)

    def update_many(self, modality: str, sample_ids: Sequence[int], fresh: np.ndarray) -> None:
        for sid, v in zip(sample_ids, np.asarray(fresh)):
            self.update(modality, sid, v)

    def negative_rows(self, modality: str, exclude: int, k: int, rng: np.random.Generator) -> np.ndarray:
        """Row indices of ``k`` entries drawn without replacement, skipping ``exclude``."""
        n = self.size(modality)
        if n == 0:
            raise PoolError(f"bank {modality!r} is empty")
        ex = self._row[modality].get(int(exclude), -1)
        avail = n - (ex >= 0)
        k = max(0, min(int(k), avail))
        picks = rng.choice(avail, size=k, replace=False)
        if ex >= 0:
            picks = picks + (picks >= ex)
        return picks

    def sample_negatives(self, modality: str, exclude: int, k: int, rng: np.random.Generator) -> np.ndarray:
        return self.vectors[modality][self.negative_rows(modality, exclude, k, rng)]

    # checkpoint support
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.ids:
            out[f"pool/{m}/ids"] = self.ids[m].astype(np.float64)
            out[f"pool/{m}/vectors"] = self.vectors[m]
        return out

    def meta(self) -> dict:
        return {"dim": self.dim, "momentum": self.momentum,
                "negative_budget": self.negative_budget, "modalities": list(self.ids)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "MemoryPool":
        pool = cls(meta["dim"], meta["momentum"], meta["negative_budget"])
        for m in meta["modalities"]:
            ids = arrays[f"pool/{m}/ids"].astype(np.int64)
            pool._set_bank(m, ids, arrays[f"pool/{m}/vectors"].copy())
        return pool
