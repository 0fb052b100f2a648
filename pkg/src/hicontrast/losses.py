"""Hierarchical contrastive objectives: global, dense and sparse levels.

* ``loss_global``: cross-modal InfoNCE on global embeddings; positives and
  negatives come from the memory pool bank of the other modality.
* ``loss_dense_pair`` / ``loss_dense``: soft-weighted InfoNCE between two
  pixel-aligned dense embedding maps of one sample.
* ``loss_sparse``: joint-level InfoNCE between two sparse embedding sets,
  intra-sample (cross-modal) and inter-sample.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import BatchEmbeddings
from .memory import MemoryPool, PoolError
from .synth import DENSE_MODALITIES, MODALITIES
from .tensor import Tensor

WEIGHT_MODES = ("soft_neg_exp", "soft_paper_literal", "hard")


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    tau_g: float = 0.07
    tau_d: float = 0.07
    tau_s: float = 0.07
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    lambda_s: float = 1.0
    weight_mode: str = "soft_neg_exp"
    dense_subsample: int = 64
    exclude_self_in_Ls: bool = True
    inter_sample_pairs: bool = True

    def __post_init__(self):
        if min(self.tau_g, self.tau_d, self.tau_s) <= 0:
            raise LossError("temperatures must be positive")
        lams = (self.lambda_g, self.lambda_d, self.lambda_s)
        if min(lams) < 0 or max(lams) <= 0:
            raise LossError("weights must be non-negative with at least one positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise LossError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.dense_subsample < 1:
            raise LossError("dense_subsample must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerm:
    value: Tensor
    skipped: bool = False

    def item(self) -> float:
        return self.value.item()


def _zero() -> Tensor:
    return T.constant(0.0)


def _mean_of(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


# --- global level ---------------------------------------------------------

def loss_global(global_embeds: dict[str, tuple[Sequence[int], Tensor]], pool: MemoryPool,
                cfg: LossConfig, rng: np.random.Generator) -> LossTerm:
    """Cross-modal sample-level InfoNCE against the memory pool.

    ``global_embeds`` maps modality -> (sample ids, ``n×D`` tensor).  For
    every ordered modality pair (m1, m2) the anchors are the samples holding
    both; the positive is m2's bank entry for the same id and the negatives
    are ``min(bank - 1, budget)`` other entries of that bank.  The result is
    the mean over pairs of the per-pair anchor mean.
    """
    mods = [m for m in MODALITIES if m in global_embeds and len(global_embeds[m][0])]
    pair_losses = []
    for m1, m2 in permutations(mods, 2):
        ids1, f1 = global_embeds[m1]
        ids2 = set(int(i) for i in global_embeds[m2][0])
        rows = [k for k, sid in enumerate(ids1) if int(sid) in ids2]
        if not rows:
            continue
        bank = pool.vectors.get(m2)
        if bank is None or not len(bank):
            raise PoolError(f"no pool bank for modality {m2!r}")
        k_neg = min(pool.size(m2) - 1, pool.negative_budget)
        cand = np.empty((len(rows), k_neg + 1), dtype=np.int64)
        for a, k in enumerate(rows):
            sid = int(ids1[k])
            cand[a, 0] = pool.row(m2, sid)
            cand[a, 1:] = np.sort(pool.negative_rows(m2, sid, k_neg, rng))
        anchors = T.take(f1, rows) if len(rows) != f1.shape[0] else f1
        logits = T.matmul(anchors, T.constant(bank.T.copy()))
        sel = T.take_cols(logits, cand)
        lse = T.logsumexp(sel, cfg.tau_g)
        pos = T.take_cols(sel, np.zeros((len(rows), 1), dtype=np.int64))
        pair_losses.append(T.sub(T.mean_all(lse), T.scale(T.mean_all(pos), 1.0 / cfg.tau_g)))
    if not pair_losses:
        return LossTerm(_zero(), skipped=True)
    return LossTerm(_mean_of(pair_losses))


# --- dense level ----------------------------------------------------------

def soft_weights(coords, mode: str = "soft_neg_exp") -> np.ndarray:
    """Row-normalised anchor x candidate weights over ``S`` pixel positions."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    s = len(c)
    if s < 1:
        raise LossError("soft_weights needs at least one coordinate")
    if mode == "hard":
        return np.eye(s)
    if mode not in WEIGHT_MODES:
        raise LossError(f"unknown weight mode {mode!r}")
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    z = -d if mode == "soft_neg_exp" else d
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_dense_pair(f1: Tensor, f2: Tensor, weights: np.ndarray, tau: float,
                    coords1=None, coords2=None) -> Tensor:
    """Soft InfoNCE between ``S×D`` embeddings taken at the same ``S`` pixels.

    Anchors in ``f1``, candidates in ``f2``; per anchor the log-softmax over
    candidates is weighted by the anchor's weight row, then anchors are averaged.
    """
    if coords1 is not None and coords2 is not None:
        if not np.array_equal(np.asarray(coords1), np.asarray(coords2)):
            raise LossError("dense pair embeddings were taken at different coordinates")
    if f1.shape != f2.shape or f1.data.ndim != 2:
        raise LossError(f"dense pair shape mismatch {f1.shape} vs {f2.shape}")
    s = f1.shape[0]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (s, s):
        raise LossError(f"weight matrix {w.shape} does not match S={s}")
    logits = T.matmul(f1, T.transpose(f2))
    lse = T.logsumexp(logits, tau)
    rowsum = w.sum(axis=1)
    weighted_lse = T.sum_all(T.mul(lse, T.constant(rowsum)))
    weighted_pos = T.sum_all(T.mul(logits, T.constant(w)))
    return T.scale(T.sub(weighted_lse, T.scale(weighted_pos, 1.0 / tau)), 1.0 / s)


def body_coords(part_labels: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(part_labels > 0)
    return np.column_stack([rows, cols])


def subsample_coords(part_labels: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    body = body_coords(part_labels)
    if len(body) <= budget:
        return body
    pick = np.sort(rng.choice(len(body), size=budget, replace=False))
    return body[pick]


def loss_dense(emb: BatchEmbeddings, cfg: LossConfig, rng: np.random.Generator) -> LossTerm:
    """Mean over samples (with >= 2 dense modalities) of the ordered-pair mean.

    Samples sharing the same subsample size are contrasted in one batched
    product; the value equals the per-sample loop up to summation order.
    """
    plans = []  # (sample, modalities, coords)
    for s in emb.samples:
        mods = [m for m in DENSE_MODALITIES if s.sample_id in emb.index(m)]
        if len(mods) < 2:
            continue
        coords = subsample_coords(s.part_labels, cfg.dense_subsample, rng)
        if len(coords):
            plans.append((s, tuple(mods), coords))
    if not plans:
        return LossTerm(_zero(), skipped=True)
    groups: dict[tuple, list] = {}
    for plan in plans:
        groups.setdefault((plan[1], len(plan[2])), []).append(plan)
    total = None
    for (mods, s_count), members in groups.items():
        n_pairs = len(mods) * (len(mods) - 1)
        w = np.stack([soft_weights(c, cfg.weight_mode) for _, _, c in members])
        emb_at = {}
        for m in mods:
            h, wd = emb.shape_hw(m)
            flat_idx = np.concatenate([emb.index(m)[s.sample_id] * h * wd + c[:, 0] * wd + c[:, 1]
                                       for s, _, c in members])
            emb_at[m] = T.reshape(emb.dense_at(m, flat_idx), (len(members), s_count, -1))
        for a, b in permutations(mods, 2):
            logits = T.matmul(emb_at[a], T.transpose(emb_at[b]))
            lse = T.logsumexp(logits, cfg.tau_d)
            weighted_lse = T.sum_all(T.mul(lse, T.constant(w.sum(axis=2))))
            weighted_pos = T.sum_all(T.mul(logits, T.constant(w)))
            term = T.scale(T.sub(weighted_lse, T.scale(weighted_pos, 1.0 / cfg.tau_d)),
                           1.0 / (s_count * n_pairs * len(plans)))
            total = term if total is None else T.add(total, term)
    return LossTerm(total)


# --- sparse level ---------------------------------------------------------

def sparse_pairs(keys: Sequence[tuple[str, int]], rng: np.random.Generator,
                 inter_sample: bool = True) -> list[tuple[int, int]]:
    """Index pairs into ``keys`` (modality, sample id).

    Intra-sample: every ordered pair of distinct modalities of one sample.
    Inter-sample: each set is paired with one random set of another sample.
    """
    by_sample: dict[int, list[int]] = {}
    for k, (_, sid) in enumerate(keys):
        by_sample.setdefault(int(sid), []).append(k)
    pairs = []
    for members in by_sample.values():
        pairs.extend(permutations(members, 2))
    if inter_sample and len(by_sample) > 1:
        sids = np.array([int(sid) for _, sid in keys])
        for k, (_, sid) in enumerate(keys):
            others = np.flatnonzero(sids != int(sid))
            pairs.append((k, int(others[rng.integers(len(others))])))
    return pairs


def loss_sparse_pairs(sets: Tensor, pairs: Sequence[tuple[int, int]], tau: float,
                      exclude_self: bool = True) -> Tensor:
    """Joint-level InfoNCE averaged over joints and the given (F1, F2) pairs.

    ``sets`` is ``N×J×D``.  For anchor joint j of F1 the positive is joint j
    of F2; the denominator runs over all joints of both F1 and F2, without
    the anchor itself when ``exclude_self``.
    """
    if not pairs:
        raise LossError("no sparse pairs to contrast")
    a_idx = np.array([p[0] for p in pairs])
    b_idx = np.array([p[1] for p in pairs])
    _, j, _ = sets.shape
    n_pairs = len(pairs)
    f1 = T.take(sets, a_idx)
    f2 = T.take(sets, b_idx)
    l11 = T.matmul(f1, T.transpose(f1))
    l12 = T.matmul(f1, T.transpose(f2))
    rows = T.reshape(T.concat([l11, l12], axis=-1), (n_pairs * j, 2 * j))
    joint = np.tile(np.arange(j), n_pairs)
    allcols = np.arange(2 * j)
    if exclude_self:
        keep = np.array([np.delete(allcols, jj) for jj in range(j)])
        cols = keep[joint]
    else:
        cols = np.broadcast_to(allcols, (n_pairs * j, 2 * j))
    lse = T.logsumexp(T.take_cols(rows, cols), tau)
    pos = T.take_cols(rows, (joint + j)[:, None])
    return T.sub(T.mean_all(lse), T.scale(T.mean_all(pos), 1.0 / tau))


def loss_sparse(emb: BatchEmbeddings, cfg: LossConfig, rng: np.random.Generator) -> LossTerm:
    keys: list[tuple[str, int]] = []
    blocks = []
    for m in MODALITIES:
        if m in emb.sparse:
            blocks.append(emb.sparse[m])
            keys.extend((m, sid) for sid in emb.ids[m])
    if len(keys) < 2:
        raise LossError("sparse loss needs at least two sparse embedding sets")
    sets = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
    pairs = sparse_pairs(keys, rng, cfg.inter_sample_pairs)
    if not pairs:
        return LossTerm(_zero(), skipped=True)
    return LossTerm(loss_sparse_pairs(sets, pairs, cfg.tau_s, cfg.exclude_self_in_Ls))


# --- total ----------------------------------------------------------------

def loss_total(emb: BatchEmbeddings, pool: MemoryPool, cfg: LossConfig,
               rng: np.random.Generator) -> tuple[Tensor, dict[str, float | None]]:
    """Weighted sum of the three levels; zero-weight terms are never evaluated.

    The rng is consumed in the fixed order global, dense, sparse.
    """
    if not emb.samples:
        raise LossError("empty batch")
    parts: list[Tensor] = []
    breakdown: dict[str, float | None] = {"loss_g": None, "loss_d": None, "loss_s": None}
    if cfg.lambda_g > 0:
        glob = {m: (emb.ids[m], emb.global_[m]) for m in emb.global_}
        term = loss_global(glob, pool, cfg, rng)
        breakdown["loss_g"] = term.item()
        parts.append(T.scale(term.value, cfg.lambda_g))
    if cfg.lambda_d > 0:
        term = loss_dense(emb, cfg, rng)
        breakdown["loss_d"] = term.item()
        parts.append(T.scale(term.value, cfg.lambda_d))
    if cfg.lambda_s > 0:
        term = loss_sparse(emb, cfg, rng)
        breakdown["loss_s"] = term.item()
        parts.append(T.scale(term.value, cfg.lambda_s))
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    breakdown["total"] = total.item()
    return total, breakdown
