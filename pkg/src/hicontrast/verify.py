"""Self-checks behind the ``verify`` command.

Each check returns a :class:`Check`; oracles here are written directly from
the loss definitions with explicit loops, independently of ``losses``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, init_params
from .losses import (LossConfig, WEIGHT_MODES, loss_dense_pair, loss_global, loss_sparse_pairs,
                     soft_weights)
from .memory import MemoryPool
from .pretrain import TrainConfig, batch_loss, eval_alignment, run_pretrain
from .synth import DatasetSpec, SourceSpec, make_dataset

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
SCHEMA_NAME = "verify_report.schema.json"


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = bool(d["passed"])
        for k in ("value", "threshold"):
            if d[k] is not None:
                d[k] = float(d[k])
        return d


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --- brute-force oracles ---------------------------------------------------

def oracle_infonce(f1: np.ndarray, f2: np.ndarray, tau: float) -> float:
    """Plain per-pixel InfoNCE: positive is the same pixel in the other map."""
    s = len(f1)
    total = 0.0
    for i in range(s):
        denom = sum(np.exp(f1[i] @ f2[j] / tau) for j in range(s))
        total += -np.log(np.exp(f1[i] @ f2[i] / tau) / denom)
    return total / s


def oracle_dense_pair(f1: np.ndarray, f2: np.ndarray, w: np.ndarray, tau: float) -> float:
    s = len(f1)
    total = 0.0
    for i in range(s):
        denom = sum(np.exp(f1[i] @ f2[k] / tau) for k in range(s))
        for j in range(s):
            total += -w[i, j] * np.log(np.exp(f1[i] @ f2[j] / tau) / denom)
    return total / s


def oracle_sparse_pair(a: np.ndarray, b: np.ndarray, tau: float, exclude_self: bool = True) -> float:
    j = len(a)
    total = 0.0
    for q in range(j):
        denom = 0.0
        for other, is_a in ((a, True), (b, False)):
            for r in range(j):
                if exclude_self and is_a and r == q:
                    continue
                denom += np.exp(a[q] @ other[r] / tau)
        total += -np.log(np.exp(a[q] @ b[q] / tau) / denom)
    return total / j


def oracle_global(anchors: dict, bank: dict, tau: float) -> float:
    """Mean over ordered modality pairs of the anchor-mean InfoNCE, all other entries negative."""
    pair_means = []
    for m1 in anchors:
        for m2 in anchors:
            if m1 == m2:
                continue
            losses = []
            for sid, f in anchors[m1].items():
                if sid not in bank[m2]:
                    continue
                denom = sum(np.exp(f @ v / tau) for v in bank[m2].values())
                losses.append(-np.log(np.exp(f @ bank[m2][sid] / tau) / denom))
            if losses:
                pair_means.append(np.mean(losses))
    return float(np.mean(pair_means))


# --- checks ---------------------------------------------------------------

def _relu_margin(fn) -> float:
    """Smallest nonzero |relu input| seen while running ``fn``."""
    seen = [np.inf]
    relu = T.relu

    def watched(x):
        a = np.abs(x.data[x.data != 0])
        if a.size:
            seen[0] = min(seen[0], float(a.min()))
        return relu(x)

    T.relu = watched
    try:
        fn()
    finally:
        T.relu = relu
    return seen[0]


def check_gradients(seed: int = 0, tol: float = 1e-4, eps: float = 1e-5) -> Check:
    """Central finite differences on every parameter entry of a narrow model."""
    enc = EncoderConfig(dense_hidden=4, dense_out=4, sparse_hidden=4, embed_dim=4)
    samples = make_dataset(DatasetSpec(sources=[SourceSpec(2)], seed=seed))
    params = init_params(seed, enc)
    pool = MemoryPool.init(samples, enc.embed_dim, seed + 1)
    cfg = LossConfig(dense_subsample=16)
    rng = np.random.default_rng(seed + 7)
    # Random biases move units off exactly-zero pre-activations; redraw until no
    # relu input lies within a few steps of its kink, where differences are invalid.
    for _ in range(50):
        for n in params.names():
            if n.endswith("/b"):
                params[n].data[...] = rng.uniform(-0.5, 0.5, params[n].shape)
        if _relu_margin(lambda: batch_loss(params, pool, samples, cfg, np.random.default_rng(seed))) > 10 * eps:
            break

    def value() -> float:
        total, _, _ = batch_loss(params, pool, samples, cfg, np.random.default_rng(seed))
        return total.item()

    total, _, _ = batch_loss(params, pool, samples, cfg, np.random.default_rng(seed))
    params.zero_grad()
    total.backward()
    worst, worst_name = 0.0, ""
    for name in params.names():
        t = params[name]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = value()
            flat[k] = old - eps
            down = value()
            flat[k] = old
            numeric.reshape(-1)[k] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        err = float(np.linalg.norm(analytic - numeric) / scale)
        if err > worst:
            worst, worst_name = err, name
    return Check("gradient_finite_difference", worst <= tol, worst, tol,
                 f"worst tensor {worst_name or '-'}; {len(params.names())} tensors")


def check_infonce(n: int = 50, seed: int = 1, tol: float = 1e-10) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        s, d = int(rng.integers(1, 17)), int(rng.integers(2, 9))
        tau = float(rng.uniform(0.05, 1.0))
        f1, f2 = _unit(rng, s, d), _unit(rng, s, d)
        coords = rng.integers(0, 32, size=(s, 2))
        got = loss_dense_pair(T.constant(f1), T.constant(f2), soft_weights(coords, "hard"), tau).item()
        worst = max(worst, abs(got - oracle_infonce(f1, f2, tau)))
    return Check("infonce_special_case", worst <= tol, worst, tol, f"{n} instances, S <= 16")


def check_oracles(n: int = 50, seed: int = 2, tol: float = 1e-10) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = {"global": 0.0, "dense_soft": 0.0, "sparse": 0.0}
    for _ in range(n):
        d = int(rng.integers(2, 6))
        tau = float(rng.uniform(0.05, 1.0))
        # global: two modalities, small banks, every other entry is a negative
        size = int(rng.integers(2, 9))
        ids = list(range(100, 100 + size))
        pool = MemoryPool(d, negative_budget=size)
        bank = {}
        for m in ("rgb", "depth"):
            vecs = _unit(rng, size, d)
            pool._set_bank(m, np.array(ids), vecs)
            bank[m] = {i: v for i, v in zip(ids, vecs)}
        k = int(rng.integers(1, size + 1))
        batch_ids = sorted(rng.choice(ids, size=k, replace=False).tolist())
        anchors = {m: _unit(rng, k, d) for m in ("rgb", "depth")}
        got = loss_global({m: (batch_ids, T.constant(a)) for m, a in anchors.items()}, pool,
                          LossConfig(tau_g=tau), rng).value.item()
        want = oracle_global({m: dict(zip(batch_ids, a)) for m, a in anchors.items()}, bank, tau)
        worst["global"] = max(worst["global"], abs(got - want))
        # dense, soft weights
        s = int(rng.integers(1, 9))
        f1, f2 = _unit(rng, s, d), _unit(rng, s, d)
        w = soft_weights(rng.integers(0, 32, size=(s, 2)), "soft_neg_exp")
        got = loss_dense_pair(T.constant(f1), T.constant(f2), w, tau).item()
        worst["dense_soft"] = max(worst["dense_soft"], abs(got - oracle_dense_pair(f1, f2, w, tau)))
        # sparse: one pair of sets
        j = int(rng.integers(1, 5))
        a, b = _unit(rng, j, d), _unit(rng, j, d)
        got = loss_sparse_pairs(T.constant(np.stack([a, b])), [(0, 1)], tau).item()
        worst["sparse"] = max(worst["sparse"], abs(got - oracle_sparse_pair(a, b, tau)))
    return [Check(f"oracle_{k}", v <= tol, v, tol, f"{n} instances") for k, v in worst.items()]


def check_weight_rows(n: int = 100, seed: int = 3, tol: float = 1e-9) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        coords = rng.integers(0, 32, size=(int(rng.integers(1, 65)), 2))
        for mode in WEIGHT_MODES:
            worst = max(worst, float(np.abs(soft_weights(coords, mode).sum(axis=1) - 1).max()))
    return Check("weight_rows_sum_to_one", worst <= tol, worst, tol, f"{n} coordinate sets, all modes")


def check_masking(seed: int = 4) -> Check:
    """Appending fully masked samples changes neither the loss nor any gradient bit."""
    enc = EncoderConfig(dense_hidden=8, dense_out=8, sparse_hidden=8, embed_dim=8)
    samples = make_dataset(DatasetSpec(sources=[SourceSpec(3), SourceSpec(1, ("rgb", "keypoints"))], seed=seed))
    masked = [dataclasses.replace(s, sample_id=1000 + s.sample_id,
                                  modality_mask={m: False for m in s.modality_mask}) for s in samples[:2]]
    pool = MemoryPool.init(samples, enc.embed_dim, seed + 1)
    results = []
    for batch in (samples, samples + masked):
        params = init_params(seed, enc)
        total, _, _ = batch_loss(params, pool, batch, LossConfig(), np.random.default_rng(seed))
        total.backward()
        results.append((total.item(), {n: params[n].grad for n in params.names()}))
    (v0, g0), (v1, g1) = results
    same = v0 == v1 and all((g0[n] is None and g1[n] is None) or np.array_equal(g0[n], g1[n]) for n in g0)
    return Check("masking_invariance", bool(same), abs(v0 - v1), 0.0, "loss and gradients bit-identical")


def check_pool(seed: int = 5) -> Check:
    rng = np.random.default_rng(seed)
    pool = MemoryPool(4, momentum=0.5)
    pool._set_bank("rgb", np.array([0, 1]), _unit(rng, 2, 4))
    worst_norm = 0.0
    for _ in range(100):
        pool.update("rgb", 0, _unit(rng, 4))
        worst_norm = max(worst_norm, abs(np.linalg.norm(pool.get("rgb", 0)) - 1))
    fresh = _unit(rng, 4)
    for _ in range(50):
        pool.update("rgb", 1, fresh)
    angle = float(np.arccos(np.clip(pool.get("rgb", 1) @ fresh, -1, 1)))
    zero = MemoryPool(4, momentum=0.0)
    zero._set_bank("rgb", np.array([0]), _unit(rng, 1, 4))
    zero.update("rgb", 0, fresh)
    ok = worst_norm <= 1e-9 and angle <= 1e-6 and np.array_equal(zero.get("rgb", 0), fresh)
    return Check("momentum_pool", bool(ok), max(worst_norm, angle), 1e-6,
                 f"norm error {worst_norm:.1e}, angle after 50 updates {angle:.1e}")


def compare_weight_modes(seed: int = 6, epochs: int = 6) -> dict:
    """Short dense-only training under the default and the literal weighting."""
    train = make_dataset(DatasetSpec(sources=[SourceSpec(48)], seed=seed))
    held = make_dataset(DatasetSpec(sources=[SourceSpec(16)], seed=seed + 1, id_offset=10_000))
    scores = {}
    for mode in ("soft_neg_exp", "soft_paper_literal"):
        loss = LossConfig(lambda_g=0.0, lambda_s=0.0, weight_mode=mode)
        cfg = TrainConfig(stage1_epochs=0, stage2_epochs=epochs, seed=seed, loss=loss)
        params, _, _ = run_pretrain(train, cfg)
        diag = eval_alignment(params, held)
        scores[mode] = float(np.nanmean([diag["ordinality_rgb"], diag["ordinality_depth"]]))
    diff = scores["soft_neg_exp"] - scores["soft_paper_literal"]
    return {"name": "weight_mode_ordinality", "default": scores["soft_neg_exp"],
            "literal": scores["soft_paper_literal"], "difference": diff, "differs": bool(abs(diff) > 1e-6)}


def report_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath(SCHEMA_NAME).read_text())


def run_verify(seed: int = 0, compare: bool = True) -> dict:
    """Run every check; the report holds no timings so reruns are byte-identical."""
    t0 = time.perf_counter()
    checks = [check_gradients(seed), check_infonce(), *check_oracles(), check_weight_rows(),
              check_masking(), check_pool()]
    comparisons = [compare_weight_modes()] if compare else []
    logger.info("verify finished in %.1f s", time.perf_counter() - t0)
    return {
        "report_version": REPORT_VERSION,
        "passed": all(c.passed for c in checks),
        "properties": [c.to_dict() for c in checks],
        "comparisons": comparisons,
    }
