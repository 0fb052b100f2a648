"""Two-stage contrastive pre-training, checkpoints and alignment diagnostics.

Stage 1 optimises the global (sample-level) objective alone; stage 2 adds the
dense and sparse objectives.  Optimisation is plain SGD; the memory pool is
refreshed with the detached global embeddings of each batch after the step.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .encoders import EncoderConfig, Params, embed_batch, init_params
from .losses import LossConfig, loss_total
from .memory import MemoryPool
from .records import RecordError, load_records, save_records
from .synth import MultiModalSample
from .tensor import Tensor, TensorError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "stage", "loss_g", "loss_d", "loss_s", "total", "grad_norm")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


class CheckpointError(RecordError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.03
    lr_scale: float = 1.0
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    seed: int = 0
    momentum: float = 0.5
    negative_budget: int = 256
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.stage1_epochs + self.stage2_epochs < 1:
            raise ValueError("epochs must be non-negative with at least one epoch in total")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for contrastive pairs")

    @property
    def lr(self) -> float:
        return self.learning_rate * self.lr_scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def column(self, name: str, stage: int | None = None) -> list:
        return [r[name] for r in self.records if stage is None or r["stage"] == stage]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in LOG_COLUMNS])


@dataclass
class TrainState:
    params: Params
    pool: MemoryPool
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0


def stage_loss_config(cfg: LossConfig, stage: int) -> LossConfig:
    if stage == 1:
        return dataclasses.replace(cfg, lambda_d=0.0, lambda_s=0.0,
                                   lambda_g=cfg.lambda_g if cfg.lambda_g > 0 else 1.0)
    return cfg


def usable(dataset: Sequence[MultiModalSample]) -> list[MultiModalSample]:
    """Samples with at least one modality; fully masked ones never enter training."""
    return [s for s in dataset if s.present]


def sgd_step(params: Params | Sequence[Tensor], lr: float) -> float:
    """Apply ``p -= lr * grad`` to every tensor holding a gradient; return the global norm."""
    tensors = params.values() if isinstance(params, Params) else list(params)
    sq = 0.0
    for t in tensors:
        if t.grad is None:
            continue
        sq += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        raise TensorError("non-finite gradient norm")
    for t in tensors:
        if t.grad is not None:
            t.data -= lr * t.grad
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise TensorError(f"parameter {t.name or '?'} became non-finite")
    return norm


def init_state(dataset: Sequence[MultiModalSample], cfg: TrainConfig) -> TrainState:
    samples = usable(dataset)
    params = init_params(cfg.seed, cfg.encoder)
    pool = MemoryPool.init(samples, cfg.encoder.embed_dim, cfg.seed + 1, cfg.momentum,
                           cfg.negative_budget, cfg.encoder.modalities)
    return TrainState(params, pool, np.random.default_rng(cfg.seed + 2))


def batch_loss(params: Params, pool: MemoryPool, batch: Sequence[MultiModalSample],
               loss_cfg: LossConfig, rng: np.random.Generator):
    """Loss of one mini-batch; fully masked samples are dropped before embedding."""
    emb = embed_batch(params, usable(batch), dense=False)
    total, breakdown = loss_total(emb, pool, loss_cfg, rng)
    return total, breakdown, emb


def train_step(state: TrainState, batch: Sequence[MultiModalSample], loss_cfg: LossConfig,
               lr: float) -> tuple[dict, float]:
    total, breakdown, emb = batch_loss(state.params, state.pool, batch, loss_cfg, state.rng)
    state.params.zero_grad()
    total.backward()
    gnorm = sgd_step(state.params, lr)
    for m, ids in emb.ids.items():
        state.pool.update_many(m, ids, emb.global_[m].data)
    return breakdown, gnorm


def run_pretrain(dataset: Sequence[MultiModalSample], cfg: TrainConfig,
                 state: TrainState | None = None, checkpoint_dir=None,
                 heldout: Sequence[MultiModalSample] | None = None,
                 log: TrainLog | None = None) -> tuple[Params, MemoryPool, TrainLog]:
    """Train from scratch, or continue from ``state`` (a loaded checkpoint)."""
    samples = usable(dataset)
    shared = [s for s in samples if len(s.present) >= 2]
    if len(shared) < 2:
        raise ValueError("pre-training needs at least two samples with two or more modalities")
    state = state or init_state(samples, cfg)
    log = log or TrainLog()
    n_epochs = cfg.stage1_epochs + cfg.stage2_epochs
    n = len(samples)
    bs = min(cfg.batch_size, n)
    while state.epoch < n_epochs:
        stage = 1 if state.epoch < cfg.stage1_epochs else 2
        loss_cfg = stage_loss_config(cfg.loss, stage)
        order = state.rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            batch = [samples[i] for i in order[start:start + bs]]
            t0 = time.perf_counter()
            try:
                breakdown, gnorm = train_step(state, batch, loss_cfg, cfg.lr)
            except (TensorError, FloatingPointError) as exc:
                raise TrainingAborted(state.step, str(exc)) from exc
            state.step += 1
            log.append({"step": state.step, "stage": stage, **breakdown, "grad_norm": gnorm,
                        "wall_time": time.perf_counter() - t0})
        state.epoch += 1
        if heldout is not None:
            diag = eval_alignment(state.params, heldout)
            diag.update(epoch=state.epoch, stage=stage)
            log.diagnostics.append(diag)
        last = log.records[-1] if log.records else {}
        logger.info("epoch %d stage %d total %.4f", state.epoch, stage, last.get("total", float("nan")))
        if checkpoint_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"ckpt_epoch{state.epoch:04d}.bin", cfg)
    return state.params, state.pool, log


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(state: TrainState, path, cfg: TrainConfig | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in state.params.arrays().items()}
    arrays.update(state.pool.to_arrays())
    meta = {
        "kind": "pretrain",
        "checkpoint_version": CHECKPOINT_VERSION,
        "encoder": state.params.cfg.to_dict(),
        "pool": state.pool.meta(),
        "rng": state.rng.bit_generator.state,
        "step": state.step,
        "epoch": state.epoch,
        "train": cfg.to_dict() if cfg is not None else None,
    }
    save_records(path, arrays, meta)


def load_checkpoint(path) -> TrainState:
    arrays, meta = load_records(path)
    if meta.get("kind") != "pretrain":
        raise CheckpointError(f"{path} is not a pre-training checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('checkpoint_version')} != {CHECKPOINT_VERSION}")
    enc = EncoderConfig(**meta["encoder"])
    params = Params(enc, {k[len("param/"):]: T.parameter(v, name=k[len("param/"):])
                          for k, v in arrays.items() if k.startswith("param/")})
    pool = MemoryPool.from_arrays(arrays, meta["pool"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params, pool, rng, meta["step"], meta["epoch"])


def checkpoint_train_config(path) -> TrainConfig | None:
    _, meta = load_records(path)
    return TrainConfig(**meta["train"]) if meta.get("train") else None


# --- diagnostics ----------------------------------------------------------

def _embed_all(params: Params, samples, modalities, dense: bool, chunk: int = 32):
    frozen = params.frozen()
    out = []
    for i in range(0, len(samples), chunk):
        out.append(embed_batch(frozen, samples[i:i + chunk], modalities, dense=dense))
    return out


def _ordinality(dense_map: np.ndarray, labels: np.ndarray, n_anchors: int = 16) -> float:
    rows, cols = np.nonzero(labels > 0)
    if len(rows) < 3:
        return float("nan")
    feats = dense_map[rows, cols]
    pos = np.column_stack([rows, cols]).astype(np.float64)
    anchors = np.unique(np.linspace(0, len(rows) - 1, min(n_anchors, len(rows))).astype(int))
    scores = []
    for a in anchors:
        others = np.arange(len(rows)) != a
        dist = np.linalg.norm(pos[others] - pos[a], axis=1)
        dis = 1.0 - feats[others] @ feats[a]
        rd, rs = rankdata(dist), rankdata(dis)
        sd, ss = rd.std(), rs.std()
        if sd == 0 or ss == 0:
            continue
        scores.append(float(((rd - rd.mean()) * (rs - rs.mean())).mean() / (sd * ss)))
    return float(np.mean(scores)) if scores else float("nan")


def eval_alignment(params: Params, heldout: Sequence[MultiModalSample],
                   mod_a: str = "rgb", mod_b: str = "depth") -> dict:
    """Cross-modal retrieval top-1, per-joint alignment margin, dense ordinality."""
    samples = [s for s in heldout if s.has(mod_a) and s.has(mod_b)]
    if len(samples) < 2:
        raise ValueError(f"alignment diagnostics need held-out samples with both {mod_a} and {mod_b}")
    ga, gb, sa, sb, ords = [], [], [], [], {mod_a: [], mod_b: []}
    for emb in _embed_all(params, samples, (mod_a, mod_b), dense=True):
        ga.append(emb.global_[mod_a].data)
        gb.append(emb.global_[mod_b].data)
        sa.append(emb.sparse[mod_a].data)
        sb.append(emb.sparse[mod_b].data)
        for m in (mod_a, mod_b):
            for k, s in enumerate(emb.samples):
                ords[m].append(_ordinality(emb.dense[m].data[k], s.part_labels))
    ga, gb = np.concatenate(ga), np.concatenate(gb)
    sa, sb = np.concatenate(sa), np.concatenate(sb)
    sim = ga @ gb.T
    retrieval = float(np.mean(np.argmax(sim, axis=1) == np.arange(len(samples))))
    cos = np.einsum("njd,nkd->njk", sa, sb)
    j = cos.shape[1]
    same = np.einsum("njj->nj", cos)
    diff = (cos.sum(axis=2) - same) / (j - 1)
    margin = float((same - diff).mean())
    return {
        "n": len(samples),
        "retrieval_top1": retrieval,
        "chance": 1.0 / len(samples),
        "joint_margin": margin,
        f"ordinality_{mod_a}": float(np.nanmean(ords[mod_a])),
        f"ordinality_{mod_b}": float(np.nanmean(ords[mod_b])),
    }
