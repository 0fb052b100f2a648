"""Downstream human parsing and the two versatility pipelines.

* ``finetune_parsing``: attach a fresh linear segmentation head to one
  modality's encoder and train end-to-end on a (possibly small) labelled set.
* ``cross_modality_supervision``: labels exist for the source modality only;
  the head is trained there while the contrastive objective aligns source and
  target on unlabelled paired data, then the same head reads the target.
* ``missing_modality``: train on the elementwise max of both dense maps and
  infer from whichever single modality is available.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, Params, dense_embeddings, embed_batch, init_params
from .losses import LossConfig, loss_total
from .memory import MemoryPool
from .pretrain import sgd_step
from .synth import DENSE_MODALITIES, MODALITIES, MultiModalSample, subsample
from .tensor import Tensor

CONTRASTIVE_MODES = ("full", "global", "off")
TRANSFER_LOG_COLUMNS = ("step", "loss_task", "loss_contrastive", "total", "grad_norm")


class TransferError(ValueError):
    pass


class ContaminationError(TransferError):
    pass


@dataclass
class ParsingMetrics:
    miou: float
    macc: float
    aacc: float
    per_class_iou: list  # None for classes absent from both prediction and truth

    def to_dict(self) -> dict:
        return asdict(self)


def eval_parsing(pred, true, n_classes: int) -> ParsingMetrics:
    """Confusion-matrix metrics; mIoU and mAcc average the classes present in ``true``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise TransferError(f"prediction shape {pred.shape} != label shape {true.shape}")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise TransferError(f"{name} values must lie in [0, {n_classes - 1}]")
    p, t = pred.ravel().astype(np.int64), true.ravel().astype(np.int64)
    conf = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(conf).astype(np.float64)
    gt = conf.sum(axis=1).astype(np.float64)
    pr = conf.sum(axis=0).astype(np.float64)
    union = gt + pr - tp
    present = gt > 0
    iou = np.divide(tp, union, out=np.zeros(n_classes), where=union > 0)
    recall = np.divide(tp, gt, out=np.zeros(n_classes), where=present)
    total = conf.sum()
    return ParsingMetrics(
        miou=float(iou[present].mean()) if present.any() else 0.0,
        macc=float(recall[present].mean()) if present.any() else 0.0,
        aacc=float(tp.sum() / total) if total else 0.0,
        per_class_iou=[float(v) if u > 0 else None for v, u in zip(iou, union)],
    )


# --- configuration --------------------------------------------------------

@dataclass
class TransferConfig:
    steps: int = 150
    batch_size: int = 8
    learning_rate: float = 0.03
    lr_scale: float = 10.0  # small heads on 64 samples need a larger step
    seed: int = 0
    head_input: str = "dense"  # or "raw" encoder features
    freeze_backbone: bool = False
    contrastive: str = "full"
    momentum: float = 0.5
    negative_budget: int = 256
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.head_input not in ("dense", "raw"):
            raise TransferError(f"head_input must be 'dense' or 'raw', got {self.head_input!r}")
        if self.contrastive not in CONTRASTIVE_MODES:
            raise TransferError(f"contrastive must be one of {CONTRASTIVE_MODES}, got {self.contrastive!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise TransferError("steps and batch_size must be positive")

    @property
    def lr(self) -> float:
        return self.learning_rate * self.lr_scale

    def contrastive_loss(self) -> LossConfig | None:
        if self.contrastive == "off":
            return None
        if self.contrastive == "global":
            lam = self.loss.lambda_g if self.loss.lambda_g > 0 else 1.0
            return dataclasses.replace(self.loss, lambda_g=lam, lambda_d=0.0, lambda_s=0.0)
        return self.loss

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


# --- head and model -------------------------------------------------------

class SegHead:
    """Linear map from per-pixel embeddings to class logits."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        a = np.sqrt(6.0 / (in_dim + n_classes))
        self.w = T.parameter(rng.uniform(-a, a, size=(in_dim, n_classes)), name="head/w")
        self.b = T.parameter(np.zeros(n_classes), name="head/b")
        self.n_classes = n_classes

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"head/w": self.w.data.copy(), "head/b": self.b.data.copy()}


@dataclass
class ParsingModel:
    params: Params
    head: SegHead
    head_input: str = "dense"

    def logits(self, samples: Sequence[MultiModalSample], modality: str, frozen: bool = False) -> Tensor:
        params = self.params.frozen() if frozen else self.params
        return self.head(dense_embeddings(params, modality, samples, raw=self.head_input == "raw"))

    def predict(self, samples: Sequence[MultiModalSample], modality: str, chunk: int = 32) -> np.ndarray:
        out = []
        for i in range(0, len(samples), chunk):
            out.append(self.logits(samples[i:i + chunk], modality, frozen=True).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)

    def predict_fused(self, samples: Sequence[MultiModalSample], chunk: int = 32) -> np.ndarray:
        frozen = self.params.frozen()
        out = []
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            maps = [dense_embeddings(frozen, m, part, raw=self.head_input == "raw") for m in DENSE_MODALITIES]
            out.append(self.head(T.maximum(maps[0], maps[1])).data.argmax(axis=-1))
        return np.concatenate(out)


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross-entropy; ``logits`` is ``n×H×W×K``."""
    k = logits.shape[-1]
    flat = T.reshape(logits, (-1, k))
    lab = np.asarray(labels, dtype=np.int64).reshape(-1, 1)
    if lab.shape[0] != flat.shape[0]:
        raise TransferError("label map does not match the logits")
    picked = T.take_cols(flat, lab)
    return T.sub(T.mean_all(T.logsumexp(flat, 1.0)), T.mean_all(picked))


def evaluate(model: ParsingModel, test: Sequence[MultiModalSample], modality: str | None,
             n_classes: int) -> ParsingMetrics:
    """Metrics on ``test``; ``modality=None`` evaluates max-fused inference."""
    if not test:
        raise TransferError("empty test set")
    pred = model.predict_fused(test) if modality is None else model.predict(test, modality)
    return eval_parsing(pred, np.stack([s.part_labels for s in test]), n_classes)


# --- shared training plumbing ---------------------------------------------

class _Batches:
    """Endless deterministic stream of mini-batches, reshuffled every pass."""

    def __init__(self, items: Sequence, size: int, rng: np.random.Generator):
        if not items:
            raise TransferError("cannot draw batches from an empty set")
        self.items = list(items)
        self.size = min(size, len(self.items))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> list:
        if self._pos + self.size > len(self._order):
            self._order = self.rng.permutation(len(self.items))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.size]
        self._pos += self.size
        return [self.items[i] for i in idx]


@dataclass
class TransferLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRANSFER_LOG_COLUMNS)
            for r in self.records:
                w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in TRANSFER_LOG_COLUMNS])


def _n_classes(samples: Sequence[MultiModalSample]) -> int:
    return int(max(int(s.part_labels.max()) for s in samples)) + 1


def _start(cfg: TransferConfig, params: Params | None, n_classes: int):
    rng = np.random.default_rng(cfg.seed)
    model_params = params.copy() if params is not None else init_params(cfg.seed, cfg.encoder)
    in_dim = model_params.cfg.embed_dim if cfg.head_input == "dense" else model_params.cfg.dense_out
    head = SegHead(in_dim, n_classes, rng)
    return ParsingModel(model_params, head, cfg.head_input), rng


def _trainable(model: ParsingModel, cfg: TransferConfig) -> list[Tensor]:
    tensors = model.head.tensors()
    if not cfg.freeze_backbone:
        tensors = model.params.values() + tensors
    return tensors


def _step(model: ParsingModel, cfg: TransferConfig, task: Tensor, contrastive: Tensor | None,
          log: TransferLog, step: int) -> None:
    total = task if contrastive is None else T.add(task, contrastive)
    tensors = _trainable(model, cfg)
    for t in model.params.values() + model.head.tensors():
        t.grad = None
    T.backward(total)
    if cfg.freeze_backbone:
        for t in model.params.values():
            t.grad = None
    gnorm = sgd_step(tensors, cfg.lr)
    log.append({"step": step, "loss_task": task.item(),
                "loss_contrastive": None if contrastive is None else contrastive.item(),
                "total": total.item(), "grad_norm": gnorm})


def _restrict(sample: MultiModalSample, keep: Sequence[str]) -> MultiModalSample:
    """Copy of ``sample`` with every modality outside ``keep`` masked and dropped."""
    mask = {m: bool(sample.has(m) and m in keep) for m in MODALITIES}
    return dataclasses.replace(
        sample,
        rgb=sample.rgb if mask["rgb"] else None,
        depth=sample.depth if mask["depth"] else None,
        keypoints=sample.keypoints if mask["keypoints"] else None,
        modality_mask=mask,
    )


def _unlabelled(sample: MultiModalSample) -> MultiModalSample:
    """Drop part identities; only the foreground mask survives for pixel sampling."""
    return dataclasses.replace(sample, part_labels=(sample.part_labels > 0).astype(np.int64))


def _contrastive_setup(cfg: TransferConfig, model: ParsingModel, paired: Sequence[MultiModalSample],
                       modalities: Sequence[str]):
    loss_cfg = cfg.contrastive_loss()
    if loss_cfg is None:
        return None, None
    pool = MemoryPool.init(paired, model.params.cfg.embed_dim, cfg.seed + 1, cfg.momentum,
                           cfg.negative_budget, modalities)
    return loss_cfg, pool


def _contrastive_term(model: ParsingModel, batch, modalities, loss_cfg, pool, rng):
    emb = embed_batch(model.params, batch, modalities, dense=False)
    value, _ = loss_total(emb, pool, loss_cfg, rng)
    return value, emb


def _refresh_pool(pool: MemoryPool, emb) -> None:
    for m, ids in emb.ids.items():
        pool.update_many(m, ids, emb.global_[m].data)


# --- operations -----------------------------------------------------------

def finetune_parsing(modality: str, train: Sequence[MultiModalSample], test: Sequence[MultiModalSample],
                     cfg: TransferConfig, params: Params | None = None, fraction: float = 1.0,
                     n_classes: int | None = None) -> tuple[ParsingModel, ParsingMetrics, TransferLog]:
    """Fine-tune ``params`` (pretrained) or a fresh encoder (``params=None``) for parsing."""
    if modality not in DENSE_MODALITIES:
        raise TransferError(f"parsing needs a dense modality, got {modality!r}")
    pool = [s for s in train if s.has(modality)]
    if not pool:
        raise TransferError(f"no training sample carries {modality!r}")
    chosen = subsample(pool, fraction)
    n_classes = n_classes or _n_classes(list(train) + list(test))
    model, rng = _start(cfg, params, n_classes)
    batches = _Batches(chosen, cfg.batch_size, rng)
    log = TransferLog()
    for step in range(1, cfg.steps + 1):
        batch = batches.next()
        task = pixel_cross_entropy(model.logits(batch, modality), np.stack([s.part_labels for s in batch]))
        _step(model, cfg, task, None, log, step)
    return model, evaluate(model, [s for s in test if s.has(modality)], modality, n_classes), log


def cross_modality_supervision(source: str, target: str, labelled: Sequence[MultiModalSample],
                               paired: Sequence[MultiModalSample], test: Sequence[MultiModalSample],
                               cfg: TransferConfig, params: Params | None = None,
                               n_classes: int | None = None) -> tuple[ParsingModel, ParsingMetrics, TransferLog]:
    """Head trained on ``source`` labels, evaluated on ``target``.

    ``labelled`` must not carry the target modality: its labels would then be
    target labels in the training stream.  ``paired`` is consumed with part
    identities stripped to a foreground mask, so target labels are never read.
    """
    for m in (source, target):
        if m not in DENSE_MODALITIES:
            raise TransferError(f"cross-modality supervision needs dense modalities, got {m!r}")
    n_classes = n_classes or _n_classes(list(labelled) + list(test))
    if source == target:
        return finetune_parsing(source, labelled, test, cfg, params, n_classes=n_classes)
    leaked = [s.sample_id for s in labelled if s.has(target)]
    if leaked:
        raise ContaminationError(
            f"labelled samples {leaked[:5]} carry the target modality {target!r}; "
            "target labels may not enter the training stream")
    src = [_restrict(s, (source,)) for s in labelled if s.has(source)]
    if not src:
        raise TransferError(f"no labelled sample carries {source!r}")
    modalities = (source, target)
    unl = [_unlabelled(_restrict(s, modalities)) for s in paired if s.has(source) and s.has(target)]
    model, rng = _start(cfg, params, n_classes)
    loss_cfg, pool = _contrastive_setup(cfg, model, unl, modalities)
    if loss_cfg is not None and len(unl) < 2:
        raise TransferError("co-training needs at least two paired samples")
    lab_batches = _Batches(src, cfg.batch_size, rng)
    unl_batches = _Batches(unl, cfg.batch_size, rng) if loss_cfg is not None else None
    log = TransferLog()
    for step in range(1, cfg.steps + 1):
        batch = lab_batches.next()
        task = pixel_cross_entropy(model.logits(batch, source), np.stack([s.part_labels for s in batch]))
        contrastive, emb = None, None
        if loss_cfg is not None:
            contrastive, emb = _contrastive_term(model, unl_batches.next(), modalities, loss_cfg, pool, rng)
        _step(model, cfg, task, contrastive, log, step)
        if emb is not None:
            _refresh_pool(pool, emb)
    return model, evaluate(model, [s for s in test if s.has(target)], target, n_classes), log


def missing_modality(train: Sequence[MultiModalSample], test: Sequence[MultiModalSample],
                     cfg: TransferConfig, params: Params | None = None,
                     test_modalities: Sequence[str] = DENSE_MODALITIES,
                     n_classes: int | None = None) -> tuple[ParsingModel, dict[str, ParsingMetrics], TransferLog]:
    """Train on max-fused dense maps; report single-modality (and fused) inference.

    The returned dict is keyed by test modality plus ``"fused"`` when the test
    samples carry both dense modalities.
    """
    for s in train:
        absent = [m for m in DENSE_MODALITIES if not s.has(m)]
        if absent:
            raise TransferError(f"sample {s.sample_id} lacks {absent[0]!r}; max fusion needs both dense modalities")
    if not train:
        raise TransferError("empty training set")
    n_classes = n_classes or _n_classes(list(train) + list(test))
    samples = [_restrict(s, DENSE_MODALITIES) for s in train]
    model, rng = _start(cfg, params, n_classes)
    loss_cfg, pool = _contrastive_setup(cfg, model, samples, DENSE_MODALITIES)
    batches = _Batches(samples, cfg.batch_size, rng)
    raw = cfg.head_input == "raw"
    log = TransferLog()
    for step in range(1, cfg.steps + 1):
        batch = batches.next()
        labels = np.stack([s.part_labels for s in batch])
        emb = embed_batch(model.params, batch, DENSE_MODALITIES, dense=False)
        maps = [emb.features[m] if raw else emb.dense_map(m) for m in DENSE_MODALITIES]
        task = pixel_cross_entropy(model.head(T.maximum(maps[0], maps[1])), labels)
        contrastive = None
        if loss_cfg is not None:
            contrastive, _ = loss_total(emb, pool, loss_cfg, rng)
        _step(model, cfg, task, contrastive, log, step)
        if loss_cfg is not None:
            _refresh_pool(pool, emb)
    results = {}
    for m in test_modalities:
        results[m] = evaluate(model, [s for s in test if s.has(m)], m, n_classes)
    both = [s for s in test if all(s.has(m) for m in DENSE_MODALITIES)]
    if both:
        results["fused"] = evaluate(model, both, None, n_classes)
    return model, results, log
