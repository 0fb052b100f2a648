"""Toy modality encoders and the linear+normalise mapper heads.

Dense grids go through a stack of per-pixel layers mixing each pixel with its
4-neighbourhood mean.  Keypoints go through mean-aggregation message passing
on the skeleton tree.  Mappers produce the three embedding levels:

* global: mapper over the mean-pooled feature map (or node mean),
* sparse: mapper over features at the joint correspondences (or per node),
* dense: mapper over every pixel (dense modalities only).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .records import load_records, save_records
from .synth import DENSE_MODALITIES, MODALITIES, MultiModalSample, default_skeleton
from .tensor import Tensor

IN_CHANNELS = {"rgb": 3, "depth": 1}
KEYPOINT_FEATURES = 3


class EmbeddingError(ValueError):
    pass


@dataclass
class EncoderConfig:
    dense_layers: int = 2
    dense_hidden: int = 32
    dense_out: int = 32
    sparse_rounds: int = 2
    sparse_hidden: int = 32
    embed_dim: int = 16
    height: int = 32
    width: int = 32
    edges: list = field(default_factory=lambda: default_skeleton().edges().tolist())
    modalities: tuple = MODALITIES

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.edges = [list(map(int, e)) for e in self.edges]

    @property
    def n_joints(self) -> int:
        return max(max(e) for e in self.edges) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)), rng.uniform(-a, a, size=fan_out)


def _layer_shapes(cfg: EncoderConfig) -> list[tuple[str, int, int]]:
    shapes = []
    for m in cfg.modalities:
        if m in DENSE_MODALITIES:
            c = IN_CHANNELS[m]
            for li in range(cfg.dense_layers):
                out = cfg.dense_out if li == cfg.dense_layers - 1 else cfg.dense_hidden
                shapes.append((f"enc/{m}/l{li}", 2 * c, out))
                c = out
            for level in ("g", "s", "d"):
                shapes.append((f"map/{level}/{m}", c, cfg.embed_dim))
        else:
            c = KEYPOINT_FEATURES
            for r in range(cfg.sparse_rounds):
                shapes.append((f"enc/{m}/r{r}", 2 * c, cfg.sparse_hidden))
                c = cfg.sparse_hidden
            for level in ("g", "s"):
                shapes.append((f"map/{level}/{m}", c, cfg.embed_dim))
    return shapes


class Params:
    """Named parameter tensors of every encoder and mapper, plus their config."""

    def __init__(self, cfg: EncoderConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def values(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def copy(self) -> "Params":
        return Params(EncoderConfig(**self.cfg.to_dict()),
                      {n: T.parameter(a, name=n) for n, a in self.arrays().items()})

    def frozen(self) -> "Params":
        """Constant views of the same arrays, for gradient-free evaluation."""
        return Params(self.cfg, {n: T.constant(t.data) for n, t in self.tensors.items()})

    def check_finite(self) -> None:
        for n, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise EmbeddingError(f"parameter {n} became non-finite")


def init_params(seed: int, cfg: EncoderConfig | None = None) -> Params:
    """Glorot-uniform weights, drawn in a fixed name order.

    Mapper biases are drawn from the same range; encoder biases start at zero.
    A positive random bias shifts every relu unit by the same amount for all
    inputs, which only adds to the common component that mean pooling already
    shares between samples.
    """
    cfg = cfg or EncoderConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, fan_in, fan_out in _layer_shapes(cfg):
        w, b = _glorot(rng, fan_in, fan_out)
        if name.startswith("enc/"):
            b = np.zeros_like(b)
        tensors[f"{name}/w"] = T.parameter(w, name=f"{name}/w")
        tensors[f"{name}/b"] = T.parameter(b, name=f"{name}/b")
    return Params(cfg, tensors)


def save_params(params: Params, path) -> None:
    save_records(path, params.arrays(), {"kind": "encoders", "config": params.cfg.to_dict()})


def load_params(path) -> Params:
    arrays, meta = load_records(path)
    if meta.get("kind") != "encoders":
        raise EmbeddingError(f"{path} is not an encoder checkpoint")
    cfg = EncoderConfig(**meta["config"])
    return Params(cfg, {n: T.parameter(a, name=n) for n, a in arrays.items() if not n.startswith("pool/")})


# --- encoders -------------------------------------------------------------

def _lin(params: Params, name: str, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{name}/w"], params[f"{name}/b"])


def dense_features(params: Params, modality: str, grids: Tensor) -> Tensor:
    """``n×H×W×c`` grids to ``n×H×W×C`` features."""
    h = grids
    for li in range(params.cfg.dense_layers):
        mixed = T.concat([h, T.neighbor_mean(h)], axis=-1)
        h = T.relu(_lin(params, f"enc/{modality}/l{li}", mixed))
    return h


def _adjacency(cfg: EncoderConfig) -> np.ndarray:
    j = cfg.n_joints
    a = np.zeros((j, j))
    for p, c in cfg.edges:
        a[p, c] = a[c, p] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    return a / np.maximum(deg, 1.0)


def keypoint_inputs(cfg: EncoderConfig, keypoints: np.ndarray) -> np.ndarray:
    """Canvas-normalised (x, y) in [-1, 1] plus confidence."""
    kp = np.array(keypoints, dtype=np.float64)
    kp[..., 0] = 2.0 * kp[..., 0] / (cfg.width - 1) - 1.0
    kp[..., 1] = 2.0 * kp[..., 1] / (cfg.height - 1) - 1.0
    return kp


def sparse_features(params: Params, modality: str, nodes: Tensor) -> Tensor:
    """``n×J×3`` node inputs to ``n×J×K`` node features."""
    n = nodes.shape[0]
    adj = T.constant(np.broadcast_to(_adjacency(params.cfg), (n,) + (params.cfg.n_joints,) * 2).copy())
    h = nodes
    for r in range(params.cfg.sparse_rounds):
        h = T.relu(_lin(params, f"enc/{modality}/r{r}", T.concat([h, T.matmul(adj, h)], axis=-1)))
    return h


def _map(params: Params, level: str, modality: str, x: Tensor) -> Tensor:
    return T.l2_normalize(_lin(params, f"map/{level}/{modality}", x))


# --- embedding sets -------------------------------------------------------

@dataclass
class EmbeddingSet:
    """All embedding levels of one sample; missing modalities are simply absent."""

    sample_id: int
    global_: dict[str, Tensor]
    sparse: dict[str, Tensor]
    dense: dict[str, Tensor]


@dataclass
class BatchEmbeddings:
    """Embeddings of a batch stacked per modality.

    ``ids[m]`` lists the sample ids holding modality ``m`` in stacking order;
    ``global_[m]`` is ``n_m×D``, ``sparse[m]`` ``n_m×J×D`` and ``dense[m]``
    ``n_m×H×W×D``.  ``features[m]`` keeps the raw dense encoder output.
    """

    ids: dict[str, list[int]]
    global_: dict[str, Tensor]
    sparse: dict[str, Tensor]
    dense: dict[str, Tensor]
    features: dict[str, Tensor]
    samples: list[MultiModalSample]
    params: "Params | None" = None
    node_features: dict[str, Tensor] = field(default_factory=dict)

    def index(self, modality: str) -> dict[int, int]:
        """sample id -> position in the modality's stack."""
        return {sid: k for k, sid in enumerate(self.ids.get(modality, ()))}

    def shape_hw(self, modality: str) -> tuple[int, int]:
        return self.features[modality].shape[1:3]

    def dense_at(self, modality: str, flat_idx) -> Tensor:
        """Dense embeddings at flat (sample, row, col) positions.

        Maps only the requested pixels when the full dense map was not built.
        """
        if modality in self.dense:
            t = self.dense[modality]
            n, h, w, d = t.shape
            return T.take(T.reshape(t, (n * h * w, d)), flat_idx)
        f = self.features[modality]
        n, h, w, c = f.shape
        picked = T.take(T.reshape(f, (n * h * w, c)), flat_idx)
        return _map(self.params, "d", modality, picked)

    def dense_map(self, modality: str) -> Tensor:
        """Full ``n×H×W×D`` dense embedding map, built on first request."""
        if modality not in self.dense:
            self.dense[modality] = _map(self.params, "d", modality, self.features[modality])
        return self.dense[modality]

    def modalities(self) -> list[str]:
        return [m for m in MODALITIES if self.ids.get(m)]

    def sample_ids(self) -> list[int]:
        return [s.sample_id for s in self.samples]

    def to_sets(self) -> list[EmbeddingSet]:
        sets = []
        for s in self.samples:
            g, sp, de = {}, {}, {}
            for m, ids in self.ids.items():
                if s.sample_id not in ids:
                    continue
                i = ids.index(s.sample_id)
                g[m] = T.reshape(T.take(self.global_[m], [i]), self.global_[m].shape[1:])
                sp[m] = T.reshape(T.take(self.sparse[m], [i]), self.sparse[m].shape[1:])
                if m in self.dense:
                    de[m] = T.reshape(T.take(self.dense[m], [i]), self.dense[m].shape[1:])
            sets.append(EmbeddingSet(s.sample_id, g, sp, de))
        return sets


def embed_batch(params: Params, samples: Sequence[MultiModalSample],
                modalities: Sequence[str] | None = None, dense: bool = True) -> BatchEmbeddings:
    """Embed every present modality of every sample.

    A sample with all modalities masked is an error; callers filter those out.
    """
    cfg = params.cfg
    wanted = [m for m in (modalities or cfg.modalities) if m in cfg.modalities]
    for s in samples:
        if not any(s.has(m) for m in wanted):
            raise EmbeddingError(f"sample {s.sample_id} has every modality masked")
    ids, glob, sparse, dense_out, feats, nodes = {}, {}, {}, {}, {}, {}
    for m in wanted:
        group = [s for s in samples if s.has(m)]
        if not group:
            continue
        ids[m] = [s.sample_id for s in group]
        n = len(group)
        if m in DENSE_MODALITIES:
            x = T.constant(np.stack([s.dense(m) for s in group]))
            f = dense_features(params, m, x)
            _, h, w, c = f.shape
            feats[m] = f
            glob[m] = _map(params, "g", m, T.reduce_mean(f, "spatial"))
            corr = np.stack([s.correspondences for s in group])
            flat_idx = (np.arange(n)[:, None] * h * w + corr[..., 0] * w + corr[..., 1]).reshape(-1)
            if corr.size and (corr[..., 0].min() < 0 or corr[..., 0].max() >= h
                              or corr[..., 1].min() < 0 or corr[..., 1].max() >= w):
                raise EmbeddingError("correspondence outside the feature map")
            pooled = T.take(T.reshape(f, (n * h * w, c)), flat_idx)
            sparse[m] = T.reshape(_map(params, "s", m, pooled), (n, corr.shape[1], cfg.embed_dim))
            if dense:
                dense_out[m] = _map(params, "d", m, f)
        else:
            x = T.constant(np.stack([keypoint_inputs(cfg, s.keypoints) for s in group]))
            f = sparse_features(params, m, x)
            nodes[m] = f
            glob[m] = _map(params, "g", m, T.reduce_mean(f, (1,)))
            sparse[m] = _map(params, "s", m, f)
    return BatchEmbeddings(ids, glob, sparse, dense_out, feats, list(samples), params, nodes)


def dense_embeddings(params: Params, modality: str, samples: Sequence[MultiModalSample],
                     raw: bool = False) -> Tensor:
    """Dense map of one modality only (mapper output, or raw encoder features)."""
    if modality not in DENSE_MODALITIES:
        raise EmbeddingError(f"{modality!r} has no dense embedding")
    missing = [s.sample_id for s in samples if not s.has(modality)]
    if missing:
        raise EmbeddingError(f"samples {missing[:5]} lack modality {modality!r}")
    f = dense_features(params, modality, T.constant(np.stack([s.dense(modality) for s in samples])))
    return f if raw else _map(params, "d", modality, f)


def embed(sample: MultiModalSample, params: Params) -> EmbeddingSet:
    return embed_batch(params, [sample]).to_sets()[0]
