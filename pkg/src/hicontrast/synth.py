"""Procedural multi-modal stick-figure data.

A 13-joint 2-D skeleton is posed by forward kinematics and rasterised as a
set of capsules.  Each observation yields an RGB-like grid (per-part colour),
a depth-like grid (per-limb depth ramp), jittered 2-D keypoints, joint-to-pixel
correspondences and a part-label map.  Sources of a heterogeneous dataset can
drop modalities; the drop is recorded in a presence mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MODALITIES = ("rgb", "depth", "keypoints")
DENSE_MODALITIES = ("rgb", "depth")
_MASK_BITS = {"rgb": 1, "depth": 2, "keypoints": 4}

DATASET_MAGIC = b"HCSD"
DATASET_VERSION = 1


class CanvasTooSmall(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


# joint order: pelvis, neck, head, l_elbow, l_wrist, r_elbow, r_wrist,
# l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle
JOINT_NAMES = (
    "pelvis", "neck", "head", "l_elbow", "l_wrist", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
)


@dataclass
class Skeleton:
    """Rooted kinematic tree.  Bone ``b`` connects joint ``b + 1`` to its parent."""

    parent: np.ndarray
    bone_length: np.ndarray
    rest_angle: np.ndarray  # relative to the parent bone direction (radians)
    angle_range: np.ndarray  # half-width of the uniform angle perturbation
    base_depth: np.ndarray  # per-joint canonical depth in [0, 1]
    part_of_bone: np.ndarray

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.bone_length = np.asarray(self.bone_length, dtype=np.float64)
        self.rest_angle = np.asarray(self.rest_angle, dtype=np.float64)
        self.angle_range = np.asarray(self.angle_range, dtype=np.float64)
        self.base_depth = np.asarray(self.base_depth, dtype=np.float64)
        self.part_of_bone = np.asarray(self.part_of_bone, dtype=np.int64)
        j = len(self.parent)
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ValueError("skeleton needs exactly one root at index 0")
        for k in range(1, j):
            if not 0 <= self.parent[k] < k:
                raise ValueError("parents must precede children (tree, no cycles)")
        if len(self.bone_length) != j - 1 or (self.bone_length <= 0).any():
            raise ValueError("need J-1 strictly positive bone lengths")
        if len(self.part_of_bone) != j - 1 or self.part_of_bone.min() < 1:
            raise ValueError("part ids must lie in [1, P]")

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    @property
    def n_parts(self) -> int:
        return int(self.part_of_bone.max())

    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) joint pairs in bone order."""
        return [(int(self.parent[c]), c) for c in range(1, self.n_joints)]

    def edges(self) -> np.ndarray:
        return np.array(self.bones(), dtype=np.int64)

    def with_ranges(self, scale: float) -> "Skeleton":
        return Skeleton(self.parent, self.bone_length, self.rest_angle,
                        self.angle_range * scale, self.base_depth, self.part_of_bone)

    def with_lengths(self, bone_length) -> "Skeleton":
        return Skeleton(self.parent, bone_length, self.rest_angle,
                        self.angle_range, self.base_depth, self.part_of_bone)


def default_skeleton() -> Skeleton:
    h = np.pi / 2
    return Skeleton(
        parent=[-1, 0, 1, 1, 3, 1, 5, 0, 7, 8, 0, 10, 11],
        # neck, head, l_upper, l_fore, r_upper, r_fore, l_hip, l_thigh, l_shin, r_hip, r_thigh, r_shin
        bone_length=[7.0, 3.0, 5.0, 4.0, 5.0, 4.0, 2.5, 6.0, 5.0, 2.5, 6.0, 5.0],
        rest_angle=[0.0, 0.0, -h, 0.0, h, 0.0, -h, -h, 0.0, h, h, 0.0],
        angle_range=[0.25, 0.4, 1.1, 1.2, 1.1, 1.2, 0.0, 0.5, 0.7, 0.0, 0.5, 0.7],
        base_depth=[0.50, 0.45, 0.40, 0.30, 0.20, 0.70, 0.80, 0.55, 0.35, 0.25, 0.60, 0.75, 0.90],
        part_of_bone=list(range(1, 13)),
    )


@dataclass
class PoseInstance:
    joint_xy: np.ndarray  # J x 2, (x, y) with x along columns
    joint_depth: np.ndarray  # J
    seed: int | None = None


def sample_pose(skeleton: Skeleton, rng: np.random.Generator, canvas: tuple[int, int] = (32, 32),
                root_jitter: float = 2.0, depth_noise: float = 0.03,
                max_tries: int = 1000) -> PoseInstance:
    """Forward kinematics from the pelvis with uniformly drawn joint angles.

    Rejection-resamples until every joint sits at least one pixel inside the
    canvas.
    """
    h, w = canvas
    reach = skeleton.bone_length.sum()
    if min(h, w) < 3:
        raise CanvasTooSmall(f"canvas {h}x{w} cannot hold any joint with a 1px margin")
    j = skeleton.n_joints
    for _ in range(max_tries):
        root = np.array([(w - 1) / 2.0, (h - 1) / 2.0 + 2.0])
        root = root + rng.uniform(-root_jitter, root_jitter, size=2) * (root_jitter > 0)
        torso = -np.pi / 2
        offs = rng.uniform(-1.0, 1.0, size=j - 1) * skeleton.angle_range
        xy = np.zeros((j, 2))
        direction = np.zeros(j)
        xy[0] = root
        direction[0] = torso
        for c in range(1, j):
            p = skeleton.parent[c]
            theta = direction[p] + skeleton.rest_angle[c - 1] + offs[c - 1]
            direction[c] = theta
            xy[c] = xy[p] + skeleton.bone_length[c - 1] * np.array([np.cos(theta), np.sin(theta)])
        inside = ((xy[:, 0] >= 1) & (xy[:, 0] <= w - 2) & (xy[:, 1] >= 1) & (xy[:, 1] <= h - 2)).all()
        if inside:
            depth = skeleton.base_depth + (rng.normal(0.0, depth_noise, size=j) if depth_noise > 0 else 0.0)
            return PoseInstance(joint_xy=xy, joint_depth=np.clip(depth, 0.05, 1.0))
    raise CanvasTooSmall(
        f"{max_tries} consecutive rejections on a {h}x{w} canvas (total bone length {reach:.1f})")


@dataclass
class MultiModalSample:
    sample_id: int
    rgb: np.ndarray | None  # H x W x 3
    depth: np.ndarray | None  # H x W x 1
    keypoints: np.ndarray | None  # J x 3: x, y, confidence
    correspondences: np.ndarray  # J x 2: (row, col)
    part_labels: np.ndarray  # H x W, 0 = background
    modality_mask: dict[str, bool]
    source: int = 0

    def has(self, modality: str) -> bool:
        return bool(self.modality_mask.get(modality, False))

    @property
    def present(self) -> list[str]:
        return [m for m in MODALITIES if self.has(m)]

    def mask_byte(self) -> int:
        return sum(_MASK_BITS[m] for m in MODALITIES if self.has(m))

    def dense(self, modality: str) -> np.ndarray:
        grid = getattr(self, modality)
        if grid is None or not self.has(modality):
            raise DatasetError(f"sample {self.sample_id} has no {modality} modality")
        return grid


@dataclass
class SourceSpec:
    n_samples: int
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise DatasetError(f"unknown modalities {sorted(unknown)}")
        if len(set(self.modalities)) < 2:
            raise DatasetError("every source needs at least two modalities")
        if self.n_samples < 0:
            raise DatasetError("n_samples must be non-negative")


@dataclass
class DatasetSpec:
    sources: list[SourceSpec] = field(default_factory=lambda: [
        SourceSpec(96, ("rgb", "depth", "keypoints")),
        SourceSpec(32, ("rgb", "keypoints")),
    ])
    height: int = 32
    width: int = 32
    radius: float = 1.5
    sigma_rgb: float = 0.05
    sigma_depth: float = 0.01
    sigma_kp: float = 0.5
    root_jitter: float = 2.0
    joint_depth_noise: float = 0.0
    angle_scale: float = 1.0
    shape_jitter: float = 0.3
    seed: int = 0
    id_offset: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        if not self.sources:
            raise DatasetError("dataset spec needs at least one source")


def part_colors(n_parts: int) -> np.ndarray:
    """Fixed, well-separated colour per part (row 0 is background)."""
    cols = np.zeros((n_parts + 1, 3))
    for p in range(1, n_parts + 1):
        hue = (p - 1) / n_parts
        k = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
        cols[p] = 0.5 + 0.45 * np.cos(2 * np.pi * (hue - k))
    return cols


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = b - a
    t = ((px - a) @ ab) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(px - proj, axis=1), t


def render(pose: PoseInstance, skeleton: Skeleton, spec: DatasetSpec, rng: np.random.Generator,
           sample_id: int = 0, modalities: Sequence[str] = MODALITIES, source: int = 0) -> MultiModalSample:
    """Rasterise a pose into all modalities; absent ones are omitted."""
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w]
    px = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    bones = skeleton.bones()
    dist = np.empty((len(bones), px.shape[0]))
    ts = np.empty_like(dist)
    for b, (p, c) in enumerate(bones):
        dist[b], ts[b] = _segment_distance(px, pose.joint_xy[p], pose.joint_xy[c])
    nearest = np.argmin(dist, axis=0)  # argmin picks the lower bone index on ties
    covered = dist[nearest, np.arange(px.shape[0])] <= spec.radius
    labels = np.where(covered, skeleton.part_of_bone[nearest], 0).reshape(h, w)

    present = {m: (m in modalities) for m in MODALITIES}
    rgb = depth = kps = None
    if present["rgb"]:
        colors = part_colors(skeleton.n_parts)
        rgb = colors[labels].astype(np.float64)
        if spec.sigma_rgb > 0:
            rgb = rgb + rng.normal(0.0, spec.sigma_rgb, size=rgb.shape)
    if present["depth"]:
        t = ts[nearest, np.arange(px.shape[0])]
        parent_idx = np.array([p for p, _ in bones])[nearest]
        child_idx = np.array([c for _, c in bones])[nearest]
        d = (1 - t) * pose.joint_depth[parent_idx] + t * pose.joint_depth[child_idx]
        depth = np.where(covered, d, 0.0).reshape(h, w, 1)
        if spec.sigma_depth > 0:
            depth = depth + rng.normal(0.0, spec.sigma_depth, size=depth.shape)
    if present["keypoints"]:
        if spec.sigma_kp > 0:
            jitter = rng.normal(0.0, spec.sigma_kp, size=pose.joint_xy.shape)
            conf = np.exp(-(jitter ** 2).sum(axis=1) / (2 * spec.sigma_kp ** 2))
        else:
            jitter = np.zeros_like(pose.joint_xy)
            conf = np.ones(len(pose.joint_xy))
        kps = np.column_stack([pose.joint_xy + jitter, conf])
    corr = np.column_stack([np.rint(pose.joint_xy[:, 1]), np.rint(pose.joint_xy[:, 0])]).astype(np.int64)
    return MultiModalSample(sample_id=sample_id, rgb=rgb, depth=depth, keypoints=kps,
                            correspondences=corr, part_labels=labels.astype(np.int64),
                            modality_mask=present, source=source)


def make_dataset(spec: DatasetSpec, skeleton: Skeleton | None = None) -> list[MultiModalSample]:
    """All sources concatenated; ids run from ``spec.id_offset`` in order."""
    skeleton = skeleton or default_skeleton()
    if spec.angle_scale != 1.0:
        skeleton = skeleton.with_ranges(spec.angle_scale)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.sources))
    out: list[MultiModalSample] = []
    next_id = spec.id_offset
    for s_idx, (src, ss) in enumerate(zip(spec.sources, seeds)):
        rng = np.random.default_rng(ss)
        for _ in range(src.n_samples):
            body = skeleton
            if spec.shape_jitter > 0:
                # per-person proportions: every bone scaled independently
                scale = rng.uniform(1 - spec.shape_jitter, 1 + spec.shape_jitter, len(skeleton.bone_length))
                body = skeleton.with_lengths(skeleton.bone_length * scale)
            pose = sample_pose(body, rng, (spec.height, spec.width),
                               root_jitter=spec.root_jitter, depth_noise=spec.joint_depth_noise)
            out.append(render(pose, body, spec, rng, sample_id=next_id,
                              modalities=src.modalities, source=s_idx))
            next_id += 1
    return out


def split(dataset: Sequence[MultiModalSample], fractions: Sequence[float] = (0.5, 0.25, 0.25),
          seed: int = 0) -> tuple[list, list, list]:
    """Seeded disjoint train/val/test partition; each part is ordered by sample id."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    cuts = [perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]]
    parts = []
    for name, idx in zip(("train", "val", "test"), cuts):
        if len(idx) == 0:
            raise DatasetError(f"{name} split is empty")
        parts.append(sorted((dataset[i] for i in idx), key=lambda s: s.sample_id))
    return parts[0], parts[1], parts[2]


def stride_indices(n: int, fraction: float) -> list[int]:
    """Uniformly strided positions covering ``fraction`` of ``n`` items."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    k = int(round(n * fraction))
    if k == 0:
        raise DatasetError(f"fraction {fraction} of {n} samples selects nothing")
    return [(i * n) // k for i in range(k)]


def subsample(train: Sequence[MultiModalSample], fraction: float) -> list[MultiModalSample]:
    return [train[i] for i in stride_indices(len(train), fraction)]


# --- serialization --------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIII")
_RECORD = struct.Struct("<qBB")


def dumps_dataset(samples: Sequence[MultiModalSample]) -> bytes:
    if not samples:
        raise DatasetError("cannot serialise an empty dataset")
    h, w = samples[0].part_labels.shape
    j = len(samples[0].correspondences)
    p = int(max(int(s.part_labels.max()) for s in samples))
    chunks = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, h, w, j, p, len(samples))]
    for s in samples:
        chunks.append(_RECORD.pack(s.sample_id, s.mask_byte(), s.source))
        if s.has("rgb"):
            chunks.append(np.ascontiguousarray(s.rgb, dtype="<f8").tobytes())
        if s.has("depth"):
            chunks.append(np.ascontiguousarray(s.depth, dtype="<f8").tobytes())
        if s.has("keypoints"):
            chunks.append(np.ascontiguousarray(s.keypoints, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(s.correspondences, dtype="<i4").tobytes())
        chunks.append(np.ascontiguousarray(s.part_labels, dtype="u1").tobytes())
    return b"".join(chunks)


def loads_dataset(buf: bytes) -> list[MultiModalSample]:
    if len(buf) < _HEADER.size:
        raise DatasetError("dataset file truncated (header)")
    magic, version, h, w, j, _p, count = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetError("not a dataset file")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    off = _HEADER.size
    out = []

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(buf):
            raise DatasetError("dataset file truncated")
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    for _ in range(count):
        sid, mask, source = _RECORD.unpack(take(_RECORD.size))
        present = {m: bool(mask & _MASK_BITS[m]) for m in MODALITIES}
        rgb = depth = kps = None
        if present["rgb"]:
            rgb = np.frombuffer(take(h * w * 3 * 8), dtype="<f8").reshape(h, w, 3).astype(np.float64)
        if present["depth"]:
            depth = np.frombuffer(take(h * w * 8), dtype="<f8").reshape(h, w, 1).astype(np.float64)
        if present["keypoints"]:
            kps = np.frombuffer(take(j * 3 * 8), dtype="<f8").reshape(j, 3).astype(np.float64)
        corr = np.frombuffer(take(j * 2 * 4), dtype="<i4").reshape(j, 2).astype(np.int64)
        labels = np.frombuffer(take(h * w), dtype="u1").reshape(h, w).astype(np.int64)
        out.append(MultiModalSample(sid, rgb, depth, kps, corr, labels, present, source))
    if off != len(buf):
        raise DatasetError("trailing bytes after dataset records")
    return out


def save_dataset(samples: Sequence[MultiModalSample], path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(samples))


def load_dataset(path) -> list[MultiModalSample]:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
