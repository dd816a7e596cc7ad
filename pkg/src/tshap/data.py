"""Synthetic skeleton sequences, preprocessing and subject-level folds.

Joints follow the 25-joint Kinect v2 layout (0-based), with the vertical axis
at coordinate index 1:

==  ==============  ==  ==============  ==  ==============
0   spine_base      9   elbow_right     18  ankle_right
1   spine_mid       10  wrist_right     19  foot_right
2   neck            11  hand_right      20  spine_shoulder
3   head            12  hip_left        21  hand_tip_left
4   shoulder_left   13  knee_left       22  thumb_left
5   elbow_left      14  ankle_left      23  hand_tip_right
6   wrist_left      15  foot_left       24  thumb_right
7   hand_left       16  hip_right
8   shoulder_right  17  knee_right
==  ==============  ==  ==============  ==  ==============

Joint 0 (spine base) is the hip-base joint used for centering.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

N_JOINTS = 25
N_COORDS = 3
N_FEATURES = N_JOINTS * N_COORDS
HIP_JOINT = 0
VERTICAL = 1

JOINT_NAMES = (
    "spine_base", "spine_mid", "neck", "head",
    "shoulder_left", "elbow_left", "wrist_left", "hand_left",
    "shoulder_right", "elbow_right", "wrist_right", "hand_right",
    "hip_left", "knee_left", "ankle_left", "foot_left",
    "hip_right", "knee_right", "ankle_right", "foot_right",
    "spine_shoulder", "hand_tip_left", "thumb_left", "hand_tip_right", "thumb_right",
)

CLASS_NAMES = ("fall", "sit", "stand", "pickup")
FALL, SIT, STAND, PICKUP = range(4)

BODY_PARTS = {
    "trunk": (0, 1, 20),
    "head": (2, 3),
    "left_arm": (4, 5, 6, 7, 21, 22),
    "right_arm": (8, 9, 10, 11, 23, 24),
    "left_leg": (12, 13, 14, 15),
    "right_leg": (16, 17, 18, 19),
}
LEG_JOINTS = BODY_PARTS["left_leg"] + BODY_PARTS["right_leg"]
UPPER_JOINTS = tuple(j for j in range(N_JOINTS) if j not in LEG_JOINTS and j != HIP_JOINT)

FEATURE_NAMES = tuple(f"j{j}_{c}" for j in range(N_JOINTS) for c in "xyz")


def body_part_group_map() -> np.ndarray:
    """Feature index (0..74) -> body-part index (0..5), in ``BODY_PARTS`` order."""
    group_of_joint = np.empty(N_JOINTS, dtype=np.int64)
    for g, joints in enumerate(BODY_PARTS.values()):
        group_of_joint[list(joints)] = g
    return np.repeat(group_of_joint, N_COORDS)


def to_binary_label(label: int) -> int:
    """Fall is the positive class (1); every other activity maps to 0."""
    return 1 if label == FALL else 0


@dataclass
class RawSkeletonSequence:
    frames: np.ndarray  # (length, 25, 3)
    subject_id: int
    class_label: int
    seq_id: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_JOINTS, N_COORDS):
            raise InvalidArgumentError(f"frames must have shape (L, 25, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise InvalidArgumentError("a sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidArgumentError("joint coordinates must be finite")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureSequence:
    data: np.ndarray  # (T, 75)
    label: int
    subject_id: int
    seq_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != N_FEATURES:
            raise InvalidArgumentError(f"feature matrix must be (T, 75), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("feature matrix contains non-finite values")

    @property
    def T(self) -> int:
        return self.data.shape[0]


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_per_class: int = 60
    n_subjects: int = 20
    noise_std: float = 0.02
    raw_length_range: tuple[int, int] = (90, 130)
    classes: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        lo, hi = self.raw_length_range
        self.raw_length_range = (int(lo), int(hi))
        self.classes = tuple(self.classes)
        if lo < 1 or lo > hi:
            raise InvalidArgumentError(f"raw_length_range must satisfy 1 <= min <= max, got {self.raw_length_range}")
        if not math.isfinite(self.noise_std) or self.noise_std < 0:
            raise InvalidArgumentError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be unsigned")
        if self.n_per_class < 1 or self.n_subjects < 1:
            raise InvalidArgumentError("n_per_class and n_subjects must be >= 1")
        unknown = set(self.classes) - set(CLASS_NAMES)
        if unknown or not self.classes:
            raise InvalidArgumentError(f"unknown classes {sorted(unknown)}")

    @property
    def labels(self) -> list[int]:
        return [CLASS_NAMES.index(c) for c in self.classes]


@dataclass
class FoldAssignment:
    k: int
    fold_of_subject: dict[int, int] = field(default_factory=dict)

    def subjects(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.fold_of_subject.items() if f == fold)

    def split(self, sequences: Sequence[FeatureSequence], fold: int):
        """Return (train, test) lists for ``fold`` as the held-out fold."""
        train = [s for s in sequences if self.fold_of_subject[s.subject_id] != fold]
        test = [s for s in sequences if self.fold_of_subject[s.subject_id] == fold]
        return train, test


# --------------------------------------------------------------------------
# generator

# upright upper-body offsets from the spine base, meters for a 1.7 m subject
_UPPER_TEMPLATE = {
    1: (0.0, 0.25, 0.0),
    20: (0.0, 0.48, 0.0),
    2: (0.0, 0.55, 0.0),
    3: (0.0, 0.68, 0.0),
    4: (0.18, 0.45, 0.0),
    5: (0.21, 0.18, 0.0),
    6: (0.22, -0.06, 0.02),
    7: (0.22, -0.13, 0.03),
    21: (0.22, -0.20, 0.04),
    22: (0.19, -0.11, 0.06),
}
for _l, _r in ((4, 8), (5, 9), (6, 10), (7, 11), (21, 23), (22, 24)):
    _x, _y, _z = _UPPER_TEMPLATE[_l]
    _UPPER_TEMPLATE[_r] = (-_x, _y, _z)

_THIGH, _SHANK, _ANKLE_H, _HIP_HALF = 0.45, 0.43, 0.08, 0.09
_STAND_HIP_Y = _ANKLE_H + _SHANK + _THIGH


def _rot_x(v: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate (L, n, 3) offsets about the lateral axis; positive angle tips +y towards +z."""
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    out = v.copy()
    out[..., 1] = v[..., 1] * c - v[..., 2] * s
    out[..., 2] = v[..., 1] * s + v[..., 2] * c
    return out


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _pose(thigh: np.ndarray, trunk: np.ndarray) -> np.ndarray:
    """Body pose with feet on the floor at the origin, per frame.

    ``thigh`` is the thigh angle from vertical (0 standing, pi/2 seated) with
    vertical shanks; ``trunk`` is the forward flexion of the upper body.
    """
    L = thigh.shape[0]
    P = np.zeros((L, N_JOINTS, N_COORDS))
    hip_y = _ANKLE_H + _SHANK + _THIGH * np.cos(thigh)
    P[:, HIP_JOINT, 1] = hip_y
    upper_idx = list(_UPPER_TEMPLATE)
    offsets = np.broadcast_to(np.array([_UPPER_TEMPLATE[j] for j in upper_idx]), (L, len(upper_idx), 3))
    P[:, upper_idx] = P[:, [HIP_JOINT]] + _rot_x(offsets, trunk)
    for side, (hip, knee, ankle, foot) in ((1.0, BODY_PARTS["left_leg"]), (-1.0, BODY_PARTS["right_leg"])):
        P[:, hip, 0] = side * _HIP_HALF
        P[:, hip, 1] = hip_y - 0.02
        P[:, knee, 0] = side * _HIP_HALF
        P[:, knee, 1] = P[:, hip, 1] - _THIGH * np.cos(thigh)
        P[:, knee, 2] = _THIGH * np.sin(thigh)
        P[:, ankle] = P[:, knee]
        P[:, ankle, 1] = _ANKLE_H
        P[:, foot] = P[:, ankle] + np.array([0.0, -0.06, 0.10])
    return P


def synth_sequence(cfg: GeneratorConfig, class_label: int, subject_id: int, instance_seed: int) -> RawSkeletonSequence:
    """Generate one raw skeleton sequence of the given activity class.

    Subject anthropometry depends only on ``(cfg.seed, subject_id)``; timing,
    placement and noise on ``(cfg.seed, instance_seed)``.
    """
    if class_label not in cfg.labels:
        raise InvalidArgumentError(f"class_label {class_label} not in configured classes {cfg.labels}")
    subj_rng = np.random.default_rng([cfg.seed, 1, subject_id])
    rng = np.random.default_rng([cfg.seed, 2, instance_seed])
    scale = subj_rng.uniform(0.88, 1.12)
    lo, hi = cfg.raw_length_range
    L = int(rng.integers(lo, hi + 1))
    u = np.arange(L) / max(L - 1, 1)
    zeros = np.zeros(L)

    jitter = np.zeros((L, N_JOINTS, N_COORDS))
    if class_label == FALL:
        P = _pose(zeros, zeros)
        start = rng.uniform(0.3, 0.5)
        dur = rng.uniform(0.05, 0.10)
        tilt = rng.uniform(1.48, 0.5 * np.pi) * rng.choice([-1.0, 1.0])
        # accelerating rigid tip-over about the feet, ending flat on the floor
        progress = np.clip((u - start) / dur, 0.0, 1.0) ** 2
        P = _rot_x(P, tilt * progress)
        P[..., 1] = np.maximum(P[..., 1], 0.0)
        after = (u >= start)[:, None]
        jitter[:, LEG_JOINTS] = rng.normal(0.0, 0.015, (L, len(LEG_JOINTS), 3)) * after[..., None]
    elif class_label == SIT:
        start = rng.uniform(0.15, 0.3)
        dur = rng.uniform(0.4, 0.6)
        P = _pose(0.5 * np.pi * _smoothstep((u - start) / dur), zeros)
    elif class_label == STAND:
        start = rng.uniform(0.15, 0.3)
        dur = rng.uniform(0.4, 0.6)
        P = _pose(0.5 * np.pi * (1.0 - _smoothstep((u - start) / dur)), zeros)
    else:
        start = rng.uniform(0.2, 0.35)
        dur = rng.uniform(0.45, 0.6)
        peak = rng.uniform(1.05, 1.45)
        phase = np.clip((u - start) / dur, 0.0, 1.0)
        P = _pose(zeros, peak * np.sin(np.pi * phase) ** 2)

    offset = np.array([rng.uniform(-1.0, 1.0), 0.0, rng.uniform(1.5, 3.5)])
    frames = scale * (P + jitter) + offset
    if cfg.noise_std > 0:
        frames = frames + rng.normal(0.0, cfg.noise_std, frames.shape)
    return RawSkeletonSequence(frames=frames, subject_id=subject_id, class_label=class_label, seq_id=instance_seed)


def generate_dataset(cfg: GeneratorConfig) -> list[RawSkeletonSequence]:
    """``n_per_class`` sequences per class, subjects assigned round-robin."""
    out = []
    for c in cfg.labels:
        for r in range(cfg.n_per_class):
            seq_id = c * cfg.n_per_class + r
            out.append(synth_sequence(cfg, c, r % cfg.n_subjects, seq_id))
    return out


def max_hip_drop(seq: RawSkeletonSequence) -> float:
    """Largest frame-to-frame decrease of the hip-base vertical coordinate."""
    y = seq.frames[:, HIP_JOINT, VERTICAL]
    if y.shape[0] < 2:
        return 0.0
    return float(np.max(y[:-1] - y[1:]))


# --------------------------------------------------------------------------
# preprocessing


def normalize(seq: RawSkeletonSequence) -> RawSkeletonSequence:
    """Center every frame on the hip-base joint and scale to unit body height.

    Body height is the vertical extent of the hip-centered skeleton over the
    whole sequence, so a second application is a no-op.
    """
    centered = seq.frames - seq.frames[:, [HIP_JOINT], :]
    vertical = centered[..., VERTICAL]
    height = float(vertical.max() - vertical.min())
    if not height > 0:
        raise DegenerateInputError(f"sequence {seq.seq_id} has zero body height")
    return RawSkeletonSequence(centered / height, seq.subject_id, seq.class_label, seq.seq_id)


def resample(seq: RawSkeletonSequence, T: int) -> RawSkeletonSequence:
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    L = seq.length
    if L > T:
        idx = (np.arange(T) * L) // T
        frames = seq.frames[idx]
    elif L < T:
        frames = np.concatenate([seq.frames, np.zeros((T - L, N_JOINTS, N_COORDS))])
    else:
        frames = seq.frames.copy()
    return RawSkeletonSequence(frames, seq.subject_id, seq.class_label, seq.seq_id)


def vectorize(seq: RawSkeletonSequence) -> FeatureSequence:
    return FeatureSequence(seq.frames.reshape(seq.length, N_FEATURES).copy(), seq.class_label, seq.subject_id, seq.seq_id)


def devectorize(x: FeatureSequence) -> RawSkeletonSequence:
    return RawSkeletonSequence(x.data.reshape(x.T, N_JOINTS, N_COORDS).copy(), x.subject_id, x.label, x.seq_id)


def preprocess(seq: RawSkeletonSequence, T: int = 100) -> FeatureSequence:
    return vectorize(resample(normalize(seq), T))


def stack(sequences: Sequence[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """(N, T, 75) inputs and (N,) labels."""
    X = np.stack([s.data for s in sequences])
    y = np.array([s.label for s in sequences], dtype=np.int64)
    return X, y


def as_binary(sequences: Iterable[FeatureSequence]) -> list[FeatureSequence]:
    return [FeatureSequence(s.data, to_binary_label(s.label), s.subject_id, s.seq_id) for s in sequences]


# --------------------------------------------------------------------------
# folds


def kfold_split(sequences: Sequence[FeatureSequence], k: int, seed: int) -> FoldAssignment:
    """Shuffle distinct subjects with ``seed`` and deal them round-robin to ``k`` folds."""
    if k < 2:
        raise InvalidArgumentError(f"k must be >= 2, got {k}")
    subjects = np.array(sorted({s.subject_id for s in sequences}), dtype=np.int64)
    if subjects.size < k:
        raise InvalidArgumentError(f"{subjects.size} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(subjects)
    return FoldAssignment(k, {int(s): i % k for i, s in enumerate(order)})


# --------------------------------------------------------------------------
# CSV layout: seq_id, subject_id, label, t, j0_x, j0_y, j0_z, ..., j24_z

CSV_HEADER = ("seq_id", "subject_id", "label", "t") + FEATURE_NAMES


def write_sequences_csv(path: str | Path, sequences: Sequence[FeatureSequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in sequences:
            for t, row in enumerate(s.data):
                w.writerow([s.seq_id, s.subject_id, s.label, t, *map(repr, row.tolist())])


def read_sequences_csv(path: str | Path) -> list[FeatureSequence]:
    rows: dict[int, list] = {}
    meta: dict[int, tuple[int, int]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != CSV_HEADER:
            raise InvalidArgumentError(f"{path}: unexpected CSV header")
        for rec in r:
            sid = int(rec[0])
            meta[sid] = (int(rec[1]), int(rec[2]))
            rows.setdefault(sid, []).append((int(rec[3]), [float(v) for v in rec[4:]]))
    out = []
    for sid, frames in rows.items():
        frames.sort(key=lambda tr: tr[0])
        subject, label = meta[sid]
        out.append(FeatureSequence(np.array([f for _, f in frames]), label, subject, sid))
    return out
