"""Frame-wise feature attribution for sequence classifiers.

Shapley values are computed per frame: when frame ``t`` is explained the
players are the feature groups of that frame, absent players are set to 0,
and every other frame keeps its observed values.  The value of a coalition is
the target-class probability.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import BODY_PARTS, FeatureSequence, N_FEATURES, N_JOINTS, body_part_group_map
from .errors import InvalidArgumentError, WrongModelKindError
from .models import (
    CnnParameters,
    LstmParameters,
    TrainedModel,
    _cnn_forward_batch,
    input_gradient,
    lstm_step,
    softmax,
)

PER_FEATURE = "per_feature"
PER_GROUP = "per_group"
MAX_EXACT_PLAYERS = 20
GROUP_NAMES = tuple(BODY_PARTS)


@dataclass
class AttributionMap:
    values: np.ndarray  # (T, G)
    granularity: str
    group_map: np.ndarray | None  # feature -> group, only for per_group
    target_class: int
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidArgumentError("attribution values must be (T, G)")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("attribution values must be finite")
        if self.granularity == PER_GROUP:
            gm = np.asarray(self.group_map, dtype=np.int64)
            if gm.shape != (N_FEATURES,) or set(gm.tolist()) != set(range(self.values.shape[1])):
                raise InvalidArgumentError("group_map must map the 75 features onto every group")
            self.group_map = gm
        elif self.granularity == PER_FEATURE:
            if self.values.shape[1] != N_FEATURES:
                raise InvalidArgumentError("per_feature maps need 75 columns")
            self.group_map = None
        else:
            raise InvalidArgumentError(f"unknown granularity {self.granularity!r}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def G(self) -> int:
        return self.values.shape[1]

    def expand(self, split: bool = False) -> np.ndarray:
        """(T, 75) cell scores.

        Each feature inherits its group's score, or an equal share of it
        with ``split=True``.
        """
        if self.granularity == PER_FEATURE:
            return self.values.copy()
        cells = self.values[:, self.group_map]
        if split:
            sizes = np.bincount(self.group_map, minlength=self.G)
            cells = cells / sizes[self.group_map]
        return cells


@dataclass(frozen=True)
class MaskSpec:
    """Set of (frame, feature) cells to zero out."""

    cells: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, cells: Iterable[tuple[int, int]]) -> "MaskSpec":
        cells = tuple((int(t), int(i)) for t, i in cells)
        if len(set(cells)) != len(cells):
            raise InvalidArgumentError("mask contains duplicate cells")
        return cls(cells)


def mask_features(x: FeatureSequence, mask: MaskSpec | Iterable[tuple[int, int]]) -> FeatureSequence:
    cells = mask.cells if isinstance(mask, MaskSpec) else MaskSpec.of(mask).cells
    data = x.data.copy()
    if cells:
        idx = np.array(cells, dtype=np.int64)
        if idx.min() < 0 or np.any(idx[:, 0] >= x.T) or np.any(idx[:, 1] >= x.data.shape[1]):
            raise InvalidArgumentError("mask index out of bounds")
        data[idx[:, 0], idx[:, 1]] = 0.0
    return FeatureSequence(data, x.label, x.subject_id, x.seq_id)


def resolve_group_map(granularity: str, group_map=None) -> np.ndarray:
    """Feature -> player index for ``granularity`` (identity for per_feature)."""
    if granularity == PER_FEATURE:
        return np.arange(N_FEATURES)
    if granularity == PER_GROUP:
        return body_part_group_map() if group_map is None else np.asarray(group_map, dtype=np.int64)
    raise InvalidArgumentError(f"unknown granularity {granularity!r}")


# --------------------------------------------------------------------------
# generic cooperative games over n players; coalitions as boolean rows


def all_coalitions(n: int) -> np.ndarray:
    """(2**n, n) membership rows; row ``m`` encodes bitmask ``m``."""
    masks = np.arange(1 << n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def shapley_from_table(table: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from the values of all ``2**n`` coalitions (bitmask-indexed)."""
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (1 << n,):
        raise InvalidArgumentError("table must hold one value per coalition")
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.sum(weights[sizes[without]] * (table[without | (1 << i)] - table[without]))
    return phi


def exact_shapley_values(value_fn: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    """Shapley values by full enumeration; ``value_fn`` maps (k, n) coalitions to (k,) values."""
    if n > MAX_EXACT_PLAYERS:
        raise InvalidArgumentError(f"{n} players is too many for exact enumeration; use sampled_shapley")
    return shapley_from_table(np.asarray(value_fn(all_coalitions(n)), dtype=np.float64), n)


def _permutation_coalitions(n: int, n_permutations: int, rng: np.random.Generator):
    """Random orders plus the (n_perm, n + 1, n) growing-coalition membership tensor."""
    perms = np.argsort(rng.random((n_permutations, n)), axis=1)
    rank = np.argsort(perms, axis=1)
    members = rank[:, None, :] < np.arange(n + 1)[None, :, None]
    return perms, members


def _unique_rows(members: np.ndarray):
    flat = members.reshape(-1, members.shape[-1])
    packed = np.packbits(flat, axis=1)
    _, first, inverse = np.unique(packed, axis=0, return_index=True, return_inverse=True)
    return flat[first], inverse.reshape(-1)


def _accumulate_permutations(perms: np.ndarray, chain_values: np.ndarray) -> np.ndarray:
    n_perm, n = perms.shape
    marg = np.diff(chain_values, axis=1)
    phi = np.zeros(n)
    np.add.at(phi, perms.ravel(), marg.ravel())
    return phi / n_perm


def permutation_shapley_values(value_fn, n: int, n_permutations: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo Shapley estimate from random player orders.

    Each distinct coalition is evaluated once, however many orders visit it.
    """
    if n_permutations < 1:
        raise InvalidArgumentError("n_permutations must be >= 1")
    perms, members = _permutation_coalitions(n, n_permutations, rng)
    uniq, inverse = _unique_rows(members)
    vals = np.asarray(value_fn(uniq), dtype=np.float64)[inverse].reshape(n_permutations, n + 1)
    return _accumulate_permutations(perms, vals)


# --------------------------------------------------------------------------
# model-backed frame games


def frame_probabilities(model: TrainedModel, x: np.ndarray, frames: np.ndarray, rows: np.ndarray,
                        target_class: int, chunk: int = 8192) -> np.ndarray:
    """Target probability after replacing frame ``frames[r]`` of ``x`` by ``rows[r]``, for every r."""
    frames = np.asarray(frames, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.float64)
    out = np.empty(frames.shape[0])
    order = np.argsort(frames, kind="stable")
    for s in range(0, order.size, chunk):
        sel = order[s:s + chunk]
        if isinstance(model.params, LstmParameters):
            out[sel] = _lstm_frame_probs(model.params, x, frames[sel], rows[sel], target_class)
        else:
            out[sel] = _full_batch_probs(model, x, frames[sel], rows[sel], target_class)
    return out


def _full_batch_probs(model, x, frames, rows, target_class, batch: int = 512) -> np.ndarray:
    out = np.empty(frames.size)
    for s in range(0, frames.size, batch):
        f = frames[s:s + batch]
        X = np.repeat(x[None], f.size, axis=0)
        X[np.arange(f.size), f] = rows[s:s + batch]
        out[s:s + batch] = softmax(model.logits(X))[:, target_class]
    return out


def _lstm_frame_probs(p: LstmParameters, x: np.ndarray, frames: np.ndarray, rows: np.ndarray,
                      target_class: int) -> np.ndarray:
    """Staggered batch: a variant shares the observed trajectory until its replaced frame.

    ``frames`` must be sorted ascending.
    """
    T = x.shape[0]
    bias = p.b_i + p.b_r
    XW = x @ p.W.T + bias
    h0 = np.zeros((1, p.h))
    c0 = np.zeros((1, p.h))
    H_obs = np.empty((T, p.h))
    C_obs = np.empty((T, p.h))
    h, c = h0, c0
    last = int(frames.max())
    for t in range(last):
        h, c = lstm_step(p, XW[t:t + 1], h, c)
        H_obs[t], C_obs[t] = h[0], c[0]

    # rows are sorted by frame, so the active variants at step t are rows [0, starts[t + 1])
    starts = np.searchsorted(frames, np.arange(T + 1))
    m = frames.size
    h_act = np.empty((m, p.h))
    c_act = np.empty((m, p.h))
    for t in range(int(frames[0]), T):
        lo, hi = starts[t], starts[t + 1]
        if lo:
            h_act[:lo], c_act[:lo] = lstm_step(p, XW[t:t + 1], h_act[:lo], c_act[:lo])
        if hi > lo:
            hp = H_obs[t - 1:t] if t else h0
            cp = C_obs[t - 1:t] if t else c0
            h_act[lo:hi], c_act[lo:hi] = lstm_step(p, rows[lo:hi] @ p.W.T + bias, hp, cp)
    logits = h_act @ p.W_out.T + p.b_out
    return softmax(logits)[:, target_class]


class FrameGame:
    """Coalition game over the feature groups of one frame, counting model evaluations."""

    def __init__(self, model: TrainedModel, x: FeatureSequence, t: int, group_map: np.ndarray, target_class: int):
        if not 0 <= t < x.T:
            raise InvalidArgumentError(f"frame {t} out of range")
        self.model, self.x, self.t = model, x.data, t
        self.group_map = np.asarray(group_map, dtype=np.int64)
        self.n = int(self.group_map.max()) + 1
        self.target_class = target_class
        self.n_evals = 0

    def __call__(self, coalitions: np.ndarray) -> np.ndarray:
        coalitions = np.asarray(coalitions, dtype=bool)
        rows = self.x[self.t] * coalitions[:, self.group_map]
        self.n_evals += coalitions.shape[0]
        frames = np.full(coalitions.shape[0], self.t)
        return frame_probabilities(self.model, self.x, frames, rows, self.target_class)


def _target(model: TrainedModel, x: FeatureSequence, target_class: int | None) -> int:
    if target_class is None:
        return int(np.argmax(model.predict_proba(x)))
    if not 0 <= target_class < model.C:
        raise InvalidArgumentError(f"target_class {target_class} out of range")
    return int(target_class)


def exact_shapley_frame(model: TrainedModel, x: FeatureSequence, t: int, group_map=None,
                        target_class: int | None = None) -> np.ndarray:
    gm = resolve_group_map(PER_GROUP, group_map)
    n = int(gm.max()) + 1
    if n > MAX_EXACT_PLAYERS:
        raise InvalidArgumentError(f"{n} players is too many for exact enumeration; use sampled_shapley")
    game = FrameGame(model, x, t, gm, _target(model, x, target_class))
    return exact_shapley_values(game, n)


def _map_meta(x: FeatureSequence, **extra) -> dict:
    return {"seq_id": x.seq_id, **extra}


def _exact_full(model, x, gm, target) -> np.ndarray:
    n = int(gm.max()) + 1
    if n > MAX_EXACT_PLAYERS:
        raise InvalidArgumentError(f"{n} players is too many for exact enumeration; use sampled_shapley")
    coal = all_coalitions(n)
    fmask = coal[:, gm]  # (2**n, 75)
    T = x.T
    rows = (x.data[:, None, :] * fmask[None]).reshape(T * fmask.shape[0], -1)
    frames = np.repeat(np.arange(T), fmask.shape[0])
    table = frame_probabilities(model, x.data, frames, rows, target).reshape(T, -1)
    return np.stack([shapley_from_table(table[t], n) for t in range(T)])


def sampled_shapley(model: TrainedModel, x: FeatureSequence, granularity: str = PER_GROUP,
                    n_permutations: int = 100, seed: int = 0, target_class: int | None = None,
                    group_map=None) -> AttributionMap:
    """Permutation-sampled Shapley map; frame ``t`` draws its orders from ``(seed, t)``."""
    if n_permutations < 1:
        raise InvalidArgumentError("n_permutations must be >= 1")
    gm = resolve_group_map(granularity, group_map)
    target = _target(model, x, target_class)
    n = int(gm.max()) + 1
    per_frame = []
    all_rows, all_frames = [], []
    for t in range(x.T):
        perms, members = _permutation_coalitions(n, n_permutations, np.random.default_rng([seed, t]))
        uniq, inverse = _unique_rows(members)
        per_frame.append((perms, inverse))
        all_rows.append(x.data[t] * uniq[:, gm])
        all_frames.append(np.full(uniq.shape[0], t))
    vals = frame_probabilities(model, x.data, np.concatenate(all_frames), np.concatenate(all_rows), target)
    out = np.empty((x.T, n))
    offset = 0
    for t, (perms, inverse) in enumerate(per_frame):
        k = all_rows[t].shape[0]
        chain = vals[offset:offset + k][inverse].reshape(n_permutations, n + 1)
        out[t] = _accumulate_permutations(perms, chain)
        offset += k
    return AttributionMap(out, granularity, gm if granularity == PER_GROUP else None, target, "shap",
                          _map_meta(x, mode="sampled", seed=seed, n_permutations=n_permutations))


def shapley_full(model: TrainedModel, x: FeatureSequence, granularity: str = PER_GROUP, mode: str = "exact",
                 n_permutations: int = 100, seed: int = 0, target_class: int | None = None,
                 group_map=None) -> AttributionMap:
    """Frame-wise Shapley map ``(T, G)`` for the target (default: predicted) class."""
    if mode == "sampled":
        return sampled_shapley(model, x, granularity, n_permutations, seed, target_class, group_map)
    if mode != "exact":
        raise InvalidArgumentError(f"unknown Shapley mode {mode!r}")
    gm = resolve_group_map(granularity, group_map)
    target = _target(model, x, target_class)
    values = _exact_full(model, x, gm, target)
    return AttributionMap(values, granularity, gm if granularity == PER_GROUP else None, target, "shap",
                          _map_meta(x, mode="exact"))


def gradient_saliency(model: TrainedModel, x: FeatureSequence, target_class: int | None = None) -> AttributionMap:
    """Input times gradient of the target-class logit, per feature."""
    target = _target(model, x, target_class)
    grad = input_gradient(model.params, x, target)
    return AttributionMap(x.data * grad, PER_FEATURE, None, target, "saliency", _map_meta(x))


def grad_cam_saliency(feature_maps: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Temporal Grad-CAM from ``(T, F)`` activations and their gradients.

    Channel weights are time-averaged gradients; the rectified weighted sum is
    scaled to a maximum of 1 when positive.
    """
    alpha = grads.mean(axis=0)
    cam = np.maximum(feature_maps @ alpha, 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def grad_cam(model: TrainedModel, x: FeatureSequence, target_class: int | None = None,
             group_map=None) -> AttributionMap:
    """Grad-CAM over the convolutional feature maps, broadcast to every body-part group."""
    if not isinstance(model.params, CnnParameters):
        raise WrongModelKindError("grad_cam needs a cnn model")
    target = _target(model, x, target_class)
    p = model.params
    Fm, _, _ = _cnn_forward_batch(p, x.data[None])
    Fm = Fm[0]
    # global average pooling makes d logit / d F[t, k] = W_out[c, k] / T
    grads = np.broadcast_to(p.W_out[target] / x.T, Fm.shape)
    cam = grad_cam_saliency(Fm, grads)
    gm = resolve_group_map(PER_GROUP, group_map)
    values = np.repeat(cam[:, None], int(gm.max()) + 1, axis=1)
    return AttributionMap(values, PER_GROUP, gm, target, "gradcam", _map_meta(x))


# --------------------------------------------------------------------------
# CSV: seq_id, method, t, group, value  (+ JSON sidecar)

ATTR_HEADER = ("seq_id", "method", "t", "group", "value")


def write_attribution_csv(path: str | Path, maps: Sequence[AttributionMap]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTR_HEADER)
        for A in maps:
            sid = A.meta.get("seq_id", 0)
            for t in range(A.T):
                for g in range(A.G):
                    w.writerow([sid, A.method, t, g, repr(float(A.values[t, g]))])
    sidecar = [{
        "seq_id": A.meta.get("seq_id", 0),
        "method": A.method,
        "granularity": A.granularity,
        "group_map": None if A.group_map is None else A.group_map.tolist(),
        "target_class": A.target_class,
        "seed": A.meta.get("seed"),
        "n_permutations": A.meta.get("n_permutations"),
        "meta": A.meta,
    } for A in maps]
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def read_attribution_csv(path: str | Path) -> list[AttributionMap]:
    path = Path(path)
    side = {(s["seq_id"], s["method"]): s for s in json.loads(path.with_suffix(".json").read_text())}
    cells: dict[tuple[int, str], dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if tuple(next(r)) != ATTR_HEADER:
            raise InvalidArgumentError(f"{path}: unexpected attribution CSV header")
        for sid, method, t, g, v in r:
            cells.setdefault((int(sid), method), {})[(int(t), int(g))] = float(v)
    out = []
    for key, d in cells.items():
        T = 1 + max(t for t, _ in d)
        G = 1 + max(g for _, g in d)
        vals = np.zeros((T, G))
        for (t, g), v in d.items():
            vals[t, g] = v
        s = side[key]
        out.append(AttributionMap(vals, s["granularity"], s["group_map"], s["target_class"], s["method"], s["meta"]))
    return out


def joint_of_feature() -> np.ndarray:
    return np.repeat(np.arange(N_JOINTS), 3)
