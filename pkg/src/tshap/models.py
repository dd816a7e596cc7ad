"""Single-layer LSTM and 1D-CNN sequence classifiers with hand-written gradients.

Both models are evaluated on batches shaped ``(B, T, d)`` in float64.  The
LSTM uses the PyTorch gate order (input, forget, cell, output) and separate
input/recurrent bias vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSequence, N_FEATURES, to_binary_label
from .errors import InvalidArgumentError, NumericOverflowError, TrainingFailureError

CHECKPOINT_FORMAT = "tshap-checkpoint/1"


@dataclass
class ModelConfig:
    d: int = N_FEATURES
    h: int = 128
    C: int = 4
    T: int = 100
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    binary_mode: bool = False
    kind: str = "lstm"
    kernel_width: int = 5
    channels: int = 32
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("d", "h", "C", "T", "batch_size", "epochs", "channels"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.kind not in ("lstm", "cnn"):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise InvalidArgumentError("kernel_width must be odd")
        if self.binary_mode and self.C != 2:
            raise InvalidArgumentError("binary_mode requires C = 2")


# --------------------------------------------------------------------------
# parameter containers


class _Params:
    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]):
        return cls(**{f.name: np.array(arrays[f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self):
        return self.from_arrays(self.arrays())

    def zeros_like(self):
        return self.from_arrays({k: np.zeros_like(v) for k, v in self.arrays().items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays().values())


@dataclass
class LstmParameters(_Params):
    W: np.ndarray  # (4h, d)
    U: np.ndarray  # (4h, h)
    b_i: np.ndarray  # (4h,)
    b_r: np.ndarray  # (4h,)
    W_out: np.ndarray  # (C, h)
    b_out: np.ndarray  # (C,)

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def h(self) -> int:
        return self.U.shape[1]

    @property
    def C(self) -> int:
        return self.W_out.shape[0]

    @classmethod
    def zeros(cls, d: int, h: int, C: int) -> "LstmParameters":
        return cls(np.zeros((4 * h, d)), np.zeros((4 * h, h)), np.zeros(4 * h), np.zeros(4 * h),
                   np.zeros((C, h)), np.zeros(C))

    @classmethod
    def init(cls, d: int, h: int, C: int, rng: np.random.Generator) -> "LstmParameters":
        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        return cls(u((4 * h, d), d), u((4 * h, h), h), u(4 * h, h), u(4 * h, h), u((C, h), h), u(C, h))


@dataclass
class CnnParameters(_Params):
    K: np.ndarray  # (F, k, d) temporal kernels
    b_conv: np.ndarray  # (F,)
    W_out: np.ndarray  # (C, F)
    b_out: np.ndarray  # (C,)

    @property
    def d(self) -> int:
        return self.K.shape[2]

    @property
    def kernel_width(self) -> int:
        return self.K.shape[1]

    @property
    def F(self) -> int:
        return self.K.shape[0]

    @property
    def C(self) -> int:
        return self.W_out.shape[0]

    def __post_init__(self):
        if self.K.shape[1] % 2 == 0:
            raise InvalidArgumentError("kernel width must be odd")

    @classmethod
    def zeros(cls, d: int, k: int, F: int, C: int) -> "CnnParameters":
        return cls(np.zeros((F, k, d)), np.zeros(F), np.zeros((C, F)), np.zeros(C))

    @classmethod
    def init(cls, d: int, k: int, F: int, C: int, rng: np.random.Generator) -> "CnnParameters":
        bc = 1.0 / math.sqrt(k * d)
        bd = 1.0 / math.sqrt(F)
        return cls(rng.uniform(-bc, bc, (F, k, d)), rng.uniform(-bc, bc, F),
                   rng.uniform(-bd, bd, (C, F)), rng.uniform(-bd, bd, C))


def param_count(d: int, h: int, C: int) -> tuple[int, int]:
    """(LSTM, dense) trainable parameter counts with the dual-bias convention."""
    if min(d, h, C) < 1:
        raise InvalidArgumentError("d, h and C must be >= 1")
    return 4 * (d * h + h * h + 2 * h), (h + 1) * C


def cost_model(arch: str, T: int, d: int, h: int = 1, E: int = 1) -> int:
    """Leading-order operation count for one layer of the given architecture."""
    if min(T, d, h, E) < 1:
        raise InvalidArgumentError("all cost-model arguments must be >= 1")
    if arch == "lstm":
        return T * (d * h + h * h)
    if arch == "transformer":
        return T * T * d
    if arch == "gcn":
        return E * d
    raise InvalidArgumentError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# numerics


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(name)


def _as_batch(X, d: int) -> np.ndarray:
    if isinstance(X, FeatureSequence):
        X = X.data
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != d:
        raise InvalidArgumentError(f"expected input (B, T, {d}), got {X.shape}")
    return X


# --------------------------------------------------------------------------
# LSTM


def lstm_step(p: LstmParameters, z_in: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One recurrence step given the precomputed input projection ``x W^T + b``."""
    n = p.h
    Z = z_in + h @ p.U.T
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, evaluated in place on the i, f, o blocks
    Z[:, :2 * n] *= 0.5
    Z[:, 3 * n:] *= 0.5
    np.tanh(Z, out=Z)
    Z[:, :2 * n] += 1.0
    Z[:, :2 * n] *= 0.5
    Z[:, 3 * n:] += 1.0
    Z[:, 3 * n:] *= 0.5
    c = Z[:, n:2 * n] * c + Z[:, :n] * Z[:, 2 * n:3 * n]
    h = Z[:, 3 * n:] * np.tanh(c)
    return h, c


def _lstm_forward_batch(p: LstmParameters, X: np.ndarray, keep_cache: bool = False):
    B, T, _ = X.shape
    n = p.h
    XW = X @ p.W.T + (p.b_i + p.b_r)
    h = np.zeros((B, n))
    c = np.zeros((B, n))
    H = np.empty((B, T, n))
    cache = None
    if keep_cache:
        cache = {k: np.empty((B, T, n)) for k in ("i", "f", "g", "o", "c", "tc")}
    for t in range(T):
        Z = XW[:, t] + h @ p.U.T
        i = _sigmoid(Z[:, :n])
        f = _sigmoid(Z[:, n:2 * n])
        g = np.tanh(Z[:, 2 * n:3 * n])
        o = _sigmoid(Z[:, 3 * n:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        H[:, t] = h
        if keep_cache:
            for k, v in (("i", i), ("f", f), ("g", g), ("o", o), ("c", c), ("tc", tc)):
                cache[k][:, t] = v
    _check_finite("hidden_states", H)
    logits = h @ p.W_out.T + p.b_out
    _check_finite("logits", logits)
    if keep_cache:
        cache.update(X=X, H=H)
    return H, logits, cache


def _lstm_backward(p: LstmParameters, cache: dict, dlogits: np.ndarray):
    X, H = cache["X"], cache["H"]
    B, T, _ = X.shape
    n = p.h
    g_W_out = dlogits.T @ H[:, -1]
    g_b_out = dlogits.sum(axis=0)
    dh = dlogits @ p.W_out
    dc = np.zeros((B, n))
    dZ_all = np.empty((B, T, 4 * n))
    g_U = np.zeros_like(p.U)
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache["i"][:, t], cache["f"][:, t], cache["g"][:, t], cache["o"][:, t]
        tc = cache["tc"][:, t]
        c_prev = cache["c"][:, t - 1] if t > 0 else np.zeros((B, n))
        h_prev = H[:, t - 1] if t > 0 else np.zeros((B, n))
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dZ = dZ_all[:, t]
        dZ[:, :n] = dc * g * i * (1.0 - i)
        dZ[:, n:2 * n] = dc * c_prev * f * (1.0 - f)
        dZ[:, 2 * n:3 * n] = dc * i * (1.0 - g * g)
        dZ[:, 3 * n:] = do * o * (1.0 - o)
        g_U += dZ.T @ h_prev
        dh = dZ @ p.U
        dc = dc * f
    flat = dZ_all.reshape(B * T, 4 * n)
    g_W = flat.T @ X.reshape(B * T, -1)
    g_b = flat.sum(axis=0)
    grads = LstmParameters(g_W, g_U, g_b, g_b.copy(), g_W_out, g_b_out)
    dX = dZ_all @ p.W
    return grads, dX


def lstm_forward(params: LstmParameters, x) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states ``(T, h)`` and class probabilities ``(C,)`` for one sequence."""
    X = _as_batch(x, params.d)
    if X.shape[0] != 1:
        raise InvalidArgumentError("lstm_forward takes a single sequence")
    H, logits, _ = _lstm_forward_batch(params, X)
    return H[0], softmax(logits)[0]


# --------------------------------------------------------------------------
# CNN


def _windows(X: np.ndarray, k: int) -> np.ndarray:
    """(B, T, k*d) zero-padded temporal windows centered on each frame."""
    B, T, d = X.shape
    r = k // 2
    Xp = np.concatenate([np.zeros((B, r, d)), X, np.zeros((B, r, d))], axis=1)
    return np.concatenate([Xp[:, j:j + T] for j in range(k)], axis=2)


def _cnn_forward_batch(p: CnnParameters, X: np.ndarray, keep_cache: bool = False):
    k = p.kernel_width
    Xw = _windows(X, k)
    pre = Xw @ p.K.reshape(p.F, -1).T + p.b_conv
    Fm = np.maximum(pre, 0.0)
    pooled = Fm.mean(axis=1)
    logits = pooled @ p.W_out.T + p.b_out
    _check_finite("feature_maps", Fm)
    _check_finite("logits", logits)
    cache = {"X": X, "Xw": Xw, "pre": pre, "Fm": Fm, "pooled": pooled} if keep_cache else None
    return Fm, logits, cache


def _cnn_backward(p: CnnParameters, cache: dict, dlogits: np.ndarray):
    X, Xw, pre, pooled = cache["X"], cache["Xw"], cache["pre"], cache["pooled"]
    B, T, d = X.shape
    k = p.kernel_width
    g_W_out = dlogits.T @ pooled
    g_b_out = dlogits.sum(axis=0)
    dFm = np.repeat((dlogits @ p.W_out)[:, None, :] / T, T, axis=1)
    dpre = dFm * (pre > 0)
    flat = dpre.reshape(B * T, p.F)
    g_K = (flat.T @ Xw.reshape(B * T, -1)).reshape(p.K.shape)
    g_b_conv = flat.sum(axis=0)
    dXw = (dpre @ p.K.reshape(p.F, -1)).reshape(B, T, k, d)
    r = k // 2
    dXp = np.zeros((B, T + 2 * r, d))
    for j in range(k):
        dXp[:, j:j + T] += dXw[:, :, j]
    return CnnParameters(g_K, g_b_conv, g_W_out, g_b_out), dXp[:, r:r + T]


def cnn_forward(params: CnnParameters, x) -> tuple[np.ndarray, np.ndarray]:
    """Post-ReLU feature maps ``(T, F)`` and class probabilities ``(C,)``."""
    X = _as_batch(x, params.d)
    if X.shape[0] != 1:
        raise InvalidArgumentError("cnn_forward takes a single sequence")
    Fm, logits, _ = _cnn_forward_batch(params, X)
    return Fm[0], softmax(logits)[0]


# --------------------------------------------------------------------------
# shared forward/backward dispatch


def forward_logits(params, X: np.ndarray) -> np.ndarray:
    if isinstance(params, LstmParameters):
        return _lstm_forward_batch(params, X)[1]
    return _cnn_forward_batch(params, X)[1]


def _forward_backward(params, X: np.ndarray, dlogits_fn):
    if isinstance(params, LstmParameters):
        _, logits, cache = _lstm_forward_batch(params, X, keep_cache=True)
        return logits, *_lstm_backward(params, cache, dlogits_fn(logits))
    _, logits, cache = _cnn_forward_batch(params, X, keep_cache=True)
    return logits, *_cnn_backward(params, cache, dlogits_fn(logits))


def loss_and_grad(params, batch, labels=None):
    """Mean cross-entropy over the batch and its exact gradient.

    ``batch`` is a list of FeatureSequence (labels taken from them unless
    given) or an array ``(B, T, d)`` with explicit ``labels``.
    """
    if isinstance(batch, np.ndarray):
        X = _as_batch(batch, params.d)
    else:
        if len(batch) == 0:
            raise InvalidArgumentError("batch must be non-empty")
        X = np.stack([s.data for s in batch])
        if labels is None:
            labels = [s.label for s in batch]
    if X.shape[0] == 0:
        raise InvalidArgumentError("batch must be non-empty")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (X.shape[0],) or y.min() < 0 or y.max() >= params.C:
        raise InvalidArgumentError("labels must be one per sequence within [0, C)")
    B = X.shape[0]
    logp_store = {}

    def dlogits(logits):
        logp = log_softmax(logits)
        logp_store["logp"] = logp
        onehot = np.zeros_like(logits)
        onehot[np.arange(B), y] = 1.0
        return (np.exp(logp) - onehot) / B

    _, grads, _ = _forward_backward(params, X, dlogits)
    loss = float(-logp_store["logp"][np.arange(B), y].mean())
    if not math.isfinite(loss):
        raise NumericOverflowError("loss")
    return loss, grads


def input_gradient(params, x, target_class: int) -> np.ndarray:
    """d(target logit)/d(input) for one sequence, shape ``(T, d)``."""
    X = _as_batch(x, params.d)

    def dlogits(logits):
        g = np.zeros_like(logits)
        g[:, target_class] = 1.0
        return g

    _, _, dX = _forward_backward(params, X, dlogits)
    return dX[0]


# --------------------------------------------------------------------------
# trained model + training loop


@dataclass
class TrainedModel:
    kind: str
    params: LstmParameters | CnnParameters
    config: ModelConfig
    history: dict = field(default_factory=dict)

    def logits(self, X) -> np.ndarray:
        return forward_logits(self.params, _as_batch(X, self.params.d))

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, ``(B, C)`` for a batch or ``(C,)`` for one sequence."""
        single = isinstance(X, FeatureSequence) or np.ndim(X) == 2
        P = softmax(self.logits(X))
        return P[0] if single else P

    @property
    def C(self) -> int:
        return self.params.C


def predict(model: TrainedModel, x) -> tuple[int, np.ndarray]:
    """Argmax label (lowest index wins ties) and the probability vector."""
    probs = model.predict_proba(x)
    return int(np.argmax(probs)), probs


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=-1)


def _init_params(cfg: ModelConfig, rng: np.random.Generator):
    if cfg.kind == "lstm":
        return LstmParameters.init(cfg.d, cfg.h, cfg.C, rng)
    return CnnParameters.init(cfg.d, cfg.kernel_width, cfg.channels, cfg.C, rng)


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        g_all = grads.arrays()
        for name, p in params.arrays().items():
            g = g_all[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)


def clip_global_norm(grads, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays().values()))
    if norm > max_norm:
        for g in grads.arrays().values():
            g *= max_norm / norm
    return norm


def _labels_for(sequences: Sequence[FeatureSequence], binary: bool) -> np.ndarray:
    return np.array([to_binary_label(s.label) if binary else s.label for s in sequences], dtype=np.int64)


def train(dataset: Sequence[FeatureSequence], cfg: ModelConfig) -> TrainedModel:
    """Minibatch Adam on mean cross-entropy; deterministic given ``cfg.seed``."""
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset must be non-empty")
    X = np.stack([s.data for s in dataset])
    if X.shape[2] != cfg.d:
        raise InvalidArgumentError(f"dataset feature dim {X.shape[2]} != config d {cfg.d}")
    y = _labels_for(dataset, cfg.binary_mode)
    if y.min() < 0 or y.max() >= cfg.C:
        raise InvalidArgumentError("labels must lie in [0, C)")
    params = _init_params(cfg, np.random.default_rng([cfg.seed, 0]))
    shuffler = np.random.default_rng([cfg.seed, 1])
    opt = Adam(params, cfg.learning_rate)
    N = X.shape[0]

    initial_loss, _ = loss_and_grad(params, X, y)
    history = {"initial_loss": initial_loss, "loss": [], "accuracy": []}
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(N)
        tot_loss = 0.0
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, N, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    loss, grads = loss_and_grad(params, X[idx], y[idx])
                    tot_loss += loss * idx.size
                    clip_global_norm(grads, cfg.clip_norm)
                    opt.step(params, grads)
                train_pred = argmax_labels(forward_logits(params, X))
        except NumericOverflowError as exc:
            raise TrainingFailureError(epoch, str(exc)) from exc
        epoch_loss = tot_loss / N
        if not math.isfinite(epoch_loss):
            raise TrainingFailureError(epoch, "non-finite epoch loss")
        history["loss"].append(epoch_loss)
        history["accuracy"].append(int(np.sum(train_pred == y)) / N)
    return TrainedModel(cfg.kind, params, cfg, history)


def evaluate_accuracy(model: TrainedModel, sequences: Sequence[FeatureSequence]) -> float:
    X = np.stack([s.data for s in sequences])
    y = _labels_for(sequences, model.config.binary_mode)
    return float(np.mean(argmax_labels(model.logits(X)) == y))


# --------------------------------------------------------------------------
# checkpoints: JSON with config, flat row-major parameter arrays and history


def model_to_dict(model: TrainedModel) -> dict:
    arrays = model.params.arrays()
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "config": asdict(model.config),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "params": {k: v.ravel(order="C").tolist() for k, v in arrays.items()},
        "history": model.history,
    }


def model_from_dict(obj: dict) -> TrainedModel:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"unsupported checkpoint format {obj.get('format')!r}")
    arrays = {k: np.array(v, dtype=np.float64).reshape(obj["shapes"][k]) for k, v in obj["params"].items()}
    cls = LstmParameters if obj["kind"] == "lstm" else CnnParameters
    return TrainedModel(obj["kind"], cls.from_arrays(arrays), ModelConfig(**obj["config"]), obj["history"])


def save_model(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
