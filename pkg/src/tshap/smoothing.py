"""Post-hoc temporal smoothing of attribution maps (T-SHAP).

Two linear filters act along the time axis of a ``(T, G)`` map, column by
column: a symmetric moving average of half-width ``w`` and a causal
exponentially weighted moving average.  Neither touches the model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attribution import AttributionMap
from .errors import InvalidArgumentError

TRUNCATE = "truncate_renormalize"
MASS_PRESERVING = "mass_preserving"


@dataclass(frozen=True)
class SmoothingConfig:
    kind: str = "uniform"
    w: int = 2
    alpha: float = 0.5
    boundary: str = TRUNCATE

    def __post_init__(self):
        if self.kind not in ("uniform", "ewma"):
            raise InvalidArgumentError(f"unknown smoothing kind {self.kind!r}")
        if self.kind == "uniform" and self.w < 0:
            raise InvalidArgumentError("w must be >= 0")
        if self.kind == "ewma" and not 0.0 < self.alpha <= 1.0:
            raise InvalidArgumentError("alpha must lie in (0, 1]")
        if self.boundary not in (TRUNCATE, MASS_PRESERVING):
            raise InvalidArgumentError(f"unknown boundary mode {self.boundary!r}")

    @property
    def tag(self) -> str:
        if self.kind == "uniform":
            suffix = "" if self.boundary == TRUNCATE else ",mass"
            return f"tshap[w={self.w}{suffix}]"
        return f"tshap[ewma,alpha={self.alpha:g}]"


def build_operator(T: int, w: int, boundary: str = TRUNCATE) -> np.ndarray:
    """Banded ``(T, T)`` averaging matrix; ``operator @ values`` smooths the columns.

    In ``mass_preserving`` mode every column is rescaled to sum to 1, so the
    rows near the ends no longer sum to 1.
    """
    if T < 1 or w < 0:
        raise InvalidArgumentError("need T >= 1 and w >= 0")
    if boundary not in (TRUNCATE, MASS_PRESERVING):
        raise InvalidArgumentError(f"unknown boundary mode {boundary!r}")
    idx = np.arange(T)
    band = np.abs(idx[:, None] - idx[None, :]) <= w
    op = band / band.sum(axis=1, keepdims=True)
    if boundary == MASS_PRESERVING:
        op = op / op.sum(axis=0, keepdims=True)
    return op


def uniform_smooth(A: AttributionMap, w: int, boundary: str = TRUNCATE) -> AttributionMap:
    """Average each frame with the valid frames within ``w`` steps on either side."""
    if w < 0:
        raise InvalidArgumentError("w must be >= 0")
    if boundary == TRUNCATE:
        # direct windowed sums; kept independent of build_operator
        values = np.empty_like(A.values)
        T = A.values.shape[0]
        for t in range(T):
            window = A.values[max(0, t - w):min(T, t + w + 1)]
            values[t] = window.sum(axis=0) / window.shape[0]
    else:
        values = build_operator(A.values.shape[0], w, boundary) @ A.values
    cfg = SmoothingConfig("uniform", w=w, boundary=boundary)
    return replace(A, values=values, method=_tagged(A.method, cfg))


def ewma_smooth(A: AttributionMap, alpha: float) -> AttributionMap:
    """Causal EWMA: first frame kept, then ``alpha * A_t + (1 - alpha) * previous``."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1], got {alpha}")
    src = A.values
    out = np.empty_like(src)
    out[0] = src[0]
    for t in range(1, src.shape[0]):
        out[t] = alpha * src[t] + (1.0 - alpha) * out[t - 1]
    return replace(A, values=out, method=_tagged(A.method, SmoothingConfig("ewma", alpha=alpha)))


def smooth(A: AttributionMap, cfg: SmoothingConfig | None) -> AttributionMap:
    """Apply ``cfg`` (``None`` returns the map unchanged)."""
    if cfg is None:
        return A
    if cfg.kind == "uniform":
        return uniform_smooth(A, cfg.w, cfg.boundary)
    return ewma_smooth(A, cfg.alpha)


def _tagged(method: str, cfg: SmoothingConfig) -> str:
    base = "" if method in ("shap", "") else f"{method}+"
    return base + cfg.tag

