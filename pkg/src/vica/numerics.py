"""Dense matrix kernels: matmul, masked row softmax, RMS norm, gated FFN.

Everything here operates on plain 2-D numpy arrays (row-major, float64 by
default; float32 is accepted for benchmark runs). Masked softmax uses
exclusion-from-reduction semantics, so masked positions come out as exact
zeros rather than tiny exponentials.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging

import numpy as np

logger = logging.getLogger(__name__)

# RMS normalization epsilon. Fixed, not configurable.
RMS_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MacCounter:
    """Tallies multiply-accumulate operations performed by counted kernels.

    Not safe for concurrent mutation; give each worker its own counter.
    """

    __slots__ = ("macs",)

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_ACTIVE_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "vica_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs(counter: MacCounter | None):
    """Route MACs from kernels in this context into ``counter``."""
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def add_macs(n: int) -> None:
    """Credit ``n`` MACs to the active counter, if any.

    Kernels that contract tensors without going through :func:`matmul`
    (e.g. the mask-free attention path) call this with the exact count
    an equivalent matmul decomposition would report.
    """
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-D matrices with explicit shape validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def row_softmax(
    scores: np.ndarray,
    allowed: np.ndarray | None = None,
    scale: float = 1.0,
    empty_rows: list[int] | None = None,
) -> np.ndarray:
    """Row-wise softmax of ``scale * scores`` over the permitted entries.

    ``allowed`` is a boolean matrix of the same shape; disallowed entries are
    excluded from the max/sum reductions entirely and come back as exact 0.0.
    A row with no permitted entries yields an all-zero row; its index is
    appended to ``empty_rows`` when a list is supplied, and logged otherwise.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2-D score matrix, got {scores.shape}")
    if allowed is None:
        allowed = np.ones(scores.shape, dtype=bool)
    else:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != scores.shape:
            raise ShapeError(
                f"mask shape {allowed.shape} does not match scores {scores.shape}"
            )

    shifted = np.where(allowed, scores * scale, -np.inf)
    empty = ~allowed.any(axis=1)
    row_max = np.max(np.where(allowed, shifted, -np.inf), axis=1, initial=-np.inf)
    row_max = np.where(empty, 0.0, row_max)  # keep -inf - -inf = nan out of empty rows
    weights = np.exp(shifted - row_max[:, None])  # masked entries: exp(-inf) == 0.0
    denom = weights.sum(axis=1)
    denom = np.where(empty, 1.0, denom)
    probs = weights / denom[:, None]
    if empty.any():
        probs[empty] = 0.0
        idx = np.flatnonzero(empty)
        if empty_rows is not None:
            empty_rows.extend(int(i) for i in idx)
        else:
            logger.debug("row_softmax: all-masked rows %s", idx.tolist())
    return probs


def rms_norm(h: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Root-mean-square normalization of each row, scaled by ``gain``."""
    h = np.asarray(h)
    gain = np.asarray(gain)
    if h.ndim != 2:
        raise ShapeError(f"rms_norm needs a 2-D input, got {h.shape}")
    if gain.shape != (h.shape[1],):
        raise ShapeError(f"gain shape {gain.shape} does not match width {h.shape[1]}")
    ms = np.mean(np.square(h), axis=1, keepdims=True)
    return h / np.sqrt(ms + RMS_EPS) * gain


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), evaluated without overflow for large |x|."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def gated_ffn(
    h: np.ndarray,
    w_gate: np.ndarray,
    w_up: np.ndarray,
    w_down: np.ndarray,
) -> np.ndarray:
    """Gated feed-forward block: (silu(h W_gate) * (h W_up)) W_down."""
    w_gate = np.asarray(w_gate)
    w_up = np.asarray(w_up)
    w_down = np.asarray(w_down)
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"gate {w_gate.shape} and up {w_up.shape} must match")
    if w_down.shape != (w_gate.shape[1], w_gate.shape[0]):
        raise ShapeError(
            f"down projection {w_down.shape} does not invert {w_gate.shape}"
        )
    gate = silu(matmul(h, w_gate))
    up = matmul(h, w_up)
    return matmul(gate * up, w_down)
