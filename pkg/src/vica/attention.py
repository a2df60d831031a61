"""Information-flow masks and attention over a [vision; text] token stream.

The token stream is always ordered vision prefix first, then system text,
then question text. A causal mask over that ordering already guarantees that
no vision query can see a text key (vision tokens precede all text), which is
what lets the text rows be computed against a rectangular key set: row ``i``
of a length-``q`` query block over ``kv`` keys may attend to key ``j`` iff
``j <= i + (kv - q)``, the bottom-right alignment of the causal diagonal.

Two evaluation paths are provided. :func:`masked_attention_oracle` builds the
boolean mask explicitly and is the reference for everything else.
:func:`asymmetric_cross_attention` never materializes a mask at all; it walks
query rows and slices the key prefix each row is permitted to see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, add_macs, matmul, row_softmax


@dataclass(frozen=True)
class TokenLayout:
    """Token counts for one sequence: vision prefix, then system + question text."""

    n_vision: int
    t_system: int
    t_question: int

    def __post_init__(self) -> None:
        for name in ("n_vision", "t_system", "t_question"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def n_text(self) -> int:
        return self.t_system + self.t_question

    @property
    def total(self) -> int:
        return self.n_vision + self.n_text


@dataclass(frozen=True)
class FlowMask:
    """Boolean query-by-key permission matrix."""

    allowed: np.ndarray

    def __post_init__(self) -> None:
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {allowed.shape}")
        object.__setattr__(self, "allowed", allowed)

    @property
    def q_len(self) -> int:
        return self.allowed.shape[0]

    @property
    def kv_len(self) -> int:
        return self.allowed.shape[1]


def bottom_right_causal_allowed(i: int, j: int, q_len: int, kv_len: int) -> bool:
    """May query row ``i`` (of ``q_len``) attend to key ``j`` (of ``kv_len``)?

    The last query row aligns with the last key; earlier query rows lose one
    key each, so the rule is ``j <= i + (kv_len - q_len)``.
    """
    if q_len > kv_len:
        raise ValueError(f"q_len {q_len} exceeds kv_len {kv_len}")
    if not (0 <= i < q_len and 0 <= j < kv_len):
        raise ValueError(f"({i}, {j}) outside mask of shape ({q_len}, {kv_len})")
    return j <= i + (kv_len - q_len)


def bottom_right_mask(q_len: int, kv_len: int) -> np.ndarray:
    """Boolean matrix form of the bottom-right causal rule."""
    if q_len > kv_len:
        raise ValueError(f"q_len {q_len} exceeds kv_len {kv_len}")
    offset = kv_len - q_len
    rows = np.arange(q_len)[:, None]
    cols = np.arange(kv_len)[None, :]
    return cols <= rows + offset


def build_baseline_mask(layout: TokenLayout) -> FlowMask:
    """Square causal mask over the full [vision; text] stream.

    Because vision tokens occupy the prefix, the causal rule alone forces the
    text-key block of every vision query row to be all False.
    """
    total = layout.total
    return FlowMask(bottom_right_mask(total, total))


def build_cross_mask(
    layout: TokenLayout,
    include_vision: bool = True,
    system_reads_vision: bool = True,
) -> FlowMask:
    """Mask for text queries over [vision keys; text keys].

    Equals the last ``n_text`` rows of the baseline mask: every text row sees
    the whole vision prefix plus the causal text prefix. With
    ``include_vision=False`` the key set is text only (plain causal).
    ``system_reads_vision=False`` additionally blinds the system-prompt rows
    to vision keys, matching eager attention implementations that mask the
    system prompt away from the image.
    """
    t = layout.n_text
    if not include_vision:
        return FlowMask(bottom_right_mask(t, t))
    allowed = bottom_right_mask(t, layout.n_vision + t)
    if not system_reads_vision:
        allowed = allowed.copy()
        allowed[: layout.t_system, : layout.n_vision] = False
    return FlowMask(allowed)


def split_heads(x: np.ndarray, n_heads: int) -> list[np.ndarray]:
    """Column-split (rows, d) into per-head (rows, d / n_heads) views."""
    d = x.shape[1]
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    return [x[:, h * (d // n_heads) : (h + 1) * (d // n_heads)] for h in range(n_heads)]


def masked_attention_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: FlowMask,
    n_heads: int,
) -> np.ndarray:
    """Reference multi-head attention with an explicit permission mask.

    Per head: softmax(Q K^T / sqrt(d_head)) V with masked positions excluded
    from the softmax reductions. Head outputs are concatenated; any output
    projection is the caller's business.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(f"q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if mask.allowed.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(
            f"mask {mask.allowed.shape} does not cover q {q.shape[0]} by kv {k.shape[0]}"
        )
    d_head = q.shape[1] // n_heads
    scale = 1.0 / math.sqrt(d_head)
    out = np.empty_like(q)
    for q_h, k_h, v_h, o_h in zip(
        split_heads(q, n_heads),
        split_heads(k, n_heads),
        split_heads(v, n_heads),
        split_heads(out, n_heads),
    ):
        scores = matmul(q_h, k_h.T)
        weights = row_softmax(scores, mask.allowed, scale)
        o_h[:] = matmul(weights, v_h)
    return out


def attention_weights(
    q: np.ndarray,
    k: np.ndarray,
    mask: FlowMask,
    n_heads: int,
) -> np.ndarray:
    """Head-averaged attention-weight matrix under ``mask`` (no value mix)."""
    d_head = q.shape[1] // n_heads
    scale = 1.0 / math.sqrt(d_head)
    acc = np.zeros(mask.allowed.shape)
    for q_h, k_h in zip(split_heads(q, n_heads), split_heads(k, n_heads)):
        scores = matmul(q_h, k_h.T)
        acc += row_softmax(scores, mask.allowed, scale)
    return acc / n_heads


def asymmetric_cross_attention(
    q_text: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    n_heads: int,
) -> np.ndarray:
    """Bottom-right causal attention without materializing any mask.

    Query row ``i`` may see exactly the key prefix ``k_all[: offset + i + 1]``
    where ``offset = kv_len - q_len``, so each row is evaluated against its
    prefix slice and nothing is ever masked out. Matches
    :func:`masked_attention_oracle` under :func:`bottom_right_mask`.
    """
    q_text = np.asarray(q_text)
    k_all = np.asarray(k_all)
    v_all = np.asarray(v_all)
    t, d = q_text.shape
    kv_len = k_all.shape[0]
    if t > kv_len:
        raise ShapeError(f"q_len {t} exceeds kv_len {kv_len}")
    if k_all.shape != v_all.shape or k_all.shape[1] != d:
        raise ShapeError(f"k {k_all.shape}, v {v_all.shape} inconsistent with q width {d}")
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    scale = 1.0 / math.sqrt(d_head)
    offset = kv_len - t

    out = np.empty_like(q_text)
    for i in range(t):
        limit = offset + i + 1
        q_row = q_text[i].reshape(n_heads, d_head)            # (H, dh)
        k_pre = k_all[:limit].reshape(limit, n_heads, d_head)  # (L, H, dh)
        v_pre = v_all[:limit].reshape(limit, n_heads, d_head)
        scores = np.einsum("hd,lhd->hl", q_row, k_pre) * scale
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[i] = np.einsum("hl,lhd->hd", weights, v_pre).reshape(d)
        add_macs(2 * limit * d)  # score row + value mix, summed over heads
    return out
