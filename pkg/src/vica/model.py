"""Toy decoder engine with per-layer vision policies.

The engine runs a pre-norm decoder over a [vision; text] stream, where each
layer carries a policy mode:

* ``BASELINE``:   full joint self-attention; vision rows are updated.
* ``FREEZE_VIS``: vision rows are never written (no attention or FFN
                  residuals land on them) but their keys/values are still
                  offered to the text queries.
* ``VICA_CROSS``: same frozen behavior; the name marks the layers that
                  keep vision KV in a sparse schedule (everything else is
                  ``TEXT_ONLY``).
* ``TEXT_ONLY``:  vision is neither written nor read; the layer is a plain
                  causal text block and does not project vision KV at all.

Because frozen vision rows never change, their per-layer keys/values depend
only on the input vision embeddings and the layer weights. That is what
:func:`precompute_visual_kv` exploits, and :func:`forward_vica_fast` consumes:
a text-only pipeline that attends into precomputed vision KV without ever
materializing vision rows in its hidden state.

:func:`forward_baseline_masked_oracle` is the referee for all of this. It
always runs the full joint computation and reproduces the policy modes purely
by disabling write/read paths (zeroed residual slices, masked attention
blocks), which is the semantic claim the equivalence suite checks.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .attention import (
    FlowMask,
    TokenLayout,
    asymmetric_cross_attention,
    attention_weights,
    bottom_right_mask,
    build_cross_mask,
    masked_attention_oracle,
)
from .numerics import ShapeError, count_macs, gated_ffn, matmul, rms_norm
from .pruning import relocate_drop_events, resolve_schedule, select_kept_tokens

logger = logging.getLogger(__name__)

MAGIC = b"VICA1"


class ConfigError(ValueError):
    """Raised for invalid configurations (bad schedules, mismatched inputs)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    """Transformer geometry plus token-stream limits."""

    n_layers: int
    n_heads: int
    d_model: int
    d_ffn: int
    vocab: int = 256
    max_seq: int = 704

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_ffn", "vocab", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


#: Published backbone geometries this engine mirrors at toy scale.
MODEL_PRESETS: dict[str, ModelConfig] = {
    "llava3b": ModelConfig(n_layers=32, n_heads=32, d_model=2560, d_ffn=6912),
    "llava7b": ModelConfig(n_layers=32, n_heads=32, d_model=4096, d_ffn=11008),
    "llava13b": ModelConfig(n_layers=40, n_heads=40, d_model=5120, d_ffn=13824),
}


class PolicyMode(str, Enum):
    BASELINE = "baseline"
    FREEZE_VIS = "freeze_vis"
    VICA_CROSS = "vica_cross"
    TEXT_ONLY = "text_only"


#: Modes whose layers hold vision keys/values (read side).
KV_MODES = (PolicyMode.BASELINE, PolicyMode.FREEZE_VIS, PolicyMode.VICA_CROSS)
#: Modes whose vision KV is frozen and therefore precomputable.
FROZEN_KV_MODES = (PolicyMode.FREEZE_VIS, PolicyMode.VICA_CROSS)


@dataclass(frozen=True)
class LayerPolicy:
    """Mode for one layer, plus an optional vision-token drop at layer entry."""

    mode: PolicyMode
    drop_keep: float | None = None

    def __post_init__(self) -> None:
        if self.drop_keep is not None and not (0.0 <= self.drop_keep <= 1.0):
            raise ConfigError(f"drop_keep {self.drop_keep} outside [0, 1]")


@dataclass(frozen=True)
class PolicySchedule:
    """Per-layer policies for a whole model."""

    layers: tuple[LayerPolicy, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def modes(self) -> list[PolicyMode]:
        return [p.mode for p in self.layers]

    def vision_kv_layers(self) -> list[int]:
        """Layers whose attention offers vision keys/values to text."""
        return [l for l, p in enumerate(self.layers) if p.mode in KV_MODES]

    def frozen_vision_layers(self) -> list[int]:
        """Layers with frozen, precomputable vision KV."""
        return [l for l, p in enumerate(self.layers) if p.mode in FROZEN_KV_MODES]

    def drop_events(self) -> dict[int, float]:
        return {
            l: p.drop_keep for l, p in enumerate(self.layers) if p.drop_keep is not None
        }

    def has_drops(self) -> bool:
        return any(p.drop_keep is not None for p in self.layers)

    def with_drops(self, events: dict[int, float]) -> "PolicySchedule":
        for layer in events:
            if not (0 <= layer < self.n_layers):
                raise ConfigError(f"drop event at layer {layer} outside schedule")
        layers = tuple(
            replace(p, drop_keep=events.get(l, p.drop_keep))
            for l, p in enumerate(self.layers)
        )
        return PolicySchedule(layers)

    # -- constructors

    @staticmethod
    def uniform(n_layers: int, mode: PolicyMode) -> "PolicySchedule":
        return PolicySchedule(tuple(LayerPolicy(mode) for _ in range(n_layers)))

    @staticmethod
    def baseline(n_layers: int) -> "PolicySchedule":
        return PolicySchedule.uniform(n_layers, PolicyMode.BASELINE)

    @staticmethod
    def freeze_vis(n_layers: int) -> "PolicySchedule":
        return PolicySchedule.uniform(n_layers, PolicyMode.FREEZE_VIS)

    @staticmethod
    def text_only(n_layers: int) -> "PolicySchedule":
        return PolicySchedule.uniform(n_layers, PolicyMode.TEXT_ONLY)

    @staticmethod
    def sparse_cross(n_layers: int, retained) -> "PolicySchedule":
        """Frozen vision KV at ``retained`` layers, text-only elsewhere."""
        retained = set(retained)
        bad = [l for l in retained if not (0 <= l < n_layers)]
        if bad:
            raise ConfigError(f"retained layers {bad} outside 0..{n_layers - 1}")
        return PolicySchedule(
            tuple(
                LayerPolicy(
                    PolicyMode.VICA_CROSS if l in retained else PolicyMode.TEXT_ONLY
                )
                for l in range(n_layers)
            )
        )


#: Retained-layer sets for the sparse cross-attention schedules, keyed by the
#: backbone they were selected for.
RETAINED_LAYERS: dict[str, tuple[int, set[int]]] = {
    "vica3b": (32, {0, 1, 14, 15, 18, 19, 21, 22, 23}),
    "vica7b": (32, {0, 1, 7, 8, 9, 10, 11, 14}),
    "vica13b": (40, {0, 6, 8, 9, 10, 13, 14, 16}),
}

#: Keep-fraction drop events layered on top of the sparse schedules.
PDROP_EVENTS: dict[str, dict[int, float]] = {
    "vica3b": {1: 0.75, 14: 0.75, 18: 0.75},
    "vica7b": {1: 0.75, 7: 0.75, 10: 0.75},
    "vica13b": {6: 0.75, 9: 0.75, 13: 0.75},
}


def pdrop_baseline_events(n_layers: int) -> dict[int, float]:
    """Halve the remaining vision tokens at the quarter-depth boundaries."""
    return {n_layers // 4: 0.5, n_layers // 2: 0.5, (3 * n_layers) // 4: 0.5}


def schedule_preset(name: str) -> PolicySchedule:
    """Named schedule: ``vica{3b,7b,13b}``, optionally ``+pdrop``."""
    base = name.removesuffix("+pdrop")
    if base not in RETAINED_LAYERS:
        raise ConfigError(f"unknown schedule preset {name!r}")
    n_layers, retained = RETAINED_LAYERS[base]
    schedule = PolicySchedule.sparse_cross(n_layers, retained)
    if name.endswith("+pdrop"):
        schedule = schedule.with_drops(PDROP_EVENTS[base])
    return schedule


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class LayerWeights:
    attn_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_gain: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class Weights:
    config: ModelConfig
    pos: np.ndarray          # (max_seq, d) learned absolute positions
    layers: tuple[LayerWeights, ...]
    out_gain: np.ndarray
    w_out: np.ndarray        # (d, vocab)

    def shape_manifest(self) -> dict[str, tuple[int, ...]]:
        manifest: dict[str, tuple[int, ...]] = {"pos": self.pos.shape}
        for l, lw in enumerate(self.layers):
            for name in (
                "attn_gain", "wq", "wk", "wv", "wo",
                "ffn_gain", "w_gate", "w_up", "w_down",
            ):
                manifest[f"layers.{l}.{name}"] = getattr(lw, name).shape
        manifest["out_gain"] = self.out_gain.shape
        manifest["w_out"] = self.w_out.shape
        return manifest

    def astype(self, dtype) -> "Weights":
        """Copy with every tensor cast to ``dtype`` (for benchmark runs)."""
        cast = lambda a: np.ascontiguousarray(a, dtype=dtype)
        layers = tuple(
            LayerWeights(**{k: cast(getattr(lw, k)) for k in lw.__dataclass_fields__})
            for lw in self.layers
        )
        return Weights(self.config, cast(self.pos), layers, cast(self.out_gain), cast(self.w_out))


def init_model(config: ModelConfig, seed: int) -> Weights:
    """Seeded Gaussian weights at scale 1/sqrt(d_model); norm gains start at 1.

    Draw order is fixed (positions, then per-layer q/k/v/o and gate/up/down,
    then the output head) so a given seed always yields identical bytes.
    """
    rng = np.random.default_rng(seed)
    d, m = config.d_model, config.d_ffn
    scale = 1.0 / np.sqrt(d)
    pos = rng.standard_normal((config.max_seq, d)) * scale
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_gain=np.ones(d),
                wq=rng.standard_normal((d, d)) * scale,
                wk=rng.standard_normal((d, d)) * scale,
                wv=rng.standard_normal((d, d)) * scale,
                wo=rng.standard_normal((d, d)) * scale,
                ffn_gain=np.ones(d),
                w_gate=rng.standard_normal((d, m)) * scale,
                w_up=rng.standard_normal((d, m)) * scale,
                w_down=rng.standard_normal((m, d)) * scale,
            )
        )
    w_out = rng.standard_normal((d, config.vocab)) * scale
    return Weights(config, pos, tuple(layers), np.ones(d), w_out)


# ---------------------------------------------------------------------------
# serialization: flat binary container, little-endian, shape-prefixed float64


def save_weights(weights: Weights, path) -> None:
    """Write weights to the flat binary container (see docs/formats.md)."""
    cfg = weights.config
    tensors = [("pos", weights.pos)]
    for l, lw in enumerate(weights.layers):
        for name in ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w_gate", "w_up", "w_down"):
            tensors.append((f"layers.{l}.{name}", getattr(lw, name)))
    tensors.append(("out_gain", weights.out_gain))
    tensors.append(("w_out", weights.w_out))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(
        struct.pack(
            "<6I", cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ffn, cfg.vocab, cfg.max_seq
        )
    )
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path) -> Weights:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    off = len(MAGIC)
    n_layers, n_heads, d, m, vocab, max_seq = struct.unpack_from("<6I", data, off)
    off += 24
    config = ModelConfig(n_layers, n_heads, d, m, vocab, max_seq)
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        tensors[name] = arr.astype(np.float64)
    layers = tuple(
        LayerWeights(**{k: tensors[f"layers.{l}.{k}"] for k in LayerWeights.__dataclass_fields__})
        for l in range(n_layers)
    )
    return Weights(config, tensors["pos"], layers, tensors["out_gain"], tensors["w_out"])


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class LayerTrace:
    layer: int
    mode: PolicyMode
    n_vision_in: int
    n_vision_out: int
    kept: np.ndarray | None      # indices into the layer-entry vision set
    h_pre_attn: np.ndarray       # hidden state entering the attention block
    h_post_attn: np.ndarray      # after the attention residual
    h_post_ffn: np.ndarray       # after the FFN residual


@dataclass
class ForwardResult:
    vision_hidden: np.ndarray | None   # final vision rows (None on the fast path)
    text_hidden: np.ndarray
    logits: np.ndarray                 # (n_text, vocab)
    trace: list[LayerTrace] | None


WRITE_PATH_KINDS = ("vis_attn_write", "vis_ffn_write", "t2v_read")


def parse_path(spec: str, n_layers: int) -> tuple[str, int]:
    """Split 'kind@layer' and validate both halves."""
    kind, sep, layer_s = spec.partition("@")
    if not sep or kind not in WRITE_PATH_KINDS or not layer_s.isdigit():
        raise ConfigError(
            f"bad path {spec!r}; expected one of {WRITE_PATH_KINDS} + '@<layer>'"
        )
    layer = int(layer_s)
    if layer >= n_layers:
        raise ConfigError(f"path {spec!r} addresses layer {layer} of {n_layers}")
    return kind, layer


def schedule_to_disabled_paths(schedule: PolicySchedule) -> frozenset[str]:
    """Express a (drop-free) schedule as a masked-oracle disabled-path set."""
    if schedule.has_drops():
        raise ConfigError("drop events have no masked-oracle equivalent")
    disabled: set[str] = set()
    for l, pol in enumerate(schedule.layers):
        if pol.mode is PolicyMode.BASELINE:
            continue
        disabled.add(f"vis_attn_write@{l}")
        disabled.add(f"vis_ffn_write@{l}")
        if pol.mode is PolicyMode.TEXT_ONLY:
            disabled.add(f"t2v_read@{l}")
    return frozenset(disabled)


def _check_inputs(weights: Weights, vision_emb: np.ndarray, text_emb: np.ndarray,
                  schedule: PolicySchedule) -> tuple[int, int]:
    cfg = weights.config
    if schedule.n_layers != cfg.n_layers:
        raise ConfigError(
            f"schedule covers {schedule.n_layers} layers, model has {cfg.n_layers}"
        )
    vision_emb = np.asarray(vision_emb)
    text_emb = np.asarray(text_emb)
    if vision_emb.ndim != 2 or vision_emb.shape[1] != cfg.d_model:
        raise ShapeError(f"vision embeddings {vision_emb.shape} need width {cfg.d_model}")
    if text_emb.ndim != 2 or text_emb.shape[1] != cfg.d_model:
        raise ShapeError(f"text embeddings {text_emb.shape} need width {cfg.d_model}")
    n, t = vision_emb.shape[0], text_emb.shape[0]
    if t < 1:
        raise ConfigError("at least one text token is required")
    if n + t > cfg.max_seq:
        raise ConfigError(f"{n}+{t} tokens exceed max_seq {cfg.max_seq}")
    return n, t


def _embed_text(weights: Weights, text_emb: np.ndarray, n_vision: int) -> np.ndarray:
    # learned absolute positions indexed over the concatenated [V; T] stream;
    # vision rows are frozen memory and carry no additive position
    t = text_emb.shape[0]
    return text_emb + weights.pos[n_vision : n_vision + t]


def _baseline_layer(
    h: np.ndarray,
    lw: LayerWeights,
    n_heads: int,
    n_vision: int,
    t_system: int = 0,
    *,
    t2v_read: bool = True,
    vis_attn_write: bool = True,
    vis_ffn_write: bool = True,
    system_reads_vision: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One joint self-attention layer; flags carve out write/read paths.

    Returns (h_pre, h_post_attn, h_post_ffn); h_pre aliases the input.
    """
    total = h.shape[0]
    x = rms_norm(h, lw.attn_gain)
    q = matmul(x, lw.wq)
    k = matmul(x, lw.wk)
    v = matmul(x, lw.wv)
    allowed = bottom_right_mask(total, total)
    if not t2v_read:
        allowed = allowed.copy()
        allowed[n_vision:, :n_vision] = False
    elif not system_reads_vision:
        allowed = allowed.copy()
        allowed[n_vision : n_vision + t_system, :n_vision] = False
    attn = masked_attention_oracle(q, k, v, FlowMask(allowed), n_heads)
    delta = matmul(attn, lw.wo)
    if not vis_attn_write:
        delta[:n_vision] = 0.0
    h_attn = h + delta
    f = gated_ffn(rms_norm(h_attn, lw.ffn_gain), lw.w_gate, lw.w_up, lw.w_down)
    if not vis_ffn_write:
        f[:n_vision] = 0.0
    return h, h_attn, h_attn + f


def _frozen_layer(
    v_rows: np.ndarray,
    t_rows: np.ndarray,
    lw: LayerWeights,
    n_heads: int,
    read_vision: bool,
    t_system: int = 0,
    system_reads_vision: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Text-updating layer; vision rows are read-only KV (or absent)."""
    n = v_rows.shape[0]
    t = t_rows.shape[0]
    xt = rms_norm(t_rows, lw.attn_gain)
    qt = matmul(xt, lw.wq)
    if read_vision and n > 0:
        xv = rms_norm(v_rows, lw.attn_gain)
        k = np.vstack([matmul(xv, lw.wk), matmul(xt, lw.wk)])
        val = np.vstack([matmul(xv, lw.wv), matmul(xt, lw.wv)])
        mask = build_cross_mask(
            TokenLayout(n, t_system, t - t_system), True, system_reads_vision
        )
    else:
        k = matmul(xt, lw.wk)
        val = matmul(xt, lw.wv)
        mask = FlowMask(bottom_right_mask(t, t))
    attn = masked_attention_oracle(qt, k, val, mask, n_heads)
    t_attn = t_rows + matmul(attn, lw.wo)
    t_ffn = t_attn + gated_ffn(rms_norm(t_attn, lw.ffn_gain), lw.w_gate, lw.w_up, lw.w_down)
    return t_attn, t_ffn


def _score_and_drop(
    v_rows: np.ndarray,
    t_rows: np.ndarray,
    lw: LayerWeights,
    n_heads: int,
    target: int,
) -> np.ndarray:
    """Rank vision tokens by this layer's text attention; return kept indices."""
    n, t = v_rows.shape[0], t_rows.shape[0]
    xv = rms_norm(v_rows, lw.attn_gain)
    xt = rms_norm(t_rows, lw.attn_gain)
    qt = matmul(xt, lw.wq)
    k = np.vstack([matmul(xv, lw.wk), matmul(xt, lw.wk)])
    mask = build_cross_mask(TokenLayout(n, 0, t))
    weights_tv = attention_weights(qt, k, mask, n_heads)[:, :n]
    return select_kept_tokens(weights_tv, target)


def forward(
    weights: Weights,
    vision_emb: np.ndarray,
    text_emb: np.ndarray,
    schedule: PolicySchedule,
    *,
    layout: TokenLayout | None = None,
    record_trace: bool = False,
    counter=None,
    system_reads_vision: bool = True,
) -> ForwardResult:
    """Policy-engine forward pass over the [vision; text] stream.

    Under any non-``BASELINE`` policy the vision rows are structurally frozen:
    the engine simply never writes to them, so they remain bit-identical to
    the input embeddings at every layer.
    """
    n0, t = _check_inputs(weights, vision_emb, text_emb, schedule)
    if layout is None:
        layout = TokenLayout(n0, 0, t)
    elif (layout.n_vision, layout.n_text) != (n0, t):
        raise ConfigError(
            f"layout {layout} does not match embeddings ({n0} vision, {t} text)"
        )
    cfg = weights.config
    drop_targets = _resolved_drop_targets(schedule, n0)

    v_rows = np.array(vision_emb, dtype=float, copy=True)
    t_rows = _embed_text(weights, np.asarray(text_emb, dtype=float), n0)
    trace: list[LayerTrace] | None = [] if record_trace else None

    with count_macs(counter):
        for l, pol in enumerate(schedule.layers):
            lw = weights.layers[l]
            n_in = v_rows.shape[0]
            kept = None
            if drop_targets is not None and l in drop_targets:
                target = drop_targets[l]
                if target < n_in:
                    kept = _score_and_drop(v_rows, t_rows, lw, cfg.n_heads, target)
                    v_rows = v_rows[kept]
            n_cur = v_rows.shape[0]

            if pol.mode is PolicyMode.BASELINE:
                h = np.vstack([v_rows, t_rows])
                h_pre, h_attn, h_ffn = _baseline_layer(
                    h, lw, cfg.n_heads, n_cur, layout.t_system,
                    system_reads_vision=system_reads_vision,
                )
                v_rows, t_rows = h_ffn[:n_cur], h_ffn[n_cur:]
                snap = (h_pre, h_attn, h_ffn)
            else:
                read_vision = pol.mode in FROZEN_KV_MODES
                t_attn, t_ffn = _frozen_layer(
                    v_rows, t_rows, lw, cfg.n_heads, read_vision,
                    layout.t_system, system_reads_vision,
                )
                if record_trace:
                    snap = (
                        np.vstack([v_rows, t_rows]),
                        np.vstack([v_rows, t_attn]),
                        np.vstack([v_rows, t_ffn]),
                    )
                t_rows = t_ffn

            if record_trace:
                trace.append(
                    LayerTrace(
                        layer=l, mode=pol.mode, n_vision_in=n_in, n_vision_out=n_cur,
                        kept=kept,
                        h_pre_attn=np.array(snap[0], copy=True),
                        h_post_attn=np.array(snap[1], copy=True),
                        h_post_ffn=np.array(snap[2], copy=True),
                    )
                )

        logits = matmul(rms_norm(t_rows, weights.out_gain), weights.w_out)
    return ForwardResult(v_rows, t_rows, logits, trace)


def forward_baseline_masked_oracle(
    weights: Weights,
    vision_emb: np.ndarray,
    text_emb: np.ndarray,
    write_paths_disabled=(),
    *,
    record_trace: bool = False,
    counter=None,
) -> ForwardResult:
    """Joint-attention forward that disables named write/read paths.

    Always computes the full square attention; policy behavior emerges from
    zeroing residual slices (``vis_attn_write@l``, ``vis_ffn_write@l``) or
    masking the text-to-vision block (``t2v_read@l``).
    """
    n, t = _check_inputs(weights, vision_emb, text_emb, schedule=PolicySchedule.baseline(weights.config.n_layers))
    cfg = weights.config
    disabled: dict[int, set[str]] = {}
    for spec in write_paths_disabled:
        kind, layer = parse_path(spec, cfg.n_layers)
        disabled.setdefault(layer, set()).add(kind)

    h = np.vstack(
        [np.asarray(vision_emb, dtype=float), _embed_text(weights, np.asarray(text_emb, dtype=float), n)]
    )
    trace: list[LayerTrace] | None = [] if record_trace else None
    with count_macs(counter):
        for l in range(cfg.n_layers):
            off = disabled.get(l, set())
            h_pre, h_attn, h_ffn = _baseline_layer(
                h, weights.layers[l], cfg.n_heads, n,
                t2v_read="t2v_read" not in off,
                vis_attn_write="vis_attn_write" not in off,
                vis_ffn_write="vis_ffn_write" not in off,
            )
            if record_trace:
                trace.append(
                    LayerTrace(
                        layer=l, mode=PolicyMode.BASELINE, n_vision_in=n, n_vision_out=n,
                        kept=None,
                        h_pre_attn=np.array(h_pre, copy=True),
                        h_post_attn=np.array(h_attn, copy=True),
                        h_post_ffn=np.array(h_ffn, copy=True),
                    )
                )
            h = h_ffn
        logits = matmul(rms_norm(h[n:], weights.out_gain), weights.w_out)
    return ForwardResult(h[:n], h[n:], logits, trace)


# ---------------------------------------------------------------------------
# decoupled vision KV


@dataclass(frozen=True)
class VisualKvSet:
    """Per-layer frozen vision keys/values; depends on vision inputs only."""

    n_vision: int
    d_model: int
    entries: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted(self.entries)


def precompute_visual_kv(
    weights: Weights,
    vision_emb: np.ndarray,
    schedule: PolicySchedule,
    *,
    counter=None,
) -> VisualKvSet:
    """Project the frozen vision embeddings to KV at every retaining layer.

    Nothing here reads text, which is the whole point: these tensors can be
    built as soon as the image is projected, in parallel with prompt arrival.
    """
    cfg = weights.config
    if schedule.n_layers != cfg.n_layers:
        raise ConfigError(
            f"schedule covers {schedule.n_layers} layers, model has {cfg.n_layers}"
        )
    vision_emb = np.asarray(vision_emb, dtype=float)
    if vision_emb.ndim != 2 or vision_emb.shape[1] != cfg.d_model:
        raise ShapeError(f"vision embeddings {vision_emb.shape} need width {cfg.d_model}")
    entries: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    with count_macs(counter):
        for l in schedule.frozen_vision_layers():
            lw = weights.layers[l]
            xv = rms_norm(vision_emb, lw.attn_gain)
            entries[l] = (matmul(xv, lw.wk), matmul(xv, lw.wv))
    return VisualKvSet(vision_emb.shape[0], cfg.d_model, entries)


def forward_vica_fast(
    weights: Weights,
    kv: VisualKvSet,
    text_emb: np.ndarray,
    schedule: PolicySchedule,
    *,
    record_trace: bool = False,
    counter=None,
) -> ForwardResult:
    """Text-only pipeline attending into precomputed vision KV.

    Vision rows never enter the hidden state; at retaining layers the text
    queries run mask-free bottom-right attention over [vision KV; text KV].
    Fixed-shape by construction: schedules with drop events or ``BASELINE``
    layers are rejected.
    """
    cfg = weights.config
    if schedule.n_layers != cfg.n_layers:
        raise ConfigError(
            f"schedule covers {schedule.n_layers} layers, model has {cfg.n_layers}"
        )
    if schedule.has_drops():
        raise ConfigError("fast path is fixed-shape; run drop schedules on forward()")
    if any(p.mode is PolicyMode.BASELINE for p in schedule.layers):
        raise ConfigError("fast path cannot update vision rows (baseline layers)")
    expected = set(schedule.frozen_vision_layers())
    if set(kv.entries) != expected:
        raise ConfigError(
            f"kv covers layers {sorted(kv.entries)}, schedule retains {sorted(expected)}"
        )
    if kv.d_model != cfg.d_model:
        raise ConfigError(f"kv width {kv.d_model} does not match model {cfg.d_model}")
    for l, (k_vis, v_vis) in kv.entries.items():
        if k_vis.shape != (kv.n_vision, cfg.d_model) or v_vis.shape != k_vis.shape:
            raise ConfigError(f"kv entry at layer {l} has shape {k_vis.shape}")

    text_emb = np.asarray(text_emb, dtype=float)
    t = text_emb.shape[0]
    if t < 1:
        raise ConfigError("at least one text token is required")
    if kv.n_vision + t > cfg.max_seq:
        raise ConfigError(f"{kv.n_vision}+{t} tokens exceed max_seq {cfg.max_seq}")

    t_rows = _embed_text(weights, text_emb, kv.n_vision)
    trace: list[LayerTrace] | None = [] if record_trace else None
    with count_macs(counter):
        for l, pol in enumerate(schedule.layers):
            lw = weights.layers[l]
            xt = rms_norm(t_rows, lw.attn_gain)
            qt = matmul(xt, lw.wq)
            kt = matmul(xt, lw.wk)
            vt = matmul(xt, lw.wv)
            if pol.mode in FROZEN_KV_MODES and kv.n_vision > 0:
                k_vis, v_vis = kv.entries[l]
                attn = asymmetric_cross_attention(
                    qt, np.vstack([k_vis, kt]), np.vstack([v_vis, vt]), cfg.n_heads
                )
            else:
                attn = asymmetric_cross_attention(qt, kt, vt, cfg.n_heads)
            t_pre = t_rows
            t_attn = t_rows + matmul(attn, lw.wo)
            t_rows = t_attn + gated_ffn(
                rms_norm(t_attn, lw.ffn_gain), lw.w_gate, lw.w_up, lw.w_down
            )
            if record_trace:
                trace.append(
                    LayerTrace(
                        layer=l, mode=pol.mode,
                        n_vision_in=kv.n_vision, n_vision_out=kv.n_vision, kept=None,
                        h_pre_attn=np.array(t_pre, copy=True),
                        h_post_attn=np.array(t_attn, copy=True),
                        h_post_ffn=np.array(t_rows, copy=True),
                    )
                )
        logits = matmul(rms_norm(t_rows, weights.out_gain), weights.w_out)
    return ForwardResult(None, t_rows, logits, trace)


# ---------------------------------------------------------------------------
# multiply-accumulate accounting


def _resolved_drop_targets(schedule: PolicySchedule, n_vision: int) -> dict[int, int] | None:
    """Per-layer vision-count targets for the schedule's drop events, if any."""
    if not schedule.has_drops():
        return None
    exposing = [p.mode in KV_MODES for p in schedule.layers]
    events = relocate_drop_events(schedule.drop_events(), exposing)
    counts = resolve_schedule(events, n_vision, schedule.n_layers)
    return {l: counts[l] for l in events}


def count_forward_macs(
    config: ModelConfig,
    layout: TokenLayout,
    schedule: PolicySchedule,
    path: str = "engine",
    *,
    include_logits: bool = True,
    include_kv_precompute: bool = True,
) -> int:
    """Exact MAC count the instrumented forward would report, from shapes only.

    ``path='engine'`` mirrors :func:`forward`; ``path='fast'`` mirrors
    :func:`precompute_visual_kv` + :func:`forward_vica_fast`. The counts are
    validated against live counters in the test suite and exist so preset
    geometries can be accounted without allocating preset-sized weights.
    """
    if path not in ("engine", "fast"):
        raise ConfigError(f"unknown path {path!r}")
    d, m, heads = config.d_model, config.d_ffn, config.n_heads
    t = layout.n_text
    n_cur = layout.n_vision
    drop_targets = _resolved_drop_targets(schedule, layout.n_vision)
    if path == "fast" and drop_targets is not None:
        raise ConfigError("fast path is fixed-shape; run drop schedules on forward()")

    macs = 0
    for l, pol in enumerate(schedule.layers):
        if drop_targets is not None and l in drop_targets and drop_targets[l] < n_cur:
            # scoring pass: q/k projections plus score rows, no value mix
            macs += 2 * t * d * d + n_cur * d * d + t * (n_cur + t) * d
            n_cur = drop_targets[l]
        n = n_cur
        if path == "engine":
            if pol.mode is PolicyMode.BASELINE:
                total = n + t
                macs += 4 * total * d * d + 2 * total * total * d + 3 * total * d * m
            elif pol.mode in FROZEN_KV_MODES:
                macs += 2 * n * d * d + 4 * t * d * d + 2 * t * (n + t) * d + 3 * t * d * m
            else:
                macs += 4 * t * d * d + 2 * t * t * d + 3 * t * d * m
        else:
            macs += 4 * t * d * d + 3 * t * d * m
            if pol.mode in FROZEN_KV_MODES and n > 0:
                macs += sum(2 * (n + i + 1) * d for i in range(t))
                if include_kv_precompute:
                    macs += 2 * n * d * d
            else:
                macs += sum(2 * (i + 1) * d for i in range(t))
    if include_logits:
        macs += t * d * config.vocab
    return macs
