"""Layerwise contribution diagnostics for the vision pathways.

For each layer, one pathway (vision attention writes, vision FFN writes, or
text-to-vision reads) is disabled in the masked-oracle forward and the damage
is measured two ways:

* KL divergence (natural log) between the intact and ablated next-token
  distributions at the final text position, averaged over a small input batch;
* how much the affected token rows move across the host sublayer in the
  intact run, reported as 1 - cosine.

Affected rows per pathway: vision rows around the attention block for
``vis_attn_write``, vision rows around the FFN for ``vis_ffn_write``, and
text rows around the attention block for ``t2v_read``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ForwardResult,
    PolicySchedule,
    Weights,
    forward_baseline_masked_oracle,
    schedule_to_disabled_paths,
)

#: Probabilities below this are lifted before a KL evaluation (then the
#: distribution is renormalized) so ablations that zero a token's mass
#: cannot produce infinite divergence.
KL_FLOOR = 1e-12


@dataclass
class CosineChange:
    one_minus_cos: np.ndarray  # per included row
    mean: float
    skipped: int               # rows excluded for having a zero-norm side


def cosine_change(before: np.ndarray, after: np.ndarray) -> CosineChange:
    """Per-row 1 - cos(before, after); zero-norm rows are excluded."""
    before = np.asarray(before, dtype=float)
    after = np.asarray(after, dtype=float)
    if before.shape != after.shape or before.ndim != 2:
        raise ValueError(f"row sets {before.shape} and {after.shape} must match")
    nb = np.linalg.norm(before, axis=1)
    na = np.linalg.norm(after, axis=1)
    ok = (nb > 0.0) & (na > 0.0)
    cos = np.einsum("ij,ij->i", before[ok], after[ok]) / (nb[ok] * na[ok])
    one_minus = 1.0 - cos
    mean = float(one_minus.mean()) if one_minus.size else 0.0
    return CosineChange(one_minus, mean, int((~ok).sum()))


def kl_divergence(p: np.ndarray, p_prime: np.ndarray) -> float:
    """KL(p || p') in nats over two distributions on the same support.

    Both must be non-negative and sum to 1 within 1e-9. ``p_prime`` is
    floored at ``KL_FLOOR`` and renormalized, but only when some entry
    actually falls below the floor, so well-conditioned identical inputs
    come back as exactly 0.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(p_prime, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distributions {p.shape} and {q.shape} must match")
    for name, dist in (("p", p), ("p_prime", q)):
        if (dist < 0.0).any():
            raise ValueError(f"{name} has negative entries")
        if abs(float(dist.sum()) - 1.0) > 1e-9:
            raise ValueError(f"{name} sums to {float(dist.sum())}, not 1")
    if (q < KL_FLOOR).any():
        q = np.maximum(q, KL_FLOOR)
        q = q / q.sum()
    support = p > 0.0
    total = float(np.sum(p[support] * np.log(p[support] / q[support])))
    # rounding can leave -O(ulp) on near-identical pairs; the true value
    # is non-negative (Gibbs), so clamp
    return max(total, 0.0)


def next_token_distribution(result: ForwardResult) -> np.ndarray:
    """Softmax over the final text position's logits."""
    logits = result.logits[-1]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class ImpactReport:
    """Per-layer impact of disabling one pathway."""

    path: str
    layers: list[int]
    kl: list[float]
    one_minus_cos: list[float]

    def ranking(self) -> list[int]:
        """Layers ordered by KL descending; ties go to the lower layer."""
        return sorted(self.layers, key=lambda l: (-self.kl[l], l))

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.layers, self.kl, self.one_minus_cos))

    def to_json_dict(self) -> dict:
        return {
            "path": self.path,
            "layers": self.layers,
            "kl": self.kl,
            "one_minus_cos": self.one_minus_cos,
            "ranking": self.ranking(),
        }


def _affected_rows(trace_entry, path: str, n_vision: int) -> tuple[np.ndarray, np.ndarray]:
    if path == "vis_attn_write":
        return trace_entry.h_pre_attn[:n_vision], trace_entry.h_post_attn[:n_vision]
    if path == "vis_ffn_write":
        return trace_entry.h_post_attn[:n_vision], trace_entry.h_post_ffn[:n_vision]
    if path == "t2v_read":
        return trace_entry.h_pre_attn[n_vision:], trace_entry.h_post_attn[n_vision:]
    raise ValueError(f"unknown path {path!r}")


def layer_sweep(
    weights: Weights,
    inputs: list[tuple[np.ndarray, np.ndarray]],
    path: str,
    schedule: PolicySchedule | None = None,
) -> ImpactReport:
    """Disable ``path`` one layer at a time and measure the output damage.

    ``schedule`` sets the base configuration the sweep perturbs: its policy
    modes are expressed as a masked-oracle disabled-path set, and each swept
    layer adds ``path@l`` on top. Disabling a path the base configuration
    already has off (or one that cannot reach the output) measures as exactly
    zero KL. Default base is the all-baseline model.
    """
    n_layers = weights.config.n_layers
    base: frozenset[str] = (
        schedule_to_disabled_paths(schedule) if schedule is not None else frozenset()
    )
    base_runs = [
        forward_baseline_masked_oracle(weights, ve, te, base, record_trace=True)
        for ve, te in inputs
    ]
    base_dists = [next_token_distribution(r) for r in base_runs]

    kls: list[float] = []
    cosines: list[float] = []
    for l in range(n_layers):
        spec = f"{path}@{l}"
        if spec in base:
            # already disabled: the ablated model is the base model
            kls.append(0.0)
        else:
            total = 0.0
            for (ve, te), p_base in zip(inputs, base_dists):
                ablated = forward_baseline_masked_oracle(
                    weights, ve, te, base | {spec}
                )
                total += kl_divergence(p_base, next_token_distribution(ablated))
            kls.append(total / len(inputs))

        cos_total = 0.0
        for (ve, _), run in zip(inputs, base_runs):
            before, after = _affected_rows(run.trace[l], path, ve.shape[0])
            cos_total += cosine_change(before, after).mean
        cosines.append(cos_total / len(inputs))

    return ImpactReport(path, list(range(n_layers)), kls, cosines)


def partition_regimes(report: ImpactReport, k: int) -> tuple[list[int], list[int]]:
    """Split layers into (essential, redundant): top-k by KL, ties to lower index."""
    if not (0 <= k <= len(report.layers)):
        raise ValueError(f"k {k} outside 0..{len(report.layers)}")
    ranked = report.ranking()
    essential = sorted(ranked[:k])
    redundant = sorted(ranked[k:])
    return essential, redundant
