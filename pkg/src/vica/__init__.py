"""Desk-scale decoder engine with frozen visual tokens and sparse cross-attention.

The package has three legs that check each other:

* an execution engine (``model``) whose policy modes freeze visual tokens
  and expose them as read-only KV at selected layers,
* an analytical cost model (``costmodel``) for prefill FLOPs and KV cache,
  cross-checked against instrumented multiply-accumulate counts,
* layerwise redundancy diagnostics (``diagnostics``) that measure how much
  each vision pathway actually contributes to the output distribution.

``attention`` holds the information-flow masks shared by all of them,
``pruning`` resolves progressive token-drop schedules, and ``harness``/``cli``
wrap everything in reproducible experiment runs.
"""

__version__ = "0.1.0"
