"""Engine tests: policy modes, the masked-oracle equivalences, decoupled KV,
serialization, and instrumented multiply-accumulate accounting."""

import numpy as np
import pytest

from vica.attention import TokenLayout
from vica.model import (
    MODEL_PRESETS,
    PDROP_EVENTS,
    RETAINED_LAYERS,
    ConfigError,
    ModelConfig,
    PolicyMode,
    PolicySchedule,
    count_forward_macs,
    forward,
    forward_baseline_masked_oracle,
    forward_vica_fast,
    init_model,
    load_weights,
    parse_path,
    pdrop_baseline_events,
    precompute_visual_kv,
    save_weights,
    schedule_preset,
    schedule_to_disabled_paths,
)
from vica.numerics import MacCounter


TOY = ModelConfig(n_layers=3, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)


def toy_inputs(seed, n=5, t=4, d=8):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal((t, d))


class TestConfigAndPresets:
    def test_preset_geometries(self):
        assert MODEL_PRESETS["llava3b"].d_model == 2560
        assert MODEL_PRESETS["llava3b"].d_ffn == 6912
        assert MODEL_PRESETS["llava7b"].d_model == 4096
        assert MODEL_PRESETS["llava7b"].d_ffn == 11008
        assert MODEL_PRESETS["llava13b"] == ModelConfig(40, 40, 5120, 13824)
        assert MODEL_PRESETS["llava3b"].n_layers == 32
        assert MODEL_PRESETS["llava7b"].n_layers == 32

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=1, n_heads=3, d_model=8, d_ffn=16)

    def test_schedule_presets_retained_sets(self):
        assert RETAINED_LAYERS["vica3b"][1] == {0, 1, 14, 15, 18, 19, 21, 22, 23}
        assert RETAINED_LAYERS["vica7b"][1] == {0, 1, 7, 8, 9, 10, 11, 14}
        assert RETAINED_LAYERS["vica13b"][1] == {0, 6, 8, 9, 10, 13, 14, 16}
        for name, (n_layers, retained) in RETAINED_LAYERS.items():
            sched = schedule_preset(name)
            assert sched.n_layers == n_layers
            assert set(sched.frozen_vision_layers()) == retained
            assert all(
                p.mode is PolicyMode.TEXT_ONLY
                for l, p in enumerate(sched.layers)
                if l not in retained
            )

    def test_pdrop_presets(self):
        sched = schedule_preset("vica7b+pdrop")
        assert sched.drop_events() == {1: 0.75, 7: 0.75, 10: 0.75}
        assert PDROP_EVENTS["vica3b"] == {1: 0.75, 14: 0.75, 18: 0.75}
        assert PDROP_EVENTS["vica13b"] == {6: 0.75, 9: 0.75, 13: 0.75}
        assert pdrop_baseline_events(32) == {8: 0.5, 16: 0.5, 24: 0.5}
        assert pdrop_baseline_events(40) == {10: 0.5, 20: 0.5, 30: 0.5}

    def test_unknown_schedule_preset(self):
        with pytest.raises(ConfigError):
            schedule_preset("vica70b")

    def test_sparse_cross_validates_layers(self):
        with pytest.raises(ConfigError):
            PolicySchedule.sparse_cross(4, {0, 4})

    def test_path_parsing(self):
        assert parse_path("t2v_read@2", 4) == ("t2v_read", 2)
        for bad in ("t2v_read", "t2v_read@9", "nonsense@0", "t2v_read@x"):
            with pytest.raises(ConfigError):
                parse_path(bad, 4)


class TestInitAndSerialization:
    def test_same_seed_bit_identical(self):
        a = init_model(TOY, seed=7)
        b = init_model(TOY, seed=7)
        assert np.array_equal(a.pos, b.pos)
        for la, lb in zip(a.layers, b.layers):
            for f in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"):
                assert np.array_equal(getattr(la, f), getattr(lb, f))
        assert np.array_equal(a.w_out, b.w_out)

    def test_different_seeds_differ(self):
        a = init_model(TOY, seed=1)
        b = init_model(TOY, seed=2)
        assert not np.array_equal(a.layers[0].wq, b.layers[0].wq)

    def test_shape_manifest(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        manifest = init_model(cfg, 0).shape_manifest()
        per_layer = {
            "attn_gain": (8,), "wq": (8, 8), "wk": (8, 8), "wv": (8, 8), "wo": (8, 8),
            "ffn_gain": (8,), "w_gate": (8, 16), "w_up": (8, 16), "w_down": (16, 8),
        }
        expected = {"pos": (64, 8), "out_gain": (8,), "w_out": (8, 13)}
        for l in range(2):
            for k, v in per_layer.items():
                expected[f"layers.{l}.{k}"] = v
        assert manifest == expected

    def test_round_trip_bit_identical(self, tmp_path):
        w = init_model(TOY, seed=3)
        path = tmp_path / "weights.vica"
        save_weights(w, path)
        loaded = load_weights(path)
        assert loaded.config == w.config
        assert np.array_equal(loaded.pos, w.pos)
        for la, lb in zip(w.layers, loaded.layers):
            for f in la.__dataclass_fields__:
                assert np.array_equal(getattr(la, f), getattr(lb, f))
        assert np.array_equal(loaded.w_out, w.w_out)

    def test_magic_bytes(self, tmp_path):
        w = init_model(TOY, seed=3)
        path = tmp_path / "weights.vica"
        save_weights(w, path)
        assert path.read_bytes()[:5] == b"VICA1"
        path.write_bytes(b"NOPE!" + path.read_bytes()[5:])
        with pytest.raises(ConfigError, match="magic"):
            load_weights(path)


class TestForwardPolicies:
    def test_no_vision_baseline_equals_text_only(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(1, n=0, t=5)
        base = forward(w, ve, te, PolicySchedule.baseline(3))
        text = forward(w, ve, te, PolicySchedule.text_only(3))
        np.testing.assert_array_equal(base.logits, text.logits)

    def test_freeze_vis_never_touches_vision_rows(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(2)
        res = forward(w, ve, te, PolicySchedule.freeze_vis(3), record_trace=True)
        assert np.array_equal(res.vision_hidden, ve)
        for entry in res.trace:
            assert np.array_equal(entry.h_post_ffn[:5], ve)
            assert np.array_equal(entry.h_post_attn[:5], ve)

    def test_baseline_does_update_vision_rows(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(3)
        res = forward(w, ve, te, PolicySchedule.baseline(3))
        assert not np.array_equal(res.vision_hidden, ve)

    def test_causality_under_text_perturbation(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(4, t=6)
        for sched in (PolicySchedule.baseline(3), PolicySchedule.sparse_cross(3, {1})):
            base = forward(w, ve, te, sched)
            for i in (0, 5):
                te2 = te.copy()
                te2[i] += 1.0
                pert = forward(w, ve, te2, sched)
                np.testing.assert_array_equal(base.logits[:i], pert.logits[:i])
                assert not np.array_equal(base.logits[i], pert.logits[i])

    def test_vision_sensitivity(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(5)
        ve2 = ve + 0.5
        sparse = PolicySchedule.sparse_cross(3, {2})
        assert not np.array_equal(
            forward(w, ve, te, sparse).logits, forward(w, ve2, te, sparse).logits
        )
        blind = PolicySchedule.text_only(3)
        np.testing.assert_array_equal(
            forward(w, ve, te, blind).logits, forward(w, ve2, te, blind).logits
        )

    def test_schedule_length_must_match(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(6)
        with pytest.raises(ConfigError):
            forward(w, ve, te, PolicySchedule.baseline(4))

    def test_at_least_one_text_token(self):
        w = init_model(TOY, seed=0)
        ve, _ = toy_inputs(6)
        with pytest.raises(ConfigError):
            forward(w, ve, np.empty((0, 8)), PolicySchedule.baseline(3))

    def test_eager_system_blinding_flag(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(7, t=4)
        layout = TokenLayout(5, 2, 2)
        sched = PolicySchedule.freeze_vis(3)
        canonical = forward(w, ve, te, sched, layout=layout)
        eager = forward(w, ve, te, sched, layout=layout, system_reads_vision=False)
        assert not np.array_equal(canonical.logits, eager.logits)
        # without system tokens the flag changes nothing
        layout0 = TokenLayout(5, 0, 4)
        np.testing.assert_array_equal(
            forward(w, ve, te, sched, layout=layout0).logits,
            forward(w, ve, te, sched, layout=layout0, system_reads_vision=False).logits,
        )


class TestMaskedOracleEquivalence:
    def test_empty_disabled_set_is_baseline_bit_identical(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(8)
        a = forward(w, ve, te, PolicySchedule.baseline(3))
        b = forward_baseline_masked_oracle(w, ve, te, ())
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(a.vision_hidden, b.vision_hidden)

    def test_disabling_all_writes_equals_freeze_vis(self):
        # the central claim: freezing is exactly "no writes ever land on vision"
        w = init_model(TOY, seed=0)
        for seed in range(5):
            ve, te = toy_inputs(seed)
            disabled = [f"vis_attn_write@{l}" for l in range(3)] + [
                f"vis_ffn_write@{l}" for l in range(3)
            ]
            oracle = forward_baseline_masked_oracle(w, ve, te, disabled)
            engine = forward(w, ve, te, PolicySchedule.freeze_vis(3))
            assert np.abs(oracle.logits - engine.logits).max() <= 1e-10

    def test_disabling_reads_and_writes_equals_text_only(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(9)
        sched = PolicySchedule.text_only(3)
        oracle = forward_baseline_masked_oracle(
            w, ve, te, schedule_to_disabled_paths(sched)
        )
        engine = forward(w, ve, te, sched)
        assert np.abs(oracle.logits - engine.logits).max() <= 1e-10

    def test_sparse_schedule_equals_freeze_vis_with_masked_reads(self):
        # two layers, vision KV kept only at layer 0: identical to freezing
        # everywhere and masking the layer-1 read
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=1)
        ve, te = toy_inputs(10)
        sparse = forward(w, ve, te, PolicySchedule.sparse_cross(2, {0}))
        oracle = forward_baseline_masked_oracle(
            w, ve, te,
            ["vis_attn_write@0", "vis_ffn_write@0", "vis_attn_write@1",
             "vis_ffn_write@1", "t2v_read@1"],
        )
        assert np.abs(sparse.logits - oracle.logits).max() <= 1e-10

    def test_schedule_to_disabled_paths(self):
        sched = PolicySchedule.sparse_cross(3, {1})
        assert schedule_to_disabled_paths(sched) == frozenset(
            {
                "vis_attn_write@0", "vis_ffn_write@0", "t2v_read@0",
                "vis_attn_write@1", "vis_ffn_write@1",
                "vis_attn_write@2", "vis_ffn_write@2", "t2v_read@2",
            }
        )
        assert schedule_to_disabled_paths(PolicySchedule.baseline(2)) == frozenset()
        with pytest.raises(ConfigError):
            schedule_to_disabled_paths(
                PolicySchedule.baseline(2).with_drops({1: 0.5})
            )


class TestDecoupledKv:
    def test_no_vision_gives_empty_rows(self):
        w = init_model(TOY, seed=0)
        kv = precompute_visual_kv(w, np.empty((0, 8)), PolicySchedule.sparse_cross(3, {0, 2}))
        assert kv.n_vision == 0
        assert kv.layers() == [0, 2]
        assert all(k.shape == (0, 8) for k, _ in kv.entries.values())

    def test_preset_schedule_entry_count(self):
        cfg = ModelConfig(n_layers=32, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=0)
        ve, _ = toy_inputs(11)
        kv = precompute_visual_kv(w, ve, schedule_preset("vica7b"))
        assert len(kv.entries) == 8
        assert kv.layers() == sorted({0, 1, 7, 8, 9, 10, 11, 14})

    def test_kv_is_text_independent(self):
        w = init_model(TOY, seed=0)
        ve, _ = toy_inputs(12)
        sched = PolicySchedule.sparse_cross(3, {0, 1})
        kv_a = precompute_visual_kv(w, ve, sched)
        kv_b = precompute_visual_kv(w, ve.copy(), sched)
        for l in kv_a.entries:
            assert np.array_equal(kv_a.entries[l][0], kv_b.entries[l][0])
            assert np.array_equal(kv_a.entries[l][1], kv_b.entries[l][1])

    def test_fast_path_matches_engine(self):
        w = init_model(TOY, seed=0)
        for seed in range(6):
            ve, te = toy_inputs(seed, n=seed % 4, t=3 + seed % 3)
            sched = PolicySchedule.sparse_cross(3, {0, 2})
            kv = precompute_visual_kv(w, ve, sched)
            fast = forward_vica_fast(w, kv, te, sched)
            engine = forward(w, ve, te, sched)
            assert np.abs(fast.logits - engine.logits).max() <= 1e-12

    def test_fast_path_all_text_only_ignores_vision(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(13)
        sched = PolicySchedule.text_only(3)
        kv = precompute_visual_kv(w, ve, sched)
        assert kv.entries == {}
        fast = forward_vica_fast(w, kv, te, sched)
        engine = forward(w, ve, te, sched)
        # different kernels (row loop vs masked), so identity only to tolerance
        assert np.abs(fast.logits - engine.logits).max() <= 1e-12

    def test_fast_path_rejects_mismatched_kv(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(14)
        kv = precompute_visual_kv(w, ve, PolicySchedule.sparse_cross(3, {0}))
        with pytest.raises(ConfigError):
            forward_vica_fast(w, kv, te, PolicySchedule.sparse_cross(3, {0, 1}))

    def test_fast_path_rejects_baseline_and_drops(self):
        w = init_model(TOY, seed=0)
        ve, te = toy_inputs(15)
        sched = PolicySchedule.sparse_cross(3, {0})
        kv = precompute_visual_kv(w, ve, sched)
        with pytest.raises(ConfigError):
            forward_vica_fast(w, kv, te, PolicySchedule.baseline(3))
        with pytest.raises(ConfigError):
            forward_vica_fast(w, kv, te, sched.with_drops({1: 0.5}))


class TestDropIntegration:
    def test_trace_reflects_resolved_counts(self):
        cfg = ModelConfig(n_layers=4, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=0)
        ve, te = toy_inputs(16, n=8, t=3)
        sched = PolicySchedule.freeze_vis(4).with_drops({1: 0.5, 3: 0.5})
        res = forward(w, ve, te, sched, record_trace=True)
        assert [e.n_vision_out for e in res.trace] == [8, 4, 4, 2]
        assert res.vision_hidden.shape == (2, 8)
        # text row count never changes
        assert all(e.h_post_ffn.shape[0] - e.n_vision_out == 3 for e in res.trace)

    def test_kept_indices_are_sorted_subsets(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=1)
        ve, te = toy_inputs(17, n=6, t=3)
        sched = PolicySchedule.freeze_vis(2).with_drops({1: 0.5})
        res = forward(w, ve, te, sched, record_trace=True)
        kept = res.trace[1].kept
        assert kept is not None and len(kept) == 3
        assert np.array_equal(kept, np.sort(kept))
        # surviving rows really are the selected input rows
        np.testing.assert_array_equal(res.trace[1].h_pre_attn[:3], ve[kept])

    def test_drop_on_text_only_layer_defers(self, caplog):
        cfg = ModelConfig(n_layers=3, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=2)
        ve, te = toy_inputs(18, n=4, t=3)
        sched = PolicySchedule.sparse_cross(3, {0, 2}).with_drops({1: 0.5})
        with caplog.at_level("WARNING", logger="vica.pruning"):
            res = forward(w, ve, te, sched, record_trace=True)
        assert [e.n_vision_out for e in res.trace] == [4, 4, 2]
        assert any("deferred" in r.message for r in caplog.records)

    def test_drop_runs_are_deterministic(self):
        cfg = ModelConfig(n_layers=4, n_heads=2, d_model=8, d_ffn=16, vocab=13, max_seq=64)
        w = init_model(cfg, seed=3)
        ve, te = toy_inputs(19, n=8, t=3)
        sched = PolicySchedule.baseline(4).with_drops(pdrop_baseline_events(4))
        a = forward(w, ve, te, sched)
        b = forward(w, ve, te, sched)
        np.testing.assert_array_equal(a.logits, b.logits)


class TestMacCounting:
    GRID = [
        ("baseline", PolicySchedule.baseline),
        ("freeze", PolicySchedule.freeze_vis),
        ("textonly", PolicySchedule.text_only),
        ("sparse", lambda L: PolicySchedule.sparse_cross(L, {0, L - 1})),
    ]

    @pytest.mark.parametrize("name,make", GRID)
    def test_engine_walker_matches_live_counter(self, name, make):
        for n, t, layers in [(0, 3, 2), (4, 3, 2), (6, 1, 3), (5, 4, 4)]:
            cfg = ModelConfig(n_layers=layers, n_heads=2, d_model=8, d_ffn=12, vocab=13, max_seq=64)
            w = init_model(cfg, seed=0)
            ve, te = toy_inputs(20, n=n, t=t)
            counter = MacCounter()
            forward(w, ve, te, make(layers), counter=counter)
            walked = count_forward_macs(cfg, TokenLayout(n, 0, t), make(layers), "engine")
            assert counter.macs == walked, f"{name} n={n} t={t} layers={layers}"

    def test_engine_walker_matches_with_drops(self):
        cfg = ModelConfig(n_layers=4, n_heads=2, d_model=8, d_ffn=12, vocab=13, max_seq=64)
        w = init_model(cfg, seed=0)
        ve, te = toy_inputs(21, n=8, t=3)
        sched = PolicySchedule.freeze_vis(4).with_drops({1: 0.5, 3: 0.5})
        counter = MacCounter()
        forward(w, ve, te, sched, counter=counter)
        walked = count_forward_macs(cfg, TokenLayout(8, 0, 3), sched, "engine")
        assert counter.macs == walked

    def test_fast_walker_matches_live_counter(self):
        for n, t, layers in [(0, 3, 2), (4, 3, 2), (6, 2, 4)]:
            cfg = ModelConfig(n_layers=layers, n_heads=2, d_model=8, d_ffn=12, vocab=13, max_seq=64)
            w = init_model(cfg, seed=0)
            ve, te = toy_inputs(22, n=n, t=t)
            sched = PolicySchedule.sparse_cross(layers, {0, layers - 1})
            counter = MacCounter()
            kv = precompute_visual_kv(w, ve, sched, counter=counter)
            forward_vica_fast(w, kv, te, sched, counter=counter)
            walked = count_forward_macs(cfg, TokenLayout(n, 0, t), sched, "fast")
            assert counter.macs == walked, f"n={n} t={t} layers={layers}"

    def test_oracle_run_counts_like_baseline_engine(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=12, vocab=13, max_seq=64)
        w = init_model(cfg, seed=0)
        ve, te = toy_inputs(23, n=4, t=3)
        c1, c2 = MacCounter(), MacCounter()
        forward(w, ve, te, PolicySchedule.baseline(2), counter=c1)
        forward_baseline_masked_oracle(w, ve, te, ["t2v_read@0"], counter=c2)
        assert c1.macs == c2.macs  # masking changes no shapes
