import math

import numpy as np
import pytest

from macweights.errors import ConfigError, InputError
from macweights.macdrop import (
    Adam,
    CurriculumSchedule,
    LoraAdapterSet,
    MacDropState,
    TrainConfig,
    finetune,
    macdrop_step,
    merge_adapters,
    schedule_eval,
)
from macweights.model import init_params, logits_np
from macweights.probe import find_massive_weights

from conftest import plant_massive_rows


class TestSchedules:
    def test_step_endpoints(self):
        sched = CurriculumSchedule("step", p0=0.8, t_total=100)
        assert schedule_eval(sched, 0) == 0.8
        assert schedule_eval(sched, 100) == 0.0
        assert schedule_eval(sched, 50) == pytest.approx(0.4)

    def test_exp_closed_form(self):
        sched = CurriculumSchedule("exp", p0=1.0, alpha=0.01)
        assert schedule_eval(sched, 100) == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert schedule_eval(sched, 0) == 1.0

    def test_epoch_before_hand_value(self):
        sched = CurriculumSchedule("epoch_before", p0=0.9, n_epochs=3)
        assert schedule_eval(sched, t=0, e=3) == pytest.approx(0.3)
        assert schedule_eval(sched, t=0, e=1) == pytest.approx(0.9)

    def test_epoch_after_reaches_zero(self):
        sched = CurriculumSchedule("epoch_after", p0=0.9, n_epochs=3)
        assert schedule_eval(sched, t=0, e=3) == 0.0
        assert schedule_eval(sched, t=0, e=1) == pytest.approx(0.6)

    @pytest.mark.parametrize("p0", [0.2, 0.5, 0.8, 1.0])
    @pytest.mark.parametrize("t_total", [10, 579])
    def test_step_grid(self, p0, t_total):
        sched = CurriculumSchedule("step", p0=p0, t_total=t_total)
        for t in range(0, t_total + 1, max(t_total // 7, 1)):
            expected = p0 * (1.0 - t / t_total)
            assert abs(schedule_eval(sched, t) - expected) <= 1e-12

    @pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1])
    def test_exp_grid(self, alpha):
        sched = CurriculumSchedule("exp", p0=0.5, alpha=alpha)
        for t in (0, 1, 10, 579):
            assert abs(schedule_eval(sched, t) - 0.5 * math.exp(-alpha * t)) <= 1e-12

    def test_monotone_nonincreasing(self):
        for sched in (
            CurriculumSchedule("step", p0=0.7, t_total=50),
            CurriculumSchedule("exp", p0=0.7, alpha=0.05),
        ):
            values = [schedule_eval(sched, t) for t in range(51)]
            assert all(a >= b for a, b in zip(values, values[1:]))
            assert all(0.0 <= v <= 1.0 for v in values)

    def test_invalid_construction(self):
        with pytest.raises(ConfigError):
            CurriculumSchedule("linear", p0=0.5)
        with pytest.raises(ConfigError):
            CurriculumSchedule("step", p0=1.5)
        with pytest.raises(ConfigError):
            CurriculumSchedule("exp", p0=0.5, alpha=0.0)

    def test_invalid_counters(self):
        with pytest.raises(InputError):
            schedule_eval(CurriculumSchedule("step", p0=0.5, t_total=10), t=11)
        with pytest.raises(InputError):
            schedule_eval(CurriculumSchedule("epoch_before", p0=0.5, n_epochs=3), t=0, e=0)
        with pytest.raises(ConfigError):
            schedule_eval(CurriculumSchedule("step", p0=0.5), t=1)


def _step_setup(tiny_config, tiny_params, k=3):
    plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[4, 9, 21][:k], strengths=[30.0, 28.0, 26.0][:k])
    report = find_massive_weights(tiny_config, tiny_params, k=k)
    state = MacDropState.from_report(tiny_params, report)
    adapters = LoraAdapterSet.init(tiny_config, rank=2, alpha=2.0, seed=0, dtype=tiny_params.dtype)
    leaves = adapters.make_leaves(tiny_params.dtype)
    optimizer = Adam(leaves, lr=1e-3)
    batch = [np.array([0, 5, 9, 12, 3])]
    return report, state, adapters, leaves, optimizer, batch


class TestMacDropStep:
    @pytest.mark.parametrize("p", [0.0, 0.5, 1.0])
    def test_rollback_is_bitwise(self, tiny_config, tiny_params, p):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        before = {n: tiny_params[n].copy() for n in tiny_params.names()}
        macdrop_step(
            tiny_config, tiny_params, adapters, state, p, batch, optimizer, leaves,
            np.random.default_rng(0), lr=1e-3,
        )
        for name in tiny_params.names():
            assert np.array_equal(tiny_params[name], before[name])

    def test_mask_is_shared_and_binary(self, tiny_config, tiny_params):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        macdrop_step(
            tiny_config, tiny_params, adapters, state, 0.5, batch, optimizer, leaves,
            np.random.default_rng(1), lr=1e-3,
        )
        mask = state.mask
        assert mask.shape == state.saved_gate.shape
        assert set(np.unique(mask)) <= {0.0, 1.0}
        # the same mask was applied to both matrices: reproduce it
        ref = (np.random.default_rng(1).random(mask.shape) > 0.5).astype(mask.dtype)
        assert np.array_equal(mask, ref)

    def test_p_zero_keeps_rows_p_one_drops_all(self, tiny_config, tiny_params):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        macdrop_step(tiny_config, tiny_params, adapters, state, 0.0, batch, optimizer, leaves,
                     np.random.default_rng(0), lr=0.0)
        assert np.all(state.mask == 1.0)
        macdrop_step(tiny_config, tiny_params, adapters, state, 1.0, batch, optimizer, leaves,
                     np.random.default_rng(0), lr=0.0)
        assert np.all(state.mask == 0.0)

    def test_only_lora_arrays_move(self, tiny_config, tiny_params):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        fp = tiny_params.fingerprint()
        b_before = {n: leaves[n].data.copy() for n in leaves}
        macdrop_step(tiny_config, tiny_params, adapters, state, 0.3, batch, optimizer, leaves,
                     np.random.default_rng(2), lr=1e-3)
        assert tiny_params.fingerprint() == fp
        assert any(not np.array_equal(leaves[n].data, b_before[n]) for n in leaves)

    def test_per_row_mask_flag(self, tiny_config, tiny_params):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        macdrop_step(tiny_config, tiny_params, adapters, state, 0.5, batch, optimizer, leaves,
                     np.random.default_rng(3), lr=0.0, per_row=True)
        for row in state.mask:
            assert np.all(row == row[0])

    def test_rescale_mask_flag(self, tiny_config, tiny_params):
        _, state, adapters, leaves, optimizer, batch = _step_setup(tiny_config, tiny_params)
        macdrop_step(tiny_config, tiny_params, adapters, state, 0.5, batch, optimizer, leaves,
                     np.random.default_rng(4), lr=0.0, rescale=True)
        assert set(np.unique(state.mask)) <= {0.0, 2.0}


class TestLora:
    def test_fresh_adapters_are_identity(self, tiny_config, tiny_params):
        adapters = LoraAdapterSet.init(tiny_config, rank=4, seed=0, dtype=tiny_params.dtype)
        ids = [0, 5, 9]
        base = logits_np(tiny_config, tiny_params, ids)
        from macweights.model import forward

        adapted, _ = forward(tiny_config, tiny_params, ids, adapters=adapters)
        assert np.array_equal(adapted.data, base)  # B = 0, bitwise identity

    def test_targets_exclude_embeddings_and_router(self, tiny_config):
        names = LoraAdapterSet.target_names(tiny_config)
        assert "embed" not in names and "lm_head" not in names
        assert all(not n.endswith(".moe.router") for n in names)
        assert "layers.1.attn.wq" in names
        assert "layers.2.ffn.w_down" in names

    def test_merge_matches_dynamic_application(self, tiny_config, tiny_params):
        rng = np.random.default_rng(5)
        adapters = LoraAdapterSet.init(tiny_config, rank=2, alpha=4.0, seed=0, dtype=tiny_params.dtype)
        for ad in adapters.values():
            ad.b = rng.normal(0, 0.02, size=ad.b.shape).astype(ad.b.dtype)
        ids = [0, 5, 9, 12]
        from macweights.model import forward

        dynamic, _ = forward(tiny_config, tiny_params, ids, adapters=adapters)
        merged = merge_adapters(tiny_params, adapters)
        static = logits_np(tiny_config, merged, ids)
        assert np.max(np.abs(dynamic.data - static)) <= 1e-5

    def test_rank_one_outer_product(self, tiny_config, tiny_params):
        adapters = LoraAdapterSet.init(tiny_config, rank=1, alpha=3.0, seed=0, dtype=tiny_params.dtype)
        name = "layers.1.ffn.w_gate"
        ad = adapters[name]
        ad.a[:] = 0.0
        ad.a[0, 2] = 1.0
        ad.b[:] = 0.0
        ad.b[5, 0] = 2.0
        merged = merge_adapters(tiny_params, adapters)
        diff = merged[name] - tiny_params[name]
        expected = np.zeros_like(diff)
        expected[5, 2] = 3.0 * 2.0  # scaling alpha/r = 3 times outer product
        assert np.max(np.abs(diff - expected)) <= 1e-6

    def test_merge_with_zero_adapters_is_identity(self, tiny_config, tiny_params):
        adapters = LoraAdapterSet.init(tiny_config, rank=2, seed=0, dtype=tiny_params.dtype)
        merged = merge_adapters(tiny_params, adapters)
        for name in tiny_params.names():
            assert np.array_equal(merged[name], tiny_params[name])

    def test_merge_shape_mismatch(self, tiny_config, tiny_params):
        adapters = LoraAdapterSet.init(tiny_config, rank=2, seed=0, dtype=tiny_params.dtype)
        adapters["layers.1.ffn.w_gate"].a = adapters["layers.1.ffn.w_gate"].a[:, :3]
        from macweights.errors import ShapeError

        with pytest.raises(ShapeError, match="w_gate"):
            merge_adapters(tiny_params, adapters)

    def test_gradients_reach_every_adapter(self, tiny_config, tiny_params):
        from macweights import tensor as T
        from macweights.model import forward

        adapters = LoraAdapterSet.init(tiny_config, rank=2, seed=0, dtype=tiny_params.dtype)
        leaves = adapters.make_leaves(tiny_params.dtype)
        logits, _ = forward(tiny_config, tiny_params, [0, 5, 9], adapters=adapters)
        grads = T.backward(T.cross_entropy_mean(logits, [5, 9, 12]), leaves)
        for name in adapters:
            # B is zero so dL/dB = (dL/dW) @ A^T is generically nonzero
            assert np.any(grads[f"{name}.lora_b"] != 0.0), name


def _toy_streams(config, n_tokens=600, seed=0):
    rng = np.random.default_rng(seed)
    train = rng.integers(0, config.vocab_size, size=n_tokens)
    val = rng.integers(0, config.vocab_size, size=n_tokens // 3)
    return train, val


class TestFinetune:
    def _tc(self, **kw):
        defaults = dict(epochs=1, batch_size=2, k=2, chunk_len=16, lora_rank=2, lr=1e-3)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_base_params_restored_bitwise(self, tiny_config, tiny_params):
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[4, 9], strengths=[30.0, 28.0])
        before = {n: tiny_params[n].copy() for n in tiny_params.names()}
        train, val = _toy_streams(tiny_config)
        finetune(tiny_config, tiny_params, train, val, self._tc())
        for name in tiny_params.names():
            assert np.array_equal(tiny_params[name], before[name])

    def test_deterministic_under_seed(self, tiny_config, tiny_params):
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[4, 9], strengths=[30.0, 28.0])
        train, val = _toy_streams(tiny_config)
        a1, m1 = finetune(tiny_config, tiny_params, train, val, self._tc(seed=5))
        a2, m2 = finetune(tiny_config, tiny_params, train, val, self._tc(seed=5))
        for name in a1:
            assert np.array_equal(a1[name].a, a2[name].a)
            assert np.array_equal(a1[name].b, a2[name].b)
        assert m1["steps"] == m2["steps"]

    def test_p_sequence_matches_schedule(self, tiny_config, tiny_params):
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[4, 9], strengths=[30.0, 28.0])
        train, val = _toy_streams(tiny_config)
        tc = self._tc(epochs=2, p0=0.6)
        _, metrics = finetune(tiny_config, tiny_params, train, val, tc)
        t_total = len(metrics["steps"])
        sched = CurriculumSchedule("step", p0=0.6, t_total=t_total)
        for row in metrics["steps"]:
            assert row["p"] == pytest.approx(schedule_eval(sched, row["step"]), abs=1e-12)

    def test_macdrop_off_reports_p_zero(self, tiny_config, tiny_params):
        train, val = _toy_streams(tiny_config)
        _, metrics = finetune(tiny_config, tiny_params, train, val, self._tc(), use_macdrop=False)
        assert all(row["p"] == 0.0 for row in metrics["steps"])

    def test_metrics_structure(self, tiny_config, tiny_params):
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[4, 9], strengths=[30.0, 28.0])
        train, val = _toy_streams(tiny_config)
        tc = self._tc(epochs=2)
        _, metrics = finetune(tiny_config, tiny_params, train, val, tc)
        assert set(metrics) == {"steps", "val_per_epoch", "initial_val", "final_val"}
        assert len(metrics["val_per_epoch"]) == 2
        assert metrics["final_val"] == metrics["val_per_epoch"][-1]
        assert [row["step"] for row in metrics["steps"]] == list(range(1, len(metrics["steps"]) + 1))

    def test_stream_too_short(self, tiny_config, tiny_params):
        with pytest.raises(InputError):
            finetune(tiny_config, tiny_params, [0, 1, 2], [0, 1, 2], self._tc())
