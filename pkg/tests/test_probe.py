import numpy as np
import pytest

from macweights.errors import ConfigError, DetectionError, InputError
from macweights.model import ModelConfig, init_params
from macweights.probe import (
    find_massive_layer,
    find_massive_weights,
    massive_weight_count,
    router_profile,
)
from macweights.trace import trace_forward

from conftest import plant_massive_rows, random_config


def _exhaustive_topk(config, params, k):
    """Reference selection: full sort of |inter| at the argmax layer with
    explicit lexicographic tie handling."""
    tr = trace_forward(config, params, [config.bos_token_id], 0)
    maxima = [float(np.max(np.abs(ls.inter))) for ls in tr.layers]
    layer = 1 + min(range(len(maxima)), key=lambda i: (-maxima[i], i))
    mags = np.abs(tr.layers[layer - 1].inter).astype(np.float64)
    ranked = sorted(range(mags.size), key=lambda j: (-mags[j], j))
    return layer, ranked[:k]


class TestLayerSelection:
    def test_planted_layer_found(self, tiny_config, tiny_params):
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[3])
        layer, expert = find_massive_layer(tiny_config, tiny_params)
        assert (layer, expert) == (2, None)

    def test_earliest_jump_needs_history(self, tiny_config, tiny_params):
        # layer 1 has no earlier maxima, so a layer-1 plant falls back to argmax
        plant_massive_rows(tiny_config, tiny_params, layer=1, rows=[3])
        assert find_massive_layer(tiny_config, tiny_params, rule="earliest_jump")[0] == 1

    def test_earliest_jump_on_deep_model(self):
        rng = np.random.default_rng(29)
        cfg = random_config(rng)
        params = init_params(cfg, seed=29)
        plant_massive_rows(cfg, params, layer=2, rows=[0])
        assert find_massive_layer(cfg, params, rule="earliest_jump")[0] == 2

    def test_unknown_rule(self, tiny_config, tiny_params):
        with pytest.raises(ConfigError):
            find_massive_layer(tiny_config, tiny_params, rule="deepest")

    def test_all_zero_params_rejected(self, tiny_config):
        params = init_params(tiny_config, seed=0, scale=0.0)
        with pytest.raises(DetectionError):
            find_massive_layer(tiny_config, params)


class TestTopKSelection:
    def test_planted_rows_recovered_in_order(self, tiny_config, tiny_params):
        rows = [29, 4, 17]
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=rows)
        report = find_massive_weights(tiny_config, tiny_params, k=3)
        assert report.layer == 2
        assert report.indices == rows  # strengths descend in the given order
        assert report.magnitudes[0] > report.magnitudes[1] > report.magnitudes[2]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(13)
        cfg = random_config(rng)
        params = init_params(cfg, seed=13)
        for k in (1, 3, cfg.ffn_dim // 2):
            ref_layer, ref_idx = _exhaustive_topk(cfg, params, k)
            report = find_massive_weights(cfg, params, k=k)
            assert report.layer == ref_layer
            assert report.indices == ref_idx

    def test_prefix_property(self, tiny_config, tiny_params):
        small = find_massive_weights(tiny_config, tiny_params, k=4)
        large = find_massive_weights(tiny_config, tiny_params, k=5)
        assert large.indices[:4] == small.indices

    def test_full_k_is_a_permutation(self, tiny_config, tiny_params):
        report = find_massive_weights(tiny_config, tiny_params, k=tiny_config.ffn_dim)
        assert sorted(report.indices) == list(range(tiny_config.ffn_dim))

    def test_tie_break_prefers_lower_index(self, tiny_config, tiny_params):
        # equal planted strengths force exact magnitude ties
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[20, 6, 11], strengths=[900.0] * 3)
        report = find_massive_weights(tiny_config, tiny_params, k=3)
        assert report.indices == [6, 11, 20]

    def test_k_out_of_range(self, tiny_config, tiny_params):
        for bad in (0, -1, tiny_config.ffn_dim + 1):
            with pytest.raises(InputError):
                find_massive_weights(tiny_config, tiny_params, k=bad)

    def test_probe_uses_only_bos(self, tiny_config, tiny_params):
        # perturbing every non-bos embedding row must not change the report
        plant_massive_rows(tiny_config, tiny_params, layer=2, rows=[8, 2])
        before = find_massive_weights(tiny_config, tiny_params, k=2)
        tiny_params["embed"][1:, :] += 3.0
        after = find_massive_weights(tiny_config, tiny_params, k=2)
        assert before.to_dict() == after.to_dict()


class TestWeightCount:
    def test_published_model_scale(self):
        cfg = ModelConfig(
            vocab_size=128256, hidden_dim=4096, ffn_dim=14336,
            num_layers=32, num_heads=32, head_dim=128,
        )
        assert massive_weight_count(cfg, 5) == 40960
        assert massive_weight_count(cfg, 0) == 0
        # roughly 0.0005% of an 8e9-parameter model
        assert 40960 / 8.03e9 == pytest.approx(5.1e-6, rel=0.05)

    def test_negative_k(self, tiny_config):
        with pytest.raises(InputError):
            massive_weight_count(tiny_config, -1)


class TestMoe:
    def _moe_setup(self, seed=31):
        rng = np.random.default_rng(seed)
        cfg = random_config(rng, moe=True)
        params = init_params(cfg, seed=seed)
        return cfg, params

    def test_planted_expert_reported(self):
        cfg, params = self._moe_setup()
        expert = cfg.moe.num_experts - 1
        plant_massive_rows(cfg, params, layer=2, rows=[1, 5], expert=expert)
        report = find_massive_weights(cfg, params, k=2)
        assert report.layer == 2
        assert report.expert == expert
        assert report.indices == [1, 5]

    def test_router_profile_sums_to_one(self):
        cfg, params = self._moe_setup(seed=37)
        profiles = router_profile(cfg, params)
        assert [p.layer for p in profiles] == sorted(cfg.moe.moe_layers)
        for p in profiles:
            assert len(p.probabilities) == cfg.moe.num_experts
            assert sum(p.probabilities) == pytest.approx(1.0, abs=1e-6)

    def test_router_profile_flags_concentration(self):
        cfg, params = self._moe_setup(seed=41)
        expert = 0
        plant_massive_rows(cfg, params, layer=2, rows=[0], expert=expert)
        (profile,) = router_profile(cfg, params)
        assert profile.argmax_expert == expert
        assert profile.flagged  # planted router logit puts ~all mass on one expert

    def test_router_profile_requires_moe(self, tiny_config, tiny_params):
        with pytest.raises(ConfigError):
            router_profile(tiny_config, tiny_params)


def test_report_dict_shape(tiny_config, tiny_params):
    report = find_massive_weights(tiny_config, tiny_params, k=2)
    d = report.to_dict()
    assert set(d) == {"layer", "expert", "k", "indices", "magnitudes", "rule", "config_hash"}
    assert d["config_hash"] == tiny_config.config_hash()
