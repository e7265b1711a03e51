import numpy as np
import pytest

from moeforge.analysis import (
    CostReport,
    checkpoint_param_count,
    compare_cost_tables,
    cost_estimate,
    dense_cost,
    per_expert_ffn_params,
    routing_heatmap,
    write_cost_grid,
)
from moeforge.arch import MISTRAL_7B
from moeforge.errors import MoeforgeError
from moeforge.recipe import GatingMode, Granularity, RecipeParams
from moeforge.runtime import GateDecision, Model, RoutingTrace, model_forward

import taskgen

# Observed A100 measurements being trend-matched: memory (GB) for the
# gate-free mixture at 2/4/6 experts, inference seconds for the noisy one.
PAPER_MEM_GB = {2: 27.137, 4: 48.642, 6: 70.146}
PAPER_NOISY_SECONDS = {2: 1.155, 4: 1.179, 6: 1.203}


def params_for(mode, n, k=2, granularity=Granularity.FFN, mix_attention=False):
    return RecipeParams(
        gating=mode, granularity=granularity, num_experts=n, top_k=min(k, n),
        noise_sigma=0.01, seed=0, mix_attention=mix_attention, always_on=None,
        experts=[("full", f"e{i}") for i in range(n)],
    )


def test_mistral_per_expert_ffn_params():
    assert per_expert_ffn_params(MISTRAL_7B) == 3 * 4096 * 14336 * 32 == 5_637_144_576


def test_two_expert_memory_increment_matches_observed_within_10pct():
    r2 = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 2))
    r4 = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 4))
    increment_gb = r4.memory_gb("F16") - r2.memory_gb("F16")
    np.testing.assert_allclose(increment_gb, 22.549, atol=5e-4)
    observed = PAPER_MEM_GB[4] - PAPER_MEM_GB[2]  # 21.505
    assert abs(increment_gb - observed) / observed < 0.10


def test_gateless_active_ffn_flops_scale_with_n():
    r2 = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 2))
    r4 = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 4))
    r8 = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 8))
    assert r4.ffn_flops_per_token / r2.ffn_flops_per_token == 2.0
    assert r8.ffn_flops_per_token / r2.ffn_flops_per_token == 4.0


def test_noisy_topk_flops_nearly_flat():
    reports = {n: cost_estimate(MISTRAL_7B, params_for(GatingMode.NOISY, n, k=2))
               for n in (2, 4, 6, 8)}
    # Active FFN compute is pinned by K, not N.
    assert reports[4].ffn_flops_per_token == reports[2].ffn_flops_per_token
    assert reports[8].ffn_flops_per_token == reports[2].ffn_flops_per_token
    # Router cost grows by 2 * hidden * N per site and stays negligible.
    per_site_growth = (reports[4].router_flops_per_token
                       - reports[2].router_flops_per_token) / MISTRAL_7B.num_layers
    assert per_site_growth == 2 * MISTRAL_7B.hidden_size * 2
    growth = (reports[6].total_flops_per_token - reports[2].total_flops_per_token) \
        / reports[2].total_flops_per_token
    assert 0 < growth < 0.01
    # The measured noisy row is near-flat too (1.155 -> 1.203 s).
    measured_growth = (PAPER_NOISY_SECONDS[6] - PAPER_NOISY_SECONDS[2]) / PAPER_NOISY_SECONDS[2]
    assert measured_growth < 0.05


def test_single_expert_gateless_equals_dense():
    assert cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 1)) \
        == dense_cost(MISTRAL_7B)


def test_noisy_equals_gateless_ffn_flops_at_two_experts():
    g = cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, 2))
    n = cost_estimate(MISTRAL_7B, params_for(GatingMode.NOISY, 2, k=2))
    assert g.ffn_flops_per_token == n.ffn_flops_per_token


def test_gateless_memory_linear_in_n():
    mems = [cost_estimate(MISTRAL_7B, params_for(GatingMode.GATELESS, n)).memory_bytes("F16")
            for n in (2, 4, 6, 8)]
    diffs = np.diff(mems)
    assert np.all(np.abs(diffs - diffs[0]) <= 1)


def test_eight_experts_flagged_over_80gb_budget():
    reports = [(m.value, n, cost_estimate(MISTRAL_7B, params_for(m, n, k=2)))
               for m in (GatingMode.GATELESS, GatingMode.NOISY) for n in (2, 4, 6, 8)]
    rows = compare_cost_tables(reports, budget_gb=80.0, dtype="F16")
    for row in rows:
        assert row.over_budget == (row.n == 8), (row.mode, row.n, row.memory_gb)
        if row.n == 8:
            assert row.memory_gb > 80.0
    # Predicted 2X/4X/6X memory tracks the observed table within 10%.
    for row in rows:
        if row.mode == "gateless" and row.n in PAPER_MEM_GB:
            assert abs(row.memory_gb - PAPER_MEM_GB[row.n]) / PAPER_MEM_GB[row.n] < 0.10


def test_cost_grid_csv_schema(tmp_path):
    reports = [("noisy", n, cost_estimate(MISTRAL_7B, params_for(GatingMode.NOISY, n)))
               for n in (2, 4)]
    rows = compare_cost_tables(reports)
    path = str(tmp_path / "grid.csv")
    write_cost_grid(path, rows)
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "mode,N,total_params,active_params,ffn_flops,router_flops,memory_gb,over_budget"
    assert len(lines) == 3
    assert lines[1].startswith("noisy,2,")


def test_memory_bytes_by_dtype():
    r = CostReport(1000, 500, 0, 0, 0)
    assert r.memory_bytes("F64") == 8000
    assert r.memory_bytes("F32") == 4000
    assert r.memory_bytes("F16") == 2000
    assert r.memory_bytes("BF16") == 2000


def test_active_params_never_exceed_total():
    for mode in (GatingMode.GATELESS, GatingMode.NOISY):
        for n in (1, 2, 4, 8):
            for mix in (False, True):
                r = cost_estimate(MISTRAL_7B, params_for(mode, n, mix_attention=mix))
                assert r.active_params_per_token <= r.total_params


def test_lora_mixture_estimate_matches_composed_params():
    # Cross-checked against actual composition in test_compose; here check
    # the adapter arithmetic directly.
    from moeforge.tinymodels import TINY

    params = RecipeParams(
        gating=GatingMode.NOISY, granularity=Granularity.FFN, num_experts=2,
        top_k=1, noise_sigma=0.01, seed=0, mix_attention=False, always_on=None,
        experts=[("lora", "a"), ("lora", "b")], lora_rank=2, lora_alpha=4.0)
    r = cost_estimate(TINY, params)
    d, inter, L = TINY.hidden_size, TINY.ffn_intermediate_size, TINY.num_layers
    adapters = 2 * 3 * 2 * (d + inter) * L
    base_ffn = 3 * d * inter * L
    assert r.total_params == (2 * TINY.vocab_size * d + (2 * L + 1) * d
                              + L * (2 * d * d + 2 * TINY.kv_dim * d)
                              + base_ffn + adapters + L * 2 * d)


# ---- heat maps ----

def fake_trace(decisions):
    """decisions: list of (layer, indices, weights) per token."""
    trace = RoutingTrace()
    for t, (layer, idx, w) in enumerate(decisions):
        trace.record(layer, "ffn", t, GateDecision(idx, np.asarray(w, dtype=np.float64)))
    return trace


def test_gateless_trace_top_expert_is_zero():
    trace = fake_trace([(0, [0, 1, 2], [1 / 3] * 3) for _ in range(5)])
    table = routing_heatmap(trace, n_experts=3)
    np.testing.assert_allclose(table.fractions[0], [1.0, 0.0, 0.0])


def test_forced_winner_column():
    trace = fake_trace([(0, [0, 2], [0.1, 0.9]), (0, [1, 2], [0.2, 0.8]),
                        (1, [2, 3], [0.7, 0.3])])
    table = routing_heatmap(trace, n_experts=4)
    np.testing.assert_allclose(table.fractions[0], [0, 0, 1.0, 0])
    np.testing.assert_allclose(table.fractions[1], [0, 0, 1.0, 0])


def test_heatmap_rows_are_stochastic():
    r = np.random.default_rng(3)
    decisions = []
    for _ in range(200):
        layer = int(r.integers(0, 3))
        idx = sorted(r.choice(4, size=2, replace=False).tolist())
        w = r.random(2)
        decisions.append((layer, idx, w / w.sum()))
    table = routing_heatmap(fake_trace(decisions), n_experts=4)
    np.testing.assert_allclose(table.fractions.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(table.fractions >= 0) and np.all(table.fractions <= 1)


def test_empty_trace_rejected():
    with pytest.raises(MoeforgeError, match="empty"):
        routing_heatmap(RoutingTrace())


def test_heatmap_csv(tmp_path):
    trace = fake_trace([(0, [0, 1], [0.9, 0.1]), (0, [0, 1], [0.2, 0.8])])
    path = str(tmp_path / "heat.csv")
    routing_heatmap(trace, n_experts=2).to_csv(path)
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "layer,expert,fraction"
    assert lines[1] == "0,0,0.5"


def test_trained_task_heatmaps_show_population_dominance(two_pop_run):
    trained = two_pop_run["trained"]
    corpus, labels = two_pop_run["corpus"], two_pop_run["labels"]
    for pop in (0, 1):
        trace = RoutingTrace()
        for batch, label in zip(corpus[:40], labels[:40]):
            if label != pop:
                continue
            _, t = model_forward(trained, batch.tokens)
            trace.extend(t)
        table = routing_heatmap(trace, n_experts=2)
        dominant_layers = int(np.sum(table.fractions[:, pop] > 0.5))
        assert dominant_layers > table.fractions.shape[0] // 2
