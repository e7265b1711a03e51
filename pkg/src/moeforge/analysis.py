"""Analytic cost model (parameter, FLOP, and memory counts) and routing
heat maps. Wall-clock seconds are hardware-bound and not modeled; the grid
reproduces the shape of the measured cost tables via counts instead.

FLOP convention: 2 FLOPs per weight-matrix parameter touched per token
(matrix-vector products). Sequence-length-dependent attention score terms
are outside this model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .arch import ArchDescriptor
from .compose import router_sites
from .errors import MoeforgeError
from .recipe import GatingMode, Granularity, MoeRecipe, RecipeParams
from .runtime import RoutingTrace
from .tensorstore import DTYPE_WIDTH

GB = 10 ** 9  # decimal gigabytes


@dataclass
class CostReport:
    total_params: int
    active_params_per_token: int
    ffn_flops_per_token: int
    router_flops_per_token: int
    attn_flops_per_token: int

    def memory_bytes(self, dtype: str = "F16") -> int:
        return self.total_params * DTYPE_WIDTH[dtype]

    def memory_gb(self, dtype: str = "F16") -> float:
        return self.memory_bytes(dtype) / GB

    @property
    def total_flops_per_token(self) -> int:
        return self.ffn_flops_per_token + self.router_flops_per_token + self.attn_flops_per_token


@dataclass
class _RecipeView:
    gating: GatingMode
    top_k: int
    granularity: Granularity
    mix_attention: bool
    kinds: list[str]
    lora_rank: int | None


def _view(recipe) -> _RecipeView:
    if isinstance(recipe, MoeRecipe):
        kinds = [s.kind for s in recipe.expert_sources]
        ranks = {s.rank for s in recipe.expert_sources if s.kind == "lora"}
        return _RecipeView(recipe.gating, recipe.top_k, recipe.granularity,
                           recipe.mix_attention, kinds, ranks.pop() if ranks else None)
    if isinstance(recipe, RecipeParams):
        return _RecipeView(recipe.gating, recipe.top_k, recipe.granularity,
                           recipe.mix_attention, [k for k, _ in recipe.experts],
                           recipe.lora_rank)
    raise TypeError(f"expected MoeRecipe or RecipeParams, got {type(recipe)!r}")


def per_expert_ffn_params(arch: ArchDescriptor) -> int:
    """Full-expert FFN parameters across all layers: 3 * hidden * inter * L."""
    return 3 * arch.hidden_size * arch.ffn_intermediate_size * arch.num_layers


def cost_estimate(arch: ArchDescriptor, recipe) -> CostReport:
    """Closed-form parameter and FLOP counts for a composed mixture.

    ``recipe`` is a MoeRecipe or the RecipeParams decoded from a composed
    checkpoint; counts match the composed checkpoint's tensor-shape sums
    exactly. Active counts assume the top-K heaviest experts run when expert
    kinds are mixed (they coincide for homogeneous mixtures).
    """
    v = _view(recipe)
    d, inter, L = arch.hidden_size, arch.ffn_intermediate_size, arch.num_layers
    n = len(v.kinds)

    attn_params = L * (2 * d * d + 2 * arch.kv_dim * d)
    norm_params = (2 * L + 1) * d
    embed_params = arch.vocab_size * d
    lm_head_params = arch.vocab_size * d

    full_ffn = 3 * d * inter * L
    lora_ffn = 3 * (v.lora_rank or 0) * (d + inter) * L
    expert_params = [full_ffn if k == "full" else lora_ffn for k in v.kinds]
    expert_active = [full_ffn if k == "full" else full_ffn + lora_ffn for k in v.kinds]
    shared_base_ffn = full_ffn if any(k == "lora" for k in v.kinds) else 0

    gateless = v.gating == GatingMode.GATELESS
    sites = 0 if gateless else len(router_sites(L, v.granularity, v.mix_attention))
    router_params = sites * n * d

    total = (embed_params + lm_head_params + norm_params + router_params
             + shared_base_ffn + sum(expert_params)
             + (n * attn_params if v.mix_attention else attn_params))

    active_count = n if gateless else v.top_k
    ffn_active = sum(sorted(expert_active, reverse=True)[:active_count])
    attn_active = attn_params * (active_count if v.mix_attention else 1)
    active = d + lm_head_params + norm_params + router_params + ffn_active + attn_active

    return CostReport(
        total_params=total,
        active_params_per_token=active,
        ffn_flops_per_token=2 * ffn_active,
        router_flops_per_token=2 * router_params,
        attn_flops_per_token=2 * attn_active,
    )


def dense_cost(arch: ArchDescriptor) -> CostReport:
    """Counts for a plain dense model (the N=1 gate-less degenerate case)."""
    d, inter, L = arch.hidden_size, arch.ffn_intermediate_size, arch.num_layers
    attn = L * (2 * d * d + 2 * arch.kv_dim * d)
    norms = (2 * L + 1) * d
    ffn = 3 * d * inter * L
    total = 2 * arch.vocab_size * d + norms + attn + ffn
    active = d + arch.vocab_size * d + norms + attn + ffn
    return CostReport(total, active, 2 * ffn, 0, 2 * attn)


def checkpoint_param_count(ckpt) -> int:
    """Exact parameter count from tensor shapes (cross-check oracle)."""
    return sum(int(np.prod(ckpt.entry(n).shape)) for n in ckpt.names())


@dataclass
class HeatmapTable:
    """Per-layer empirical distribution of the top-weighted expert."""

    fractions: np.ndarray  # (num_layers, num_experts), rows sum to 1
    counts: np.ndarray  # tokens observed per layer

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "expert", "fraction"])
            for l in range(self.fractions.shape[0]):
                for e in range(self.fractions.shape[1]):
                    w.writerow([l, e, repr(float(self.fractions[l, e]))])


def routing_heatmap(trace: RoutingTrace, n_experts: int | None = None,
                    site_prefix: str = "ffn") -> HeatmapTable:
    """Fraction of tokens for which each expert is top-weighted, per layer.

    ``site_prefix`` selects which routed sites count ("ffn" covers both
    whole-FFN and per-projection decisions; "attn" the mixed-attention ones).
    """
    records = [r for r in trace.records if r.site.startswith(site_prefix)]
    if not records:
        raise MoeforgeError("empty routing trace")
    num_layers = max(r.layer for r in records) + 1
    if n_experts is None:
        n_experts = max(max(r.indices) for r in records) + 1

    counts = np.zeros((num_layers, n_experts))
    for r in records:
        counts[r.layer, r.top_expert] += 1
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise MoeforgeError("routing trace has layers with no decisions")
    return HeatmapTable(counts / totals, counts.sum(axis=1))


@dataclass
class GridRow:
    mode: str
    n: int
    total_params: int
    active_params: int
    ffn_flops: int
    router_flops: int
    memory_gb: float
    over_budget: bool


def compare_cost_tables(reports: list[tuple[str, int, CostReport]],
                        budget_gb: float = 80.0, dtype: str = "F16") -> list[GridRow]:
    """Cost-table-shaped grid over (gating mode, expert count), flagging
    configurations whose predicted memory exceeds the budget (the
    out-of-memory analog; default budget 80 GB)."""
    rows = []
    for mode, n, report in reports:
        mem = report.memory_gb(dtype)
        rows.append(GridRow(
            mode=mode, n=n,
            total_params=report.total_params,
            active_params=report.active_params_per_token,
            ffn_flops=report.ffn_flops_per_token,
            router_flops=report.router_flops_per_token,
            memory_gb=mem,
            over_budget=mem > budget_gb,
        ))
    return rows


def write_cost_grid(path: str, rows: list[GridRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "N", "total_params", "active_params",
                    "ffn_flops", "router_flops", "memory_gb", "over_budget"])
        for r in rows:
            w.writerow([r.mode, r.n, r.total_params, r.active_params,
                        r.ffn_flops, r.router_flops, repr(r.memory_gb),
                        "true" if r.over_budget else "false"])
