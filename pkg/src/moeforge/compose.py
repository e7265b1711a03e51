"""Build mixture checkpoints from a base model and expert sources: FFN (and
optionally attention) tensors move into per-expert slots, routers are
initialized per the recipe, and the full recipe is recorded in metadata."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import naming
from .arch import ArchDescriptor, arch_metadata, check_compatibility, infer_arch
from .errors import CompatibilityError, RecipeError
from .recipe import (
    GatingMode,
    Granularity,
    ExpertSource,
    MoeRecipe,
    decode_metadata,
    encode_metadata,
    lora_matrices,
)
from .tensorstore import TensorEntry, TensorMap

# RouterBank: tensor name -> (n_experts, hidden_size) float32 matrix.
RouterBank = dict[str, np.ndarray]


def router_sites(
    num_layers: int, granularity: Granularity, mix_attention: bool
) -> list[str]:
    """Routed-site tensor names in canonical draw order: per layer, the FFN
    router(s) first (gate/up/down for fgmlp), then the attention router."""
    sites = []
    for l in range(num_layers):
        if granularity == Granularity.FGMLP:
            sites.extend(naming.ffn_router_proj(l, p) for p in naming.FFN_PROJS)
        else:
            sites.append(naming.ffn_router(l))
        if mix_attention:
            sites.append(naming.attn_router(l))
    return sites


def init_router(
    mode: GatingMode,
    arch: ArchDescriptor,
    n_experts: int,
    seed: int,
    sigma: float = 0.01,
    granularity: Granularity = Granularity.FFN,
    mix_attention: bool = False,
    activations: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> RouterBank:
    """Initialize one router matrix per routed site.

    NOISY and TRAINED draw i.i.d. Gaussian entries (mean 0, std ``sigma``)
    from ``np.random.default_rng(seed)``, one (n_experts, hidden) draw per
    site in ``router_sites`` order, so the bank is a pure function of
    (seed, sigma, shape). HIDDEN_REPR instead sets row i at each layer to the
    unit-normalized difference between expert i's positive- and
    negative-prompt mean hidden states for that layer (``activations[i]`` is
    the (pos_mean, neg_mean) pair of (num_layers, hidden) arrays produced by
    ``runtime.collect_prompt_hiddens``).
    """
    if mode == GatingMode.GATELESS:
        return {}
    sites = router_sites(arch.num_layers, granularity, mix_attention)

    if mode in (GatingMode.NOISY, GatingMode.TRAINED):
        if sigma <= 0:
            raise RecipeError("noise_sigma must be positive")
        rng = np.random.default_rng(seed)
        return {
            site: (rng.standard_normal((n_experts, arch.hidden_size)) * sigma).astype(np.float32)
            for site in sites
        }

    # HIDDEN_REPR: rows from prompt hidden-state statistics.
    if activations is None:
        raise RecipeError("hidden_repr gating requires per-expert prompt activations")
    if len(activations) != n_experts:
        raise RecipeError(f"expected activations for {n_experts} experts, got {len(activations)}")
    per_layer = np.zeros((arch.num_layers, n_experts, arch.hidden_size))
    for i, (pos_mean, neg_mean) in enumerate(activations):
        diff = np.asarray(pos_mean) - np.asarray(neg_mean)
        norms = np.linalg.norm(diff, axis=-1)
        for l in range(arch.num_layers):
            if norms[l] == 0.0:
                raise RecipeError(
                    f"zero-norm hidden difference for expert {i} at layer {l}; "
                    "positive and negative prompt means coincide"
                )
        per_layer[:, i, :] = diff / norms[:, None]
    return {site: per_layer[naming.layer_of(site)].astype(np.float32) for site in sites}


def _validate_lora_source(base: TensorMap, arch: ArchDescriptor, src: ExpertSource) -> None:
    dims = {"gate": (arch.ffn_intermediate_size, arch.hidden_size),
            "up": (arch.ffn_intermediate_size, arch.hidden_size),
            "down": (arch.hidden_size, arch.ffn_intermediate_size)}
    rank = src.rank
    if rank is None or rank < 1:
        raise RecipeError(f"LoRA source {src.label!r} must have rank >= 1")
    for l in range(arch.num_layers):
        for proj, (out_dim, in_dim) in dims.items():
            if naming.dense_ffn(l, proj) not in base:
                raise RecipeError(
                    f"LoRA source adapts {naming.dense_ffn(l, proj)!r}, absent from base"
                )
            a, b = lora_matrices(src.ckpt, l, proj)
            if a.shape != (rank, in_dim) or b.shape != (out_dim, rank):
                raise RecipeError(
                    f"LoRA source {src.label!r} layer {l} {proj}: expected "
                    f"A {(rank, in_dim)} and B {(out_dim, rank)}, got {a.shape} and {b.shape}"
                )


def _check_sources(base: TensorMap, recipe: MoeRecipe) -> ArchDescriptor:
    base_arch = infer_arch(base)
    full = [(i, s) for i, s in enumerate(recipe.expert_sources) if s.kind == "full"]
    report = check_compatibility(base_arch, [infer_arch(s.ckpt) for _, s in full])
    if not report.compatible:
        lines = [f"{f}: base={bv}, expert {full[i][0]}={ev}" for f, bv, i, ev in report.mismatches]
        raise CompatibilityError("experts incompatible with base: " + "; ".join(lines))
    for i, s in enumerate(recipe.expert_sources):
        if s.kind == "lora":
            if recipe.mix_attention:
                raise RecipeError("attention mixing requires full expert checkpoints")
            _validate_lora_source(base, base_arch, s)
    return base_arch


def _copy(dst: TensorMap, dst_name: str, src: TensorMap, src_name: str) -> None:
    dst.put_entry(dst_name, src.entry(src_name))


def _assemble_layer(l: int, base: TensorMap, recipe: MoeRecipe,
                    routers: RouterBank) -> list[tuple[str, TensorEntry]]:
    out: list[tuple[str, TensorEntry]] = []
    add = lambda name, src, src_name: out.append((name, src.entry(src_name)))

    add(naming.attn_norm(l), base, naming.attn_norm(l))
    add(naming.ffn_norm(l), base, naming.ffn_norm(l))

    if recipe.mix_attention:
        for i, src in enumerate(recipe.expert_sources):
            for p in naming.ATTN_PROJS:
                add(naming.attn_expert(l, i, p), src.ckpt, naming.attn(l, p))
    else:
        for p in naming.ATTN_PROJS:
            add(naming.attn(l, p), base, naming.attn(l, p))

    any_lora = any(s.kind == "lora" for s in recipe.expert_sources)
    if any_lora:
        for p in naming.FFN_PROJS:
            add(naming.dense_ffn(l, p), base, naming.dense_ffn(l, p))
    for i, src in enumerate(recipe.expert_sources):
        if src.kind == "full":
            for p in naming.FFN_PROJS:
                add(naming.expert_ffn(l, i, p), src.ckpt, naming.dense_ffn(l, p))
        else:
            for p in naming.FFN_PROJS:
                add(naming.lora(l, i, p, "A"), src.ckpt, f"layers.{l}.ffn.{p}.lora_A.weight")
                add(naming.lora(l, i, p, "B"), src.ckpt, f"layers.{l}.ffn.{p}.lora_B.weight")

    for site, matrix in routers.items():
        if naming.layer_of(site) == l:
            out.append((site, TensorEntry.from_array(matrix, "F32")))
    return out


def compose_moe(
    base: TensorMap,
    recipe: MoeRecipe,
    activations: list[tuple[np.ndarray, np.ndarray]] | None = None,
    threads: int = 1,
) -> TensorMap:
    """Compose a mixture checkpoint from ``base`` and the recipe's experts.

    The base contributes embeddings, lm head, norms, and (unless attention
    mixing is on) attention tensors; each expert contributes FFN tensors
    under its slot namespace. Output bytes are a pure function of the inputs
    regardless of ``threads``.
    """
    recipe.validate()
    base_arch = _check_sources(base, recipe)

    routers = init_router(
        recipe.gating, base_arch, recipe.num_experts, recipe.seed,
        sigma=recipe.noise_sigma, granularity=recipe.granularity,
        mix_attention=recipe.mix_attention, activations=activations,
    )

    out = TensorMap({**arch_metadata(base_arch), **encode_metadata(recipe)})
    for name in (naming.EMBED, naming.LM_HEAD, naming.FINAL_NORM):
        _copy(out, name, base, name)

    layers = range(base_arch.num_layers)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(
                lambda l: _assemble_layer(l, base, recipe, routers), layers))
    else:
        chunks = [_assemble_layer(l, base, recipe, routers) for l in layers]
    for chunk in chunks:
        for name, entry in chunk:
            out.put_entry(name, entry)
    return out


def merge_lora(base: TensorMap, adapter: TensorMap) -> TensorMap:
    """Materialize a LoRA adapter into a dense checkpoint: each FFN
    projection becomes W + (alpha / rank) * B @ A. Used to treat an adapter
    expert as a standalone model (hidden-state collection, oracles)."""
    arch = infer_arch(base)
    src = ExpertSource(kind="lora", ckpt=adapter, label="merge")
    _validate_lora_source(base, arch, src)
    scale = src.alpha / src.rank
    out = base.copy()
    for l in range(arch.num_layers):
        for p in naming.FFN_PROJS:
            a, b = lora_matrices(adapter, l, p)
            w = base.array(naming.dense_ffn(l, p))
            out.put(naming.dense_ffn(l, p), (w.astype(np.float64)
                                             + scale * (b.astype(np.float64)
                                                        @ a.astype(np.float64))).astype(w.dtype))
    return out


def _slot_names(moe: TensorMap, slot: int) -> list[str]:
    prefixes = (f".ffn.experts.{slot}.", f".attn.experts.{slot}.")
    return [n for n in moe.names() if any(p in n for p in prefixes)]


def swap_expert(moe: TensorMap, slot: int, source: ExpertSource) -> TensorMap:
    """Replace one expert slot's tensors with a new source, leaving routers,
    other experts, and base tensors untouched. No training happens: for
    gate-less and noisy mixtures the swap is the whole operation."""
    params = decode_metadata(moe.metadata)
    if not 0 <= slot < params.num_experts:
        raise RecipeError(f"slot out of range: {slot} not in [0, {params.num_experts})")
    arch = infer_arch(moe)

    if source.kind == "full":
        report = check_compatibility(arch, [infer_arch(source.ckpt)])
        if not report.compatible:
            raise CompatibilityError(
                "swap source incompatible: " +
                "; ".join(f"{f}: base={bv}, source={ev}" for f, bv, _, ev in report.mismatches))
    else:
        if params.mix_attention:
            raise RecipeError("attention mixing requires full expert checkpoints")
        if naming.dense_ffn(0, "gate") not in moe:
            raise RecipeError(
                "cannot swap in a LoRA source: mixture does not carry base FFN tensors")
        _validate_lora_source(moe, arch, source)
        if params.lora_rank is not None and source.rank != params.lora_rank:
            raise RecipeError(
                f"LoRA rank {source.rank} does not match mixture rank {params.lora_rank}")

    out = moe.copy()
    for name in _slot_names(out, slot):
        out.drop(name)
    for l in range(arch.num_layers):
        if source.kind == "full":
            for p in naming.FFN_PROJS:
                _copy(out, naming.expert_ffn(l, slot, p), source.ckpt, naming.dense_ffn(l, p))
            if params.mix_attention:
                for p in naming.ATTN_PROJS:
                    _copy(out, naming.attn_expert(l, slot, p), source.ckpt, naming.attn(l, p))
        else:
            for p in naming.FFN_PROJS:
                out.put_entry(naming.lora(l, slot, p, "A"),
                              source.ckpt.entry(f"layers.{l}.ffn.{p}.lora_A.weight"))
                out.put_entry(naming.lora(l, slot, p, "B"),
                              source.ckpt.entry(f"layers.{l}.ffn.{p}.lora_B.weight"))

    out.metadata[f"moe.expert.{slot}.kind"] = source.kind
    out.metadata[f"moe.expert.{slot}.source"] = source.label
    kinds = [out.metadata[f"moe.expert.{i}.kind"] for i in range(params.num_experts)]
    if source.kind == "lora":
        out.metadata["moe.lora.rank"] = str(source.rank)
        out.metadata["moe.lora.alpha"] = repr(source.alpha)
    elif "lora" not in kinds:
        out.metadata.pop("moe.lora.rank", None)
        out.metadata.pop("moe.lora.alpha", None)
    return out


def permute_experts(moe: TensorMap, perm: list[int]) -> TensorMap:
    """Reorder expert slots so new slot j holds old expert perm[j], permuting
    router rows and the always-on index to match. Forward outputs of the
    permuted mixture are identical to the original's."""
    params = decode_metadata(moe.metadata)
    n = params.num_experts
    if sorted(perm) != list(range(n)):
        raise RecipeError(f"perm must be a permutation of 0..{n - 1}")
    arch = infer_arch(moe)

    out = TensorMap(dict(moe.metadata))
    sites = set(router_sites(arch.num_layers, params.granularity, params.mix_attention))
    for name in moe.names():
        slot = naming.expert_slot_of(name)
        if name in sites:
            matrix = moe.array(name)[perm]
            out.put_entry(name, TensorEntry.from_array(matrix, moe.entry(name).dtype))
        elif slot is not None:
            j = perm.index(slot)
            out.put_entry(name.replace(f".experts.{slot}.", f".experts.{j}."),
                          moe.entry(name))
        else:
            out.put_entry(name, moe.entry(name))

    for j in range(n):
        out.metadata[f"moe.expert.{j}.kind"] = moe.metadata[f"moe.expert.{perm[j]}.kind"]
        out.metadata[f"moe.expert.{j}.source"] = moe.metadata[f"moe.expert.{perm[j]}.source"]
    if params.always_on is not None:
        out.metadata["moe.always_on"] = str(perm.index(params.always_on))
    return out
