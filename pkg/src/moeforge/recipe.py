"""Composition recipes: gating mode, top-K, granularity, expert sources, and
their round-trippable encodings (JSON recipe files and checkpoint metadata)."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import naming
from .errors import RecipeError
from .tensorstore import TensorMap


class GatingMode(str, enum.Enum):
    GATELESS = "gateless"
    NOISY = "noisy"
    TRAINED = "trained"
    HIDDEN_REPR = "hidden_repr"


class Granularity(str, enum.Enum):
    FFN = "ffn"
    FGMLP = "fgmlp"


ROUTED_MODES = (GatingMode.NOISY, GatingMode.TRAINED, GatingMode.HIDDEN_REPR)

DEFAULT_SIGMA = 0.01


@dataclass
class ExpertSource:
    """One expert slot: a full dense checkpoint, or a LoRA adapter over the
    base model's FFN projections."""

    kind: str  # "full" | "lora"
    ckpt: TensorMap
    label: str = "unspecified"

    def __post_init__(self):
        if self.kind not in ("full", "lora"):
            raise RecipeError(f"unknown expert kind {self.kind!r}")

    @property
    def rank(self) -> int | None:
        if self.kind != "lora":
            return None
        try:
            return int(self.ckpt.metadata["lora.rank"])
        except KeyError:
            raise RecipeError(f"LoRA source {self.label!r} lacks lora.rank metadata") from None

    @property
    def alpha(self) -> float | None:
        if self.kind != "lora":
            return None
        try:
            return float(self.ckpt.metadata["lora.alpha"])
        except KeyError:
            raise RecipeError(f"LoRA source {self.label!r} lacks lora.alpha metadata") from None


@dataclass
class MoeRecipe:
    """Everything compose_moe needs to build a mixture deterministically."""

    gating: GatingMode
    expert_sources: list[ExpertSource]
    top_k: int = 2
    noise_sigma: float = DEFAULT_SIGMA
    granularity: Granularity = Granularity.FFN
    mix_attention: bool = False
    always_on: int | None = None
    seed: int = 0
    hidden_init_prompts: tuple[list[str], list[str]] | None = None  # HIDDEN_REPR only

    @property
    def num_experts(self) -> int:
        return len(self.expert_sources)

    def validate(self) -> None:
        n = self.num_experts
        if n < 1:
            raise RecipeError("recipe needs at least one expert")
        if self.gating != GatingMode.GATELESS:
            if not 1 <= self.top_k <= n:
                raise RecipeError(f"top_k must satisfy 1 <= top_k <= {n}, got {self.top_k}")
            if self.noise_sigma <= 0:
                raise RecipeError("noise_sigma must be positive")
        if self.always_on is not None and not 0 <= self.always_on < n:
            raise RecipeError(f"always_on index {self.always_on} out of range for {n} experts")
        if not 0 <= self.seed < 2 ** 64:
            raise RecipeError("seed must fit in an unsigned 64-bit integer")


def encode_metadata(recipe: MoeRecipe) -> dict[str, str]:
    """Checkpoint metadata recording the recipe; decode_metadata inverts it."""
    meta = {
        "moe.gating": recipe.gating.value,
        "moe.granularity": recipe.granularity.value,
        "moe.num_experts": str(recipe.num_experts),
        "moe.top_k": str(recipe.top_k),
        "moe.sigma": repr(recipe.noise_sigma),
        "moe.seed": str(recipe.seed),
        "moe.mix_attention": "true" if recipe.mix_attention else "false",
        "moe.always_on": "none" if recipe.always_on is None else str(recipe.always_on),
    }
    for i, src in enumerate(recipe.expert_sources):
        meta[f"moe.expert.{i}.source"] = src.label
        meta[f"moe.expert.{i}.kind"] = src.kind
    ranks = {s.rank for s in recipe.expert_sources if s.kind == "lora"}
    alphas = {s.alpha for s in recipe.expert_sources if s.kind == "lora"}
    if ranks:
        if len(ranks) > 1 or len(alphas) > 1:
            raise RecipeError("all LoRA experts in one mixture must share rank and alpha")
        meta["moe.lora.rank"] = str(ranks.pop())
        meta["moe.lora.alpha"] = repr(alphas.pop())
    return meta


@dataclass
class RecipeParams:
    """Recipe configuration decoded from checkpoint metadata; expert tensors
    live in the checkpoint itself, so sources appear as (kind, label) pairs."""

    gating: GatingMode
    granularity: Granularity
    num_experts: int
    top_k: int
    noise_sigma: float
    seed: int
    mix_attention: bool
    always_on: int | None
    experts: list[tuple[str, str]] = field(default_factory=list)
    lora_rank: int | None = None
    lora_alpha: float | None = None


def decode_metadata(meta: dict[str, str]) -> RecipeParams:
    try:
        n = int(meta["moe.num_experts"])
        params = RecipeParams(
            gating=GatingMode(meta["moe.gating"]),
            granularity=Granularity(meta["moe.granularity"]),
            num_experts=n,
            top_k=int(meta["moe.top_k"]),
            noise_sigma=float(meta["moe.sigma"]),
            seed=int(meta["moe.seed"]),
            mix_attention=meta["moe.mix_attention"] == "true",
            always_on=None if meta["moe.always_on"] == "none" else int(meta["moe.always_on"]),
            experts=[(meta[f"moe.expert.{i}.kind"], meta[f"moe.expert.{i}.source"])
                     for i in range(n)],
        )
    except (KeyError, ValueError) as e:
        raise RecipeError(f"checkpoint metadata does not describe a mixture: {e}") from e
    if "moe.lora.rank" in meta:
        params.lora_rank = int(meta["moe.lora.rank"])
        params.lora_alpha = float(meta["moe.lora.alpha"])
    return params


def is_moe(meta: dict[str, str]) -> bool:
    return "moe.gating" in meta


# ---- recipe files ----

def load_recipe_file(path: str, loader) -> MoeRecipe:
    """Parse a JSON recipe file; ``loader(path) -> TensorMap`` resolves the
    expert checkpoint paths (relative to the recipe file's directory)."""
    import os

    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise RecipeError(f"recipe file is not valid JSON: {e}") from e
    base_dir = os.path.dirname(os.path.abspath(path))
    return recipe_from_dict(data, lambda p: loader(p if os.path.isabs(p)
                                                  else os.path.join(base_dir, p)))


def recipe_from_dict(data: dict, loader) -> MoeRecipe:
    try:
        gating = GatingMode(data["gating"])
        experts_spec = data["experts"]
    except (KeyError, ValueError) as e:
        raise RecipeError(f"invalid recipe: {e}") from e
    if not isinstance(experts_spec, list) or not experts_spec:
        raise RecipeError("recipe must list at least one expert")

    sources = []
    for entry in experts_spec:
        kind = entry.get("kind", "full")
        p = entry.get("path")
        if p is None:
            raise RecipeError("every expert entry needs a 'path'")
        sources.append(ExpertSource(kind=kind, ckpt=loader(p), label=p))

    prompts = None
    if "hidden_init" in data:
        hi = data["hidden_init"]
        prompts = (list(hi.get("positive", [])), list(hi.get("negative", [])))

    recipe = MoeRecipe(
        gating=gating,
        expert_sources=sources,
        top_k=int(data.get("top_k", 2)),
        noise_sigma=float(data.get("noise_sigma", DEFAULT_SIGMA)),
        granularity=Granularity(data.get("granularity", "ffn")),
        mix_attention=bool(data.get("mix_attention", False)),
        always_on=data.get("always_on"),
        seed=int(data.get("seed", 0)),
        hidden_init_prompts=prompts,
    )
    recipe.validate()
    return recipe


def recipe_to_dict(recipe: MoeRecipe) -> dict:
    """JSON-ready mirror of the recipe, with expert paths taken from labels."""
    out = {
        "gating": recipe.gating.value,
        "top_k": recipe.top_k,
        "noise_sigma": recipe.noise_sigma,
        "granularity": recipe.granularity.value,
        "mix_attention": recipe.mix_attention,
        "always_on": recipe.always_on,
        "seed": recipe.seed,
        "experts": [{"kind": s.kind, "path": s.label} for s in recipe.expert_sources],
    }
    if recipe.hidden_init_prompts is not None:
        pos, neg = recipe.hidden_init_prompts
        out["hidden_init"] = {"positive": pos, "negative": neg}
    return out


def params_to_recipe_dict(params: RecipeParams) -> dict:
    """Recipe JSON reconstructed from checkpoint metadata (inspect output)."""
    return {
        "gating": params.gating.value,
        "top_k": params.top_k,
        "noise_sigma": params.noise_sigma,
        "granularity": params.granularity.value,
        "mix_attention": params.mix_attention,
        "always_on": params.always_on,
        "seed": params.seed,
        "experts": [{"kind": kind, "path": label} for kind, label in params.experts],
    }


def lora_matrices(adapter: TensorMap, layer: int, proj: str) -> tuple[np.ndarray, np.ndarray]:
    """Fetch the (A, B) pair for one base projection from an adapter ckpt."""
    a_name = f"layers.{layer}.ffn.{proj}.lora_A.weight"
    b_name = f"layers.{layer}.ffn.{proj}.lora_B.weight"
    if a_name not in adapter or b_name not in adapter:
        raise RecipeError(f"LoRA adapter lacks matrices for layer {layer} {proj} projection")
    return adapter.array(a_name), adapter.array(b_name)
