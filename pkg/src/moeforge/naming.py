"""Canonical tensor names for dense and mixed checkpoints, plus the
translation table to/from Mistral/Llama hub naming."""

from __future__ import annotations

import re

EMBED = "embed.weight"
LM_HEAD = "lm_head.weight"
FINAL_NORM = "final_norm.weight"

FFN_PROJS = ("gate", "up", "down")
ATTN_PROJS = ("q", "k", "v", "o")


def attn(layer: int, proj: str) -> str:
    return f"layers.{layer}.attn.{proj}.weight"


def attn_expert(layer: int, expert: int, proj: str) -> str:
    return f"layers.{layer}.attn.experts.{expert}.{proj}.weight"


def dense_ffn(layer: int, proj: str) -> str:
    return f"layers.{layer}.ffn.{proj}.weight"


def expert_ffn(layer: int, expert: int, proj: str) -> str:
    return f"layers.{layer}.ffn.experts.{expert}.{proj}.weight"


def lora(layer: int, expert: int, proj: str, which: str) -> str:
    return f"layers.{layer}.ffn.experts.{expert}.{proj}.lora_{which}.weight"


def ffn_router(layer: int) -> str:
    return f"layers.{layer}.ffn.router.weight"


def ffn_router_proj(layer: int, proj: str) -> str:
    return f"layers.{layer}.ffn.router.{proj}.weight"


def attn_router(layer: int) -> str:
    return f"layers.{layer}.attn.router.weight"


def attn_norm(layer: int) -> str:
    return f"layers.{layer}.attn_norm.weight"


def ffn_norm(layer: int) -> str:
    return f"layers.{layer}.ffn_norm.weight"


_LAYER_RE = re.compile(r"^layers\.(\d+)\.")
_EXPERT_RE = re.compile(r"^layers\.(\d+)\.(ffn|attn)\.experts\.(\d+)\.")


def layer_of(name: str) -> int | None:
    m = _LAYER_RE.match(name)
    return int(m.group(1)) if m else None


def expert_slot_of(name: str) -> int | None:
    m = _EXPERT_RE.match(name)
    return int(m.group(3)) if m else None


def expert_namespace(layer: int, expert: int, block: str = "ffn") -> str:
    return f"layers.{layer}.{block}.experts.{expert}."


# Hub translation: canonical name pattern -> Mistral/Llama hub pattern.
# {l} is the layer index; only dense checkpoints are translatable since the
# hub families have no notion of our expert namespaces.
_HUB_TABLE = [
    (re.compile(r"^embed\.weight$"), "model.embed_tokens.weight"),
    (re.compile(r"^lm_head\.weight$"), "lm_head.weight"),
    (re.compile(r"^final_norm\.weight$"), "model.norm.weight"),
    (re.compile(r"^layers\.(\d+)\.attn\.([qkvo])\.weight$"),
     "model.layers.{0}.self_attn.{1}_proj.weight"),
    (re.compile(r"^layers\.(\d+)\.ffn\.(gate|up|down)\.weight$"),
     "model.layers.{0}.mlp.{1}_proj.weight"),
    (re.compile(r"^layers\.(\d+)\.attn_norm\.weight$"),
     "model.layers.{0}.input_layernorm.weight"),
    (re.compile(r"^layers\.(\d+)\.ffn_norm\.weight$"),
     "model.layers.{0}.post_attention_layernorm.weight"),
]

_HUB_REVERSE = [
    (re.compile(r"^model\.embed_tokens\.weight$"), "embed.weight"),
    (re.compile(r"^lm_head\.weight$"), "lm_head.weight"),
    (re.compile(r"^model\.norm\.weight$"), "final_norm.weight"),
    (re.compile(r"^model\.layers\.(\d+)\.self_attn\.([qkvo])_proj\.weight$"),
     "layers.{0}.attn.{1}.weight"),
    (re.compile(r"^model\.layers\.(\d+)\.mlp\.(gate|up|down)_proj\.weight$"),
     "layers.{0}.ffn.{1}.weight"),
    (re.compile(r"^model\.layers\.(\d+)\.input_layernorm\.weight$"),
     "layers.{0}.attn_norm.weight"),
    (re.compile(r"^model\.layers\.(\d+)\.post_attention_layernorm\.weight$"),
     "layers.{0}.ffn_norm.weight"),
]


def _translate(name: str, table) -> str | None:
    for pattern, template in table:
        m = pattern.match(name)
        if m:
            return template.format(*m.groups())
    return None


def to_hub_name(name: str) -> str | None:
    """Canonical dense tensor name -> hub name, or None if untranslatable."""
    return _translate(name, _HUB_TABLE)


def from_hub_name(name: str) -> str | None:
    """Hub tensor name -> canonical dense name, or None if untranslatable."""
    return _translate(name, _HUB_REVERSE)
