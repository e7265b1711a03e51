"""Builders for small random dense checkpoints and LoRA adapters in the
canonical naming scheme. Desk-scale fixtures for tests and CLI demos."""

from __future__ import annotations

import numpy as np

from . import naming
from .arch import ArchDescriptor, arch_metadata
from .tensorstore import TensorMap

TINY = ArchDescriptor(
    num_layers=2,
    hidden_size=8,
    ffn_intermediate_size=16,
    num_heads=2,
    num_kv_heads=2,
    vocab_size=32,
)


def random_dense_checkpoint(
    arch: ArchDescriptor = TINY, seed: int = 0, scale: float = 0.25
) -> TensorMap:
    """A dense decoder checkpoint with seeded Gaussian weights."""
    rng = np.random.default_rng(seed)
    d, inter, vocab = arch.hidden_size, arch.ffn_intermediate_size, arch.vocab_size

    def w(*shape):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    m = TensorMap(arch_metadata(arch))
    m.put(naming.EMBED, w(vocab, d))
    m.put(naming.LM_HEAD, w(vocab, d))
    m.put(naming.FINAL_NORM, np.ones(d, dtype=np.float32))
    for l in range(arch.num_layers):
        m.put(naming.attn(l, "q"), w(d, d))
        m.put(naming.attn(l, "k"), w(arch.kv_dim, d))
        m.put(naming.attn(l, "v"), w(arch.kv_dim, d))
        m.put(naming.attn(l, "o"), w(d, d))
        m.put(naming.dense_ffn(l, "gate"), w(inter, d))
        m.put(naming.dense_ffn(l, "up"), w(inter, d))
        m.put(naming.dense_ffn(l, "down"), w(d, inter))
        m.put(naming.attn_norm(l), np.ones(d, dtype=np.float32))
        m.put(naming.ffn_norm(l), np.ones(d, dtype=np.float32))
    return m


def random_lora_adapter(
    arch: ArchDescriptor = TINY, rank: int = 2, alpha: float = 4.0,
    seed: int = 0, scale: float = 0.1,
) -> TensorMap:
    """A LoRA adapter checkpoint holding per-layer, per-projection A and B
    matrices for the FFN projections of ``arch``."""
    rng = np.random.default_rng(seed)
    d, inter = arch.hidden_size, arch.ffn_intermediate_size
    dims = {"gate": (inter, d), "up": (inter, d), "down": (d, inter)}

    m = TensorMap({"lora.rank": str(rank), "lora.alpha": repr(float(alpha))})
    for l in range(arch.num_layers):
        for proj, (out_dim, in_dim) in dims.items():
            a = (rng.standard_normal((rank, in_dim)) * scale).astype(np.float32)
            b = (rng.standard_normal((out_dim, rank)) * scale).astype(np.float32)
            m.put(f"layers.{l}.ffn.{proj}.lora_A.weight", a)
            m.put(f"layers.{l}.ffn.{proj}.lora_B.weight", b)
    return m
