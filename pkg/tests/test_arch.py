import numpy as np
import pytest

from moeforge import naming
from moeforge.arch import (
    ArchDescriptor,
    MISTRAL_7B,
    arch_metadata,
    check_compatibility,
    infer_arch,
    load_arch_json,
)
from moeforge.errors import ArchitectureError
from moeforge.tinymodels import TINY, random_dense_checkpoint


def test_infer_tiny_fixture():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    arch = infer_arch(ckpt)
    assert arch == TINY
    assert (arch.num_layers, arch.hidden_size, arch.ffn_intermediate_size) == (2, 8, 16)
    assert (arch.num_heads, arch.vocab_size) == (2, 32)


def test_infer_is_order_invariant():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    shuffled = type(ckpt)(ckpt.metadata)
    for name in reversed(ckpt.names()):
        shuffled.put_entry(name, ckpt.entry(name))
    assert infer_arch(shuffled) == infer_arch(ckpt)


def test_inconsistent_intermediate_size():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    ckpt.put(naming.dense_ffn(1, "gate"), np.zeros((32, 8), dtype=np.float32))
    with pytest.raises(ArchitectureError, match="inconsistent ffn_intermediate_size"):
        infer_arch(ckpt)


def test_missing_tensor():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    ckpt.drop(naming.EMBED)
    with pytest.raises(ArchitectureError, match="embed.weight"):
        infer_arch(ckpt)


def test_missing_heads_metadata():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    del ckpt.metadata["arch.num_heads"]
    with pytest.raises(ArchitectureError, match="arch.num_heads"):
        infer_arch(ckpt)


def test_norm_eps_from_metadata():
    ckpt = random_dense_checkpoint(TINY, seed=1)
    ckpt.metadata["arch.norm_eps"] = "1e-06"
    assert infer_arch(ckpt).norm_eps == 1e-6
    del ckpt.metadata["arch.norm_eps"]
    assert infer_arch(ckpt).norm_eps == 1e-5


def test_mistral_7b_descriptor_accepted():
    # Public model-card dims; the cost model consumes these downstream.
    assert MISTRAL_7B.num_layers == 32
    assert MISTRAL_7B.hidden_size == 4096
    assert MISTRAL_7B.ffn_intermediate_size == 14336
    assert MISTRAL_7B.head_dim == 128
    assert MISTRAL_7B.kv_dim == 1024


def test_invalid_dims_rejected():
    with pytest.raises(ArchitectureError):
        ArchDescriptor(1, 8, 16, 3, 1, 32)  # 8 % 3 != 0
    with pytest.raises(ArchitectureError):
        ArchDescriptor(0, 8, 16, 2, 2, 32)
    with pytest.raises(ArchitectureError):
        ArchDescriptor(1, 8, 16, 4, 3, 32)  # 4 % 3 != 0


def test_compat_identical():
    r = check_compatibility(TINY, [TINY, TINY, TINY])
    assert r.compatible and not r.mismatches and not r.warnings


def test_compat_hidden_size_mismatch():
    other = ArchDescriptor(2, 16, 16, 2, 2, 32)
    r = check_compatibility(ArchDescriptor(2, 8, 16, 2, 2, 32), [TINY, other])
    assert not r.compatible
    assert ("hidden_size", 8, 1, 16) in r.mismatches


def test_compat_vocab_warning_when_embeddings_untrained():
    other = ArchDescriptor(2, 8, 16, 2, 2, 48)
    r = check_compatibility(TINY, [TINY, other, TINY])
    assert r.compatible
    assert r.warnings == [("vocab_size", 32, 1, 48)]

    r2 = check_compatibility(TINY, [TINY, other, TINY], train_embeddings=True)
    assert not r2.compatible
    assert ("vocab_size", 32, 1, 48) in r2.mismatches


def test_arch_metadata_roundtrip():
    ckpt = random_dense_checkpoint(TINY, seed=3)
    assert arch_metadata(infer_arch(ckpt))["arch.num_heads"] == "2"


def test_load_arch_json():
    arch = load_arch_json({
        "num_layers": 32, "hidden_size": 4096, "ffn_intermediate_size": 14336,
        "num_heads": 32, "num_kv_heads": 8, "vocab_size": 32000,
    })
    assert arch == MISTRAL_7B


def test_hub_name_translation():
    assert naming.to_hub_name("layers.3.attn.q.weight") == "model.layers.3.self_attn.q_proj.weight"
    assert naming.to_hub_name("layers.0.ffn.down.weight") == "model.layers.0.mlp.down_proj.weight"
    assert naming.from_hub_name("model.embed_tokens.weight") == "embed.weight"
    assert naming.from_hub_name("model.layers.7.post_attention_layernorm.weight") == "layers.7.ffn_norm.weight"
    ckpt = random_dense_checkpoint(TINY, seed=0)
    for name in ckpt.names():
        hub = naming.to_hub_name(name)
        assert hub is not None
        assert naming.from_hub_name(hub) == name
