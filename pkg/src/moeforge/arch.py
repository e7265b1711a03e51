"""Architecture descriptors inferred from checkpoints, and the compatibility
check that gates composition: experts must share the base model's shape."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from . import naming
from .errors import ArchitectureError, FormatError
from .tensorstore import TensorMap

DEFAULT_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchDescriptor:
    num_layers: int
    hidden_size: int
    ffn_intermediate_size: int
    num_heads: int
    num_kv_heads: int
    vocab_size: int
    norm_eps: float = DEFAULT_NORM_EPS

    def __post_init__(self):
        for f in ("num_layers", "hidden_size", "ffn_intermediate_size",
                  "num_heads", "num_kv_heads", "vocab_size"):
            if getattr(self, f) <= 0:
                raise ArchitectureError(f"{f} must be positive")
        if self.hidden_size % self.num_heads:
            raise ArchitectureError("hidden_size must be divisible by num_heads")
        if self.num_heads % self.num_kv_heads:
            raise ArchitectureError("num_heads must be divisible by num_kv_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim


# Public Mistral-7B-v0.1 model-card dimensions, used by the cost model.
MISTRAL_7B = ArchDescriptor(
    num_layers=32,
    hidden_size=4096,
    ffn_intermediate_size=14336,
    num_heads=32,
    num_kv_heads=8,
    vocab_size=32000,
)

ARCH_PRESETS = {"mistral-7b": MISTRAL_7B, "mistral7b": MISTRAL_7B}


@dataclass
class CompatReport:
    """Outcome of check_compatibility. ``mismatches`` are hard failures;
    ``warnings`` are tolerated differences (vocab when embeddings stay
    base-owned). Entries are (field, base value, expert index, expert value)."""

    compatible: bool
    mismatches: list[tuple[str, object, int, object]] = field(default_factory=list)
    warnings: list[tuple[str, object, int, object]] = field(default_factory=list)


def _layer_indices(ckpt: TensorMap) -> list[int]:
    layers = {naming.layer_of(n) for n in ckpt.names()}
    layers.discard(None)
    if not layers:
        raise ArchitectureError("checkpoint has no layer tensors")
    idx = sorted(layers)
    if idx != list(range(len(idx))):
        raise ArchitectureError(f"layer indices are not contiguous: {idx}")
    return idx


def _gate_proj_shape(ckpt: TensorMap, layer: int) -> tuple[int, ...]:
    # Dense base, full expert slot 0, or (LoRA-only MOE) the shared base FFN.
    for name in (naming.dense_ffn(layer, "gate"), naming.expert_ffn(layer, 0, "gate")):
        if name in ckpt:
            return ckpt.entry(name).shape
    raise ArchitectureError(f"layer {layer}: no gate projection tensor found")


def infer_arch(ckpt: TensorMap) -> ArchDescriptor:
    """Derive an ArchDescriptor from tensor shapes and metadata.

    Head count cannot be recovered from shapes alone (the q projection is
    square regardless), so ``arch.num_heads`` metadata is required; every
    checkpoint this package writes carries it.
    """
    for name in (naming.EMBED, naming.LM_HEAD, naming.FINAL_NORM):
        if name not in ckpt:
            raise ArchitectureError(f"missing required tensor {name!r}")
    vocab, hidden = ckpt.entry(naming.EMBED).shape

    layers = _layer_indices(ckpt)
    inter = _gate_proj_shape(ckpt, 0)[0]
    for l in layers:
        for name in (naming.attn_norm(l), naming.ffn_norm(l)):
            if name not in ckpt:
                raise ArchitectureError(f"missing required tensor {name!r}")
        got = _gate_proj_shape(ckpt, l)[0]
        if got != inter:
            raise ArchitectureError(
                f"inconsistent ffn_intermediate_size: layer 0 has {inter}, layer {l} has {got}"
            )

    try:
        num_heads = int(ckpt.metadata["arch.num_heads"])
    except KeyError:
        raise ArchitectureError("missing metadata key 'arch.num_heads'") from None
    if num_heads <= 0 or hidden % num_heads:
        raise ArchitectureError(f"invalid arch.num_heads {num_heads} for hidden size {hidden}")
    head_dim = hidden // num_heads

    k_name = naming.attn(0, "k")
    if k_name not in ckpt:
        k_name = naming.attn_expert(0, 0, "k")
        if k_name not in ckpt:
            raise ArchitectureError("missing attention k projection at layer 0")
    kv_rows = ckpt.entry(k_name).shape[0]
    if kv_rows % head_dim:
        raise ArchitectureError(f"k projection rows {kv_rows} not a multiple of head_dim {head_dim}")

    norm_eps = float(ckpt.metadata.get("arch.norm_eps", DEFAULT_NORM_EPS))

    return ArchDescriptor(
        num_layers=len(layers),
        hidden_size=hidden,
        ffn_intermediate_size=inter,
        num_heads=num_heads,
        num_kv_heads=kv_rows // head_dim,
        vocab_size=vocab,
        norm_eps=norm_eps,
    )


def arch_metadata(arch: ArchDescriptor) -> dict[str, str]:
    """Metadata keys a checkpoint needs for infer_arch to round-trip."""
    return {
        "arch.num_heads": str(arch.num_heads),
        "arch.num_kv_heads": str(arch.num_kv_heads),
        "arch.norm_eps": repr(arch.norm_eps),
    }


def check_compatibility(
    base: ArchDescriptor,
    experts: list[ArchDescriptor],
    train_embeddings: bool = False,
) -> CompatReport:
    """Compare each expert against the base on every descriptor field.

    vocab_size must match exactly only when embeddings will be trained or
    mixed; otherwise a differing vocab is reported as a warning, since FFN
    swapping never touches the base-owned embeddings.
    """
    report = CompatReport(compatible=True)
    for i, exp in enumerate(experts):
        for f in fields(ArchDescriptor):
            bval, eval_ = getattr(base, f.name), getattr(exp, f.name)
            if bval == eval_:
                continue
            entry = (f.name, bval, i, eval_)
            if f.name == "vocab_size" and not train_embeddings:
                report.warnings.append(entry)
            else:
                report.mismatches.append(entry)
    report.compatible = not report.mismatches
    return report


def load_arch_json(data: dict) -> ArchDescriptor:
    """Build a descriptor from a JSON object mirroring the dataclass fields."""
    try:
        return ArchDescriptor(**{f.name: data[f.name] for f in fields(ArchDescriptor)
                                 if f.name in data})
    except TypeError as e:
        raise FormatError(f"invalid arch JSON: {e}") from e
