"""Deterministic reference forward pass for the supported decoder family:
RMSNorm, rotary attention with grouped KV heads, SwiGLU FFN experts under
every gating mode (gate-less, noisy/trained/hidden-repr top-K), fine-grained
per-projection mixing, LoRA adapter experts, and optional attention mixing.

Weights flow through the autodiff primitives, so the same code produces plain
arrays for inference and gradient graphs when router/embedding weights are
passed as Nodes via ``overrides``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import naming
from .arch import ArchDescriptor, infer_arch
from .autodiff import val
from .errors import ArchitectureError, MoeforgeError, RecipeError
from .recipe import GatingMode, Granularity, RecipeParams, decode_metadata, is_moe
from .tensorstore import TensorEntry, TensorMap

ROPE_BASE = 10000.0

# Byte-level fallback tokenizer: ids 0..255 are raw bytes, then the specials.
BOS_ID = 256
EOS_ID = 257
BYTE_VOCAB = 258


def encode_text(text: str, add_bos: bool = True) -> list[int]:
    ids = list(text.encode("utf-8"))
    return [BOS_ID] + ids if add_bos else ids


def decode_text(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class GateConfig:
    gating: GatingMode
    top_k: int
    always_on: int | None
    n_experts: int


@dataclass
class GateDecision:
    """Selected expert ids (ascending) and their normalized weights."""

    indices: list[int]
    weights: object  # (len(indices),) ndarray, or Node on the gradient path

    def weight_values(self) -> np.ndarray:
        return np.asarray(val(self.weights), dtype=np.float64)

    @property
    def top_expert(self) -> int:
        w = self.weight_values()
        return self.indices[int(np.argmax(w))]  # argmax picks the lowest index on ties


@dataclass
class TraceRecord:
    layer: int
    site: str
    token: int
    indices: list[int]
    weights: np.ndarray
    top_expert: int


@dataclass
class RoutingTrace:
    """Per-(layer, site, token) record of gate decisions, plus counters for
    the sparsity contract: ffn_evals counts whole expert-FFN evaluations,
    proj_evals counts per-projection evaluations at fgmlp granularity."""

    records: list[TraceRecord] = field(default_factory=list)
    ffn_evals: int = 0
    proj_evals: int = 0

    def record(self, layer: int, site: str, token: int, decision: GateDecision) -> None:
        self.records.append(TraceRecord(
            layer, site, token, list(decision.indices),
            decision.weight_values(), decision.top_expert))

    def extend(self, other: "RoutingTrace") -> None:
        self.records.extend(other.records)
        self.ffn_evals += other.ffn_evals
        self.proj_evals += other.proj_evals


# ---- weight containers ----

@dataclass
class FfnExpert:
    gate_w: np.ndarray
    up_w: np.ndarray
    down_w: np.ndarray


@dataclass
class LoraAdapter:
    """Low-rank deltas per FFN projection: projection p becomes
    p(x) + (alpha / rank) * B_p @ (A_p @ x)."""

    rank: int
    alpha: float
    mats: dict[str, tuple[np.ndarray, np.ndarray]]  # proj -> (A, B)


@dataclass
class LoraExpert:
    base: FfnExpert
    adapter: LoraAdapter


@dataclass
class AttnWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray


@dataclass
class MoeAttn:
    experts: list[AttnWeights]
    router_name: str
    router: np.ndarray


@dataclass
class MoeFfn:
    experts: list  # FfnExpert | LoraExpert
    granularity: Granularity
    router_name: str | None = None  # FFN granularity
    router: np.ndarray | None = None
    proj_router_names: dict[str, str] | None = None  # fgmlp
    proj_routers: dict[str, np.ndarray] | None = None


@dataclass
class LayerBlock:
    attn_norm_w: np.ndarray
    ffn_norm_w: np.ndarray
    attn: object  # AttnWeights | MoeAttn
    ffn: MoeFfn


# ---- core ops ----

def ffn_forward(gate_w, up_w, down_w, x):
    """SwiGLU feed-forward: down @ (silu(gate @ x) * (up @ x))."""
    return ad.matvec(down_w, ad.mul(ad.silu(ad.matvec(gate_w, x)), ad.matvec(up_w, x)))


def lora_expert_forward(base: FfnExpert, adapter: LoraAdapter, x):
    """SwiGLU over the base projections with low-rank deltas applied."""
    def proj(w, name):
        a, b = adapter.mats[name]
        delta = ad.scale_const(ad.matvec(b, ad.matvec(a, x)), adapter.alpha / adapter.rank)
        return ad.add(ad.matvec(w, x), delta)

    hidden = ad.mul(ad.silu(proj(base.gate_w, "gate")), proj(base.up_w, "up"))
    a, b = adapter.mats["down"]
    down = ad.add(ad.matvec(base.down_w, hidden),
                  ad.scale_const(ad.matvec(b, ad.matvec(a, hidden)), adapter.alpha / adapter.rank))
    return down


def _expert_proj(expert, proj: str, x):
    """One projection of an expert applied to x (fgmlp building block)."""
    w = getattr(expert.base if isinstance(expert, LoraExpert) else expert, f"{proj}_w")
    y = ad.matvec(w, x)
    if isinstance(expert, LoraExpert):
        a, b = expert.adapter.mats[proj]
        scale = expert.adapter.alpha / expert.adapter.rank
        y = ad.add(y, ad.scale_const(ad.matvec(b, ad.matvec(a, x)), scale))
    return y


def eval_expert(expert, x):
    if isinstance(expert, LoraExpert):
        return lora_expert_forward(expert.base, expert.adapter, x)
    return ffn_forward(expert.gate_w, expert.up_w, expert.down_w, x)


def gate(router, x, cfg: GateConfig) -> GateDecision:
    """Route one token: equal weights without a router, otherwise top-K by
    logit (always-on expert forced into the set, ties to the lower index)
    with softmax over the selected logits only."""
    n = cfg.n_experts
    if cfg.gating == GatingMode.GATELESS:
        w = np.full(n, 1.0 / n, dtype=val(x).dtype)
        return GateDecision(list(range(n)), w)

    if cfg.top_k > n:
        raise RecipeError(f"top_k {cfg.top_k} exceeds expert count {n}")
    logits = ad.matvec(router, x)
    values = val(logits)

    selected = [] if cfg.always_on is None else [cfg.always_on]
    remaining = cfg.top_k - len(selected)
    order = np.lexsort((np.arange(n), -values))  # by logit desc, then index asc
    for i in order:
        if remaining == 0:
            break
        if int(i) not in selected:
            selected.append(int(i))
            remaining -= 1
    selected.sort()
    weights = ad.softmax1d(ad.gather1d(logits, selected))
    return GateDecision(selected, weights)


def moe_ffn_forward(site: MoeFfn, x, cfg: GateConfig, router=None,
                    trace: RoutingTrace | None = None, layer: int = 0, token: int = 0):
    """Mix expert FFN outputs for one token; only selected experts run."""
    decision = gate(site.router if router is None else router, x, cfg)
    outs = [eval_expert(site.experts[i], x) for i in decision.indices]
    if trace is not None:
        trace.ffn_evals += len(outs)
        trace.record(layer, "ffn", token, decision)
    return ad.weighted_sum(decision.weights, outs), decision


def fgmlp_forward(site: MoeFfn, x, cfg: GateConfig, routers=None,
                  trace: RoutingTrace | None = None, layer: int = 0, token: int = 0):
    """Fine-grained mixing: gate, up, and down projections each routed by
    their own gate decision; returns the output and all three decisions."""
    routers = routers or site.proj_routers
    if routers is None or any(p not in routers for p in naming.FFN_PROJS):
        raise ArchitectureError("fgmlp granularity requires a router per projection")
    decisions = {p: gate(routers[p], x, cfg) for p in naming.FFN_PROJS}

    def mix(proj, inp):
        d = decisions[proj]
        outs = [_expert_proj(site.experts[i], proj, inp) for i in d.indices]
        if trace is not None:
            trace.proj_evals += len(outs)
            trace.record(layer, f"ffn.{proj}", token, d)
        return ad.weighted_sum(d.weights, outs)

    g = mix("gate", x)
    u = mix("up", x)
    hidden = ad.mul(ad.silu(g), u)
    d = decisions["down"]
    outs = [_expert_proj(site.experts[i], "down", hidden) for i in d.indices]
    if trace is not None:
        trace.proj_evals += len(outs)
        trace.record(layer, "ffn.down", token, d)
    y = ad.weighted_sum(d.weights, outs)
    return y, (decisions["gate"], decisions["up"], decisions["down"])


def _rope_cache(seq_len: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _attention(xn, w: AttnWeights, arch: ArchDescriptor, cos, sin):
    """Causal multi-head attention with rotary embeddings over (T, d) input."""
    hd = arch.head_dim
    group = arch.num_heads // arch.num_kv_heads
    q = ad.matmul(xn, ad.transpose(w.q))
    k = ad.matmul(xn, ad.transpose(w.k))
    v = ad.matmul(xn, ad.transpose(w.v))

    k_rot = [ad.rotary(ad.slice_cols(k, j * hd, (j + 1) * hd), cos, sin)
             for j in range(arch.num_kv_heads)]
    v_cols = [ad.slice_cols(v, j * hd, (j + 1) * hd) for j in range(arch.num_kv_heads)]

    ctx = []
    inv_sqrt = 1.0 / np.sqrt(hd)
    for h in range(arch.num_heads):
        q_h = ad.rotary(ad.slice_cols(q, h * hd, (h + 1) * hd), cos, sin)
        kv = h // group
        scores = ad.scale_const(ad.matmul(q_h, ad.transpose(k_rot[kv])), inv_sqrt)
        probs = ad.causal_softmax(scores)
        ctx.append(ad.matmul(probs, v_cols[kv]))
    return ad.matmul(ad.concat_cols(ctx), ad.transpose(w.o))


# ---- model ----

class Model:
    """A checkpoint resolved into compute-dtype weights plus its gate config.
    Instances are immutable once built and safe to share across threads;
    ``forward`` allocates all per-call state."""

    def __init__(self, source: TensorMap, dtype: str = "f32"):
        if dtype not in ("f32", "f64"):
            raise ValueError("compute dtype must be 'f32' or 'f64'")
        self.dtype = np.float32 if dtype == "f32" else np.float64
        self.source = source
        self.arch = infer_arch(source)
        self.params: RecipeParams | None = (
            decode_metadata(source.metadata) if is_moe(source.metadata) else None
        )

        t = lambda name: source.array(name).astype(self.dtype)
        self.embed = t(naming.EMBED)
        self.lm_head = t(naming.LM_HEAD)
        self.final_norm_w = t(naming.FINAL_NORM)

        if self.params is None:
            self.gate_cfg = GateConfig(GatingMode.GATELESS, 1, None, 1)
            self.granularity = Granularity.FFN
            self.mix_attention = False
        else:
            p = self.params
            self.gate_cfg = GateConfig(p.gating, p.top_k, p.always_on, p.num_experts)
            self.granularity = p.granularity
            self.mix_attention = p.mix_attention

        self.layers = [self._build_layer(l, t) for l in range(self.arch.num_layers)]

    def _ffn_expert(self, l: int, slot: int | None, t) -> FfnExpert:
        name = (lambda p: naming.dense_ffn(l, p)) if slot is None else \
               (lambda p: naming.expert_ffn(l, slot, p))
        return FfnExpert(t(name("gate")), t(name("up")), t(name("down")))

    def _build_layer(self, l: int, t) -> LayerBlock:
        src = self.source
        if self.params is None:
            experts = [self._ffn_expert(l, None, t)]
            ffn = MoeFfn(experts, Granularity.FFN)
        else:
            experts = []
            for i, (kind, _) in enumerate(self.params.experts):
                if kind == "full":
                    experts.append(self._ffn_expert(l, i, t))
                else:
                    base = self._ffn_expert(l, None, t)
                    mats = {p: (t(naming.lora(l, i, p, "A")), t(naming.lora(l, i, p, "B")))
                            for p in naming.FFN_PROJS}
                    adapter = LoraAdapter(self.params.lora_rank, self.params.lora_alpha, mats)
                    experts.append(LoraExpert(base, adapter))
            ffn = MoeFfn(experts, self.granularity)
            if self.gate_cfg.gating != GatingMode.GATELESS:
                if self.granularity == Granularity.FGMLP:
                    names = {p: naming.ffn_router_proj(l, p) for p in naming.FFN_PROJS}
                    self._require(list(names.values()))
                    ffn.proj_router_names = names
                    ffn.proj_routers = {p: t(n) for p, n in names.items()}
                else:
                    self._require([naming.ffn_router(l)])
                    ffn.router_name = naming.ffn_router(l)
                    ffn.router = t(ffn.router_name)

        if self.mix_attention:
            attn_experts = [AttnWeights(*(t(naming.attn_expert(l, i, p))
                                          for p in naming.ATTN_PROJS))
                            for i in range(self.gate_cfg.n_experts)]
            if self.gate_cfg.gating == GatingMode.GATELESS:
                attn = MoeAttn(attn_experts, "", None)
            else:
                self._require([naming.attn_router(l)])
                attn = MoeAttn(attn_experts, naming.attn_router(l), t(naming.attn_router(l)))
        else:
            attn = AttnWeights(*(t(naming.attn(l, p)) for p in naming.ATTN_PROJS))

        return LayerBlock(t(naming.attn_norm(l)), t(naming.ffn_norm(l)), attn, ffn)

    def _require(self, names: list[str]) -> None:
        missing = [n for n in names if n not in self.source]
        if missing:
            raise ArchitectureError(f"routed checkpoint lacks router tensors: {missing}")

    def router_names(self) -> list[str]:
        """Tensor names of every router matrix, in layer order."""
        out = []
        for layer in self.layers:
            ffn = layer.ffn
            if ffn.router_name:
                out.append(ffn.router_name)
            if ffn.proj_router_names:
                out.extend(ffn.proj_router_names[p] for p in naming.FFN_PROJS)
            if isinstance(layer.attn, MoeAttn) and layer.attn.router_name:
                out.append(layer.attn.router_name)
        return out

    def forward(self, tokens, overrides=None, trace: RoutingTrace | None = None,
                capture_pre_ffn: list | None = None):
        """Run the decoder stack over a token sequence.

        Returns (T, vocab) logits: a plain array normally, a Node when any
        override is a Node. ``overrides`` maps router/embedding tensor names
        to replacement values; ``capture_pre_ffn`` collects the
        post-attention-residual hidden state entering each layer's FFN block.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise MoeforgeError("tokens must be a non-empty 1-D sequence")
        if ids.min() < 0 or ids.max() >= self.arch.vocab_size:
            raise MoeforgeError(
                f"token id out of range: vocab size is {self.arch.vocab_size}")
        overrides = overrides or {}
        get = lambda name, stored: overrides.get(name, stored)

        cos, sin = _rope_cache(len(ids), self.arch.head_dim, self.dtype)
        x = ad.gather_rows(get(naming.EMBED, self.embed), ids)

        for li, layer in enumerate(self.layers):
            xn = ad.rmsnorm(x, layer.attn_norm_w, self.arch.norm_eps)
            if isinstance(layer.attn, MoeAttn):
                a = self._mixed_attention(li, layer.attn, xn, cos, sin, get, trace)
            else:
                a = _attention(xn, layer.attn, self.arch, cos, sin)
            x = ad.add(x, a)

            if capture_pre_ffn is not None:
                capture_pre_ffn.append(np.array(val(x)))

            xn2 = ad.rmsnorm(x, layer.ffn_norm_w, self.arch.norm_eps)
            rows = []
            for ti in range(len(ids)):
                xt = ad.row(xn2, ti)
                if self.granularity == Granularity.FGMLP and self.params is not None:
                    routers = None
                    if layer.ffn.proj_router_names:
                        routers = {p: get(n, layer.ffn.proj_routers[p])
                                   for p, n in layer.ffn.proj_router_names.items()}
                    else:  # gateless fgmlp mixes each projection with equal weights
                        routers = {p: None for p in naming.FFN_PROJS}
                    y, _ = fgmlp_forward(layer.ffn, xt, self.gate_cfg, routers=routers,
                                         trace=trace, layer=li, token=ti)
                else:
                    router = None
                    if layer.ffn.router_name:
                        router = get(layer.ffn.router_name, layer.ffn.router)
                    y, _ = moe_ffn_forward(layer.ffn, xt, self.gate_cfg, router=router,
                                           trace=trace, layer=li, token=ti)
                rows.append(y)
            x = ad.add(x, ad.stack_rows(rows))

        xf = ad.rmsnorm(x, self.final_norm_w, self.arch.norm_eps)
        return ad.matmul(xf, ad.transpose(self.lm_head))

    def _mixed_attention(self, li: int, site: MoeAttn, xn, cos, sin, get, trace):
        decisions = [gate(get(site.router_name, site.router) if site.router is not None
                          else None, ad.row(xn, t), self.gate_cfg)
                     for t in range(val(xn).shape[0])]
        needed = sorted({i for d in decisions for i in d.indices})
        outs = {i: _attention(xn, site.experts[i], self.arch, cos, sin) for i in needed}
        rows = []
        for t, d in enumerate(decisions):
            if trace is not None:
                trace.record(li, "attn", t, d)
            rows.append(ad.weighted_sum(d.weights, [ad.row(outs[i], t) for i in d.indices]))
        return ad.stack_rows(rows)

    def export(self, updates: dict[str, np.ndarray]) -> TensorMap:
        """Copy of the source checkpoint with the named tensors replaced;
        every other tensor keeps its exact original bytes."""
        out = self.source.copy()
        for name, arr in updates.items():
            out.put_entry(name, TensorEntry.from_array(arr, out.entry(name).dtype))
        return out


def model_forward(model: Model, tokens) -> tuple[np.ndarray, RoutingTrace]:
    """Public forward: logits as a plain array plus the routing trace."""
    trace = RoutingTrace()
    logits = model.forward(tokens, trace=trace)
    return np.asarray(val(logits)), trace


def collect_prompt_hiddens(model: Model, positive_prompts, negative_prompts):
    """Mean pre-FFN hidden state per layer over all tokens of each prompt
    set. Returns (pos_mean, neg_mean), both (num_layers, hidden) arrays."""
    def mean_over(prompts):
        if not prompts:
            raise MoeforgeError("prompt set must be non-empty")
        total = np.zeros((model.arch.num_layers, model.arch.hidden_size))
        count = 0
        for prompt in prompts:
            captured: list[np.ndarray] = []
            model.forward(prompt, capture_pre_ffn=captured)
            for l, states in enumerate(captured):
                total[l] += states.sum(axis=0)
            count += len(prompt)
        return total / count

    return mean_over(positive_prompts), mean_over(negative_prompts)
