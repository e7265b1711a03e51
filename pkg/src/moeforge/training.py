"""Desk-scale router training: exact reverse-mode gradients restricted to
router (and optionally embedding) parameters with everything else frozen,
loss masking for the instruct vs extended-pre-training regimes, and a
finite-difference harness that validates the analytic gradients."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import naming
from .autodiff import val
from .errors import TrainingError
from .recipe import GatingMode
from .runtime import Model

GradMap = dict[str, np.ndarray]


class Trainable(str, enum.Enum):
    ROUTER = "router"
    ROUTER_PLUS_EMBED = "router+embed"


class Regime(str, enum.Enum):
    INSTRUCT = "instruct"
    PRETRAIN = "pretrain"


class Schedule(str, enum.Enum):
    CONSTANT = "constant"


@dataclass
class TrainConfig:
    """Defaults follow the reference hyperparameters: one epoch, batch size
    one, sixteen accumulation steps, constant learning rate 1e-4."""

    trainable: Trainable = Trainable.ROUTER
    regime: Regime = Regime.INSTRUCT
    epochs: int = 1
    batch_size: int = 1
    grad_accum_steps: int = 16
    learning_rate: float = 1e-4
    schedule: Schedule = Schedule.CONSTANT
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" (default; accumulation-exact) or "adam"

    def validate(self) -> None:
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        # learning_rate 0 is allowed for sgd (a no-op pass); negative never is.
        if self.learning_rate < 0 or (self.learning_rate == 0 and self.optimizer == "adam"):
            raise TrainingError("learning_rate must be positive")
        if self.grad_accum_steps < 1:
            raise TrainingError("grad_accum_steps must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Batch:
    """One training sequence: input ids, shifted targets, and the per-position
    loss mask (instruct masks prompt positions; pretrain masks nothing)."""

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (len(self.tokens) == len(self.targets) == len(self.mask)):
            raise TrainingError("tokens, targets, and mask must have equal length")
        if self.mask.sum() < 1:
            raise TrainingError("batch mask has no active positions")

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def make_batch(sequence, regime: Regime = Regime.PRETRAIN, prompt_len: int = 0) -> Batch:
    """Next-token batch from one id sequence; in the instruct regime the loss
    covers only positions whose target lies at or past ``prompt_len``."""
    seq = np.asarray(sequence, dtype=np.int64)
    if len(seq) < 2:
        raise TrainingError("sequence must have at least two tokens")
    tokens, targets = seq[:-1], seq[1:]
    if regime == Regime.INSTRUCT:
        mask = np.arange(1, len(seq)) >= prompt_len
    else:
        mask = np.ones(len(tokens), dtype=bool)
    return Batch(tokens, targets, mask)


def load_corpus(path: str, regime: Regime = Regime.PRETRAIN) -> list[Batch]:
    """Read a JSONL corpus of {"tokens": [...], "prompt_len": n} records."""
    batches = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                batches.append(make_batch(rec["tokens"], regime, rec.get("prompt_len", 0)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise TrainingError(f"corpus line {line_no}: {e}") from e
    if not batches:
        raise TrainingError("corpus is empty")
    return batches


def lm_loss(logits, targets, mask):
    """Mean negative log-likelihood of targets over unmasked positions."""
    if np.asarray(mask, dtype=bool).sum() < 1:
        raise TrainingError("all positions are masked")
    return ad.masked_ce(logits, targets, mask)


def trainable_names(model: Model, cfg: TrainConfig) -> list[str]:
    if model.gate_cfg.gating == GatingMode.GATELESS:
        raise TrainingError("gate-less mixture has no routers to train")
    names = model.router_names()
    if cfg.trainable == Trainable.ROUTER_PLUS_EMBED:
        names = names + [naming.EMBED]
    return names


def _stored(model: Model, name: str) -> np.ndarray:
    if name == naming.EMBED:
        return model.embed
    for layer in model.layers:
        ffn = layer.ffn
        if ffn.router_name == name:
            return ffn.router
        if ffn.proj_router_names:
            for p, n in ffn.proj_router_names.items():
                if n == name:
                    return ffn.proj_routers[p]
        if getattr(layer.attn, "router_name", None) == name:
            return layer.attn.router
    raise KeyError(name)


def _loss_and_grad(model: Model, batch: Batch, names: list[str],
                   values: dict[str, np.ndarray] | None = None) -> tuple[float, GradMap]:
    values = values or {}
    overlay = {n: ad.leaf(values.get(n, _stored(model, n))) for n in names}
    logits = model.forward(batch.tokens, overrides=overlay)
    loss = lm_loss(logits, batch.targets, batch.mask)
    ad.backward(loss)
    grads = {n: (node.grad if node.grad is not None else np.zeros_like(node.value))
             for n, node in overlay.items()}
    return float(val(loss)), grads


def grad(model: Model, batch: Batch, cfg: TrainConfig) -> GradMap:
    """Exact gradients of the masked LM loss with respect to the trainable
    set. Top-K selection is piecewise constant: gradients flow through the
    softmax over the selected logits, never through the selection itself."""
    return _loss_and_grad(model, batch, trainable_names(model, cfg))[1]


def finite_diff_check(
    model: Model,
    batch: Batch,
    param_subset: list[str] | None = None,
    eps: float = 1e-4,
    samples: int = 64,
    seed: int = 0,
    analytic: GradMap | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over a sampled subset of entries (all entries if fewer than ``samples``).
    Entries where both gradients are below 1e-7 count as zero error."""
    names = param_subset or model.router_names()
    if analytic is None:
        analytic = _loss_and_grad(model, batch, names)[1]

    entries = [(n, i) for n in names for i in range(_stored(model, n).size)]
    rng = np.random.default_rng(seed)
    if len(entries) > samples:
        entries = [entries[j] for j in rng.choice(len(entries), samples, replace=False)]

    def loss_with(name, arr):
        logits = model.forward(batch.tokens, overrides={name: arr})
        return float(val(lm_loss(logits, batch.targets, batch.mask)))

    worst = 0.0
    for name, flat_idx in entries:
        base_arr = _stored(model, name)
        pert = base_arr.copy()
        flat = pert.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + eps
        up = loss_with(name, pert)
        flat[flat_idx] = orig - eps
        down = loss_with(name, pert)
        fd = (up - down) / (2 * eps)
        an = float(analytic[name].reshape(-1)[flat_idx])
        denom = max(abs(an), abs(fd))
        if denom >= 1e-7:
            worst = max(worst, abs(an - fd) / denom)
    return worst


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    tokens_seen: int


@dataclass
class _AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _apply_update(params, grads, cfg, adam: _AdamState | None):
    if cfg.optimizer == "sgd":
        if cfg.learning_rate == 0.0:
            return
        for n, g in grads.items():
            params[n] -= cfg.learning_rate * g
        return
    adam.t += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    for n, g in grads.items():
        m = adam.m.setdefault(n, np.zeros_like(g))
        v = adam.v.setdefault(n, np.zeros_like(g))
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        mhat = m / (1 - b1 ** adam.t)
        vhat = v / (1 - b2 ** adam.t)
        params[n] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)


def train_routers(model: Model, corpus: list[Batch], cfg: TrainConfig
                  ) -> tuple[Model, list[StepRecord]]:
    """Gradient descent on the trainable set with gradient accumulation and a
    constant learning rate. Gradients within an accumulation window are
    averaged with per-batch masked-token weights, so k accumulation steps
    over k batches match one step over those batches taken together.

    Returns a freshly built model over the trained checkpoint (only trainable
    tensors differ from the input; everything else is byte-identical) and the
    per-update loss curve.
    """
    cfg.validate()
    if not corpus:
        raise TrainingError("corpus is empty")
    names = trainable_names(model, cfg)
    params = {n: _stored(model, n).copy() for n in names}
    adam = _AdamState() if cfg.optimizer == "adam" else None

    rng = np.random.default_rng(cfg.seed)
    curve: list[StepRecord] = []
    tokens_seen = 0
    step = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        micro_batches = [
            [corpus[j] for j in order[i:i + cfg.batch_size]]
            for i in range(0, len(order), cfg.batch_size)
        ]
        for w0 in range(0, len(micro_batches), cfg.grad_accum_steps):
            window = micro_batches[w0:w0 + cfg.grad_accum_steps]
            g_sum: GradMap = {n: np.zeros_like(p) for n, p in params.items()}
            loss_sum = 0.0
            count = 0
            for group in window:
                for batch in group:
                    loss, grads = _loss_and_grad(model, batch, names, params)
                    c = batch.masked_count
                    for n in names:
                        g_sum[n] += grads[n] * c
                    loss_sum += loss * c
                    count += c
            step += 1
            tokens_seen += count
            _apply_update(params, {n: g / count for n, g in g_sum.items()}, cfg, adam)
            curve.append(StepRecord(step, loss_sum / count, cfg.learning_rate, tokens_seen))

    trained = Model(model.export(params), dtype="f64" if model.dtype == np.float64 else "f32")
    return trained, curve


def write_loss_curve(path: str, curve: list[StepRecord]) -> None:
    """Serialize the loss curve as ``step,loss,lr,tokens_seen`` CSV."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr", "tokens_seen"])
        for r in curve:
            writer.writerow([r.step, repr(r.loss), repr(r.lr), r.tokens_seen])


def smoothed(losses, window: int) -> np.ndarray:
    """Moving average with the given window; length shrinks accordingly."""
    x = np.asarray(losses, dtype=np.float64)
    if window < 1 or window > len(x):
        raise ValueError("window must be in [1, len(losses)]")
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")
