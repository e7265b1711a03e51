"""Command-line surface: compose, swap, inspect, infer, train-routers,
stats, estimate, check-grad. Exit codes: 0 success, 1 user error, 2 internal
error. Repeated invocations with identical inputs and flags produce
byte-identical output files."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, naming, training
from .arch import ARCH_PRESETS, load_arch_json
from .compose import compose_moe, merge_lora, swap_expert
from .errors import MoeforgeError, RecipeError
from .recipe import (
    ExpertSource,
    GatingMode,
    Granularity,
    RecipeParams,
    decode_metadata,
    is_moe,
    load_recipe_file,
    params_to_recipe_dict,
)
from .runtime import BYTE_VOCAB, Model, collect_prompt_hiddens, encode_text, model_forward
from .tensorstore import load_checkpoint, save_checkpoint


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage instead of argparse's 2
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("MOEFORGE_THREADS", "1"))


def _parse_tokens(spec: str) -> list[int]:
    try:
        return [int(t) for t in spec.split(",") if t != ""]
    except ValueError:
        raise RecipeError(f"--tokens must be comma-separated integers, got {spec!r}")


def _prompt_ids(args, model: Model) -> list[int]:
    if args.tokens is not None:
        return _parse_tokens(args.tokens)
    if model.arch.vocab_size < BYTE_VOCAB:
        raise MoeforgeError(
            f"--text needs the byte tokenizer (vocab >= {BYTE_VOCAB}); "
            f"this model's vocab is {model.arch.vocab_size}")
    return encode_text(args.text)


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(human)


def _hidden_activations(base, recipe, dtype):
    if recipe.hidden_init_prompts is None:
        raise RecipeError("hidden_repr gating needs a 'hidden_init' prompts block in the recipe")
    pos, neg = recipe.hidden_init_prompts
    if not pos or not neg:
        raise RecipeError("hidden_init must provide non-empty positive and negative prompt lists")

    def to_ids(prompt, model):
        if isinstance(prompt, str):
            if model.arch.vocab_size < BYTE_VOCAB:
                raise RecipeError("hidden_init text prompts need a byte-tokenizer vocab; "
                                  "use token id lists for small models")
            return encode_text(prompt)
        return list(prompt)

    activations = []
    for src in recipe.expert_sources:
        ckpt = src.ckpt if src.kind == "full" else merge_lora(base, src.ckpt)
        model = Model(ckpt, dtype=dtype)
        activations.append(collect_prompt_hiddens(
            model,
            [to_ids(p, model) for p in pos],
            [to_ids(p, model) for p in neg],
        ))
    return activations


# ---- subcommands ----

def cmd_compose(args) -> int:
    base = load_checkpoint(args.base)
    recipe = load_recipe_file(args.recipe, load_checkpoint)
    if args.seed is not None:
        recipe.seed = args.seed
    activations = None
    if recipe.gating == GatingMode.HIDDEN_REPR:
        activations = _hidden_activations(base, recipe, "f32")
    moe = compose_moe(base, recipe, activations=activations, threads=_threads(args))
    save_checkpoint(moe, args.out)
    _emit(args, {"out": args.out, "num_experts": recipe.num_experts,
                 "gating": recipe.gating.value, "tensors": len(moe)},
          f"composed {recipe.num_experts}-expert {recipe.gating.value} mixture -> {args.out}")
    return 0


def _detect_kind(ckpt) -> str:
    return "lora" if "lora.rank" in ckpt.metadata else "full"


def cmd_swap(args) -> int:
    moe = load_checkpoint(args.moe)
    expert = load_checkpoint(args.expert)
    kind = args.kind or _detect_kind(expert)
    out = swap_expert(moe, args.slot, ExpertSource(kind=kind, ckpt=expert, label=args.expert))
    save_checkpoint(out, args.out)
    _emit(args, {"out": args.out, "slot": args.slot, "kind": kind},
          f"swapped slot {args.slot} with {args.expert} -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    from .arch import infer_arch

    arch = infer_arch(ckpt)
    payload = {
        "arch": {
            "num_layers": arch.num_layers, "hidden_size": arch.hidden_size,
            "ffn_intermediate_size": arch.ffn_intermediate_size,
            "num_heads": arch.num_heads, "num_kv_heads": arch.num_kv_heads,
            "vocab_size": arch.vocab_size, "norm_eps": arch.norm_eps,
        },
        "metadata": dict(sorted(ckpt.metadata.items())),
        "recipe": None,
        "tensors": [{"name": n, "dtype": ckpt.entry(n).dtype,
                     "shape": list(ckpt.entry(n).shape)} for n in sorted(ckpt.names())],
    }
    if is_moe(ckpt.metadata):
        payload["recipe"] = params_to_recipe_dict(decode_metadata(ckpt.metadata))
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"arch: {payload['arch']}")
        if payload["recipe"]:
            print(f"recipe: {payload['recipe']}")
        print(f"{len(payload['tensors'])} tensors:")
        for t in payload["tensors"]:
            print(f"  {t['name']}  {t['dtype']}  {t['shape']}")
    return 0


def cmd_infer(args) -> int:
    model = Model(load_checkpoint(args.ckpt), dtype=args.dtype)
    ids = _prompt_ids(args, model)
    logits, trace = model_forward(model, ids)
    if args.heatmap:
        analysis.routing_heatmap(trace, n_experts=model.gate_cfg.n_experts).to_csv(args.heatmap)
    top = np.argmax(logits, axis=-1)
    payload = {
        "tokens": ids,
        "top_token_per_position": [int(t) for t in top],
        "ffn_evals": trace.ffn_evals,
        "logits": [[float(x) for x in row] for row in logits],
    }
    human = "\n".join(
        f"pos {i}: top token {int(top[i])} (logit {logits[i, top[i]]:.6f})"
        for i in range(len(ids)))
    _emit(args, payload, human)
    return 0


def cmd_train_routers(args) -> int:
    model = Model(load_checkpoint(args.ckpt), dtype=args.dtype)
    regime = training.Regime(args.regime)
    corpus = training.load_corpus(args.corpus, regime)
    cfg = training.TrainConfig(
        trainable=training.Trainable(args.trainable),
        regime=regime,
        epochs=args.epochs,
        batch_size=args.batch_size,
        grad_accum_steps=args.accum,
        learning_rate=args.lr,
        seed=args.seed if args.seed is not None else 0,
        optimizer=args.optimizer,
    )
    trained, curve = training.train_routers(model, corpus, cfg)
    save_checkpoint(trained.source, args.out)
    if args.loss_csv:
        training.write_loss_curve(args.loss_csv, curve)
    _emit(args, {"out": args.out, "steps": len(curve),
                 "first_loss": curve[0].loss, "last_loss": curve[-1].loss},
          f"trained {len(curve)} steps, loss {curve[0].loss:.4f} -> {curve[-1].loss:.4f}; "
          f"saved {args.out}")
    return 0


def cmd_stats(args) -> int:
    model = Model(load_checkpoint(args.ckpt), dtype=args.dtype)
    from .runtime import RoutingTrace

    merged = RoutingTrace()
    prompts = []
    if args.tokens_file:
        with open(args.tokens_file) as f:
            for line in f:
                if line.strip():
                    prompts.append(json.loads(line)["tokens"])
    else:
        prompts.append(_prompt_ids(args, model))
    for ids in prompts:
        _, trace = model_forward(model, ids)
        merged.extend(trace)
    table = analysis.routing_heatmap(merged, n_experts=model.gate_cfg.n_experts,
                                     site_prefix=args.site)
    if args.heatmap:
        table.to_csv(args.heatmap)
    payload = {
        "prompts": len(prompts),
        "ffn_evals": merged.ffn_evals,
        "heatmap": [[float(x) for x in row] for row in table.fractions],
    }
    human_rows = "\n".join(
        f"layer {l}: " + " ".join(f"{x:.3f}" for x in row)
        for l, row in enumerate(table.fractions))
    _emit(args, payload, f"top-expert fractions per layer:\n{human_rows}")
    return 0


def cmd_estimate(args) -> int:
    if args.arch in ARCH_PRESETS:
        arch = ARCH_PRESETS[args.arch]
    else:
        with open(args.arch) as f:
            arch = load_arch_json(json.load(f))
    ns = _parse_tokens(args.n)
    mode = GatingMode(args.mode)
    reports = []
    for n in ns:
        params = RecipeParams(
            gating=mode, granularity=Granularity(args.granularity),
            num_experts=n, top_k=min(args.k, n), noise_sigma=0.01, seed=0,
            mix_attention=args.mix_attention, always_on=None,
            experts=[("full", f"expert-{i}") for i in range(n)],
        )
        reports.append((mode.value, n, analysis.cost_estimate(arch, params)))
    rows = analysis.compare_cost_tables(reports, budget_gb=args.budget_gb, dtype=args.dtype)
    if args.out:
        analysis.write_cost_grid(args.out, rows)
    payload = {"rows": [vars(r) for r in rows]}
    human = "\n".join(
        f"{r.mode} N={r.n}: total={r.total_params:,} active={r.active_params:,} "
        f"mem={r.memory_gb:.3f}GB{' OVER BUDGET' if r.over_budget else ''}"
        for r in rows)
    _emit(args, payload, human)
    return 0


def cmd_check_grad(args) -> int:
    model = Model(load_checkpoint(args.ckpt), dtype="f64")
    corpus = training.load_corpus(args.corpus, training.Regime(args.regime))
    batch = corpus[args.batch_index]
    cfg = training.TrainConfig(trainable=training.Trainable(args.trainable))
    names = training.trainable_names(model, cfg)
    err = training.finite_diff_check(model, batch, names, eps=args.eps,
                                     samples=args.samples)
    _emit(args, {"max_rel_error": err, "params_checked": names},
          f"max relative error (analytic vs central differences): {err:.3e}")
    if args.threshold is not None and err > args.threshold:
        raise MoeforgeError(
            f"gradient check failed: {err:.3e} exceeds threshold {args.threshold:.3e}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="moeforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=None,
                        help="override seed where randomness applies")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (or MOEFORGE_THREADS)")

    p = sub.add_parser("compose", parents=[common], help="build a mixture checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--recipe", required=True, help="JSON recipe file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("swap", parents=[common], help="replace one expert slot")
    p.add_argument("--moe", required=True)
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--kind", choices=["full", "lora"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("inspect", parents=[common], help="show checkpoint structure")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("infer", parents=[common], help="run the reference forward pass")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", help="comma-separated token ids")
    p.add_argument("--text", help="UTF-8 text via the byte tokenizer")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--heatmap", help="write routing heat map CSV here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-routers", parents=[common], help="train router weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True, help="JSONL with tokens/prompt_len records")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--regime", choices=[r.value for r in training.Regime],
                   default="instruct")
    p.add_argument("--trainable", choices=[t.value for t in training.Trainable],
                   default="router")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--accum", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.set_defaults(func=cmd_train_routers)

    p = sub.add_parser("stats", parents=[common], help="routing heat map over prompts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", help="comma-separated token ids")
    p.add_argument("--text")
    p.add_argument("--tokens-file", help="JSONL of {\"tokens\": [...]} prompts")
    p.add_argument("--site", default="ffn", help="routed site prefix to aggregate")
    p.add_argument("--heatmap", help="write heat map CSV here")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("estimate", parents=[common], help="analytic cost grid")
    p.add_argument("--arch", required=True, help="arch JSON path or preset name")
    p.add_argument("--mode", choices=[g.value for g in GatingMode], required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n", required=True, help="comma-separated expert counts")
    p.add_argument("--granularity", choices=["ffn", "fgmlp"], default="ffn")
    p.add_argument("--mix-attention", action="store_true")
    p.add_argument("--dtype", default="F16", choices=["F64", "F32", "F16", "BF16"])
    p.add_argument("--budget-gb", type=float, default=80.0)
    p.add_argument("--out", help="write the grid CSV here")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("check-grad", parents=[common],
                       help="finite-difference validation of router gradients")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--batch-index", type=int, default=0)
    p.add_argument("--regime", choices=[r.value for r in training.Regime],
                   default="pretrain")
    p.add_argument("--trainable", choices=[t.value for t in training.Trainable],
                   default="router")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--threshold", type=float, default=None,
                   help="exit 1 if the max relative error exceeds this")
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MoeforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # internal error
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
