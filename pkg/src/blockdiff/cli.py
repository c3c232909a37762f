"""Command-line interface.

Subcommands: train, generate, eval, entropy, dump-plan, dump-mask, flops,
verify. Reporting commands emit JSON to stdout by default and CSV with
--csv; the dump commands emit their line-oriented text formats directly.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import make_split, tokenize
from .evalcli import EvalReport, eval_perplexity, run_invariant_suite, unigram_entropy
from .masks import build_masks, render_mask
from .model import ModelConfig, flops_estimate, init_params, layer_flop_components
from .sampler import generate_sequential, generate_strided
from .schedule import identity_plan, make_plan_from_tau, sample_masking_order, strided_permutation
from .trainer import TrainConfig, load_checkpoint, run_training

MODEL_KEYS = {
    "vocab": int, "dim": int, "heads": int, "layers": int, "two_stream_layers": int,
    "pe_dim": int, "ffn_expansion": float, "query_mode": str,
}
TRAIN_KEYS = {
    "batch_size": int, "seq_len": int, "total_steps": int, "learning_rate": float,
    "beta1": float, "beta2": float, "eps": float, "warmup_steps": int,
    "grad_clip_norm": float, "weight_decay": float, "dropout": float,
    "ar_steps": int, "ramp_end_step": int, "max_shuffled": int, "sbp_steps": int,
}
EXTRA_KEYS = {"seed": int, "val_fraction": float}


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; `#` starts a comment."""
    values: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        for table in (MODEL_KEYS, TRAIN_KEYS, EXTRA_KEYS):
            if key in table:
                values[key] = table[key](val)
                break
        else:
            raise ValueError(f"unknown config key {key!r}")
    return values


def _read_data(path) -> bytes:
    p = Path(path)
    if p.is_dir():
        parts = [f.read_bytes() for f in sorted(p.iterdir()) if f.is_file()]
        return b"".join(parts)
    return p.read_bytes()


def _emit(payload: dict, as_csv: bool) -> None:
    if as_csv:
        keys = list(payload)
        print(",".join(keys))
        print(",".join(str(payload[k]) for k in keys))
    else:
        print(json.dumps(payload, indent=2))


def _cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    seed = cfg.pop("seed", 0)
    val_fraction = cfg.pop("val_fraction", 0.1)
    model_kwargs = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    model_kwargs.setdefault("vocab", corpus_mod.VOCAB.size)
    model_cfg = ModelConfig(dropout=cfg.get("dropout", 0.0), **model_kwargs)
    train_cfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    tokens = tokenize(_read_data(args.data))
    split = make_split(tokens, train_cfg.seq_len, val_fraction=val_fraction)
    params = init_params(model_cfg, np.random.Generator(np.random.PCG64(seed)))
    history = run_training(params, model_cfg, train_cfg, split, args.out,
                           seed=seed, log_every=args.log_every)
    nll, ppl = eval_perplexity(params, model_cfg, split)
    _emit({
        "steps": len(history),
        "final_loss": history[-1].loss if history else None,
        "validation_nll": nll,
        "validation_perplexity": ppl,
        "checkpoint": str(Path(args.out) / "checkpoint.bin"),
        "metrics_csv": str(Path(args.out) / "metrics.csv"),
    }, False)
    return 0


def _cmd_generate(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    if args.streams == 1:
        result = generate_sequential(params, config, args.length,
                                     temperature=args.temperature, seed=args.seed)
    else:
        result = generate_strided(params, config, args.length, args.streams,
                                  temperature=args.temperature, seed=args.seed)
    if args.format == "text":
        sys.stdout.write(corpus_mod.detokenize(result.tokens).decode("utf-8", errors="replace"))
        sys.stdout.write("\n")
    else:
        print(json.dumps({
            "tokens": result.tokens.tolist(),
            "logprobs": result.logprobs.tolist(),
            "groups": [g.tolist() for g in result.groups],
            "model_calls": result.model_calls,
        }, indent=2))
    return 0


def _cmd_eval(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    tokens = tokenize(_read_data(args.data))
    split = make_split(tokens, args.seq_len, val_fraction=args.val_fraction)
    nll, ppl = eval_perplexity(params, config, split)
    _emit({"nll": nll, "perplexity": ppl}, args.csv)
    return 0


def _cmd_entropy(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    entropies = []
    calls = 0
    started = time.perf_counter()
    for i in range(args.samples):
        if args.streams == 1:
            result = generate_sequential(params, config, args.length,
                                         temperature=args.temperature, seed=args.seed + i)
        else:
            result = generate_strided(params, config, args.length, args.streams,
                                      temperature=args.temperature, seed=args.seed + i)
        entropies.append(unigram_entropy(result.tokens))
        calls = result.model_calls
    elapsed = (time.perf_counter() - started) / max(args.samples, 1)
    report = EvalReport(
        nll=float("nan"), perplexity=float("nan"),
        mean_unigram_entropy=float(np.mean(entropies)),
        model_calls=calls, seconds_per_sequence=elapsed,
    )
    payload = report.to_dict()
    del payload["nll"], payload["perplexity"]
    _emit(payload, args.csv)
    return 0


def _make_plan(args):
    if args.tau:
        steps = np.array([int(v) for v in args.tau.split(",")], dtype=np.int64)
        return make_plan_from_tau(steps, int(steps.max()))
    if args.streams > 1:
        return strided_permutation(args.length, args.streams)
    if args.seed is not None:
        return sample_masking_order(args.length, np.random.Generator(np.random.PCG64(args.seed)))
    return identity_plan(args.length)


def _cmd_dump_plan(args) -> int:
    sys.stdout.write(_make_plan(args).to_text())
    return 0


def _cmd_dump_mask(args) -> int:
    pair = build_masks(_make_plan(args))
    mask = pair.strict if args.kind == "strict" else pair.causal
    sys.stdout.write(render_mask(mask))
    return 0


def _cmd_flops(args) -> int:
    total, ratio = flops_estimate(args.length, args.dim, args.layers,
                                  args.two_stream_layers, args.ffn_expansion)
    parts = layer_flop_components(args.length, args.dim, args.ffn_expansion)
    _emit({"total_flops": total, "ratio_vs_standard": ratio, **parts}, args.csv)
    return 0


def _cmd_verify(args) -> int:
    report = run_invariant_suite(args.seed)
    if args.csv:
        print("name,passed,detail")
        for row in report:
            detail = row["detail"].replace(",", ";")
            print(f"{row['name']},{row['passed']},{detail}")
    else:
        print(json.dumps(report, indent=2))
    failed = [row["name"] for row in report if not row["passed"]]
    if failed:
        print(f"FAILED invariants: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a flat config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("generate", help="decode from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--streams", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("entropy", help="mean unigram entropy of generated samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--streams", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=_cmd_entropy)

    for name, fn in (("dump-plan", _cmd_dump_plan), ("dump-mask", _cmd_dump_mask)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} as text")
        p.add_argument("--length", type=int, default=8)
        p.add_argument("--streams", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tau", type=str, default=None,
                       help="comma-separated masking steps, overrides other sources")
        if name == "dump-mask":
            p.add_argument("--kind", choices=("causal", "strict"), default="strict")
        p.set_defaults(fn=fn)

    p = sub.add_parser("flops", help="cost model report")
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--two-stream-layers", type=int, default=6)
    p.add_argument("--ffn-expansion", type=float, default=8.0 / 3.0)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=_cmd_flops)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=_cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
