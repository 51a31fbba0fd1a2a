"""Command-line entry points.

Exit codes: 0 success, 1 usage error (bad flags, bad config file, missing
inputs of the wrong kind), 2 runtime failure.  Every flag can also be set
from a key=value config file via --config; explicit flags win, unknown
keys are rejected, and the effective configuration is echoed before the
command runs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .decoder import DecodeConfig, decode_implicit, decode_length_guided, decode_pinned
from .evaluation import (
    collect_candidates,
    grid_search_rerank,
    length_metrics,
    measure_rtf,
    run_scenarios,
    write_reports_csv,
    emit_trace,
)
from .model import (
    DenoiserConfig,
    LengthPredictorConfig,
    encode_clip,
    init_denoiser,
    init_length_predictor,
    length_forward,
    load_checkpoint,
    save_checkpoint,
)
from .synthdata import ChannelConfig, TEXT_SPACE, detokenize, generate_dataset, load_samples
from .training import TrainConfig, train_length_predictor, train_stage, write_curve


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


def _jitter(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"jitter must look like 'lo:hi', got {text!r}")
    return lo, hi


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    p = _Parser(prog="visemedec", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1,
                        help="worker cap; the pipeline is serial so this only validates")

    sp = sub.add_parser("gen-data", help="write train/val/test TSVs", parents=[])
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n-train", type=int, default=20000)
    sp.add_argument("--n-val", type=int, default=1000)
    sp.add_argument("--n-test", type=int, default=1000)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--jitter", type=_jitter, default=(1, 3), metavar="LO:HI")
    sp.add_argument("--max-chars", type=int, default=31)

    sp = sub.add_parser("train", help="train the denoiser or the length predictor")
    common(sp)
    sp.add_argument("--data", required=True, help="training TSV")
    sp.add_argument("--out", required=True, help="checkpoint path to write")
    sp.add_argument("--model", choices=("denoiser", "length-predictor"), default="denoiser")
    sp.add_argument("--stage", type=int, choices=(1, 2), default=1)
    sp.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    sp.add_argument("--steps", type=int, default=None, help="default 3000/500/1500 by mode")
    sp.add_argument("--lr", type=float, default=None, help="default 1e-3 (5e-4 for stage 2)")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--curve", help="loss curve CSV path")
    sp.add_argument("--log-every", type=int, default=200)
    sp.add_argument("--canvas-len", type=int, default=32)
    sp.add_argument("--d-model", type=int, default=128)
    sp.add_argument("--n-blocks", type=int, default=2)
    sp.add_argument("--n-heads", type=int, default=4)
    sp.add_argument("--ff", type=int, default=512)
    sp.add_argument("--k-max", type=int, default=31)
    sp.add_argument("--lp-d-model", type=int, default=384)
    sp.add_argument("--lp-blocks", type=int, default=2)
    sp.add_argument("--lp-heads", type=int, default=6)
    sp.add_argument("--lp-ff", type=int, default=1536)
    sp.add_argument("--dropout", type=float, default=0.1)

    sp = sub.add_parser("decode", help="transcribe a TSV with a trained checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True, help="hypotheses TSV")
    sp.add_argument("--mode", choices=("implicit", "oracle", "length-guided"),
                    default="implicit")
    sp.add_argument("--lp-ckpt", help="length predictor (length-guided mode)")
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--block-size", type=int, default=32)
    sp.add_argument("--radius", type=int, default=5)
    sp.add_argument("--lam", type=float, default=0.9)
    sp.add_argument("--beta", type=float, default=0.7)
    sp.add_argument("--limit", type=int, default=0, help="0 = all samples")

    sp = sub.add_parser("eval", help="scenario table on a test TSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="stage-2 denoiser checkpoint")
    sp.add_argument("--stage1-ckpt")
    sp.add_argument("--lp-ckpt")
    sp.add_argument("--out", help="CSV path for the scenario table")
    sp.add_argument("--block-sweep", action="store_true")
    sp.add_argument("--rtf", action="store_true", help="measure real-time factors")
    sp.add_argument("--rtf-samples", type=int, default=50)
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--radius", type=int, default=5)
    sp.add_argument("--lam", type=float, default=0.9)
    sp.add_argument("--beta", type=float, default=0.7)
    sp.add_argument("--limit", type=int, default=0)

    sp = sub.add_parser("gridsearch", help="rerank (lam, beta) grid on a val TSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--lp-ckpt", required=True)
    sp.add_argument("--out", required=True, help="grid CSV path")
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--radius", type=int, default=5)
    sp.add_argument("--limit", type=int, default=0)

    sp = sub.add_parser("trace", help="write per-iteration decode traces")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--mode", choices=("implicit", "oracle"), default="implicit")
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--limit", type=int, default=5)

    sp = sub.add_parser("grad-check", help="finite-difference check on a small denoiser")
    common(sp)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-3)

    return p, dict(sub.choices)


# ---------------------------------------------------------------------------
# config file merge
# ---------------------------------------------------------------------------


def load_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            for ln, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CliUsageError(f"{path}:{ln}: expected key = value")
                key, _, val = line.partition("=")
                values[key.strip().replace("-", "_")] = val.strip()
    except OSError as e:
        raise CliUsageError(f"cannot read config file: {e}")
    return values


def _coerce(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliUsageError(f"config key {action.dest!r} wants a boolean, got {raw!r}")
    if action.type is not None:
        try:
            return action.type(raw)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise CliUsageError(f"config key {action.dest!r}: {e}")
    return raw


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser, subparsers = build_parser()
    # first pass finds the subcommand and any --config
    args = parser.parse_args(argv)
    if args.config:
        sub_actions = subparsers[args.command]._actions
        by_dest = {a.dest: a for a in sub_actions if a.dest != "help"}
        overrides = load_config_file(args.config)
        unknown = sorted(set(overrides) - set(by_dest))
        if unknown:
            raise CliUsageError(f"unknown config keys: {', '.join(unknown)}")
        # config fills everything the command line left at its default
        explicit = _explicit_dests(argv, by_dest)
        for key, raw in overrides.items():
            if key not in explicit:
                setattr(args, key, _coerce(by_dest[key], raw))
    return args


def _explicit_dests(argv: list[str], by_dest: dict) -> set[str]:
    """Dests actually present on the command line (they beat the config file)."""
    flags = {}
    for dest, action in by_dest.items():
        for opt in action.option_strings:
            flags[opt] = dest
    out = set()
    for token in argv:
        opt = token.split("=", 1)[0]
        if opt in flags:
            out.add(flags[opt])
    return out


def echo_config(args: argparse.Namespace) -> None:
    skip = {"command", "config"}
    pairs = sorted((k, v) for k, v in vars(args).items() if k not in skip)
    body = " ".join(f"{k}={v}" for k, v in pairs)
    print(f"config[{args.command}] {body}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    channel = ChannelConfig(noise=args.noise, jitter=args.jitter)
    paths = generate_dataset(args.out, args.n_train, args.n_val, args.n_test,
                             channel, args.seed, args.max_chars)
    for tag, path in paths.items():
        print(f"wrote {tag}: {path}")
    return 0


def _train_defaults(args) -> tuple[int, float]:
    if args.model == "length-predictor":
        return (args.steps or 1500, args.lr or 1e-3)
    if args.stage == 2:
        return (args.steps or 500, args.lr or 5e-4)
    return (args.steps or 3000, args.lr or 1e-3)


def cmd_train(args) -> int:
    samples = load_samples(args.data)
    steps, lr = _train_defaults(args)
    tcfg = TrainConfig(stage=args.stage, steps=steps, lr=lr,
                       batch_size=args.batch_size, seed=args.seed)
    if args.model == "length-predictor":
        cfg = LengthPredictorConfig(k_max=args.k_max, d_model=args.lp_d_model,
                                    n_blocks=args.lp_blocks, n_heads=args.lp_heads,
                                    ff=args.lp_ff, dropout=args.dropout)
        params = init_length_predictor(cfg, args.seed)
        curve = train_length_predictor(params, samples, tcfg, log_every=args.log_every)
    else:
        if args.stage == 2:
            if not args.init:
                raise CliUsageError("stage 2 requires --init with a stage-1 checkpoint")
            params = load_checkpoint(args.init)
        elif args.init:
            params = load_checkpoint(args.init)
        else:
            cfg = DenoiserConfig(canvas_len=args.canvas_len, d_model=args.d_model,
                                 n_blocks=args.n_blocks, n_heads=args.n_heads, ff=args.ff)
            params = init_denoiser(cfg, args.seed)
        curve = train_stage(params, samples, tcfg, log_every=args.log_every)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_checkpoint(params, args.out)
    if args.curve:
        write_curve(curve, args.curve)
    print(f"wrote checkpoint: {args.out} (final loss {curve[-1][2]:.4f})")
    return 0


def _decode_cfg(args) -> DecodeConfig:
    return DecodeConfig(threshold=args.threshold,
                        block_size=getattr(args, "block_size", 32),
                        radius=getattr(args, "radius", 5),
                        lam=getattr(args, "lam", 0.9),
                        beta=getattr(args, "beta", 0.7))


def _limited(samples, limit):
    return samples[:limit] if limit else samples


def cmd_decode(args) -> int:
    samples = _limited(load_samples(args.data), args.limit)
    params = load_checkpoint(args.ckpt)
    cfg = _decode_cfg(args)
    lp = None
    if args.mode == "length-guided":
        if not args.lp_ckpt:
            raise CliUsageError("length-guided mode requires --lp-ckpt")
        lp = load_checkpoint(args.lp_ckpt)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("id\ttranscript\tk\tn_iters\tscore\tflags\n")
        for s in samples:
            cond = encode_clip(s.clip)
            flags, score = "", ""
            if args.mode == "oracle":
                res = decode_pinned(params, cond, s.k, cfg)
                hyp, k, n = detokenize(res.token_ids), res.k, res.n_iters
            elif args.mode == "implicit":
                res = decode_implicit(params, cond, cfg)
                hyp, flags = detokenize(res.token_ids), ",".join(res.flags)
                k, n = len(res.token_ids), res.n_iters
            else:
                best, _ = decode_length_guided(params, lp, cond, cfg)
                hyp, k, n = detokenize(best.token_ids), best.k, best.n_iters
                score = f"{best.score:.6f}"
            f.write(f"{s.sample_id}\t{hyp}\t{k}\t{n}\t{score}\t{flags}\n")
    print(f"wrote hypotheses: {args.out} ({len(samples)} samples)")
    return 0


def cmd_eval(args) -> int:
    samples = _limited(load_samples(args.data), args.limit)
    stage2 = load_checkpoint(args.ckpt)
    stage1 = load_checkpoint(args.stage1_ckpt) if args.stage1_ckpt else None
    lp = load_checkpoint(args.lp_ckpt) if args.lp_ckpt else None
    cfg = _decode_cfg(args)
    reports = run_scenarios(stage1, stage2, lp, samples, cfg,
                            block_sweep=args.block_sweep)
    if args.rtf:
        rtf_samples = samples[: args.rtf_samples + 5]
        imp = measure_rtf(
            lambda s: decode_implicit(stage2, encode_clip(s.clip), cfg), rtf_samples)
        print(f"rtf implicit: {imp:.4f}")
        if lp is not None:
            lg = measure_rtf(
                lambda s: decode_length_guided(stage2, lp, encode_clip(s.clip), cfg),
                rtf_samples)
            print(f"rtf length-guided: {lg:.4f}")
        for r in reports:
            if r.scenario == "stage2_implicit":
                r.rtf = imp
            if r.scenario == "stage2_rerank_full" and lp is not None:
                r.rtf = lg
    if lp is not None:
        preds = [length_forward(lp, encode_clip(s.clip)).k_pred for s in samples]
        lm = length_metrics(preds, [s.k for s in samples])
        print("length:", " ".join(f"{k}={v:.2f}" for k, v in lm.items()))
    for r in reports:
        print(r.line())
    if args.out:
        write_reports_csv(reports, args.out)
        print(f"wrote scenario table: {args.out}")
    return 0


def cmd_gridsearch(args) -> int:
    samples = _limited(load_samples(args.data), args.limit)
    params = load_checkpoint(args.ckpt)
    lp = load_checkpoint(args.lp_ckpt)
    cfg = _decode_cfg(args)
    cached = collect_candidates(params, lp, samples, cfg)
    result = grid_search_rerank(cached)
    result.write_csv(args.out)
    print(f"best lam={result.best_lam:.1f} beta={result.best_beta:.1f} "
          f"wer={result.wer.min():.4f}")
    print(f"wrote grid: {args.out}")
    return 0


def cmd_trace(args) -> int:
    samples = _limited(load_samples(args.data), args.limit)
    params = load_checkpoint(args.ckpt)
    cfg = _decode_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    for s in samples:
        cond = encode_clip(s.clip)
        if args.mode == "oracle":
            res = decode_pinned(params, cond, s.k, cfg)
        else:
            res = decode_implicit(params, cond, cfg)
        start_ids = np.full(res.outcome.canvas.length, TEXT_SPACE.mask_id, dtype=np.int64)
        if args.mode == "oracle":
            start_ids[s.k] = TEXT_SPACE.eos_id
            start_ids[s.k + 1:] = TEXT_SPACE.pad_id
        path = os.path.join(args.out, f"{s.sample_id}.trace")
        emit_trace(s, start_ids, res.outcome.trace, TEXT_SPACE, path)
    print(f"wrote {len(samples)} traces to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    # deliberately imported here: pulls in the test-scale harness
    from .gradharness import run_default_grad_check

    report = run_default_grad_check(eps=args.eps, tolerance=args.tolerance, seed=args.seed)
    for name, rel in sorted(report.per_param.items(), key=lambda kv: -kv[1])[:8]:
        print(f"  {name:<24s} rel err {rel:.3e}")
    print(report.summary())
    return 0 if report.passed else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "trace": cmd_trace,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        if args.threads < 1:
            raise CliUsageError(f"--threads must be >= 1, got {args.threads}")
        echo_config(args)
        return COMMANDS[args.command](args)
    except CliUsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001  - runtime failures map to exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
