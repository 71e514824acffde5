"""``retnet`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..model import InputError, greedy_generate
from ..training import TrainingError, train
from .checkpoint import IntegrityError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retnet", description="Retention network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the equivalence/invariant suite")
    v.add_argument("--only", action="append", help="run only the named check (repeatable)")

    sub.add_parser("gradcheck", help="finite-difference gradient checks")

    t = sub.add_parser("train", help="train on a synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="CSV metrics path")

    g = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompt", required=True, type=_int_list)
    g.add_argument("--steps", type=int, default=16)
    g.add_argument("--mode", choices=("recurrent", "parallel", "chunkwise"), default="recurrent")

    b = sub.add_parser("bench", help="decode-throughput benchmark")
    b.add_argument("--mechanism", choices=("retention", "attention", "both"), default="both")
    b.add_argument("--lens", type=_int_list, default=[512, 1024, 2048, 4096])
    b.add_argument("--csv", required=True)
    b.add_argument("--threads", type=int, default=1)
    return p


def _verify(args) -> int:
    from .verify import run_checks

    return EXIT_OK if run_checks(args.only) else EXIT_FAIL


def _gradcheck(args) -> int:
    from .verify import GRAD_TOL, PRIMITIVE_GRAD_TOL, a3, primitive_gradcheck_errors

    ok = True
    for name, err in primitive_gradcheck_errors():
        good = err <= PRIMITIVE_GRAD_TOL
        ok &= good
        print(f"[{'PASS' if good else 'FAIL'}] {name}: max rel err {err:.2e} (tol {PRIMITIVE_GRAD_TOL:g})")
    passed, detail = a3()
    print(f"[{'PASS' if passed else 'FAIL'}] whole model: {detail} (tol {GRAD_TOL:g})")
    return EXIT_OK if ok and passed else EXIT_FAIL


def _train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    # training runs the stabilized parallel form
    model_cfg = replace(model_cfg, stabilized=True)
    result = train(model_cfg, train_cfg, args.metrics)
    save_checkpoint(result.params, model_cfg, args.out)
    step, loss, acc = result.metrics[-1]
    print(f"step {step} loss {loss:.4f} accuracy {acc:.4f} ({result.seconds:.1f}s) -> {args.out}")
    return EXIT_OK


def _generate(args) -> int:
    params, config = load_checkpoint(args.ckpt)
    out = greedy_generate(args.prompt, args.steps, params, config, args.mode)
    print(",".join(str(t) for t in out))
    return EXIT_OK


def _bench(args) -> int:
    from .bench import bench_decode, reference_config, write_bench_csv

    mechs = ("retention", "attention") if args.mechanism == "both" else (args.mechanism,)
    records = bench_decode(reference_config(), args.lens, mechs, threads=args.threads)
    write_bench_csv(args.csv, records, threads=args.threads)
    for r in records:
        print(
            f"{r.mechanism:9s} n={r.seq_len:5d} {r.ms_per_token:.3f} ms/token "
            f"{r.tokens_per_s:9.1f} tok/s state={r.state_bytes} B"
        )
    return EXIT_OK


COMMANDS = {
    "verify": _verify,
    "gradcheck": _gradcheck,
    "train": _train,
    "generate": _generate,
    "bench": _bench,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ConfigError, IntegrityError, InputError) as exc:
        print(f"retnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"retnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
