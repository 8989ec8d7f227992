"""Command-line entry points: run, bench, sweep, oracle, replay, serve.

Backends are given as ``--backend mock:<script.json>`` for the scripted
mock or as a completions server URL. ``$EARLYEXIT_BASE_URL`` is used when
the flag is omitted.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .backend.http import ENV_BASE_URL, make_backend
from .controller import ControllerConfig, ExitPolicy, RunFailed, RunRecord, run
from .harness.bench import BenchConfig, BenchError, Sweep, run_bench, sweep
from .harness.dataset import load_dataset
from .harness.grading import TASK_KINDS
from .harness.report import FORMATS, render_report, sweep_csv


class CliError(Exception):
    pass


def _controller_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("controller")
    g.add_argument("--tau", type=float, help="sufficiency threshold, 0-100 (default 100)")
    g.add_argument("--k", type=int, help="minimum tokens between checks (default 64)")
    g.add_argument("--max-len", type=int, help="total token budget (default 16384)")
    g.add_argument("--conclusion-reserve", type=int, help="tokens kept for the conclusion (default 512)")
    g.add_argument("--temperature", type=float, help="main-stream temperature (default 0.6)")
    g.add_argument("--top-p", type=float, help="main-stream top-p (default 0.95)")
    g.add_argument("--task-kind", choices=TASK_KINDS, help="answer extraction rule")


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default=os.environ.get(ENV_BASE_URL),
                   help="mock:<script.json> or server URL (default $%s)" % ENV_BASE_URL)
    p.add_argument("--check-backend", help="separate backend for checks (default: --backend)")


def _controller(args: argparse.Namespace) -> ControllerConfig:
    changes = {
        key: getattr(args, key)
        for key in ("tau", "k", "max_len", "conclusion_reserve", "temperature", "top_p", "task_kind")
        if getattr(args, key, None) is not None
    }
    try:
        return ControllerConfig(**changes)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _backends(args: argparse.Namespace):
    if not args.backend:
        raise CliError(f"no backend: pass --backend or set ${ENV_BASE_URL}")
    try:
        backend = make_backend(args.backend)
        check = make_backend(args.check_backend) if args.check_backend else None
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    return backend, check


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    backend, check = _backends(args)
    try:
        rec = run(args.question, ExitPolicy.parse(args.policy), _controller(args), backend, check,
                  question_id=args.question_id, seed=args.seed)
    except RunFailed as exc:
        sys.stderr.write(f"run failed: {exc}\n")
        _write(json.dumps(exc.record.to_dict(), indent=2, ensure_ascii=False) + "\n", args.out)
        return 1
    _write(json.dumps(rec.to_dict(), indent=2, ensure_ascii=False) + "\n", args.out)
    return 0


def _bench_config(args: argparse.Namespace, axis: Sweep | None = None) -> BenchConfig:
    return BenchConfig(
        dataset_path=args.dataset,
        policies=[ExitPolicy.parse(p) for p in args.policies.split(";" if ";" in args.policies else ",")],
        controller=_controller(args),
        seeds=args.seeds,
        parallelism=args.parallelism,
        sweep=axis,
        records_dir=args.records_dir,
    )


def cmd_bench(args: argparse.Namespace) -> int:
    backend, check = _backends(args)
    report = run_bench(_bench_config(args), backend, check)
    _write(render_report(report, args.format), args.out)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    backend, check = _backends(args)
    try:
        values = tuple(float(v) for v in args.values.split(","))
    except ValueError as exc:
        raise CliError(f"--values must be comma-separated numbers: {exc}") from exc
    reports = sweep(_bench_config(args, Sweep(args.axis, values)), backend, check)
    _write(sweep_csv(reports), args.out)
    return 0


def _load_run_records(path: str) -> list[RunRecord]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise CliError(f"{path}:{n}: not a run record ({exc})") from exc
    return records


def cmd_oracle(args: argparse.Namespace) -> int:
    from .oracle import gap_csv, gap_report, oracle_for_record, write_oracle_results

    backend, _ = _backends(args)
    samples = {s.id: s for s in load_dataset(args.dataset)}
    records = _load_run_records(args.records)
    reference = [r for r in records if r.policy == args.reference_policy and not r.error]
    results = {}
    for rec in reference:
        if rec.question_id in results or rec.question_id not in samples or not rec.trace:
            continue
        results[rec.question_id] = oracle_for_record(samples[rec.question_id], rec, backend, _controller(args))
    if args.out:
        write_oracle_results(results, args.out)
    _write(gap_csv(gap_report(records, results)), args.gap_csv)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    expected = json.loads(Path(args.record).read_text(encoding="utf-8"))
    stored = RunRecord.from_dict(expected)
    backend = make_backend("mock:" + args.script)
    policy = args.policy or stored.policy
    try:
        rec = run(stored.question, ExitPolicy.parse(policy), _controller(args), backend,
                  question_id=stored.question_id, seed=stored.seed)
    except RunFailed as exc:
        rec = exc.record
    want = json.dumps(stored.to_dict(), indent=2, sort_keys=True, ensure_ascii=False).splitlines()
    got = json.dumps(rec.to_dict(), indent=2, sort_keys=True, ensure_ascii=False).splitlines()
    if want == got:
        print("replay matches")
        return 0
    sys.stdout.writelines(
        line + "\n" for line in difflib.unified_diff(want, got, "stored", "replayed", lineterm="")
    )
    return 1


def cmd_serve(args: argparse.Namespace) -> int:
    from .gateway.app import serve
    from .gateway.config import load_gateway_config

    flags = {
        "listen": args.listen,
        "backend": args.backend,
        "check_backend": args.check_backend,
        "policy": args.policy,
        "allow_overrides": True if args.allow_overrides else None,
        "log_level": args.log_level,
        "metrics_enabled": False if args.no_metrics else None,
    }
    controller = {
        key: getattr(args, key)
        for key in ("tau", "k", "max_len", "conclusion_reserve", "temperature", "top_p", "task_kind")
        if getattr(args, key, None) is not None
    }
    if controller:
        flags["controller"] = controller
    serve(load_gateway_config(args.config, flags=flags))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyexit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("run", help="run one question and print its RunRecord as JSON")
    p.add_argument("--question", required=True)
    p.add_argument("--policy", default="dtsr", help="exit policy, e.g. dtsr, vanilla, deer1")
    p.add_argument("--question-id", default="q")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the record here instead of stdout")
    _backend_flags(p)
    _controller_flags(p)
    p.set_defaults(func=cmd_run)

    def bench_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--dataset", required=True, help="JSONL with id/question/answer/kind")
        p.add_argument("--policies", default="vanilla,dtsr",
                       help="comma-separated policies (use ';' when options contain commas)")
        p.add_argument("--seeds", type=int, default=3)
        p.add_argument("--parallelism", type=int, default=4)
        p.add_argument("--records-dir", help="persist raw run records here")
        p.add_argument("--out", help="output file (default stdout)")
        _backend_flags(p)
        _controller_flags(p)

    p = sub.add_parser("bench", help="benchmark policies over a dataset")
    bench_args(p)
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="sweep budget, k or tau; prints a tidy CSV")
    bench_args(p)
    p.add_argument("--axis", required=True, choices=("budget", "k", "tau"))
    p.add_argument("--values", required=True, help="comma-separated, strictly increasing")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="optimal exit points for recorded traces")
    p.add_argument("--records", required=True, help="run records JSONL")
    p.add_argument("--dataset", required=True)
    p.add_argument("--reference-policy", default="vanilla",
                   help="policy whose traces are replayed (default vanilla)")
    p.add_argument("--out", help="oracle results JSONL")
    p.add_argument("--gap-csv", help="gap summary CSV (default stdout)")
    _backend_flags(p)
    _controller_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("replay", help="re-run a scripted case and diff against a stored record")
    p.add_argument("--script", required=True, help="mock script JSON")
    p.add_argument("--record", required=True, help="stored RunRecord JSON")
    p.add_argument("--policy", help="default: the stored record's policy")
    _controller_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="start the chat-completions gateway")
    p.add_argument("--config", help="gateway JSON config (or $EARLYEXIT_GATEWAY_CONFIG)")
    p.add_argument("--listen", help="host:port")
    p.add_argument("--backend", help="mock:<script.json> or server URL")
    p.add_argument("--check-backend")
    p.add_argument("--policy")
    p.add_argument("--allow-overrides", action="store_true", help="accept per-request dtsr overrides")
    p.add_argument("--log-level")
    p.add_argument("--no-metrics", action="store_true")
    _controller_flags(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (CliError, BenchError, ValueError, OSError) as exc:
        sys.stderr.write(f"earlyexit {args.command}: {exc}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
