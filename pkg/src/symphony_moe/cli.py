"""Command-line entry point: reproducible runs that write CSV (and .dat) under ``--out``.

Exit status: 0 on success, 1 on a validation error (one-line reason on
stderr), 2 on a runtime failure (diagnostics path on stderr).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import tempfile
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import fixture_path
from .errors import ArgumentError, DivergenceError, SymphonyError
from .graph import AdjacencyState, estimate_overhead, format_matrix_rows, load_adjacency, spectral_report
from .harness.bench import bench_overhead, overhead_trend
from .harness.io import BENCH_COLUMNS, THEOREM1_COLUMNS, write_csv
from .harness.manifest import RunManifest
from .harness.tasks import generate_task
from .harness.training import evaluate, train, write_metrics
from .layer import load_checkpoint
from .noise import NoiseKind
from .theory import RegionSpec, calibrate_L_tilde, check_prop1, check_theorem1

log = logging.getLogger("symphony_moe")

THREADS_ENV = "SYMPHONY_MOE_THREADS"
COMMANDS = ("train", "eval", "attack-eval", "verify-theorem1", "verify-prop1", "bench", "dump-adjacency",
            "estimate-overhead")


class RunDir:
    """Output directory created atomically with its manifest copy; ``finish`` writes the completion marker."""

    def __init__(self, out, manifest_text: str, seed):
        self.path = Path(out)
        if self.path.exists() and any(self.path.iterdir()):
            raise ArgumentError(f"output directory {self.path} already exists and is not empty")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))
        (tmp / "manifest.yaml").write_text(manifest_text)
        if self.path.exists():
            self.path.rmdir()
        os.replace(tmp, self.path)
        self.seed = seed
        self.t0 = time.time()

    def finish(self):
        marker = {
            "completed_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_clock_s": round(time.time() - self.t0, 3),
            "seed": self.seed,
        }
        (self.path / "COMPLETED").write_text(yaml.safe_dump(marker, sort_keys=True))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="run manifest (YAML key/value file)")
    common.add_argument("--out", type=Path, help="output directory; created fresh")
    common.add_argument("--seed", type=int, help="override every seed in the manifest")
    common.add_argument("--threads", type=int, help="cap on BLAS threads")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="symphony-moe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sub.add_parser("train", parents=[common], help="train a layer from a manifest")
    for name in ("eval", "attack-eval"):
        sp = sub.add_parser(name, parents=[common], help=f"{'contaminated' if name == 'attack-eval' else 'clean'} evaluation")
        sp.add_argument("--model", type=Path, help="checkpoint directory; trains from the manifest when omitted")
        sp.add_argument("--noise-kind", choices=[k.value for k in NoiseKind])

    sp = sub.add_parser("verify-theorem1", parents=[common], help="concentration bound vs. geometric oracle")
    sp.add_argument("--region", type=Path, help="region spec file (default: two unit circles at distance 1)")
    sp.add_argument("--pair", type=int, nargs=2, default=(0, 1))
    sp.add_argument("--N", type=int, default=2000)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--trials", type=int, default=500)
    sp.add_argument("--epsilon", type=float, nargs="+", default=[0.0])
    sp.add_argument("--noise-kind", default=NoiseKind.UNIFORM_BALL.value, choices=[k.value for k in NoiseKind])
    sp.add_argument("--L-tilde", dest="L_tilde", type=float, help="skip calibration and use this constant")
    sp.add_argument("--eps-ref", type=float, default=0.005)

    sp = sub.add_parser("verify-prop1", parents=[common], help="contraction / TopK stability checks on an adjacency")
    sp.add_argument("--adjacency", type=Path, help="adjacency snapshot (default: bundled 2x2 fixture)")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--k", type=int, default=1)

    sp = sub.add_parser("bench", parents=[common], help="routing-only overhead benchmark")
    sp.add_argument("--M", type=int, nargs="+", default=[16])
    sp.add_argument("--N", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096])
    sp.add_argument("--K", type=int, default=2)
    sp.add_argument("--dim", type=int, default=512)
    sp.add_argument("--repetitions", type=int, default=61)

    sp = sub.add_parser("dump-adjacency", parents=[common], help="export an adjacency and its spectrum")
    sp.add_argument("--model", type=Path, help="checkpoint directory")
    sp.add_argument("--adjacency", type=Path, help="adjacency snapshot")

    sp = sub.add_parser("estimate-overhead", parents=[common], help="analytic memory / FLOP overhead")
    sp.add_argument("--L", type=int, default=1)
    sp.add_argument("--M", type=int, required=True)
    sp.add_argument("--K", type=int, required=True)
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--bytes", type=int, default=4)
    return p


@contextlib.contextmanager
def _thread_cap(threads):
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    if not threads:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _load_manifest(args) -> RunManifest:
    if args.manifest is None:
        raise ArgumentError("--manifest is required for this command")
    m = RunManifest.load(args.manifest)
    if args.seed is not None:
        m = m.with_overrides(seed=args.seed, task_seed=args.seed)
    return m.validate()


def _require_out(args) -> Path:
    if args.out is None:
        raise ArgumentError(f"--out is required for {args.command}")
    return args.out


def cmd_train(args):
    m = _load_manifest(args)
    run = RunDir(_require_out(args), m.dumps(), m.seed)
    result = train(m, out_dir=run.path)
    rows = evaluate(result.layer, result.task, [0.0], [0], m.noise_kind, split="test", run_hash=m.digest())
    write_metrics(run.path / "metrics.csv", rows)
    log.info("final train loss %.6g (initial %.6g)", result.final_train_loss, result.initial_train_loss)
    run.finish()


def _eval_common(args, grid):
    m = _load_manifest(args)
    run = RunDir(_require_out(args), m.dumps(), m.seed)
    task = generate_task(m.task, m.task_seed)
    if args.model is not None:
        layer, _ = load_checkpoint(args.model, frozen=True)
    else:
        layer = train(m, out_dir=run.path / "train", task=task).layer
    noise = args.noise_kind or m.noise_kind
    rows = evaluate(layer, task, grid, m.eval_seeds, noise, split="test", run_hash=m.digest())
    write_metrics(run.path / "metrics.csv", rows)
    for frac in grid:
        losses = [r["loss"] for r in rows if r["epsilon_frac"] == frac]
        log.info("epsilon %.3g x diameter: mean loss %.6g over %d seeds", frac, np.mean(losses), len(losses))
    run.finish()


def cmd_eval(args):
    _eval_common(args, [0.0])


def cmd_attack_eval(args):
    m = _load_manifest(args)
    _eval_common(args, m.epsilon_grid)


def cmd_verify_theorem1(args):
    region = RegionSpec.load(args.region or fixture_path("two_circles.txt"))
    seed = 0 if args.seed is None else args.seed
    pair = tuple(args.pair)
    params = dict(command="verify-theorem1", pair=list(pair), N=args.N, alpha=args.alpha, trials=args.trials,
                  epsilon=args.epsilon, noise_kind=args.noise_kind, L_tilde=args.L_tilde, eps_ref=args.eps_ref,
                  seed=seed, region=str(args.region or "two_circles"))
    run = RunDir(_require_out(args), yaml.safe_dump(params, sort_keys=True), seed)
    L = args.L_tilde
    if L is None and any(e > 0 for e in args.epsilon):
        L = calibrate_L_tilde(region, [pair], args.eps_ref, seed=seed)
        log.info("calibrated L_tilde = %.6g at eps_ref = %g", L, args.eps_ref)
    rows, summary = [], []
    ok = True
    for eps in args.epsilon:
        res = check_theorem1(region, [pair], args.N, eps, args.alpha, args.trials, L or 0.0, args.noise_kind, seed)
        ok &= res.passed
        summary.append(dict(epsilon=eps, violation_rate=res.violation_rate, allowed_rate=res.allowed_rate,
                            gamma=res.results[0].gamma, mu=res.results[0].mu_oracle, L_tilde=L or 0.0,
                            passed=res.passed))
        for r in res.results:
            rows.append(dict(pair=f"{r.pair[0]}-{r.pair[1]}", N=r.N, epsilon=r.epsilon, alpha=r.alpha,
                             a_jk=r.a_jk_empirical, mu=r.mu_oracle, gamma=r.gamma, violated=r.violated))
        log.info("epsilon %g: violation rate %.4f (allowed %.4f) %s", eps, res.violation_rate, res.allowed_rate,
                 "PASS" if res.passed else "FAIL")
    write_csv(run.path / "theorem1.csv", THEOREM1_COLUMNS, rows)
    write_csv(run.path / "theorem1_summary.csv", list(summary[0]), summary)
    run.finish()
    return 0 if ok else 2


def cmd_verify_prop1(args):
    path = args.adjacency or fixture_path("prop1_2x2.txt")
    A, mode, beta, updates = load_adjacency(path)
    seed = 0 if args.seed is None else args.seed
    report = check_prop1(A, trials=args.trials, k=args.k, seed=seed)
    for line in report.lines():
        print(line)
    if args.out is not None:
        params = dict(command="verify-prop1", adjacency=str(path), trials=args.trials, k=args.k, seed=seed)
        run = RunDir(args.out, yaml.safe_dump(params, sort_keys=True), seed)
        rows = [dict(check=name, passed=c.passed, worst_slack=c.worst_slack, trials=c.trials)
                for name, c in report.checks.items()]
        write_csv(run.path / "prop1.csv", ("check", "passed", "worst_slack", "trials"), rows)
        (run.path / "prop1.txt").write_text("\n".join(report.lines()) + "\n")
        run.finish()
    if report.applicable and not report.passed:
        return 2
    return 0


def cmd_bench(args):
    seed = 0 if args.seed is None else args.seed
    params = dict(command="bench", M=args.M, N=args.N, K=args.K, dim=args.dim, repetitions=args.repetitions,
                  seed=seed)
    run = RunDir(_require_out(args), yaml.safe_dump(params, sort_keys=True), seed)
    rows = bench_overhead(args.M, args.N, args.K, args.repetitions, args.dim, seed)
    write_csv(run.path / "bench.csv", BENCH_COLUMNS, rows)
    for M in args.M:
        log.info("M=%d: delta%% by N %s, trend %.3f per doubling", M,
                 [round(r["delta_pct"], 2) for r in rows if r["M"] == M],
                 overhead_trend(rows, M) if len(args.N) > 1 else float("nan"))
    run.finish()


def cmd_dump_adjacency(args):
    if args.model is not None:
        src = Path(args.model) / "adjacency.txt"
        if not src.is_file():
            raise ArgumentError(f"{args.model} has no adjacency (baseline checkpoint?)")
    elif args.adjacency is not None:
        src = args.adjacency
    else:
        raise ArgumentError("dump-adjacency needs --model or --adjacency")
    A, mode, beta, updates = load_adjacency(src)
    params = dict(command="dump-adjacency", source=str(src))
    run = RunDir(_require_out(args), yaml.safe_dump(params, sort_keys=True), args.seed)
    AdjacencyState.from_matrix(A, mode, beta, updates).save(run.path / "adjacency.txt")
    (run.path / "adjacency.dat").write_text("\n".join(format_matrix_rows(A)) + "\n")
    rep = spectral_report(A, mode)
    rows = [dict(index=i, eigenvalue=float(v)) for i, v in enumerate(rep.eigenvalues)]
    write_csv(run.path / "spectrum.csv", ("index", "eigenvalue"), rows)
    log.info("rho = %.6g, connected = %s", rep.rho, rep.connected)
    run.finish()


def cmd_estimate_overhead(args):
    est = estimate_overhead(args.M, args.K, args.N, args.L, args.bytes)
    mib, gi = 2.0**20, 2.0**30
    print(f"train {est.train_bytes / mib:.6g} MB / infer {est.infer_bytes / mib:.6g} MB")
    print(f"train {est.train_flops / gi:.4g}G / infer {est.infer_flops / gi:.4g}G FLOPs")
    if args.out is not None:
        params = dict(command="estimate-overhead", L=args.L, M=args.M, K=args.K, N=args.N, bytes=args.bytes)
        run = RunDir(args.out, yaml.safe_dump(params, sort_keys=True), args.seed)
        cols = ("L", "M", "K", "N", "train_bytes", "infer_bytes", "train_flops", "infer_flops")
        write_csv(run.path / "overhead.csv", cols, [dict(L=args.L, M=args.M, K=args.K, N=args.N,
                                                        **est.__dict__)])
        run.finish()


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "verify-theorem1": cmd_verify_theorem1,
    "verify-prop1": cmd_verify_prop1,
    "bench": cmd_bench,
    "dump-adjacency": cmd_dump_adjacency,
    "estimate-overhead": cmd_estimate_overhead,
}


def _diagnostics_dir(args) -> Path:
    base = args.out if getattr(args, "out", None) is not None and Path(args.out).is_dir() else None
    d = (base or Path(tempfile.mkdtemp(prefix="symphony-moe-"))) / "diagnostics"
    d.mkdir(parents=True, exist_ok=True)
    return d


def dispatch(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        threads = args.threads
        if threads is None and args.command == "bench" and not os.environ.get(THREADS_ENV):
            threads = 1  # timing is more stable on one thread
        with _thread_cap(threads):
            status = HANDLERS[args.command](args)
        return int(status or 0)
    except DivergenceError as exc:
        where = exc.dump_path or _diagnostics_dir(args)
        print(f"error: {exc} (diagnostics: {where})", file=sys.stderr)
        return 2
    except (SymphonyError, ValueError) as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {reason}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with diagnostics
        d = _diagnostics_dir(args)
        (d / "error.txt").write_text(traceback.format_exc())
        print(f"error: {type(exc).__name__}: {exc} (diagnostics: {d})", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
