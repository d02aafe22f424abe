"""``behavtensor`` command line: tensorize, synth, fit, rank-scan, report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import analysis, cp, diagnostics, featurize
from .tensor import Tensor3, read_tensor, relative_error

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


@contextlib.contextmanager
def atomic_output(path):
    """Yield a temporary sibling path that replaces ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


@contextlib.contextmanager
def atomic_dir(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        yield tmp
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(target: Path, command: str, args: dict, inputs=(), outputs=()):
    manifest = {
        "command": command,
        "args": args,
        "inputs": {str(p): _sha(p) for p in inputs},
        "outputs": {str(p): _sha(p) for p in outputs},
    }
    with atomic_output(target) as tmp:
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "cfg")}


def _parse_ranks(text: str) -> list:
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split(".."))
            ranks = list(range(lo, hi + 1))
        else:
            ranks = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank range {text!r}; use A..B or a,b,c") from None
    if not ranks or ranks[0] < 1 or any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise argparse.ArgumentTypeError(f"rank range {text!r} must be ascending positive integers")
    return ranks


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use I,J,K") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims {text!r} must be three positive integers")
    return dims


def _threads(args) -> int:
    return args.threads or os.cpu_count() or 1


def _load_tensor(path):
    x = read_tensor(path)
    labels_file = featurize.labels_path_for(path)
    labels = featurize.read_labels(labels_file) if labels_file.exists() else None
    return x, labels


def _impute_if_needed(x: Tensor3, labels):
    if x.fully_observed:
        return x
    variables = labels[1] if labels else list(range(x.dims[1]))
    individuals = labels[0] if labels else list(range(x.dims[0]))
    ds = featurize.TensorDataset(x, individuals, variables, list(range(x.dims[2])))
    print(f"imputing {x.n_missing} unobserved cells with variable means")
    return featurize.impute_mean(ds).tensor


# --- subcommands -------------------------------------------------------------


def cmd_tensorize(args) -> int:
    schema = featurize.read_schema(args.schema)
    records = featurize.read_events(args.events)
    final, raw = featurize.tensorize(records, schema)
    out = Path(args.out)
    labels_out = featurize.labels_path_for(out)
    with atomic_output(out) as t_tmp, atomic_output(labels_out) as l_tmp:
        featurize.write_dataset(final, t_tmp, l_tmp)
    I, J, K = final.tensor.dims
    print(f"dims {I} {J} {K}")
    print(f"missing {100 * raw.missing_fraction:.2f}% of cells (imputed with variable means)")
    if raw.dropped_records:
        print(f"dropped {raw.dropped_records} records outside the study window")
    _write_manifest(_manifest_path(out), "tensorize", _echo(args),
                    [args.events, args.schema], [out, labels_out])
    return 0


def cmd_synth(args) -> int:
    spec = diagnostics.SynthSpec(args.dims, args.rank, args.snr_db, args.missing_frac,
                                 args.seed, args.sparsity)
    ds, truth = diagnostics.gen_synthetic(spec)
    out = Path(args.out)
    truth_out = Path(args.truth) if args.truth else out.with_name(out.name + ".truth.model")
    labels_out = featurize.labels_path_for(out)
    with atomic_output(out) as t_tmp, atomic_output(labels_out) as l_tmp, \
            atomic_output(truth_out) as m_tmp:
        featurize.write_dataset(ds, t_tmp, l_tmp)
        cp.write_model(truth, m_tmp, labels=(ds.individuals, ds.variables, ds.days))
    print(f"seed {args.seed}")
    print(f"dims {' '.join(map(str, spec.dims))}, rank {spec.rank}, "
          f"missing cells {ds.tensor.n_missing}")
    _write_manifest(_manifest_path(out), "synth", _echo(args), [], [out, labels_out, truth_out])
    return 0


def cmd_fit(args) -> int:
    cfg = args.cfg
    x, labels = _load_tensor(args.tensor)
    x = _impute_if_needed(x, labels)
    model, restarts = cp.fit_restarts(x, cfg, n_jobs=_threads(args))
    best = model.meta
    print(f"seed {cfg.seed}")
    for res in restarts:
        print(f"restart seed={res.seed} core_consistency={res.core_consistency:.4f} "
              f"relative_error={res.relative_error:.6g} sweeps={res.sweeps_run}")
    print(f"selected seed {best['seed']}: core_consistency={best['core_consistency']:.4f} "
          f"relative_error={relative_error(x, model):.6g}")
    meta = {"n_restarts": cfg.n_restarts, "tol": cfg.tol, "max_sweeps": cfg.max_sweeps}
    if args.truth:
        truth, _ = cp.read_model(args.truth)
        fms = diagnostics.factor_match_score(model, truth)
        print(f"factor match score vs truth {fms:.6f}")
        meta["factor_match_score"] = fms
    out = Path(args.out)
    with atomic_output(out) as tmp:
        cp.write_model(model, tmp, labels=labels, meta=meta)
    inputs = [args.tensor] + ([args.truth] if args.truth else [])
    _write_manifest(_manifest_path(out), "fit", _echo(args), inputs, [out])
    return 0


def cmd_rank_scan(args) -> int:
    x, labels = _load_tensor(args.tensor)
    x = _impute_if_needed(x, labels)
    scan = diagnostics.rank_scan(x, args.ranks, args.inits, args.seed, n_jobs=_threads(args),
                                 tol=args.tol, max_sweeps=args.max_sweeps)
    out = Path(args.out)
    with atomic_output(out) as tmp:
        diagnostics.write_rank_scan(scan, tmp)
    print(f"seed {args.seed}")
    for r, m, s, n in scan.rows():
        print(f"rank {r}: mean_cc={m:.4f} std_cc={'' if s is None else f'{s:.4f}'} n={n}")
    if len(scan.ranks) >= 3:
        print(f"selected rank {diagnostics.select_rank(scan)}")
    else:
        print("selected rank: n/a (fewer than 3 ranks scanned)")
    _write_manifest(_manifest_path(out), "rank-scan", _echo(args), [args.tensor], [out])
    return 0


def cmd_report(args) -> int:
    model, labels = cp.read_model(args.model)
    metadata = analysis.read_metadata(args.metadata) if args.metadata else None
    metrics = args.metrics.split(",") if args.metrics else []
    if metrics and metadata is None:
        raise UsageError("--metrics needs --metadata")
    metrics = metrics or []
    with atomic_dir(args.out_dir) as tmp:
        analysis.write_report(tmp, model, labels=labels, metadata=metadata, metrics=metrics,
                              test_name=args.test, fraction=args.fraction, k=args.k,
                              model_path=args.model, config=_echo(args))
    print(f"seed {model.meta.get('seed', 'n/a')}")
    print(f"report written to {args.out_dir}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="behavtensor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tensorize", help="event CSV + schema -> normalized, imputed tensor")
    p.add_argument("--events", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tensorize)

    p = sub.add_parser("synth", help="planted low-rank non-negative tensor")
    p.add_argument("--dims", type=_parse_dims, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--missing-frac", type=float, default=0.0)
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth model path (default: OUT.truth.model)")
    p.set_defaults(func=cmd_synth)

    def fit_options(p):
        p.add_argument("--tensor", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-sweeps", type=int, default=500)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="non-negative CP fit with restarts")
    fit_options(p)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--truth", help="ground-truth model to score against")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rank-scan", help="core consistency over a rank range")
    fit_options(p)
    p.add_argument("--ranks", type=_parse_ranks, default=_parse_ranks("1..9"))
    p.add_argument("--inits", type=int, default=10)
    p.set_defaults(func=cmd_rank_scan)

    p = sub.add_parser("report", help="component tables and metadata comparisons")
    p.add_argument("--model", required=True)
    p.add_argument("--metadata")
    p.add_argument("--metrics", help="comma-separated metric names")
    p.add_argument("--test", choices=sorted(analysis.TESTS), default="welch_t")
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _validate(parser, args):
    try:
        if args.command in ("fit", "rank-scan"):
            if args.threads is not None and args.threads < 1:
                raise ValueError("--threads must be >= 1")
        if args.command == "fit":
            args.cfg = cp.FitConfig(args.rank, args.max_sweeps, args.tol, args.seed,
                                    args.restarts)
        elif args.command == "rank-scan":
            cp.FitConfig(1, args.max_sweeps, args.tol, args.seed, 1)
            if args.inits < 1:
                raise ValueError("--inits must be >= 1")
        elif args.command == "synth":
            diagnostics.SynthSpec(args.dims, args.rank, args.snr_db, args.missing_frac,
                                  args.seed, args.sparsity)
        elif args.command == "report":
            if not 0 < args.fraction <= 1:
                raise ValueError("--fraction must lie in (0, 1]")
            if args.k < 1:
                raise ValueError("--k must be >= 1")
    except ValueError as exc:
        parser.error(str(exc))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"behavtensor {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"behavtensor {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"behavtensor {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
