"""Command-line surface.

Subcommands: ``merge`` (all five methods), ``analyze`` (conflict-curve,
interference, trim-emit, synth), ``diff`` (write a task-vector sidecar) and
``apply`` (apply one back onto a base).

Exit codes: 0 success; 2 for anything detected before tensor math begins
(bad flags, missing files, malformed archives, schema mismatches); 1 for
failures after that point. Flags beat values from ``--config`` (a flat JSON
key/value file). ``TENSOR_TIES_THREADS`` is the fallback for ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .archive import (
    DTYPE_POLICIES,
    Checkpoint,
    apply_dtype_policy,
    read_checkpoint,
    validate_compatible,
    write_checkpoint,
)
from .baselines import (
    fisher_merge,
    load_fisher_sidecar,
    load_gram_sidecar,
    regmean_merge,
    simple_average,
)
from .errors import InvalidConfigError, TensorTiesError, ValidationError
from .report import GlobalStats, MergeReport, PerTensorStats, Provenance
from .task_vector import (
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    linear_combination,
    load_sign_vector,
    load_task_vector,
    save_task_vector,
)
from .ties import TiesConfig, ties_merge

log = logging.getLogger("tensor_ties")

METHODS = ("ties", "average", "task-arithmetic", "fisher", "regmean")

_CONFIG_KEYS = {
    "method", "base", "models", "k", "lambda", "granularity", "ablate",
    "sign_override", "fisher", "gram", "alpha", "ridge", "out", "report",
    "out_dtype", "threads", "seed",
}


def _flatten(nested: list[list[str]] | None) -> list[str]:
    if not nested:
        return []
    return [item for group in nested for item in group]


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InvalidConfigError(f"--config file not found: {path}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"--config {path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"--config {path}: expected a flat JSON object")
    out = {}
    for key, value in raw.items():
        norm = key.replace("-", "_")
        if norm not in _CONFIG_KEYS:
            raise InvalidConfigError(f"--config {path}: unknown key {key!r}")
        out[norm] = value
    return out


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidConfigError(f"{flag}: file not found: {path}")
    return p


def _pick(args_value, config: dict, key: str, default=None):
    if args_value is not None:
        return args_value
    if key in config:
        return config[key]
    return default


def _zero_report(
    method: str,
    config_echo: dict,
    merged: Checkpoint,
    mergeable: list[str],
    details: dict | None = None,
) -> MergeReport:
    """Report for methods without a task-vector stage: every parameter
    counts as kept; conflict/election statistics are zero."""
    per_tensor = [
        PerTensorStats(
            name=name,
            l2_norm_of_delta=0.0,
            kept_count=int(merged[name].size),
            conflict_fraction=0.0,
        )
        for name in mergeable
    ]
    total = sum(t.kept_count for t in per_tensor)
    return MergeReport(
        method=method,
        config=config_echo,
        per_tensor=per_tensor,
        global_stats=GlobalStats(
            total_params=total,
            kept_params=total,
            sign_conflict_fraction_after_trim=0.0,
            elected_positive_fraction=0.0,
            empty_A_fraction=0.0,
        ),
        details=details or {},
    )


def _task_vector_report(
    method: str, config_echo: dict, taus: list[TaskVector], tau_m: TaskVector
) -> MergeReport:
    """Report for linear task-vector methods (no trimming): kept counts are
    union-of-support, conflicts measured on the raw task vectors."""
    per_tensor = []
    conflict_total = 0
    total = tau_m.total_params
    for name, merged_vals in tau_m.deltas.items():
        has_pos = np.zeros(merged_vals.shape, dtype=bool)
        has_neg = np.zeros(merged_vals.shape, dtype=bool)
        for t in taus:
            has_pos |= t.deltas[name] > 0
            has_neg |= t.deltas[name] < 0
        conflicts = int(np.count_nonzero(has_pos & has_neg))
        conflict_total += conflicts
        size = merged_vals.size
        per_tensor.append(
            PerTensorStats(
                name=name,
                l2_norm_of_delta=float(np.sqrt(np.sum(merged_vals * merged_vals))),
                kept_count=int(np.count_nonzero(has_pos | has_neg)),
                conflict_fraction=conflicts / size if size else 0.0,
            )
        )
    return MergeReport(
        method=method,
        config=config_echo,
        per_tensor=per_tensor,
        global_stats=GlobalStats(
            total_params=total,
            kept_params=sum(t.kept_count for t in per_tensor),
            sign_conflict_fraction_after_trim=conflict_total / total if total else 0.0,
            elected_positive_fraction=0.0,
            empty_A_fraction=0.0,
        ),
    )


def cmd_merge(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config) if args.config else {}
    method = _pick(args.method, config, "method", "ties")
    if method not in METHODS:
        raise InvalidConfigError(f"--method must be one of {METHODS}, got {method!r}")
    model_paths = _flatten(args.models) or list(config.get("models", []))
    if not model_paths:
        raise InvalidConfigError("--models: at least one model checkpoint is required")
    base_path = _pick(args.base, config, "base")
    k = float(_pick(args.k, config, "k", 20.0))
    lam_default = 0.4 if method == "task-arithmetic" else 1.0
    lam = float(_pick(args.lam, config, "lambda", lam_default))
    granularity = _pick(args.granularity, config, "granularity", "global")
    ablate = [a.replace("-", "_") for a in (_flatten(args.ablate) or config.get("ablate", []))]
    out_path = _pick(args.out, config, "out")
    if not out_path:
        raise InvalidConfigError("--out is required")
    report_path = _pick(args.report, config, "report", str(out_path) + ".report.json")
    out_dtype = _pick(args.out_dtype, config, "out_dtype", "preserve")
    if out_dtype not in DTYPE_POLICIES:
        raise InvalidConfigError(f"--out-dtype must be one of {DTYPE_POLICIES}")
    threads = _pick(args.threads, config, "threads")
    threads = int(threads) if threads is not None else None
    seed = int(_pick(args.seed, config, "seed", 0))
    alpha = float(_pick(args.alpha, config, "alpha", 0.1))
    ridge = _pick(args.ridge, config, "ridge")
    ridge = float(ridge) if ridge is not None else None
    sign_override_path = _pick(args.sign_override, config, "sign_override")
    fisher_paths = _flatten(args.fisher) or list(config.get("fisher", []))
    gram_paths = _flatten(args.gram) or list(config.get("gram", []))

    needs_base = method in ("ties", "task-arithmetic")
    if needs_base and not base_path:
        raise InvalidConfigError(f"--base is required for method {method}")

    # range checks run before any checkpoint bytes are read
    if method == "ties":
        TiesConfig(
            k_percent=k, lam=lam, granularity=granularity, ablation=frozenset(ablate)
        ).validate()
    elif not (lam > 0):
        raise InvalidConfigError(f"--lambda must be > 0, got {lam}")
    if method == "regmean" and not (0.0 <= alpha <= 1.0):
        raise InvalidConfigError(f"--alpha must be in [0, 1], got {alpha}")

    for p in model_paths:
        _require_file(p, "--models")
    if base_path:
        _require_file(base_path, "--base")

    models = [read_checkpoint(p) for p in model_paths]
    base = read_checkpoint(base_path) if base_path else None

    start = time.monotonic()
    config_echo: dict = {
        "method": method,
        "k": k,
        "lambda": lam,
        "granularity": granularity,
        "ablate": sorted(ablate),
        "out_dtype": out_dtype,
        "threads": threads,
        "seed": seed,
    }
    details: dict = {}

    if method == "ties":
        sign_override = None
        if sign_override_path:
            _require_file(sign_override_path, "--sign-override")
            sign_override = load_sign_vector(sign_override_path)
            config_echo["sign_override"] = str(sign_override_path)
        cfg = TiesConfig(
            k_percent=k,
            lam=lam,
            granularity=granularity,
            ablation=frozenset(ablate),
            sign_override=sign_override,
        )
        cfg.validate()
        config_echo["lambda"] = cfg.effective_lambda
        merged, report = ties_merge(base, models, cfg, threads=threads)
        report.config = config_echo
    elif method == "task-arithmetic":
        taus = [compute_task_vector(m, base, threads=threads) for m in models]
        tau_sum = linear_combination(taus, [1.0] * len(taus))
        merged = apply_task_vector(base, tau_sum, lam, threads=threads)
        report = _task_vector_report(method, config_echo, taus, tau_sum)
    elif method == "average":
        merged = simple_average(models, threads=threads)
        report = _zero_report(method, config_echo, merged, _float_names(models))
    elif method == "fisher":
        if len(fisher_paths) != len(model_paths):
            raise InvalidConfigError(
                f"--fisher: expected {len(model_paths)} sidecars aligned with --models, "
                f"got {len(fisher_paths)}"
            )
        sidecars = [
            load_fisher_sidecar(_require_file(p, "--fisher"), models[0])
            for p in fisher_paths
        ]
        config_echo["fisher"] = [str(p) for p in fisher_paths]
        merged = fisher_merge(models, sidecars, threads=threads)
        report = _zero_report(method, config_echo, merged, _float_names(models))
    else:  # regmean
        if len(gram_paths) != len(model_paths):
            raise InvalidConfigError(
                f"--gram: expected {len(model_paths)} sidecars aligned with --models, "
                f"got {len(gram_paths)}"
            )
        sidecars = [load_gram_sidecar(_require_file(p, "--gram")) for p in gram_paths]
        config_echo["gram"] = [str(p) for p in gram_paths]
        config_echo["alpha"] = alpha
        config_echo["ridge"] = ridge
        result = regmean_merge(models, sidecars, alpha=alpha, ridge=ridge, threads=threads)
        merged = result.checkpoint
        details = {"regmean_layer_paths": result.layer_paths}
        report = _zero_report(method, config_echo, merged, _float_names(models), details)

    like = base if base is not None else models[0]
    merged = apply_dtype_policy(merged, out_dtype, like=like)
    write_checkpoint(merged, out_path)

    report.provenance = Provenance(
        base_path=str(base_path) if base_path else None,
        model_paths=[str(p) for p in model_paths],
        tool_version=__version__,
        wall_time_ms=(time.monotonic() - start) * 1000.0,
    )
    report.validate()
    report.write(report_path)
    log.info("wrote %s and %s", out_path, report_path)
    return 0


def _float_names(models: list[Checkpoint]) -> list[str]:
    return validate_compatible(models).mergeable


def _load_taus(args: argparse.Namespace, minimum: int = 2) -> list[TaskVector]:
    delta_paths = _flatten(getattr(args, "deltas", None))
    model_paths = _flatten(getattr(args, "models", None))
    if delta_paths and model_paths:
        raise InvalidConfigError("pass either --deltas or --base/--models, not both")
    if delta_paths:
        taus = [load_task_vector(_require_file(p, "--deltas")) for p in delta_paths]
    elif model_paths:
        if not args.base:
            raise InvalidConfigError("--base is required alongside --models")
        base = read_checkpoint(_require_file(args.base, "--base"))
        taus = [
            compute_task_vector(read_checkpoint(_require_file(p, "--models")), base)
            for p in model_paths
        ]
    else:
        raise InvalidConfigError("task vectors required: pass --deltas or --base/--models")
    if len(taus) < minimum:
        raise InvalidConfigError(f"at least {minimum} task vectors are required")
    return taus


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_analyze_conflict_curve(args: argparse.Namespace) -> int:
    taus = _load_taus(args)
    k_grid = [float(x) for x in args.k_grid.split(",")] if args.k_grid else []
    curve = analysis.conflict_curve(taus, args.k, trials=args.trials, seed=args.seed)
    sweep = analysis.conflict_k_sweep(taus, k_grid) if k_grid else []
    payload = analysis.conflict_curve_to_dict(curve)
    if sweep:
        payload["k_sweep"] = [{"k_percent": k, "conflict_fraction": f} for k, f in sweep]
    _emit_json(payload, args.out)
    if args.csv:
        analysis.write_conflict_curve_csv(curve, args.csv, sweep)
        log.info("wrote %s", args.csv)
    return 0


def cmd_analyze_interference(args: argparse.Namespace) -> int:
    taus = _load_taus(args)
    stats = analysis.interference_stats(taus, args.k, args.method)
    _emit_json(analysis.interference_stats_to_dict(stats), args.out)
    if args.csv:
        analysis.write_interference_csv(stats, args.csv)
        log.info("wrote %s", args.csv)
    return 0


def cmd_analyze_trim_emit(args: argparse.Namespace) -> int:
    base = read_checkpoint(_require_file(args.base, "--base"))
    model = read_checkpoint(_require_file(args.model, "--model"))
    k_grid = [float(x) for x in args.k_grid.split(",")] if args.k_grid else []
    paths = analysis.emit_trimmed_checkpoints(base, model, k_grid, args.out_dir)
    for p in paths:
        print(p)
    return 0


def cmd_analyze_synth(args: argparse.Namespace) -> int:
    spec = analysis.SyntheticSpec(
        d=args.d,
        n=args.n,
        density=args.density,
        sign_agreement=args.agreement,
        magnitude_scale=args.scale,
        seed=args.seed,
    )
    spec.validate()
    taus = analysis.generate_synthetic(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, tau in enumerate(taus):
        path = out_dir / f"task_{i:02d}.tv.safetensors"
        save_task_vector(tau, path)
        vec = tau.deltas["params"]
        nonzero = int(np.count_nonzero(vec))
        rows.append(
            [
                i,
                nonzero,
                repr(float(np.sqrt(np.sum(vec * vec)))),
                repr(float(np.sum(np.abs(vec)) / nonzero) if nonzero else 0.0),
            ]
        )
    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["task", "nonzero_count", "l2_norm", "mean_abs_nonzero"])
        writer.writerows(rows)
    log.info("wrote %d sidecars and %s", len(taus), csv_path)
    return 0


def cmd_diff(args: argparse.Namespace) -> int:
    base = read_checkpoint(_require_file(args.base, "--base"))
    model = read_checkpoint(_require_file(args.model, "--model"))
    tau = compute_task_vector(model, base)
    save_task_vector(tau, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_apply(args: argparse.Namespace) -> int:
    base = read_checkpoint(_require_file(args.base, "--base"))
    tau = load_task_vector(_require_file(args.delta, "--delta"))
    merged = apply_task_vector(base, tau, args.lam)
    merged = apply_dtype_policy(merged, args.out_dtype, like=base)
    write_checkpoint(merged, args.out)
    log.info("wrote %s", args.out)
    return 0


def _add_tau_source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base", help="base checkpoint (with --models)")
    p.add_argument(
        "--models", action="append", nargs="+", metavar="PATH",
        help="fine-tuned checkpoints, ordered; repeatable",
    )
    p.add_argument(
        "--deltas", action="append", nargs="+", metavar="PATH",
        help="task-vector sidecars, ordered; repeatable (alternative to --base/--models)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensor-ties",
        description="Merge fine-tuned checkpoints and analyze parameter interference.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge checkpoints into one")
    m.add_argument("--method", choices=METHODS, default=None)
    m.add_argument("--base", default=None, help="base (pre-trained) checkpoint")
    m.add_argument("--models", action="append", nargs="+", metavar="PATH", default=None)
    m.add_argument("--k", type=float, default=None, help="top-k%% kept by trimming (default 20)")
    m.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="scale for the merged task vector (default 1; 0.4 for task-arithmetic)")
    m.add_argument("--granularity", choices=("global", "per-tensor"), default=None)
    m.add_argument("--ablate", action="append", nargs="+", default=None,
                   choices=("no-trim", "no-elect", "no-disjoint-mean", "no-scale"))
    m.add_argument("--sign-override", dest="sign_override", default=None,
                   help="sign-vector sidecar replacing the election step")
    m.add_argument("--fisher", action="append", nargs="+", metavar="PATH", default=None)
    m.add_argument("--gram", action="append", nargs="+", metavar="PATH", default=None)
    m.add_argument("--alpha", type=float, default=None, help="regmean diagonal shrinkage")
    m.add_argument("--ridge", type=float, default=None, help="regmean ridge term")
    m.add_argument("--out", default=None, required=False)
    m.add_argument("--report", default=None, help="merge report path (default OUT.report.json)")
    m.add_argument("--out-dtype", dest="out_dtype", choices=DTYPE_POLICIES, default=None)
    m.add_argument("--threads", type=int, default=None)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--config", default=None, help="flat JSON config file; flags win")
    m.set_defaults(handler=cmd_merge)

    a = sub.add_parser("analyze", help="interference diagnostics")
    asub = a.add_subparsers(dest="analyze_command", required=True)

    cc = asub.add_parser("conflict-curve", help="sign-conflict fraction vs model count")
    _add_tau_source_flags(cc)
    cc.add_argument("--k", type=float, default=20.0)
    cc.add_argument("--trials", type=int, default=analysis.MAX_SUBSETS_PER_SIZE)
    cc.add_argument("--seed", type=int, default=0)
    cc.add_argument("--k-grid", dest="k_grid", default=None,
                    help="comma-separated k values for the k sweep")
    cc.add_argument("--out", default=None, help="JSON output path (default stdout)")
    cc.add_argument("--csv", default=None)
    cc.set_defaults(handler=cmd_analyze_conflict_curve)

    inter = asub.add_parser("interference", help="merged-magnitude statistics by group")
    _add_tau_source_flags(inter)
    inter.add_argument("--method", choices=analysis.INTERFERENCE_METHODS, required=True)
    inter.add_argument("--k", type=float, default=20.0)
    inter.add_argument("--out", default=None)
    inter.add_argument("--csv", default=None)
    inter.set_defaults(handler=cmd_analyze_interference)

    te = asub.add_parser("trim-emit", help="write trimmed checkpoints across a k grid")
    te.add_argument("--base", required=True)
    te.add_argument("--model", required=True)
    te.add_argument("--k-grid", dest="k_grid", required=True,
                    help="comma-separated k values")
    te.add_argument("--out-dir", dest="out_dir", required=True)
    te.set_defaults(handler=cmd_analyze_trim_emit)

    sy = asub.add_parser("synth", help="generate synthetic task vectors")
    sy.add_argument("--d", type=int, required=True)
    sy.add_argument("--n", type=int, required=True)
    sy.add_argument("--density", type=float, required=True)
    sy.add_argument("--agreement", type=float, required=True)
    sy.add_argument("--scale", type=float, default=1.0)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out-dir", dest="out_dir", required=True)
    sy.set_defaults(handler=cmd_analyze_synth)

    d = sub.add_parser("diff", help="write model - base as a task-vector sidecar")
    d.add_argument("--base", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(handler=cmd_diff)

    ap = sub.add_parser("apply", help="apply a task-vector sidecar onto a base")
    ap.add_argument("--base", required=True)
    ap.add_argument("--delta", required=True)
    ap.add_argument("--lambda", dest="lam", type=float, default=1.0)
    ap.add_argument("--out", required=True)
    ap.add_argument("--out-dtype", dest="out_dtype", choices=DTYPE_POLICIES, default="preserve")
    ap.set_defaults(handler=cmd_apply)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as e:
        log.error("%s", e)
        return 2
    except (TensorTiesError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
