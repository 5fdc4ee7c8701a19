"""Command-line entry point: ``zimclust fit | simulate | evaluate``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Cluster labels in every file written here are 1-based.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .data import (
    CountMatrix,
    compute_size_factors,
    filter_genes_iqr,
    load_counts,
    load_covariates,
    load_size_factors,
    select_top_sd,
    write_dense_csv,
)
from .errors import (
    DegenerateCellError,
    DimensionError,
    DomainError,
    EmptyClusterError,
    EmptySelectionError,
    GeneratorError,
    NumericalError,
    ParseError,
    SelectionError,
    UsageError,
)
from .likelihood import MixtureData, RegParams, ZinbParams, ZipParams
from .selection import RestartPlan, run_selection, worker_count
from .simlab import (
    SimConfig,
    align_labels,
    co_clustering,
    confusion,
    list_presets,
    mad_rates,
    preset,
    rate_arrays,
    simulate,
    v_measure,
)

log = logging.getLogger("zimclust")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

MODELS = {
    # model flag -> (em variant, needs size factors, needs covariates)
    "zip": ("zip", False, False),
    "zip-sf": ("zip-reg", True, False),
    "zip-cov": ("zip-reg", False, True),
    "zinb": ("zinb", False, False),
    "zinb-sf": ("zinb-reg", True, False),
    "zinb-cov": ("zinb-reg", False, True),
}

REPORT_SCHEMA = "zimclust.fit-report/1"


# -- helpers -------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command, args, inputs, seeds, started):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "argv_")}
    digests = {}
    for p in inputs:
        if p and Path(p).is_file():
            digests[str(p)] = _sha256(p)
        elif p and Path(p).is_dir():
            for f in sorted(Path(p).iterdir()):
                if f.is_file():
                    digests[str(f)] = _sha256(f)
    return {
        "command": command,
        "argv": getattr(args, "argv_", sys.argv[1:]),
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "kernel_backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": digests,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
    }


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _side(out: Path, tag: str, ext="csv") -> Path:
    return out.with_name(f"{out.stem}.{tag}.{ext}")


def params_to_dict(params, gene_ids=None) -> dict:
    """JSON-friendly parameter dump; per-gene arrays are G x K nested lists."""
    d = {"pi": params.pi.tolist(), "phi": params.phi.tolist()}
    if isinstance(params, ZipParams):
        d.update(kind="zip", lambda_=params.lam.tolist())
    elif isinstance(params, ZinbParams):
        d.update(kind="zinb", mu=params.mu.tolist(), alpha=params.alpha.tolist(), nu=params.nu.tolist())
    else:
        d.update(kind="zinb-reg" if params.alpha is not None else "zip-reg",
                 beta0=params.beta0.tolist(), rho=params.rho.tolist(), beta=params.beta.tolist())
        if params.alpha is not None:
            d.update(alpha=params.alpha.tolist(), nu=params.nu.tolist())
    if "lambda_" in d:
        d["lambda"] = d.pop("lambda_")
    if gene_ids is not None:
        d["genes"] = list(gene_ids)
    return d


def params_from_dict(d: dict):
    kind = d["kind"]
    if kind == "zip":
        return ZipParams(d["pi"], d["phi"], d["lambda"])
    if kind == "zinb":
        return ZinbParams(d["pi"], d["phi"], d["mu"], d["alpha"])
    g = len(d["beta0"])
    return RegParams(d["pi"], d["phi"], d["beta0"], d["rho"], np.asarray(d["beta"], float).reshape(g, -1),
                     d.get("alpha"))


def _parse_k(args):
    if args.k is not None and args.k_range is not None:
        raise UsageError("--k and --k-range are mutually exclusive")
    if args.k is None and args.k_range is None:
        raise UsageError("one of --k or --k-range is required")
    if args.k is not None:
        if args.k < 1:
            raise UsageError("--k must be positive")
        return [args.k]
    try:
        a, b = (int(v) for v in args.k_range.split(":"))
    except ValueError:
        raise UsageError(f"--k-range expects A:B, got {args.k_range!r}") from None
    if a < 1 or b < a:
        raise UsageError(f"--k-range needs 1 <= A <= B, got {args.k_range}")
    return list(range(a, b + 1))


# -- fit -------------------------------------------------------------------------

def cmd_fit(args) -> int:
    started = time.time()
    variant, needs_sf, needs_cov = MODELS[args.model]
    k_values = _parse_k(args)
    if needs_sf and args.size_factors is None:
        raise UsageError(f"model {args.model} needs --size-factors (compute or a file)")
    if needs_cov and args.covariates is None:
        raise UsageError(f"model {args.model} needs --covariates")
    if variant in ("zip", "zinb") and (args.size_factors or args.covariates):
        raise UsageError(f"model {args.model} takes no size factors or covariates")
    methods = ("kmeans", "random") if args.init == "both" else (args.init,)
    if args.restarts < 1:
        raise UsageError("--restarts must be at least 1")

    raw = load_counts(args.counts, args.format)
    counts, kept = raw, np.arange(raw.n_genes)
    filters = {}
    if args.iqr_filter is not None:
        counts, kept = filter_genes_iqr(counts, args.iqr_filter)
        filters["iqr_threshold"] = args.iqr_filter
        filters["after_iqr"] = int(kept.size)
    if args.top_sd is not None:
        counts, idx = select_top_sd(counts, min(args.top_sd, counts.n_genes))
        kept = kept[idx]
        filters["top_sd"] = args.top_sd
    filters["n_genes_used"] = int(counts.n_genes)

    sf = None
    if args.size_factors == "compute":
        sf = compute_size_factors(raw)  # totals before any gene filtering
    elif args.size_factors is not None:
        sf = load_size_factors(args.size_factors, raw.n_cells)
    cov = load_covariates(args.covariates, raw.n_cells) if args.covariates else None

    data = MixtureData(counts.dense(), None if sf is None else sf.t, None if cov is None else cov.values)
    if variant == "zip-reg" or variant == "zinb-reg":
        if data.size_factors is None and data.covariates is None:
            raise UsageError("regression models need size factors or covariates")
    plan = RestartPlan(k_values, args.restarts, methods, args.seed, args.tol, args.max_iter, variant)
    log.info("fitting %s on %d cells x %d genes, K in %s, %d worker(s)",
             args.model, data.n_cells, data.n_genes, k_values, worker_count())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = run_selection(data, plan)
    fit = report.fit

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels1 = (fit.labels + 1).tolist()
    doc = {
        "schema": REPORT_SCHEMA,
        "model": args.model,
        "variant": variant,
        "data": {
            "n_cells": data.n_cells,
            "n_genes": data.n_genes,
            "n_genes_input": raw.n_genes,
            "n_covariates": data.n_covariates,
            "size_factors": None if sf is None else ("computed" if args.size_factors == "compute" else "file"),
            "filters": filters,
            "genes": [counts.gene_ids[i] for i in range(counts.n_genes)],
        },
        "selection": {
            "k_values": k_values,
            "init_methods": list(methods),
            "restarts": args.restarts,
            "curves": {m: {str(k): v for k, v in c.items()} for m, c in report.curves.items()},
            "chosen_k": report.chosen_k,
            "non_monotone": report.non_monotone,
            "chosen_method": report.chosen_method,
            "cells": [
                {
                    "k": cell.k,
                    "method": cell.method,
                    "available": cell.available,
                    "best_aic": None if cell.best is None else cell.best.aic,
                    "best_seed": None if cell.best is None else cell.best.seed,
                    "failed": sum(r.error is not None for r in cell.restarts),
                }
                for cell in report.cells.values()
            ],
        },
        "restarts": [r.__dict__ for r in report.restarts],
        "fit": {
            "k": fit.n_clusters,
            "method": report.chosen_method,
            "seed": fit.seed,
            "loglik": fit.loglik,
            "aic": fit.aic,
            "bic": fit.bic,
            "n_params": fit.n_params,
            "n_iter": fit.n_iter,
            "converged": fit.converged,
            "loglik_trace": list(fit.loglik_trace),
            "params": params_to_dict(fit.params),
        },
        "cells": {
            "ids": list(counts.cell_ids),
            "labels": labels1,
            "responsibilities": fit.z_hat.tolist(),
        },
    }
    _write_csv(_side(out, "labels"), ["cell", "label"] + [f"z{k + 1}" for k in range(fit.n_clusters)],
               [[cid, lab] + row for cid, lab, row in zip(counts.cell_ids, labels1, fit.z_hat.tolist())])
    aic_rows = []
    for (k, m), cell in report.cells.items():
        aic_rows.append([k, m, "" if cell.best is None else repr(cell.best.aic),
                         int(report.chosen_k.get(m) == k)])
    _write_csv(_side(out, "aic"), ["k", "method", "best_aic", "elbow_choice"], aic_rows)
    _write_csv(_side(out, "restarts"), ["k", "method", "seed", "loglik", "aic", "converged", "n_iter", "error"],
               [[r.k, r.method, r.seed, r.loglik, r.aic, r.converged, r.n_iter, r.error or ""]
                for r in report.restarts])
    inputs = [args.counts, args.covariates,
              args.size_factors if args.size_factors not in (None, "compute") else None]
    doc["manifest"] = _manifest("fit", args, inputs, {"base_seed": args.seed, "restart_seeds":
                                [args.seed + i for i in range(args.restarts)]}, started)
    _dump_json(doc, out)
    print(f"K={fit.n_clusters} ({report.chosen_method}), AIC {fit.aic:.2f}; report written to {out}")
    return EXIT_OK


# -- simulate --------------------------------------------------------------------

def _truth_doc(config: SimConfig, ds) -> dict:
    return {
        "scenario": config.name,
        "case": config.case,
        "replicate": ds.replicate,
        "variant": config.variant,
        "labels": (ds.truth.labels + 1).tolist(),
        "params": params_to_dict(ds.truth.params),
        "config": config.to_dict(),
    }


def cmd_simulate(args) -> int:
    started = time.time()
    if args.config:
        if args.scenario:
            raise UsageError("use either --scenario or --config")
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: {exc}") from None
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.replicates is not None:
            raw["replicates"] = args.replicates
        config = SimConfig.from_dict(raw)
    else:
        if not args.scenario:
            raise UsageError("--scenario (with --case) or --config is required")
        config = preset(args.scenario, args.case or 1, args.replicates or 1, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in range(config.replicates):
        ds = simulate(config, r)
        rep_dir = out / f"rep{r + 1:03d}"
        rep_dir.mkdir(exist_ok=True)
        write_dense_csv(ds.counts, rep_dir / "counts.csv")
        if ds.size_factors is not None:
            _write_csv(rep_dir / "size_factors.csv", ["cell", "size_factor"],
                       [[c, repr(float(t))] for c, t in zip(ds.counts.cell_ids, ds.size_factors.t)])
        if ds.covariates is not None:
            names = [f"x{p + 1}" for p in range(ds.covariates.values.shape[1])]
            _write_csv(rep_dir / "covariates.csv", ["cell"] + names,
                       [[c] + [repr(float(v)) for v in row] for c, row in zip(ds.counts.cell_ids, ds.covariates.values)])
        _dump_json(_truth_doc(config, ds), rep_dir / "truth.json")
    _dump_json(_manifest("simulate", args, [args.config], {"seed": config.seed,
               "replicate_streams": [[config.seed, r] for r in range(config.replicates)]}, started),
               out / "manifest.json")
    print(f"{config.replicates} replicate(s) of {config.name} "
          f"({config.n_cells} x {config.n_genes}) written to {out}")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    started = time.time()
    try:
        fit_doc = json.loads(Path(args.fit).read_text(encoding="utf-8"))
        truth_doc = json.loads(Path(args.truth).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from None
    if "cells" in fit_doc:
        pred = np.asarray(fit_doc["cells"]["labels"], dtype=int) - 1
    else:
        pred = np.asarray(fit_doc["labels"], dtype=int) - 1
    true = np.asarray(truth_doc["labels"], dtype=int) - 1
    if pred.size != true.size:
        raise DimensionError(f"fit has {pred.size} labels, truth has {true.size}")
    fit_params = fit_doc.get("fit", {}).get("params")
    true_params = truth_doc.get("params")
    k = int(max(pred.max(), true.max()) + 1)
    for d in (fit_params, true_params):
        if d is not None:
            k = max(k, len(d["pi"]))
    conf = confusion(true, pred, k)
    perm = align_labels(conf)
    vm = v_measure(true, pred)
    rows = [["v_measure", "", "", repr(vm)]]

    comparable = (
        fit_params is not None
        and true_params is not None
        and fit_params.get("kind") == true_params.get("kind")
        and len(fit_params["pi"]) == len(true_params["pi"]) == k
    )
    if comparable:
        est = params_from_dict(fit_params).permute(perm)
        tp = params_from_dict(true_params)
        ta, ea = rate_arrays(tp), rate_arrays(est)
        for name in ta:
            t_arr, e_arr = np.asarray(ta[name]), np.asarray(ea[name])
            if t_arr.shape != e_arr.shape:
                continue
            if name == "nu":
                for c in range(t_arr.size):
                    rows.append(["estimate", name, c + 1, repr(float(e_arr[c]))])
                continue
            sq = np.mean((e_arr - t_arr) ** 2, axis=0)
            mad = mad_rates(t_arr, [e_arr])
            if np.ndim(sq) == 0:
                rows.append(["mse", name, "", repr(float(sq))])
                rows.append(["mad", name, "", repr(float(mad))])
            else:
                for c in range(sq.size):
                    rows.append(["mse", name, c + 1, repr(float(sq[c]))])
                    rows.append(["mad", name, c + 1, repr(float(np.atleast_1d(mad)[c]))])
        for name in ("pi", "phi"):
            for c, v in enumerate(getattr(est, name)):
                rows.append(["estimate", name, c + 1, repr(float(v))])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["metric", "parameter", "cluster", "value"], rows)
    _write_csv(_side(out, "confusion"), ["true"] + [f"pred{j + 1}" for j in range(k)],
               [[i + 1] + conf[i].tolist() for i in range(k)])
    groups, pct = co_clustering(true + 1, pred, k)
    _write_csv(_side(out, "coclustering"), ["group"] + [f"cluster{j + 1}" for j in range(k)],
               [[int(g)] + [repr(float(v)) for v in row] for g, row in zip(groups, pct)])
    _write_csv(_side(out, "alignment"), ["true_cluster", "fit_cluster"],
               [[i + 1, int(perm[i]) + 1] for i in range(k)])
    _dump_json(_manifest("evaluate", args, [args.fit, args.truth], {}, started), _side(out, "manifest", "json"))
    print(f"V-measure {vm:.6f}; metrics written to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zimclust", description="Zero-inflated count mixture clustering.")
    p.add_argument("--version", action="version", version=f"zimclust {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a mixture and choose K")
    f.add_argument("--counts", required=True, help="dense CSV or Matrix Market (.mtx) counts, cells x genes")
    f.add_argument("--format", choices=("dense-csv", "matrix-market-triplet"), default=None)
    f.add_argument("--model", required=True, choices=sorted(MODELS))
    f.add_argument("--k", type=int, default=None)
    f.add_argument("--k-range", default=None, metavar="A:B")
    f.add_argument("--init", choices=("kmeans", "random", "both"), default="both")
    f.add_argument("--restarts", type=int, default=32)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--covariates", default=None)
    f.add_argument("--size-factors", default=None, metavar="compute|PATH")
    f.add_argument("--iqr-filter", type=float, default=None, metavar="THRESH",
                   help="drop genes whose IQR across cells is <= THRESH")
    f.add_argument("--top-sd", type=int, default=None, metavar="N",
                   help="keep the N genes with the largest standard deviation")
    f.add_argument("--out", required=True, help="report JSON path; side tables go next to it")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="draw datasets from a scenario preset or config")
    s.add_argument("--scenario", default=None, help="preset name, e.g. zip/sc1")
    s.add_argument("--case", type=int, default=None)
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config", default=None, help="JSON SimConfig instead of a preset")
    s.add_argument("--list", action="store_true", help="list presets and exit")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="compare a fit report with simulation truth")
    e.add_argument("--fit", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


_DATA_ERRORS = (ParseError, DomainError, DimensionError, EmptySelectionError, DegenerateCellError,
                GeneratorError, FileNotFoundError, IsADirectoryError)
_NUMERICAL_ERRORS = (NumericalError, EmptyClusterError, SelectionError, ArithmeticError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv_ = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.list:
        for name, (desc, n) in list_presets().items():
            print(f"{name:14s} {n} cases  {desc}")
        return EXIT_OK
    if args.command == "simulate" and not args.out:
        print("zimclust: usage error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"zimclust: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"zimclust: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERICAL_ERRORS as exc:
        print(f"zimclust: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
