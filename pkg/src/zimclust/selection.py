"""Starting values, multi-restart fitting and choice of the number of clusters."""
from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .em import FitResult, run_em
from .errors import (
    DegenerateCurveWarning,
    EmptyClusterError,
    NumericalError,
    SelectionError,
    ZimclustError,
)
from .glm import reparameterize
from .likelihood import MixtureData, RegParams, ZinbParams, ZipParams, VARIANTS

log = logging.getLogger(__name__)

__all__ = [
    "RestartPlan",
    "RestartSummary",
    "SelectionCell",
    "SelectionReport",
    "init_kmeans",
    "init_random",
    "params_from_labels",
    "initial_size",
    "aic",
    "bic",
    "elbow_select",
    "run_selection",
    "worker_count",
    "INIT_METHODS",
]

INIT_METHODS = ("kmeans", "random")
MEAN_FLOOR = 1e-6
NU_RANGE = (0.01, 1e4)
KMEANS_ITER = 25


# -- starting values -----------------------------------------------------------

def initial_size(counts) -> float:
    """Moment estimate of the NB size from a pooled set of counts."""
    c = np.asarray(counts, dtype=float).ravel()
    m = c.mean()
    if m <= 0:
        return NU_RANGE[1]
    sd = c.std(ddof=1) if c.size > 1 else 0.0
    denom = (sd / m) ** 2 - 1.0 / m
    if denom <= 0:
        return NU_RANGE[1]
    return float(np.clip(1.0 / denom, *NU_RANGE))


def params_from_labels(data: MixtureData, labels, k: int, variant: str = "zip"):
    """Starting parameters derived from a hard partition of the cells."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    labels = np.asarray(labels)
    y = data.y
    n, g = y.shape
    sizes = np.bincount(labels, minlength=k)
    if np.any(sizes == 0):
        kk = int(np.nonzero(sizes == 0)[0][0])
        raise EmptyClusterError(f"initial partition leaves cluster {kk} empty", cluster=kk)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    pi = sizes / n
    zeros = (y == 0).sum(axis=1)
    phi = np.minimum(np.bincount(labels, weights=zeros, minlength=k) / (sizes * g), 1.0 - 1e-12)
    means = np.maximum((y.T @ onehot) / sizes, MEAN_FLOOR)  # G x K
    alpha = None
    if variant in ("zinb", "zinb-reg"):
        alpha = np.array([1.0 / initial_size(y[labels == c]) for c in range(k)])
    if variant == "zip":
        return ZipParams(pi, phi, means)
    if variant == "zinb":
        return ZinbParams(pi, phi, means, alpha)
    # log-link start: cluster mean count over the cluster's mean exposure
    t = np.ones(n) if data.size_factors is None else data.size_factors
    t_bar = np.bincount(labels, weights=t, minlength=k) / sizes
    beta0, rho = reparameterize(np.log(means / t_bar[None, :]))
    p = data.n_covariates
    return RegParams(pi, phi, beta0, rho, np.zeros((g, p)), alpha)


def _kmeans_labels(data: MixtureData, k: int, seed: int):
    if k == 1:
        return np.zeros(data.n_cells, dtype=int)
    x = np.log1p(data.y.astype(float))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # duplicate points / early stop chatter
        km = KMeans(
            n_clusters=k,
            init="k-means++",
            n_init=1,
            max_iter=KMEANS_ITER,
            algorithm="lloyd",
            random_state=seed,
        ).fit(x)
    return km.labels_.astype(int)


def _check_k(data, k):
    if k < 1 or k > data.n_cells:
        raise ValueError(f"K must be between 1 and the number of cells ({data.n_cells}), got {k}")


def init_kmeans(data, k: int, seed: int, variant: str = "zip"):
    """k-means++ / Lloyd on log1p counts, then moment starting values."""
    if not isinstance(data, MixtureData):
        data = MixtureData(data)
    _check_k(data, k)
    labels = _kmeans_labels(data, k, seed)
    if np.bincount(labels, minlength=k).min() == 0:
        # one retry from a derived seed, then give up
        labels = _kmeans_labels(data, k, int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]))
    return params_from_labels(data, labels, k, variant)


def init_random(data, k: int, seed: int, variant: str = "zip"):
    """Uniform random labels, then the same starting values as k-means."""
    if not isinstance(data, MixtureData):
        data = MixtureData(data)
    _check_k(data, k)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=data.n_cells)
    if np.bincount(labels, minlength=k).min() == 0:
        # plant one distinct cell in every cluster so none starts empty
        labels[rng.permutation(data.n_cells)[:k]] = np.arange(k)
    return params_from_labels(data, labels, k, variant)


_INITS = {"kmeans": init_kmeans, "random": init_random}


# -- information criteria --------------------------------------------------------

def _ll_p(fit, n_params):
    if isinstance(fit, FitResult):
        ll, p = fit.loglik, fit.n_params if n_params is None else n_params
    else:
        ll, p = float(fit), n_params
        if p is None:
            raise TypeError("n_params is required when passing a bare log-likelihood")
    if not math.isfinite(ll):
        raise NumericalError(f"log-likelihood is {ll}")
    return ll, p


def aic(fit, n_params: int | None = None) -> float:
    """2p - 2 loglik for a FitResult (or a bare log-likelihood plus ``n_params``)."""
    ll, p = _ll_p(fit, n_params)
    return 2.0 * p - 2.0 * ll


def bic(fit, n_params: int | None = None, n_cells: int | None = None) -> float:
    ll, p = _ll_p(fit, n_params)
    n = fit.n_cells if isinstance(fit, FitResult) and n_cells is None else n_cells
    if n is None:
        raise TypeError("n_cells is required when passing a bare log-likelihood")
    return p * math.log(n) - 2.0 * ll


def _is_monotone(curve: dict) -> bool:
    vals = [curve[k] for k in sorted(curve)]
    return all(b <= a for a, b in zip(vals, vals[1:]))


def elbow_select(curve: dict) -> int:
    """Pick K from a {K: AIC} curve by the largest drop below a chord.

    The chord joins the highest-AIC point and the largest-K point; among the
    points on that stretch the one furthest (vertically) below it wins, ties
    going to the smaller K.  Points above the chord are never chosen.
    """
    if not curve:
        raise ValueError("empty AIC curve")
    ks = np.array(sorted(curve), dtype=float)
    vals = np.array([curve[k] for k in sorted(curve)], dtype=float)
    if ks.size == 1:
        warnings.warn("only one K on the curve; nothing to compare", DegenerateCurveWarning, stacklevel=2)
        return int(ks[0])
    i0 = int(np.argmax(vals))  # first maximum -> smaller K on ties
    last = ks.size - 1
    if i0 == last:
        return int(ks[0])
    slope = (vals[last] - vals[i0]) / (ks[last] - ks[i0])
    seg = np.arange(i0, ks.size)
    line = vals[i0] + slope * (ks[seg] - ks[i0])
    dist = line - vals[seg]
    scale = max(np.ptp(vals), 1.0)
    dist[np.abs(dist) <= 1e-12 * scale] = 0.0
    dist[dist < 0] = -np.inf
    best = int(np.argmax(dist))  # first max -> smallest K
    return int(ks[seg[best]])


# -- restart orchestration -------------------------------------------------------

@dataclass
class RestartPlan:
    k_values: list
    restarts: int = 32
    init_methods: tuple = INIT_METHODS
    base_seed: int = 0
    tol: float = 1e-6
    max_iter: int = 1000
    variant: str = "zip"

    def __post_init__(self):
        self.k_values = [int(k) for k in self.k_values]
        if not self.k_values or min(self.k_values) < 1:
            raise ValueError("k_values must be a non-empty list of positive integers")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        self.init_methods = tuple(self.init_methods)
        bad = set(self.init_methods) - set(INIT_METHODS)
        if bad or not self.init_methods:
            raise ValueError(f"init methods must come from {INIT_METHODS}, got {self.init_methods}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def tasks(self):
        for k in self.k_values:
            for m in self.init_methods:
                for i in range(self.restarts):
                    yield k, m, self.base_seed + i


@dataclass
class RestartSummary:
    k: int
    method: str
    seed: int
    loglik: float | None
    aic: float | None
    converged: bool
    n_iter: int
    error: str | None = None


@dataclass
class SelectionCell:
    k: int
    method: str
    best: FitResult | None
    restarts: list = field(default_factory=list)

    @property
    def available(self) -> bool:
        return self.best is not None


@dataclass
class SelectionReport:
    plan: RestartPlan
    cells: dict  # (K, method) -> SelectionCell
    curves: dict  # method -> {K: best AIC}
    chosen_k: dict  # method -> K
    non_monotone: dict  # method -> bool
    chosen_method: str
    fit: FitResult

    @property
    def k(self) -> int:
        return self.fit.n_clusters

    def best(self, k, method) -> FitResult | None:
        cell = self.cells.get((k, method))
        return None if cell is None else cell.best

    @property
    def restarts(self):
        out = []
        for cell in self.cells.values():
            out.extend(cell.restarts)
        return out


_WORKER_DATA = None


def _set_worker_data(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _fit_one(task, plan: RestartPlan, data=None):
    k, method, seed = task
    data = _WORKER_DATA if data is None else data
    try:
        start = _INITS[method](data, k, seed, plan.variant)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = run_em(data, start, tol=plan.tol, max_iter=plan.max_iter, seed=seed, init=method)
        aic(fit)
    except (ZimclustError, ArithmeticError, ValueError) as exc:
        return RestartSummary(k, method, seed, None, None, False, 0, f"{type(exc).__name__}: {exc}"), None
    return RestartSummary(k, method, seed, fit.loglik, fit.aic, fit.converged, fit.n_iter), fit


def worker_count(requested: int | None = None) -> int:
    """Workers from the argument or ZIMCLUST_THREADS (0 or unset = all CPUs)."""
    if requested is None:
        env = os.environ.get("ZIMCLUST_THREADS", "0").strip() or "0"
        try:
            requested = int(env)
        except ValueError:
            requested = 0
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, requested)


def _reduce_cell(items):
    """Keep the min-AIC fit; exact ties go to the lower seed."""
    best = None
    for summary, fit in sorted(items, key=lambda it: it[0].seed):
        if fit is None:
            continue
        if best is None or fit.aic < best.aic:
            best = fit
    return best


def run_selection(data, plan: RestartPlan, workers: int | None = None) -> SelectionReport:
    """Fit every (K, init method, restart) and pick K per method by the elbow rule.

    The final fit is the elbow winner with the smaller AIC across methods
    (k-means first on exact ties).  Results do not depend on ``workers``.
    """
    if not isinstance(data, MixtureData):
        data = MixtureData(data)
    tasks = list(plan.tasks())
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers == 1:
        results = [_fit_one(t, plan, data) for t in tasks]
    else:
        with ProcessPoolExecutor(n_workers, initializer=_set_worker_data, initargs=(data,)) as ex:
            results = list(ex.map(_fit_one, tasks, [plan] * len(tasks), chunksize=max(1, len(tasks) // (4 * n_workers))))

    grouped = {}
    for summary, fit in results:
        grouped.setdefault((summary.k, summary.method), []).append((summary, fit))
    cells = {}
    for key in sorted(grouped, key=lambda km: (km[0], plan.init_methods.index(km[1]))):
        items = grouped[key]
        cells[key] = SelectionCell(key[0], key[1], _reduce_cell(items), [s for s, _ in items])
        failed = sum(s.error is not None for s, _ in items)
        if failed:
            log.info("K=%d %s: %d of %d restarts failed", key[0], key[1], failed, len(items))

    curves, chosen, flags = {}, {}, {}
    for m in plan.init_methods:
        curve = {k: cells[(k, m)].best.aic for k in plan.k_values if cells[(k, m)].available}
        if not curve:
            continue
        curves[m] = curve
        flags[m] = not _is_monotone(curve)
        chosen[m] = elbow_select(curve)
    if not chosen:
        raise SelectionError("every restart failed for every (K, init method)")

    final_method = None
    for m in plan.init_methods:  # plan order puts k-means first by default
        if m not in chosen:
            continue
        cand = cells[(chosen[m], m)].best
        if final_method is None or cand.aic < cells[(chosen[final_method], final_method)].best.aic:
            final_method = m
    # k-means wins exact ties regardless of the order methods were listed in
    if "kmeans" in chosen and final_method != "kmeans":
        km_fit = cells[(chosen["kmeans"], "kmeans")].best
        if km_fit.aic == cells[(chosen[final_method], final_method)].best.aic:
            final_method = "kmeans"
    final = cells[(chosen[final_method], final_method)].best
    return SelectionReport(plan, cells, curves, chosen, flags, final_method, final)
