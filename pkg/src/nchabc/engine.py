"""Reference tables, scaled distances and the posterior estimators.

Estimators: plain rejection, kernel-weighted rejection (Nadaraya-Watson),
local-linear regression adjustment and nonlinear conditional heteroscedastic
(NCH) adjustment. Multi-parameter models are adjusted one parameter at a
time; rows stay paired so joint summaries are still possible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptyPosteriorError,
    ShapeError,
    SimulationError,
    SingularDesignError,
    TrainingDivergenceError,
)
from .regression import TrainConfig, fit_local_linear, fit_mean_var
from .simulators import GenerativeModel
from .stats import QuantileSet, ResponseTransform, Rng, epanechnikov, mad_scale, quantile_set

log = logging.getLogger(__name__)

#: rows simulated per random stream; fixed so tables never depend on scheduling
BLOCK_SIZE = 1024


@dataclass
class ReferenceTable:
    params: np.ndarray  # (M, P)
    stats: np.ndarray  # (M, D)

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.stats = np.atleast_2d(np.asarray(self.stats, dtype=float))
        if self.params.shape[0] != self.stats.shape[0]:
            raise ShapeError("params and stats have different row counts")

    @property
    def M(self) -> int:
        return self.params.shape[0]

    def subset(self, idx) -> "ReferenceTable":
        return ReferenceTable(self.params[idx], self.stats[idx])


def build_reference_table(
    model: GenerativeModel, M: int, rng: Rng, params: np.ndarray | None = None
) -> ReferenceTable:
    """Simulate ``M`` rows. Parameters come from the ``"prior"`` child stream
    unless given; block ``b`` of ``BLOCK_SIZE`` rows simulates from child
    stream ``("sim", b)``.
    """
    if M < 1:
        raise ValueError("reference table needs at least one row")
    if params is None:
        params = model.prior_draw(rng.derive("prior").generator, M)
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape != (M, model.param_dim):
        raise ShapeError(f"expected parameters of shape {(M, model.param_dim)}, got {params.shape}")
    stats = np.empty((M, model.stat_dim))
    for b, lo in enumerate(range(0, M, BLOCK_SIZE)):
        hi = min(M, lo + BLOCK_SIZE)
        gen = rng.derive("sim", b).generator
        try:
            stats[lo:hi] = model.simulate_batch(params[lo:hi], gen)
        except Exception as exc:
            raise SimulationError(f"simulation failed in rows {lo}..{hi - 1}: {exc}", row=lo) from exc
        bad = ~np.all(np.isfinite(stats[lo:hi]), axis=1)
        if bad.any():
            row = lo + int(np.flatnonzero(bad)[0])
            raise SimulationError(f"non-finite statistics at row {row}", row=row)
    return ReferenceTable(params, stats)


@dataclass
class DistanceSet:
    scaled_distances: np.ndarray
    mad: np.ndarray


def distances(table: ReferenceTable, s_obs) -> DistanceSet:
    """Euclidean distance after dividing each statistic by its MAD over the table."""
    s_obs = np.asarray(s_obs, dtype=float).ravel()
    if s_obs.size != table.stats.shape[1]:
        raise ShapeError(f"observed statistics have length {s_obs.size}, table has {table.stats.shape[1]}")
    mad = np.array([mad_scale(col) for col in table.stats.T])
    flat = mad <= 0
    if flat.any():
        log.warning("statistic columns %s have zero MAD; left unscaled", list(np.flatnonzero(flat) + 1))
        mad = np.where(flat, 1.0, mad)
    d = np.sqrt((((table.stats - s_obs) / mad) ** 2).sum(axis=1))
    return DistanceSet(d, mad)


@dataclass
class Tolerance:
    p_delta: float
    delta: float
    accepted: np.ndarray  # indices into the table, ascending


def select_tolerance(dists: DistanceSet, p_delta: float) -> Tolerance:
    if not 0 < p_delta <= 1:
        raise ValueError(f"acceptance rate must lie in (0, 1], got {p_delta}")
    d = dists.scaled_distances
    m = d.size
    k = int(np.ceil(p_delta * m * (1 - 1e-12)))
    k = min(max(k, 1), m)
    delta = float(np.partition(d, k - 1)[k - 1])
    return Tolerance(float(p_delta), delta, np.flatnonzero(d <= delta))


def kernel_weights(dists: DistanceSet, tol: Tolerance) -> tuple[np.ndarray, list[str]]:
    d = dists.scaled_distances[tol.accepted]
    notes = []
    if tol.delta > 0:
        w = epanechnikov(d, tol.delta)
    else:
        w = np.zeros_like(d)
    if not w.sum() > 0:
        notes.append("all accepted rows sit on the tolerance boundary; using equal weights")
        w = np.ones_like(d)
    return w, notes


@dataclass
class WeightedPosterior:
    draws: np.ndarray  # (N, P)
    weights: np.ndarray  # (N,)
    method: str
    param_names: tuple = ()
    delta: float = float("nan")
    p_delta: float = float("nan")
    notes: list = field(default_factory=list)
    method_used: str = ""
    source_rows: np.ndarray | None = None

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if not self.method_used:
            self.method_used = self.method

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    def mean(self) -> np.ndarray:
        w = self.weights / self.weights.sum()
        return w @ self.draws


def _check_nonempty(tol: Tolerance):
    if tol.accepted.size == 0:
        raise EmptyPosteriorError("no rows accepted; increase p_delta")


def rejection_posterior(
    table: ReferenceTable, dists: DistanceSet, tol: Tolerance, weighted: bool = False
) -> WeightedPosterior:
    _check_nonempty(tol)
    if weighted:
        w, notes = kernel_weights(dists, tol)
    else:
        w, notes = np.ones(tol.accepted.size), []
    return WeightedPosterior(
        table.params[tol.accepted].copy(),
        w,
        "nw" if weighted else "rejection",
        delta=tol.delta,
        p_delta=tol.p_delta,
        notes=notes,
        source_rows=tol.accepted,
    )


def _transforms_for(transforms, p: int) -> list[ResponseTransform]:
    if transforms is None:
        return [ResponseTransform.identity()] * p
    transforms = list(transforms)
    if len(transforms) != p:
        raise ShapeError(f"{len(transforms)} transforms for {p} parameters")
    return transforms


def _finish(phi, y_new, t: ResponseTransform, unchanged):
    out = t.inverse(y_new)
    # rows the adjustment leaves alone come back bit-for-bit
    return np.where(unchanged, phi, out)


def locl_posterior(
    table: ReferenceTable,
    dists: DistanceSet,
    tol: Tolerance,
    s_obs,
    transforms: Sequence[ResponseTransform] | None = None,
) -> WeightedPosterior:
    """Local-linear adjustment ``phi* = phi - (s_i - s_obs) . beta``."""
    _check_nonempty(tol)
    s_obs = np.asarray(s_obs, dtype=float).ravel()
    acc = tol.accepted
    w, notes = kernel_weights(dists, tol)
    phi = table.params[acc]
    xc = table.stats[acc] - s_obs
    tr = _transforms_for(transforms, phi.shape[1])
    draws = np.empty_like(phi)
    try:
        for j, t in enumerate(tr):
            y = t.forward(t.clip_into(phi[:, j]))
            fit = fit_local_linear(xc, y, w)
            beta = fit.beta[:, 0]
            keep = np.flatnonzero(beta != 0)
            shift = xc[:, keep] @ beta[keep] if keep.size else np.zeros(len(y))
            draws[:, j] = _finish(phi[:, j], y - shift, t, shift == 0)
    except SingularDesignError as exc:
        log.warning("local-linear fit failed (%s); falling back to rejection", exc)
        post = rejection_posterior(table, dists, tol, weighted=True)
        post.method = "locl"
        post.method_used = "nw"
        post.notes = notes + [f"locl fallback to nw: {exc}"]
        return post
    return WeightedPosterior(
        draws, w, "locl", delta=tol.delta, p_delta=tol.p_delta, notes=notes, source_rows=acc
    )


def nch_adjust(y, m_rows, m_obs, sig_rows, sig_obs):
    """Residual rescaling on the transformed scale; exact where inputs coincide.

    Written as ``y + (m_obs - m_i) + (y - m_i) * (ratio - 1)`` so that a row
    whose fitted mean and scale equal those at the observation keeps ``y``.
    """
    ratio = sig_obs / sig_rows
    return y + (m_obs - m_rows) + (y - m_rows) * (ratio - 1.0), (m_obs == m_rows) & (ratio == 1.0)


def nch_posterior(
    table: ReferenceTable,
    dists: DistanceSet,
    tol: Tolerance,
    s_obs,
    transforms: Sequence[ResponseTransform] | None = None,
    config: TrainConfig | None = None,
    rng: Rng | None = None,
    return_nets: bool = False,
):
    """Heteroscedastic adjustment with neural-net mean and log-variance fits."""
    _check_nonempty(tol)
    config = config or TrainConfig()
    rng = rng or Rng(0)
    s_obs = np.asarray(s_obs, dtype=float).ravel()
    acc = tol.accepted
    w, notes = kernel_weights(dists, tol)
    phi = table.params[acc]
    x = table.stats[acc]
    tr = _transforms_for(transforms, phi.shape[1])
    pos = w > 0
    n_weights = config.H * (x.shape[1] + 1) + config.H + 1
    if pos.sum() < 10 * n_weights:
        log.warning("NCH fit on %d weighted rows for %d net weights", int(pos.sum()), n_weights)

    draws = np.empty_like(phi)
    nets = []
    # guard the identity at the observation against last-bit differences
    # between batched and single-row network evaluation
    at_obs = np.all(x == s_obs, axis=1)
    try:
        for j, t in enumerate(tr):
            y = t.forward(t.clip_into(phi[:, j]))
            mv = fit_mean_var(x[pos], y[pos], w[pos], config, rng.derive("param", j), transform=t)
            nets.append(mv)
            m_rows, sig_rows = mv.mean(x), mv.sigma(x)
            m_obs, sig_obs = mv.mean(s_obs)[0], mv.sigma(s_obs)[0]
            y_new, same = nch_adjust(y, m_rows, m_obs, sig_rows, sig_obs)
            same |= at_obs
            if not np.all(np.isfinite(y_new)):
                raise TrainingDivergenceError("non-finite adjusted values")
            draws[:, j] = _finish(phi[:, j], y_new, t, same)
    except TrainingDivergenceError as exc:
        log.warning("NCH training failed (%s); falling back to local-linear", exc)
        post = locl_posterior(table, dists, tol, s_obs, transforms)
        post.method = "nch"
        post.notes = post.notes + [f"nch fallback to {post.method_used}: {exc}"]
        return (post, None) if return_nets else post
    post = WeightedPosterior(
        draws, w, "nch", delta=tol.delta, p_delta=tol.p_delta, notes=notes, source_rows=acc
    )
    return (post, nets) if return_nets else post


def posterior_quantiles(post: WeightedPosterior, probs: Sequence[float]) -> list[QuantileSet]:
    if post.size == 0:
        raise EmptyPosteriorError("posterior has no draws")
    return [quantile_set(post.draws[:, j], post.weights, probs) for j in range(post.draws.shape[1])]


def infer(
    method: str,
    table: ReferenceTable,
    s_obs,
    p_delta: float,
    transforms=None,
    config: TrainConfig | None = None,
    rng: Rng | None = None,
) -> WeightedPosterior:
    """Run one single-stage estimator by name on a prebuilt table."""
    dists = distances(table, s_obs)
    tol = select_tolerance(dists, p_delta)
    if method == "rejection":
        return rejection_posterior(table, dists, tol, weighted=False)
    if method == "nw":
        return rejection_posterior(table, dists, tol, weighted=True)
    if method == "locl":
        return locl_posterior(table, dists, tol, s_obs, transforms)
    if method == "nch":
        return nch_posterior(table, dists, tol, s_obs, transforms, config, rng)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# CSV persistence


def fmt(x: float) -> str:
    """Shortest decimal that round-trips to the same double."""
    return repr(float(x))


def write_table_csv(table: ReferenceTable, path) -> None:
    p, d = table.params.shape[1], table.stats.shape[1]
    header = [f"param_{i + 1}" for i in range(p)] + [f"stat_{i + 1}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.hstack([table.params, table.stats]):
            w.writerow([fmt(v) for v in row])


def read_table_csv(path) -> ReferenceTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    p = sum(1 for h in header if h.startswith("param_"))
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return ReferenceTable(data[:, :p], data[:, p:])


def write_posterior_csv(post: WeightedPosterior, path) -> None:
    p = post.draws.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"param_{i + 1}" for i in range(p)] + ["weight"])
        for row, wt in zip(post.draws, post.weights):
            w.writerow([fmt(v) for v in row] + [fmt(wt)])


def read_posterior_csv(path, method: str = "") -> WeightedPosterior:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, len(rows[0]))
    return WeightedPosterior(data[:, :-1], data[:, -1], method)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
