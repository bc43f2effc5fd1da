"""Two-stage adaptive NCH (ANCH).

Stage 1 runs NCH on a table drawn from the prior. Its adjusted draws define
an axis-aligned support box; stage 2 reruns NCH on a table whose parameters
come from the prior truncated to that box. Because the truncated prior is the
prior divided by a constant on the box, stage-2 draws need no importance
weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ReferenceTable,
    WeightedPosterior,
    build_reference_table,
    distances,
    nch_posterior,
    select_tolerance,
)
from .errors import DegenerateRegionError, EmptyPosteriorError, LowMassError
from .regression import TrainConfig
from .simulators import GenerativeModel
from .stats import ResponseTransform, Rng, as_generator

log = logging.getLogger(__name__)

#: acceptance fractions below this, over at least PROBE_SIZE prior draws, are refused
MIN_ACCEPTANCE = 1e-4
PROBE_SIZE = 10_000


@dataclass
class SupportRegion:
    lo: np.ndarray
    hi: np.ndarray
    margin: float = 0.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.lo > self.hi):
            raise DegenerateRegionError("region has lo > hi")

    def contains(self, params) -> np.ndarray:
        x = np.atleast_2d(np.asarray(params, dtype=float))
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def contains_region(self, other: "SupportRegion") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(self.hi >= other.hi))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "margin": self.margin}


def estimate_support(
    post: WeightedPosterior,
    margin: float = 0.05,
    bounds: tuple | None = None,
    floor_at_prior: bool = False,
) -> SupportRegion:
    """Bounding box of the positively weighted draws, widened by ``margin``.

    ``bounds`` (prior support, as ``(lo, hi)`` arrays) clips the box. With
    ``floor_at_prior`` the lower edge is set to the prior's lower bound, which
    for a positive scalar parameter gives the ``(0, max]`` interval.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    pos = post.weights > 0
    if not pos.any():
        raise EmptyPosteriorError("no positively weighted draws")
    x = post.draws[pos]
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.any(hi <= lo):
        raise DegenerateRegionError("first-stage draws have a single distinct value; enlarge the first stage")
    width = hi - lo
    lo = lo - margin * width
    hi = hi + margin * width
    if bounds is not None:
        b_lo, b_hi = (np.asarray(v, dtype=float) for v in bounds)
        if floor_at_prior:
            lo = b_lo.copy()
        lo = np.maximum(lo, b_lo)
        hi = np.minimum(hi, b_hi)
    return SupportRegion(lo, hi, margin)


@dataclass
class TruncatedDraws:
    params: np.ndarray
    acceptance: float
    proposed: int


def sample_truncated_prior(model: GenerativeModel, region: SupportRegion, count: int, rng) -> TruncatedDraws:
    """``count`` prior draws conditioned on ``region`` by rejection.

    The first batch has exactly ``count`` proposals, so an all-accepting
    region reproduces ``model.prior_draw`` on the same stream.
    """
    gen = as_generator(rng)
    kept = []
    have = proposed = 0
    batch = count
    while have < count:
        draws = model.prior_draw(gen, batch)
        ok = region.contains(draws)
        kept.append(draws[ok])
        have += int(ok.sum())
        proposed += batch
        frac = have / proposed
        if proposed >= PROBE_SIZE and frac < MIN_ACCEPTANCE:
            raise LowMassError(
                f"region holds only {frac:.2e} of the prior mass over {proposed} proposals"
            )
        need = count - have
        batch = int(min(10**6, max(1000, np.ceil(1.2 * need / max(frac, MIN_ACCEPTANCE)))))
    params = np.vstack(kept)[:count]
    return TruncatedDraws(params, have / proposed, proposed)


@dataclass
class AnchConfig:
    stage_sizes: tuple = (1000, 1000)
    p_delta: tuple = (0.75, 0.75)
    margin: float = 0.05
    pooling: bool = False
    floor_at_prior: bool = False
    region_transform: bool = True

    def __post_init__(self):
        self.stage_sizes = tuple(int(v) for v in self.stage_sizes)
        self.p_delta = tuple(float(v) for v in self.p_delta)
        if len(self.stage_sizes) != 2 or min(self.stage_sizes) < 1:
            raise ValueError("need two positive stage sizes")
        if len(self.p_delta) != 2 or not all(0 < p <= 1 for p in self.p_delta):
            raise ValueError("need two acceptance rates in (0, 1]")


@dataclass
class StageReport:
    delta: float
    p_delta: float
    table_rows: int
    accepted: int
    method_used: str
    notes: list = field(default_factory=list)


@dataclass
class AnchReport:
    stage1: StageReport
    stage2: StageReport | None
    region: SupportRegion | None
    truncation_acceptance: float | None
    ks_statistic: list | None
    stage1_posterior: WeightedPosterior
    stage2_posterior: WeightedPosterior | None
    stage2_table: ReferenceTable | None = None
    stage1_table: ReferenceTable | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def stage(s):
            return None if s is None else {
                "delta": s.delta,
                "p_delta": s.p_delta,
                "table_rows": s.table_rows,
                "accepted": s.accepted,
                "method_used": s.method_used,
                "notes": list(s.notes),
            }

        return {
            "stage1": stage(self.stage1),
            "stage2": stage(self.stage2),
            "region": None if self.region is None else self.region.to_dict(),
            "truncation_acceptance": self.truncation_acceptance,
            "ks_statistic": self.ks_statistic,
            "warnings": list(self.warnings),
        }


def weighted_ks(a: WeightedPosterior, b: WeightedPosterior) -> list[float]:
    """Per-parameter sup distance between the two weighted empirical CDFs."""
    out = []
    for j in range(a.draws.shape[1]):
        grid = np.union1d(a.draws[:, j], b.draws[:, j])
        cdfs = []
        for p in (a, b):
            order = np.argsort(p.draws[:, j], kind="stable")
            xs = p.draws[order, j]
            cw = np.cumsum(p.weights[order]) / p.weights.sum()
            idx = np.searchsorted(xs, grid, side="right") - 1
            cdfs.append(np.where(idx >= 0, cw[np.maximum(idx, 0)], 0.0))
        out.append(float(np.max(np.abs(cdfs[0] - cdfs[1]))))
    return out


def region_transforms(region: SupportRegion, transforms) -> list[ResponseTransform]:
    """Logit on the region's interval for every dimension the region bounds.

    Stage-2 parameters are confined to the region, so the bounded-parameter
    transform keeps adjusted draws inside it too.
    """
    out = []
    for lo, hi, t in zip(region.lo, region.hi, transforms):
        out.append(ResponseTransform.logit(float(lo), float(hi)) if np.isfinite(lo) and np.isfinite(hi) else t)
    return out


def _stage(table, s_obs, p_delta, transforms, train_cfg, rng):
    dists = distances(table, s_obs)
    tol = select_tolerance(dists, p_delta)
    post = nch_posterior(table, dists, tol, s_obs, transforms, train_cfg, rng)
    rep = StageReport(tol.delta, p_delta, table.M, int(tol.accepted.size), post.method_used, list(post.notes))
    return post, rep


def anch_run(
    model: GenerativeModel,
    s_obs,
    cfg: AnchConfig,
    train_cfg: TrainConfig | None,
    rng: Rng,
    transforms=None,
) -> tuple[WeightedPosterior, AnchReport]:
    """Two NCH stages, the second on the prior truncated to the first's support.

    Stage ``k`` uses child stream ``("stage", k)`` for its table and
    ``("fit", k)`` for network initialization. A degenerate stage-1 support
    returns the stage-1 posterior with a warning.
    """
    train_cfg = train_cfg or TrainConfig()
    transforms = transforms if transforms is not None else model.default_transforms()
    m1, m2 = cfg.stage_sizes
    p1, p2 = cfg.p_delta

    table1 = build_reference_table(model, m1, rng.derive("stage", 1))
    post1, rep1 = _stage(table1, s_obs, p1, transforms, train_cfg, rng.derive("fit", 1))
    try:
        region = estimate_support(post1, cfg.margin, model.prior_bounds(), cfg.floor_at_prior)
    except (DegenerateRegionError, EmptyPosteriorError) as exc:
        msg = f"stage 2 skipped: {exc}"
        log.warning(msg)
        post1.method = "anch"
        report = AnchReport(rep1, None, None, None, None, post1, None, stage1_table=table1, warnings=[msg])
        return post1, report

    tr2 = region_transforms(region, transforms) if cfg.region_transform else transforms
    stage2_rng = rng.derive("stage", 2)
    trunc = sample_truncated_prior(model, region, m2, stage2_rng.derive("prior"))
    table2 = build_reference_table(model, m2, stage2_rng, params=trunc.params)
    post2, rep2 = _stage(table2, s_obs, p2, tr2, train_cfg, rng.derive("fit", 2))
    ks = weighted_ks(post1, post2)

    if cfg.pooling:
        inside = region.contains(table1.params[post1.source_rows])
        final = WeightedPosterior(
            np.vstack([post1.draws[inside], post2.draws]),
            np.concatenate([post1.weights[inside], post2.weights]),
            "anch",
            delta=post2.delta,
            p_delta=p2,
            notes=post2.notes,
            method_used=post2.method_used,
        )
    else:
        final = WeightedPosterior(
            post2.draws,
            post2.weights,
            "anch",
            delta=post2.delta,
            p_delta=p2,
            notes=post2.notes,
            method_used=post2.method_used,
            source_rows=post2.source_rows,
        )
    report = AnchReport(rep1, rep2, region, trunc.acceptance, ks, post1, post2, table2, table1)
    return final, report
