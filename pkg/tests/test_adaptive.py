import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from nchabc.adaptive import (
    AnchConfig,
    SupportRegion,
    anch_run,
    estimate_support,
    region_transforms,
    sample_truncated_prior,
    weighted_ks,
)
from nchabc.engine import WeightedPosterior, build_reference_table
from nchabc.errors import DegenerateRegionError, LowMassError
from nchabc.regression import TrainConfig
from nchabc.simulators import InfiniteSitesModel, QueueModel, Uniform
from nchabc.stats import ResponseTransform, Rng


def posterior(values, weights=None):
    values = np.asarray(values, dtype=float).reshape(len(values), -1)
    w = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=float)
    return WeightedPosterior(values, w, "nch")


# -- support -----------------------------------------------------------------


def test_support_min_max():
    r = estimate_support(posterior([2, 5, 9]), margin=0.0)
    assert r.lo.tolist() == [2.0] and r.hi.tolist() == [9.0]


def test_support_margin():
    r = estimate_support(posterior([2, 5, 9]), margin=0.1)
    np.testing.assert_allclose([r.lo[0], r.hi[0]], [1.3, 9.7], rtol=1e-12)


def test_support_ignores_zero_weight_draws():
    r = estimate_support(posterior([2, 5, 9, 100], [1, 1, 1, 0]), margin=0.0)
    assert r.hi[0] == 9.0


def test_support_ex1_interval_from_zero_to_max():
    bounds = InfiniteSitesModel().prior_bounds()
    r = estimate_support(posterior([0.4, 1.5, 3.2, 6.0]), margin=0.0, bounds=bounds, floor_at_prior=True)
    assert r.lo[0] == 0.0 and r.hi[0] == 6.0
    # a wide margin also reaches the prior's lower edge through clipping
    r = estimate_support(posterior([0.4, 1.5, 3.2, 6.0]), margin=0.5, bounds=bounds)
    assert r.lo[0] == 0.0 and r.hi[0] == pytest.approx(6.0 + 0.5 * 5.6)


def test_support_degenerate():
    with pytest.raises(DegenerateRegionError):
        estimate_support(posterior([3, 3, 3]), margin=0.1)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=20, unique=True),
    st.lists(st.floats(-100, 100), min_size=0, max_size=10),
    st.floats(0, 1),
)
def test_support_monotone_in_draws(base, extra, margin):
    small = estimate_support(posterior(base), margin)
    large = estimate_support(posterior(base + extra), margin)
    assert large.contains_region(small)


# -- truncated prior ---------------------------------------------------------


def test_truncated_prior_full_region_reproduces_prior():
    model = QueueModel()
    lo, hi = model.prior_bounds()
    draws = sample_truncated_prior(model, SupportRegion(lo, hi), 10_000, Rng(1))
    assert draws.acceptance == 1.0
    np.testing.assert_array_equal(draws.params, model.prior_draw(Rng(1).generator, 10_000))
    fresh = model.prior_draw(Rng(2).generator, 10_000)
    for j in range(3):
        assert sps.ks_2samp(draws.params[:, j], fresh[:, j]).pvalue > 0.01


def test_truncated_uniform_mean():
    model = QueueModel()
    region = SupportRegion([0, 0, 2], [10, 20, 4])
    draws = sample_truncated_prior(model, region, 20_000, Rng(3))
    th3 = draws.params[:, 2]
    assert np.all((th3 >= 2) & (th3 <= 4))
    assert abs(th3.mean() - 3) <= 3 * th3.std(ddof=1) / np.sqrt(th3.size)
    assert draws.acceptance == pytest.approx(0.2, abs=0.01)


def test_truncated_exponential_acceptance():
    draws = sample_truncated_prior(InfiniteSitesModel(), SupportRegion([0.0], [20.0]), 40_000, Rng(4))
    assert draws.proposed >= 100_000
    assert draws.acceptance == pytest.approx(1 - np.exp(-0.4), abs=0.01)
    assert np.all(draws.params <= 20)


def test_truncated_low_mass():
    with pytest.raises(LowMassError):
        sample_truncated_prior(InfiniteSitesModel(), SupportRegion([0.0], [1e-6]), 100, Rng(5))


# -- two-stage run -----------------------------------------------------------


def small_cfg(**kw):
    base = dict(stage_sizes=(300, 300), p_delta=(0.8, 0.8), margin=0.0, floor_at_prior=True)
    base.update(kw)
    return AnchConfig(**base)


def test_anch_stage2_table_inside_region():
    model = InfiniteSitesModel()
    post, rep = anch_run(model, [10], small_cfg(), TrainConfig(restarts=2), Rng(6))
    assert rep.region is not None and rep.stage2_table is not None
    assert np.all(rep.region.contains(rep.stage2_table.params))
    assert rep.region.lo[0] == 0.0
    assert 0 < rep.truncation_acceptance < 1
    # logit on the region keeps the adjusted draws inside it as well
    assert np.all((post.draws > rep.region.lo) & (post.draws < rep.region.hi))
    assert post.method == "anch"
    d = rep.to_dict()
    assert d["stage2"]["table_rows"] == 300 and len(d["ks_statistic"]) == 1


def test_anch_deterministic():
    model = InfiniteSitesModel()
    a, _ = anch_run(model, [10], small_cfg(), TrainConfig(restarts=1), Rng(7))
    b, _ = anch_run(model, [10], small_cfg(), TrainConfig(restarts=1), Rng(7))
    np.testing.assert_array_equal(a.draws, b.draws)


def test_anch_full_support_matches_plain_table():
    model = QueueModel(k=5)
    lo, hi = model.prior_bounds()
    rng = Rng(8).derive("stage", 2)
    trunc = sample_truncated_prior(model, SupportRegion(lo, hi), 500, rng.derive("prior"))
    via_region = build_reference_table(model, 500, rng, params=trunc.params)
    plain = build_reference_table(model, 500, rng)
    np.testing.assert_array_equal(via_region.params, plain.params)
    np.testing.assert_array_equal(via_region.stats, plain.stats)


def test_anch_pooling_keeps_region_draws():
    model = InfiniteSitesModel()
    post, rep = anch_run(model, [10], small_cfg(pooling=True), TrainConfig(restarts=1), Rng(9))
    # stage-1 rows count only if their simulated parameter lies in the region
    inside = rep.region.contains(rep.stage1_table.params[rep.stage1_posterior.source_rows])
    assert 0 < inside.sum() < rep.stage1_posterior.size
    assert post.size == rep.stage2_posterior.size + int(inside.sum())


class PointMassModel(InfiniteSitesModel):
    priors = (Uniform(3.0, 3.0),)

    def __init__(self):
        super().__init__()
        self.priors = PointMassModel.priors


def test_anch_degenerate_first_stage_returns_stage1():
    model = PointMassModel()
    post, rep = anch_run(model, [10], small_cfg(), TrainConfig(restarts=1), Rng(10),
                         transforms=[ResponseTransform.identity()])
    assert rep.stage2 is None and rep.warnings
    assert post.size == rep.stage1_posterior.size


def test_region_transforms():
    tr = region_transforms(SupportRegion([0.0, -np.inf], [4.0, 1.0]), [ResponseTransform.log()] * 2)
    assert tr[0] == ResponseTransform.logit(0.0, 4.0)
    assert tr[1] == ResponseTransform.log()


def test_weighted_ks():
    a = posterior([1, 2, 3, 4])
    assert weighted_ks(a, a) == [0.0]
    b = posterior([10, 11, 12])
    assert weighted_ks(a, b) == [1.0]
