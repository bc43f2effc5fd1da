"""Implicit statistical models used as ABC benchmarks.

Three generative models share the :class:`GenerativeModel` contract: the
infinitely-many-sites coalescent (one statistic, segregating sites), an
exponentially growing population typed at microsatellite loci (seven
statistics) and the G/G/1 queue observed through its inter-departure times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .stats import ResponseTransform, as_generator, equal_weight_quantile_index

# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Exponential:
    mean: float

    def draw(self, gen, size):
        return gen.exponential(self.mean, size=size) if self.mean > 0 else np.zeros(size)

    @property
    def support(self):
        return 0.0, np.inf


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def draw(self, gen, size):
        # (low, high]: keeps the lower bound, often 0, out of reach
        return self.low + (self.high - self.low) * (1.0 - gen.random(size))

    @property
    def support(self):
        return self.low, self.high


@dataclass(frozen=True)
class NegLog10Uniform:
    """``-log10(x) ~ Uniform(low, high)``, drawn on that scale and mapped back."""

    low: float
    high: float

    def draw(self, gen, size):
        u = self.low + (self.high - self.low) * gen.random(size)
        return 10.0 ** (-u)

    @property
    def support(self):
        return 10.0 ** (-self.high), 10.0 ** (-self.low)


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def draw(self, gen, size):
        return gen.normal(self.mean, self.sd, size)

    @property
    def support(self):
        return -np.inf, np.inf


class GenerativeModel:
    """Prior sampling plus simulation of summary statistics.

    Subclasses set ``param_names``, ``stat_names`` and ``priors`` and
    implement ``simulate_batch``.
    """

    name = "model"
    param_names: tuple = ()
    stat_names: tuple = ()
    priors: tuple = ()

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    @property
    def stat_dim(self) -> int:
        return len(self.stat_names)

    def prior_draw(self, gen, size: int) -> np.ndarray:
        gen = as_generator(gen)
        return np.column_stack([p.draw(gen, size) for p in self.priors])

    def prior_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(p.support for p in self.priors))
        return np.array(lo, dtype=float), np.array(hi, dtype=float)

    def default_transforms(self) -> list[ResponseTransform]:
        out = []
        for lo, hi in zip(*self.prior_bounds()):
            if lo == 0 and np.isinf(hi):
                out.append(ResponseTransform.log())
            elif np.isfinite(lo) and np.isfinite(hi):
                out.append(ResponseTransform.logit(lo, hi))
            else:
                out.append(ResponseTransform.identity())
        return out

    def simulate_batch(self, params: np.ndarray, gen) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, params, gen) -> np.ndarray:
        return self.simulate_batch(np.atleast_2d(np.asarray(params, dtype=float)), gen)[0]

    def describe(self) -> dict:
        return {"id": self.name}


def prior_draw(model: GenerativeModel, rng, size: int | None = None) -> np.ndarray:
    draws = model.prior_draw(as_generator(rng), 1 if size is None else size)
    return draws[0] if size is None else draws


# ---------------------------------------------------------------------------
# Example 1: infinitely-many-sites


@dataclass(frozen=True)
class CoalescentConfig:
    n: int
    theta: float

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("coalescent sample size must be at least 2")
        if self.theta < 0:
            raise ConfigError("mutation rate must be nonnegative")


def tree_lengths(n: int, size: int, gen) -> np.ndarray:
    """Total branch length of ``size`` independent constant-size genealogies.

    Sum over j = 2..n of exponentials with rate (j-1)/2, in coalescent units.
    """
    scale = 2.0 / np.arange(1, n)
    out = np.empty(size)
    block = max(1, 2**20 // max(1, n - 1))
    for start in range(0, size, block):
        stop = min(size, start + block)
        out[start:stop] = gen.standard_exponential((stop - start, n - 1)) @ scale
    return out


def simulate_infinite_sites(cfg: CoalescentConfig, rng) -> int:
    gen = as_generator(rng)
    length = tree_lengths(cfg.n, 1, gen)[0]
    return int(gen.poisson(cfg.theta * length / 2.0))


class InfiniteSitesModel(GenerativeModel):
    name = "infinite_sites"
    param_names = ("theta",)
    stat_names = ("segregating_sites",)

    def __init__(self, n: int = 100, prior_mean: float = 50.0):
        if n < 2:
            raise ConfigError("coalescent sample size must be at least 2")
        self.n = int(n)
        self.prior_mean = float(prior_mean)
        self.priors = (Exponential(self.prior_mean),)

    def simulate_batch(self, params, gen):
        gen = as_generator(gen)
        theta = np.asarray(params, dtype=float)[:, 0]
        lengths = tree_lengths(self.n, theta.size, gen)
        return gen.poisson(theta * lengths / 2.0).astype(float)[:, None]

    def describe(self):
        return {"id": self.name, "n": self.n, "prior_mean": self.prior_mean}


# ---------------------------------------------------------------------------
# Example 2: exponential growth, microsatellites


@dataclass(frozen=True)
class ExpansionConfig:
    N_A: float
    t0: float
    alpha: float
    n: int = 100
    loci: int = 50
    mu: float = 5e-4
    gen_years: float = 20.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.N_A <= 0 or self.n < 2 or self.loci < 1 or self.gen_years <= 0:
            raise ConfigError("population size, sample size, loci and generation time must be positive")
        if self.t0 < 0 or self.mu < 0:
            raise ConfigError("t0 and mu must be nonnegative")


class GrowthHistory:
    """Deterministic size trajectory, time measured backwards in generations.

    ``N(t) = N_A/alpha * exp(-r t)`` for ``t < T`` with ``N(T) = N_A`` and
    ``N(t) = N_A`` beyond. ``cumulative`` is the integrated coalescence
    intensity ``int_0^t du / N(u)`` and ``inverse`` undoes it.
    """

    def __init__(self, N_A: float, alpha: float, T: float):
        self.N_A = float(N_A)
        self.N0 = float(N_A) / float(alpha)
        self.T = float(T)
        self.r = -np.log(alpha) / T if T > 0 and alpha < 1 else 0.0
        self.growing = self.T > 0 and self.r > 0
        self.cum_T = np.expm1(self.r * self.T) / (self.r * self.N0) if self.growing else 0.0

    def size(self, t):
        t = np.asarray(t, dtype=float)
        if not self.growing:
            return np.full_like(t, self.N_A)
        return np.where(t < self.T, self.N0 * np.exp(-self.r * t), self.N_A)

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        if not self.growing:
            return t / self.N_A
        early = np.expm1(self.r * np.minimum(t, self.T)) / (self.r * self.N0)
        return early + np.maximum(t - self.T, 0.0) / self.N_A

    def inverse(self, c):
        c = np.asarray(c, dtype=float)
        if not self.growing:
            return c * self.N_A
        early = np.log1p(self.r * self.N0 * np.minimum(c, self.cum_T)) / self.r
        return np.where(c <= self.cum_T, early, self.T + (c - self.cum_T) * self.N_A)


def coalescence_times(history: GrowthHistory, n: int, reps: int, gen) -> np.ndarray:
    """Coalescence event times for ``reps`` independent genealogies.

    Column ``i`` holds the time at which lineages drop from ``n - i`` to
    ``n - i - 1``.
    """
    out = np.empty((reps, n - 1))
    c = np.zeros(reps)
    for i, k in enumerate(range(n, 1, -1)):
        c = c + gen.standard_exponential(reps) / (k * (k - 1) / 2.0)
        out[:, i] = history.inverse(c)
    return out


def expansion_genotypes(cfg: ExpansionConfig, rng, return_mutations: bool = False):
    """Repeat counts (loci x n) for one draw of the expansion model.

    All loci are simulated together: at each coalescence the two merging
    lineages receive their stepwise mutations, which are pushed down to the
    tips they subtend. The ancestral repeat count is 0.
    """
    gen = as_generator(rng)
    n, loci = cfg.n, cfg.loci
    history = GrowthHistory(cfg.N_A, cfg.alpha, cfg.t0 / cfg.gen_years)
    rows = np.arange(loci)
    owner = np.tile(np.arange(n), (loci, 1))
    start = np.zeros((loci, n))
    values = np.zeros((loci, n), dtype=np.int64)
    n_mut = np.zeros(loci, dtype=np.int64)
    c = np.zeros(loci)
    for k in range(n, 1, -1):
        c = c + gen.standard_exponential(loci) / (k * (k - 1) / 2.0)
        t = history.inverse(c)
        a = gen.integers(0, k, loci)
        b = gen.integers(0, k - 1, loci)
        b = b + (b >= a)
        for slot in (a, b):
            length = t - start[rows, slot]
            m = gen.poisson(cfg.mu * length)
            if m.any():
                step = 2 * gen.binomial(m, 0.5) - m
                values += step[:, None] * (owner == slot[:, None])
                n_mut += m
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        owner = np.where(owner == hi[:, None], lo[:, None], owner)
        last = np.full(loci, k - 1)
        owner = np.where(owner == last[:, None], hi[:, None], owner)
        start[rows, hi] = start[rows, last]
        start[rows, lo] = t
    if return_mutations:
        return values, n_mut
    return values


EXPANSION_STATS = (
    "mean_repeat_variance",
    "mean_heterozygosity",
    "imbalance_per_locus",
    "imbalance_pooled",
    "interlocus_variance_ratio",
    "expansion_index",
    "mean_S1_minus_S0",
)


def expansion_summaries(values: np.ndarray) -> np.ndarray:
    """The seven summary statistics from a loci x individuals repeat-count array."""
    values = np.asarray(values)
    loci, n = values.shape
    var = values.var(axis=1, ddof=1)
    rng_ = values.max(axis=1) - values.min(axis=1)
    het = np.empty(loci)
    s0 = np.empty(loci)
    s1 = np.empty(loci)
    pairs = n * (n - 1) / 2.0
    for i in range(loci):
        counts = np.bincount(values[i] - values[i].min()).astype(float)
        p = counts / n
        het[i] = 1.0 - np.dot(p, p)
        s0[i] = np.dot(counts, counts - 1.0) / 2.0 / pairs
        s1[i] = np.dot(counts[:-1], counts[1:]) / pairs
    v_het = ((1.0 / (1.0 - het)) ** 2 - 1.0) / 2.0
    # pseudo-count keeps the log-ratios finite; both sides 0 gives 0
    pc = 1.0 / (2.0 * n)
    imb_locus = np.mean(np.log((var + pc) / (v_het + pc)))
    imb_pooled = np.log((var.mean() + pc) / (v_het.mean() + pc))
    mean_var = var.mean()
    interlocus = var.var() / mean_var if mean_var > 0 else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rng_ > 0, var / np.where(rng_ > 0, rng_, 1), 0.0)
    return np.array(
        [
            mean_var,
            het.mean(),
            imb_locus,
            imb_pooled,
            interlocus,
            ratio.mean(),
            np.mean(s1 - s0),
        ]
    )


def simulate_expansion(cfg: ExpansionConfig, rng) -> np.ndarray:
    return expansion_summaries(expansion_genotypes(cfg, rng))


class ExpansionModel(GenerativeModel):
    name = "expansion"
    param_names = ("t0", "N_A", "alpha")
    stat_names = EXPANSION_STATS

    def __init__(self, n=100, loci=50, mu=5e-4, gen_years=20.0, t0_max=100_000.0, na_max=10_000.0):
        self.n = int(n)
        self.loci = int(loci)
        self.mu = float(mu)
        self.gen_years = float(gen_years)
        self.t0_max = float(t0_max)
        self.na_max = float(na_max)
        self.priors = (Uniform(0.0, self.t0_max), Uniform(0.0, self.na_max), NegLog10Uniform(1.0, 6.0))

    def config_for(self, params) -> ExpansionConfig:
        t0, na, alpha = (float(v) for v in params)
        return ExpansionConfig(na, t0, alpha, self.n, self.loci, self.mu, self.gen_years)

    def simulate_batch(self, params, gen):
        gen = as_generator(gen)
        params = np.asarray(params, dtype=float)
        return np.vstack([simulate_expansion(self.config_for(p), gen) for p in params])

    def describe(self):
        return {
            "id": self.name,
            "n": self.n,
            "loci": self.loci,
            "mu": self.mu,
            "gen_years": self.gen_years,
        }


# ---------------------------------------------------------------------------
# Example 3: G/G/1 queue

QUEUE_STAT_COUNTS = (5, 10, 20)


@dataclass(frozen=True)
class QueueConfig:
    theta1: float
    theta2: float
    theta3: float
    n: int = 50
    k: int = 20

    def __post_init__(self):
        if self.theta1 < 0 or self.theta2 < self.theta1:
            raise ConfigError("service bounds need 0 <= theta1 <= theta2")
        if not self.theta3 > 0:
            raise ConfigError("arrival rate must be positive")
        if self.n < 1:
            raise ConfigError("need at least one departure")
        if self.k not in QUEUE_STAT_COUNTS:
            raise ConfigError(f"k must be one of {QUEUE_STAT_COUNTS}")


def queue_paths(theta1, theta2, theta3, n: int, gen, return_parts: bool = False):
    """Inter-departure times for a batch of queues, one row per parameter set."""
    theta1 = np.atleast_1d(np.asarray(theta1, dtype=float))
    theta2 = np.atleast_1d(np.asarray(theta2, dtype=float))
    theta3 = np.atleast_1d(np.asarray(theta3, dtype=float))
    reps = theta1.size
    u = theta1[:, None] + (theta2 - theta1)[:, None] * gen.random((reps, n))
    w = gen.standard_exponential((reps, n)) / theta3[:, None]
    arrivals = np.cumsum(w, axis=1)
    y = np.empty((reps, n))
    departed = np.zeros(reps)
    for i in range(n):
        # server idles until the i-th arrival if it came after the last departure
        y[:, i] = u[:, i] + np.maximum(arrivals[:, i] - departed, 0.0)
        departed = departed + y[:, i]
    if return_parts:
        return y, u, w
    return y


def simulate_queue(cfg: QueueConfig, rng) -> np.ndarray:
    gen = as_generator(rng)
    return queue_paths(cfg.theta1, cfg.theta2, cfg.theta3, cfg.n, gen)[0]


def queue_summaries(y, k: int) -> np.ndarray:
    """Minimum, ``k - 2`` equidistant interior quantiles, maximum."""
    if k not in QUEUE_STAT_COUNTS:
        raise ConfigError(f"k must be one of {QUEUE_STAT_COUNTS}, got {k}")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y = np.sort(np.atleast_2d(y), axis=1)
    n = y.shape[1]
    if n == 0:
        raise ConfigError("no inter-departure times")
    probs = np.arange(1, k - 1) / (k - 1)
    idx = np.concatenate([[0], equal_weight_quantile_index(n, probs), [n - 1]])
    out = y[:, idx]
    return out[0] if single else out


class QueueModel(GenerativeModel):
    name = "queue"
    param_names = ("theta1", "theta2", "theta3")

    def __init__(self, n: int = 50, k: int = 20, bound: float = 10.0):
        if k not in QUEUE_STAT_COUNTS:
            raise ConfigError(f"k must be one of {QUEUE_STAT_COUNTS}")
        self.n = int(n)
        self.k = int(k)
        self.bound = float(bound)
        self.stat_names = tuple(f"q{i}" for i in range(k))
        u = Uniform(0.0, self.bound)
        self.priors = (u, u, u)

    def prior_draw(self, gen, size):
        gen = as_generator(gen)
        p = self.priors[0]
        theta1 = p.draw(gen, size)
        gap = p.draw(gen, size)
        theta3 = p.draw(gen, size)
        return np.column_stack([theta1, theta1 + gap, theta3])

    def prior_bounds(self):
        b = self.bound
        return np.array([0.0, 0.0, 0.0]), np.array([b, 2 * b, b])

    def simulate_batch(self, params, gen):
        gen = as_generator(gen)
        params = np.asarray(params, dtype=float)
        y = queue_paths(params[:, 0], params[:, 1], params[:, 2], self.n, gen)
        return queue_summaries(y, self.k)

    def describe(self):
        return {"id": self.name, "n": self.n, "k": self.k}


# ---------------------------------------------------------------------------
# conjugate toy: closed-form posterior for checking the estimators


class LinearGaussianModel(GenerativeModel):
    """``theta ~ N(0, prior_sd^2)``, ``s | theta ~ N(theta, noise_sd^2)``."""

    name = "linear_gaussian"
    param_names = ("theta",)
    stat_names = ("s",)

    def __init__(self, prior_sd: float = 2.0, noise_sd: float = 1.0):
        if prior_sd <= 0 or noise_sd <= 0:
            raise ConfigError("standard deviations must be positive")
        self.prior_sd = float(prior_sd)
        self.noise_sd = float(noise_sd)
        self.priors = (Normal(0.0, self.prior_sd),)

    def posterior(self, s: float) -> tuple[float, float]:
        """Exact posterior mean and standard deviation given ``s``."""
        t2, n2 = self.prior_sd**2, self.noise_sd**2
        return s * t2 / (t2 + n2), float(np.sqrt(t2 * n2 / (t2 + n2)))

    def simulate_batch(self, params, gen):
        gen = as_generator(gen)
        theta = np.asarray(params, dtype=float)[:, 0]
        return (theta + self.noise_sd * gen.standard_normal(theta.size))[:, None]

    def describe(self):
        return {"id": self.name, "prior_sd": self.prior_sd, "noise_sd": self.noise_sd}


def make_model(spec: dict) -> GenerativeModel:
    spec = dict(spec)
    kind = spec.pop("id", None)
    try:
        if kind == "infinite_sites":
            return InfiniteSitesModel(**spec)
        if kind == "expansion":
            return ExpansionModel(**spec)
        if kind == "queue":
            return QueueModel(**spec)
        if kind == "linear_gaussian":
            return LinearGaussianModel(**spec)
    except TypeError as exc:
        raise ConfigError(f"bad options for model {kind!r}: {exc}") from None
    raise ConfigError(f"unknown model id {kind!r}")
