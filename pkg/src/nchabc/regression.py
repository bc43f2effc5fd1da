"""Weighted local-linear least squares and small feed-forward regression nets.

The nets have one logistic hidden layer and a linear output, and are fitted
by minimizing a kernel-weighted squared error plus weight decay. A pair of
them (conditional mean and conditional log-variance) drives the nonlinear
heteroscedastic adjustment in :mod:`nchabc.engine`.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .errors import ShapeError, SingularDesignError, TrainingDivergenceError
from .stats import ResponseTransform, Rng, as_generator, weighted_mean_std

log = logging.getLogger(__name__)

#: floor on |residual| before taking logs for the variance regression
RESIDUAL_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# local-linear


@dataclass
class LocalLinearFit:
    alpha: np.ndarray  # (R,)
    beta: np.ndarray  # (D, R)

    def predict(self, stats_centered):
        x = np.atleast_2d(np.asarray(stats_centered, dtype=float))
        return self.alpha + x @ self.beta


def _first_dependent_column(design: np.ndarray) -> int | None:
    # design[:, 0] is the intercept
    for j in range(1, design.shape[1] + 1):
        if np.linalg.matrix_rank(design[:, :j]) < j:
            return j - 1
    return None


def fit_local_linear(stats_centered, responses, weights) -> LocalLinearFit:
    """Weighted least squares of ``responses`` on ``[1, stats_centered]``.

    Columns of ``stats_centered`` that are identically zero carry no
    information; they get a zero coefficient and are left out of the solve.
    Any other rank deficiency raises :class:`SingularDesignError`.
    """
    x = np.asarray(stats_centered, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(responses, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    w = np.asarray(weights, dtype=float)
    m, d = x.shape
    if y.shape[0] != m or w.shape != (m,):
        raise ShapeError(f"rows disagree: stats {m}, responses {y.shape[0]}, weights {w.shape}")

    pos = w > 0
    keep = np.flatnonzero(np.any(x[pos] != 0.0, axis=0))
    if pos.sum() < keep.size + 1:
        raise SingularDesignError(
            f"{int(pos.sum())} positively weighted rows for {keep.size + 1} coefficients"
        )
    sw = np.sqrt(w[pos])
    design = np.column_stack([np.ones(pos.sum()), x[pos][:, keep]]) * sw[:, None]
    target = y[pos] * sw[:, None]
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        j = _first_dependent_column(design)
        col = None if j is None or j == 0 else int(keep[j - 1])
        name = "intercept" if col is None else f"stat_{col + 1}"
        raise SingularDesignError(f"weighted design is rank deficient at column {name}", column=col)

    beta = np.zeros((d, y.shape[1]))
    beta[keep] = coef[1:]
    alpha = coef[0]
    return LocalLinearFit(alpha=alpha, beta=beta)


# ---------------------------------------------------------------------------
# feed-forward nets


@dataclass
class FfnnModel:
    """One-hidden-layer net ``g(s) = out_mean + out_scale * (w2[:H] . z + w2[H])``.

    ``z = logistic(w1[:, :D] @ s_std + w1[:, D])`` with
    ``s_std = (s - in_mean) / in_scale``. The standardizations are fixed at
    fit time and are not trainable.
    """

    w1: np.ndarray  # (H, D+1), bias in the last column
    w2: np.ndarray  # (H+1,), bias last
    in_mean: np.ndarray | None = None
    in_scale: np.ndarray | None = None
    out_mean: float = 0.0
    out_scale: float = 1.0
    fit_info: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        h, d1 = self.w1.shape
        if h < 1 or self.w2.shape != (h + 1,):
            raise ShapeError(f"w1 {self.w1.shape} and w2 {self.w2.shape} are inconsistent")
        if self.in_mean is None:
            self.in_mean = np.zeros(d1 - 1)
        if self.in_scale is None:
            self.in_scale = np.ones(d1 - 1)
        self.in_mean = np.asarray(self.in_mean, dtype=float)
        self.in_scale = np.asarray(self.in_scale, dtype=float)

    @property
    def hidden_units(self) -> int:
        return self.w1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1] - 1

    @property
    def n_weights(self) -> int:
        return self.w1.size + self.w2.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.w2])

    def with_flat(self, theta) -> "FfnnModel":
        h, d1 = self.w1.shape
        theta = np.asarray(theta, dtype=float)
        return FfnnModel(
            theta[: h * d1].reshape(h, d1),
            theta[h * d1 :],
            self.in_mean,
            self.in_scale,
            self.out_mean,
            self.out_scale,
        )

    def standardize(self, stats) -> np.ndarray:
        x = np.asarray(stats, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim} inputs, got {x.shape[1]}")
        return (x - self.in_mean) / self.in_scale

    def predict(self, stats) -> np.ndarray:
        """Vectorized forward pass over the rows of ``stats``."""
        x = self.standardize(stats)
        z = special.expit(x @ self.w1[:, :-1].T + self.w1[:, -1])
        return self.out_mean + self.out_scale * (z @ self.w2[:-1] + self.w2[-1])

    def to_dict(self) -> dict:
        return {
            "hidden_units": self.hidden_units,
            "input_dim": self.input_dim,
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_mean": float(self.out_mean),
            "out_scale": float(self.out_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FfnnModel":
        return cls(
            np.array(d["w1"], dtype=float),
            np.array(d["w2"], dtype=float),
            np.array(d["in_mean"], dtype=float),
            np.array(d["in_scale"], dtype=float),
            float(d["out_mean"]),
            float(d["out_scale"]),
        )


def ffnn_forward(model: FfnnModel, s) -> float:
    s = np.asarray(s, dtype=float)
    if s.ndim != 1:
        raise ShapeError("ffnn_forward takes a single input vector")
    return float(model.predict(s)[0])


def ffnn_loss_and_gradient(model: FfnnModel, stats, responses, weights, lam: float):
    """Weighted squared error plus ``lam * ||w||^2`` and its gradient.

    The gradient is with respect to ``model.flat()`` (w1 row-major, then w2).
    """
    x = model.standardize(stats)
    y = np.asarray(responses, dtype=float)
    w = np.asarray(weights, dtype=float)
    if y.shape != (x.shape[0],) or w.shape != y.shape:
        raise ShapeError("stats, responses and weights disagree in row count")
    w1, w2 = model.w1, model.w2
    a = x @ w1[:, :-1].T + w1[:, -1]
    z = special.expit(a)
    out = model.out_mean + model.out_scale * (z @ w2[:-1] + w2[-1])
    resid = y - out
    theta = model.flat()
    loss = float(np.dot(w, resid * resid) + lam * np.dot(theta, theta))

    d_out = -2.0 * w * resid * model.out_scale
    g_w2 = np.empty_like(w2)
    g_w2[:-1] = z.T @ d_out
    g_w2[-1] = d_out.sum()
    d_a = np.outer(d_out, w2[:-1]) * z * (1.0 - z)
    g_w1 = np.empty_like(w1)
    g_w1[:, :-1] = d_a.T @ x
    g_w1[:, -1] = d_a.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_w2]) + 2.0 * lam * theta
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    H: int = 4
    lam: float = 0.001
    max_iterations: int = 100
    gradient_tolerance: float = 1e-4
    restarts: int = 5

    def __post_init__(self):
        if self.H < 1 or self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("H, max_iterations and restarts must be positive")
        if self.lam < 0 or not self.gradient_tolerance > 0:
            raise ValueError("lambda must be >= 0 and gradient_tolerance > 0")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "lambda": self.lam,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "restarts": self.restarts,
        }


def init_weights(h: int, d: int, gen: np.random.Generator) -> np.ndarray:
    w1 = gen.uniform(-0.5, 0.5, size=(h, d + 1)) / np.sqrt(d + 1)
    w2 = gen.uniform(-0.5, 0.5, size=h + 1) / np.sqrt(h + 1)
    return np.concatenate([w1.ravel(), w2])


def _minimize(template: FfnnModel, x, y, w, config: TrainConfig, theta0):
    def fun(theta):
        return ffnn_loss_and_gradient(template.with_flat(theta), x, y, w, config.lam)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            fun,
            theta0,
            jac=True,
            method="BFGS",
            options={
                "gtol": config.gradient_tolerance,
                "maxiter": config.max_iterations,
                "norm": 2,
            },
        )
    return res


def train_net(stats, responses, weights, config: TrainConfig, rng, init=None) -> FfnnModel:
    """Fit a net by BFGS from ``config.restarts`` random starts; keep the best.

    Inputs and the response are standardized with their weighted mean and
    standard deviation, and the weights are rescaled to average 1 over the
    positively weighted rows; the decay penalty applies on that scale.
    ``init`` overrides the random starting point (a flat weight vector) and
    forces a single restart.
    """
    x = np.asarray(stats, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(responses, dtype=float)
    w = np.asarray(weights, dtype=float)
    m, d = x.shape
    if y.shape != (m,) or w.shape != (m,):
        raise ShapeError("stats, responses and weights disagree in row count")

    n_weights = config.H * (d + 1) + config.H + 1
    if m < n_weights / 2:
        log.warning("training a %d-weight net on only %d rows", n_weights, m)

    pos = w > 0
    if not pos.any():
        raise ShapeError("no positively weighted rows to train on")
    # kernel weights are defined up to a constant; fix it so decay means the same thing
    w = w * (pos.sum() / w.sum())

    in_mean, in_scale = weighted_mean_std(x, w)
    in_scale = np.where(in_scale > 0, in_scale, 1.0)
    out_mean, out_scale = weighted_mean_std(y, w)
    out_scale = float(out_scale) if out_scale > 0 else 1.0
    y_std = (y - out_mean) / out_scale

    template = FfnnModel(
        np.zeros((config.H, d + 1)), np.zeros(config.H + 1), in_mean, in_scale, 0.0, 1.0
    )
    gen = as_generator(rng)
    starts = [np.asarray(init, dtype=float)] if init is not None else [
        init_weights(config.H, d, gen) for _ in range(config.restarts)
    ]

    best = None
    info = []
    for theta0 in starts:
        loss0, _ = ffnn_loss_and_gradient(template.with_flat(theta0), x, y_std, w, config.lam)
        res = _minimize(template, x, y_std, w, config, theta0)
        final = float(res.fun)
        ok = np.isfinite(final) and np.all(np.isfinite(res.x))
        info.append(
            {"initial_loss": loss0, "final_loss": final, "iterations": int(res.nit), "finite": bool(ok)}
        )
        if ok and (best is None or final < best[0]):
            best = (final, res.x)
    if best is None:
        raise TrainingDivergenceError(f"all {len(starts)} restarts produced non-finite losses")

    model = template.with_flat(best[1])
    model.out_mean = float(out_mean)
    model.out_scale = out_scale
    model.fit_info = info
    return model


@dataclass
class MeanVarNets:
    mean_net: FfnnModel
    logvar_net: FfnnModel
    transform: ResponseTransform = field(default_factory=ResponseTransform.identity)

    def mean(self, stats) -> np.ndarray:
        return self.mean_net.predict(stats)

    def sigma(self, stats) -> np.ndarray:
        return np.exp(0.5 * self.logvar_net.predict(stats))

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_net": self.mean_net.to_dict(),
                "logvar_net": self.logvar_net.to_dict(),
                "transform": self.transform.to_dict(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MeanVarNets":
        d = json.loads(text)
        return cls(
            FfnnModel.from_dict(d["mean_net"]),
            FfnnModel.from_dict(d["logvar_net"]),
            ResponseTransform.from_dict(d["transform"]),
        )


def log_squared_residuals(resid, floor: float = RESIDUAL_FLOOR) -> np.ndarray:
    r2 = np.square(np.asarray(resid, dtype=float))
    return np.log(np.maximum(r2, floor * floor))


def fit_mean_var(
    stats,
    responses,
    weights,
    config: TrainConfig,
    rng,
    transform: ResponseTransform | None = None,
) -> MeanVarNets:
    """Fit the conditional mean, then the conditional log-variance from its residuals.

    ``responses`` are expected on the already transformed scale; ``transform``
    is only recorded for serialization.
    """
    if not isinstance(rng, Rng):
        rng = Rng(int(as_generator(rng).integers(2**63)))
    mean_net = train_net(stats, responses, weights, config, rng.derive(0))
    resid = np.asarray(responses, dtype=float) - mean_net.predict(stats)
    logvar_net = train_net(stats, log_squared_residuals(resid), weights, config, rng.derive(1))
    return MeanVarNets(mean_net, logvar_net, transform or ResponseTransform.identity())
