"""Timing data types, candidate distribution families, fitting and divergences.

The toolkit models two kinds of timing data: packet-delay variation (PDV,
the difference of consecutive one-way delays) and inter-packet delays (IPD).
PDV candidates are real-supported, sharply peaked and heavy tailed; IPD
candidates live on the positive axis. Location/scale families are fitted
robustly (median / MAD), positive families by maximum likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .errors import (
    ConvergenceFailure,
    DegenerateData,
    EmptyFlow,
    InvalidSupport,
    NonPositiveData,
    SupportMismatch,
)

__all__ = [
    "PDV_FAMILIES",
    "IPD_FAMILIES",
    "FAMILIES",
    "FlowTrace",
    "IpdSequence",
    "DelayTrace",
    "DistSpec",
    "Histogram",
    "merge_trace",
    "to_ipds",
    "pdf",
    "log_pdf",
    "cdf",
    "sample",
    "fit_robust",
    "fit_mle",
    "kld",
    "jsd_sqrt",
    "goodness_table",
    "equal_mass_edges",
    "histogram_from_data",
    "histogram_from_model",
]

#: Real-supported families used for packet-delay variation.
PDV_FAMILIES = ("cauchy", "gumbel", "laplace", "logistic", "normal")
#: Positive-supported families used for inter-packet delays.
IPD_FAMILIES = ("exponential", "pareto", "lognormal", "loglogistic", "weibull")
FAMILIES = PDV_FAMILIES + IPD_FAMILIES

_PARAM_NAMES: dict[str, tuple[str, ...]] = {
    "cauchy": ("mu", "sigma"),
    "gumbel": ("mu", "sigma"),
    "laplace": ("mu", "sigma"),
    "logistic": ("mu", "sigma"),
    "normal": ("mu", "sigma"),
    "exponential": ("lambda",),
    "pareto": ("alpha", "x_m"),
    "lognormal": ("mu", "sigma_sq"),
    "loglogistic": ("alpha", "beta"),
    "weibull": ("weibull_shape", "beta"),
}
_POSITIVE_PARAMS = frozenset(
    {"sigma", "lambda", "alpha", "x_m", "sigma_sq", "beta", "weibull_shape"}
)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr = np.atleast_1d(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FlowTrace:
    """Absolute packet timestamps (seconds) observed at one vantage point.

    Timestamps must be non-negative and strictly increasing, and a trace
    needs at least two packets so that it yields at least one IPD.
    """

    timestamps: np.ndarray
    label: str = ""

    def __post_init__(self):
        ts = _frozen_array(self.timestamps)
        if ts.ndim != 1 or ts.size < 2:
            raise EmptyFlow(f"need at least 2 packets, got {ts.size}")
        if ts[0] < 0:
            raise ValueError("timestamps must be non-negative")
        if not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])


@dataclass(frozen=True)
class IpdSequence:
    """Consecutive timestamp differences of a flow (seconds, all positive)."""

    ipds: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.ipds)
        if arr.ndim != 1 or arr.size < 1:
            raise EmptyFlow("need at least 1 IPD")
        if not np.all(arr > 0):
            raise ValueError("IPDs must be positive")
        object.__setattr__(self, "ipds", arr)

    def __len__(self) -> int:
        return int(self.ipds.size)


@dataclass(frozen=True)
class DelayTrace:
    """One-way network delay sampled on a regular grid.

    `samples[k]` is the delay at time `k * sample_period`; delays between
    grid points are obtained by linear interpolation.
    """

    samples: np.ndarray
    sample_period: float = 0.05

    def __post_init__(self):
        arr = _frozen_array(self.samples)
        if arr.size < 2:
            raise ValueError("need at least 2 delay samples")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        object.__setattr__(self, "samples", arr)

    @property
    def duration(self) -> float:
        return float((self.samples.size - 1) * self.sample_period)


@dataclass(frozen=True)
class DistSpec:
    """A distribution family tag plus its named parameters.

    The parameter names are fixed per family (`mu`/`sigma` for the
    location-scale families, `lambda` for exponential, `alpha`/`x_m` for
    pareto, `mu`/`sigma_sq` for lognormal, `alpha`/`beta` for loglogistic
    and `weibull_shape`/`beta` for weibull).
    """

    family: str
    params: Mapping[str, float]

    def __post_init__(self):
        family = self.family.lower()
        if family not in _PARAM_NAMES:
            raise ValueError(f"unknown family {self.family!r}")
        expected = _PARAM_NAMES[family]
        got = tuple(sorted(self.params))
        if got != tuple(sorted(expected)):
            raise ValueError(f"{family} needs params {expected}, got {got}")
        params = {}
        for name in expected:
            value = float(self.params[name])
            if not math.isfinite(value):
                raise ValueError(f"{family}.{name} must be finite")
            if name in _POSITIVE_PARAMS and value <= 0:
                raise ValueError(f"{family}.{name} must be positive, got {value}")
            params[name] = value
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "params", params)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    # convenience constructors -------------------------------------------------
    @classmethod
    def cauchy(cls, mu: float, sigma: float) -> "DistSpec":
        return cls("cauchy", {"mu": mu, "sigma": sigma})

    @classmethod
    def gumbel(cls, mu: float, sigma: float) -> "DistSpec":
        return cls("gumbel", {"mu": mu, "sigma": sigma})

    @classmethod
    def laplace(cls, mu: float, sigma: float) -> "DistSpec":
        return cls("laplace", {"mu": mu, "sigma": sigma})

    @classmethod
    def logistic(cls, mu: float, sigma: float) -> "DistSpec":
        return cls("logistic", {"mu": mu, "sigma": sigma})

    @classmethod
    def normal(cls, mu: float, sigma: float) -> "DistSpec":
        return cls("normal", {"mu": mu, "sigma": sigma})

    @classmethod
    def exponential(cls, rate: float) -> "DistSpec":
        return cls("exponential", {"lambda": rate})

    @classmethod
    def pareto(cls, alpha: float, x_m: float) -> "DistSpec":
        return cls("pareto", {"alpha": alpha, "x_m": x_m})

    @classmethod
    def lognormal(cls, mu: float, sigma_sq: float) -> "DistSpec":
        return cls("lognormal", {"mu": mu, "sigma_sq": sigma_sq})

    @classmethod
    def loglogistic(cls, alpha: float, beta: float) -> "DistSpec":
        return cls("loglogistic", {"alpha": alpha, "beta": beta})

    @classmethod
    def weibull(cls, shape: float, beta: float) -> "DistSpec":
        return cls("weibull", {"weibull_shape": shape, "beta": beta})


@dataclass(frozen=True)
class Histogram:
    """A discrete probability mass vector over contiguous bins."""

    bin_edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        edges = _frozen_array(self.bin_edges)
        masses = _frozen_array(self.masses)
        if edges.size < 2 or not np.all(np.diff(edges) > 0):
            raise ValueError("bin_edges must be increasing with >= 2 entries")
        if masses.size != edges.size - 1:
            raise ValueError("need len(masses) == len(bin_edges) - 1")
        if np.any(masses < 0):
            raise ValueError("masses must be non-negative")
        if abs(float(masses.sum()) - 1.0) > 1e-12:
            raise ValueError("masses must sum to 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "masses", masses)


# ---------------------------------------------------------------------------
# Trace operations
# ---------------------------------------------------------------------------


def merge_trace(trace: FlowTrace, merge_window: float) -> FlowTrace:
    """Coalesce packets closer than `merge_window`, keeping the first timestamp.

    Packets arriving within the window of the last kept packet are treated
    as fragments of the same logical packet.

    Raises:
        EmptyFlow: fewer than 2 packets survive.
    """
    if merge_window < 0:
        raise ValueError("merge_window must be >= 0")
    if merge_window == 0:
        return trace
    ts = trace.timestamps
    kept = [float(ts[0])]
    for t in ts[1:]:
        if t - kept[-1] >= merge_window:
            kept.append(float(t))
    if len(kept) < 2:
        raise EmptyFlow("fewer than 2 packets survive merging")
    return FlowTrace(np.array(kept), label=trace.label)


def to_ipds(trace: FlowTrace, merge_window: float = 0.0) -> IpdSequence:
    """Difference a trace into IPDs after merging sub-`merge_window` packets."""
    merged = merge_trace(trace, merge_window)
    return IpdSequence(np.diff(merged.timestamps))


# ---------------------------------------------------------------------------
# Densities, CDFs and samplers
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def _as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr, arr.ndim == 0


def _wrap(value: np.ndarray, scalar: bool):
    return float(value) if scalar else value


def pdf(spec: DistSpec, x) -> float | np.ndarray:
    """Probability density of `spec` at `x` (0 outside the support)."""
    arr, scalar = _as_array(x)
    p = spec.params
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if spec.family == "cauchy":
            z = (arr - p["mu"]) / p["sigma"]
            out = 1.0 / (math.pi * p["sigma"] * (1.0 + z * z))
        elif spec.family == "gumbel":
            z = (arr - p["mu"]) / p["sigma"]
            out = np.exp(-z - np.exp(-z)) / p["sigma"]
        elif spec.family == "laplace":
            z = np.abs(arr - p["mu"]) / p["sigma"]
            out = np.exp(-z) / (2.0 * p["sigma"])
        elif spec.family == "logistic":
            z = np.abs(arr - p["mu"]) / p["sigma"]
            e = np.exp(-z)
            out = e / (p["sigma"] * (1.0 + e) ** 2)
        elif spec.family == "normal":
            z = (arr - p["mu"]) / p["sigma"]
            out = np.exp(-0.5 * z * z) / (p["sigma"] * math.sqrt(2.0 * math.pi))
        elif spec.family == "exponential":
            lam = p["lambda"]
            out = np.where(arr >= 0, lam * np.exp(-lam * arr), 0.0)
        elif spec.family == "pareto":
            a, xm = p["alpha"], p["x_m"]
            out = np.where(arr >= xm, a * xm**a * arr ** (-a - 1.0), 0.0)
        elif spec.family == "lognormal":
            mu, s2 = p["mu"], p["sigma_sq"]
            pos = arr > 0
            lx = np.log(np.where(pos, arr, 1.0))
            dens = np.exp(-((lx - mu) ** 2) / (2.0 * s2)) / (
                np.where(pos, arr, 1.0) * math.sqrt(2.0 * math.pi * s2)
            )
            out = np.where(pos, dens, 0.0)
        elif spec.family == "loglogistic":
            a, b = p["alpha"], p["beta"]
            pos = arr > 0
            r = np.where(pos, arr, 1.0) / a
            dens = (b / a) * r ** (b - 1.0) / (1.0 + r**b) ** 2
            out = np.where(pos, dens, _boundary_value_positive_pdf(b, 1.0 / a, arr))
        elif spec.family == "weibull":
            g, b = p["weibull_shape"], p["beta"]
            pos = arr > 0
            xa = np.where(pos, arr, 1.0)
            dens = (g / b) * xa ** (g - 1.0) * np.exp(-(xa**g) / b)
            out = np.where(pos, dens, _boundary_value_positive_pdf(g, g / b, arr))
        else:  # pragma: no cover
            raise ValueError(spec.family)
    return _wrap(out, scalar)


def _boundary_value_positive_pdf(shape: float, coeff: float, arr: np.ndarray):
    """Density at x<=0 for the [0, inf)-supported power families.

    At x == 0 the density is 0, `coeff` or +inf depending on the shape;
    strictly negative x always gives 0.
    """
    at_zero = coeff if shape == 1.0 else (0.0 if shape > 1.0 else np.inf)
    return np.where(arr == 0, at_zero, 0.0)


def log_pdf(spec: DistSpec, x) -> float | np.ndarray:
    """Log-density of `spec` at `x`; -inf outside the support."""
    arr, scalar = _as_array(x)
    p = spec.params
    neg_inf = np.float64(-np.inf)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if spec.family == "cauchy":
            z = (arr - p["mu"]) / p["sigma"]
            out = -math.log(math.pi * p["sigma"]) - np.log1p(z * z)
        elif spec.family == "gumbel":
            z = (arr - p["mu"]) / p["sigma"]
            out = -math.log(p["sigma"]) - z - np.exp(-z)
        elif spec.family == "laplace":
            z = np.abs(arr - p["mu"]) / p["sigma"]
            out = -math.log(2.0 * p["sigma"]) - z
        elif spec.family == "logistic":
            z = np.abs(arr - p["mu"]) / p["sigma"]
            out = -math.log(p["sigma"]) - z - 2.0 * np.log1p(np.exp(-z))
        elif spec.family == "normal":
            z = (arr - p["mu"]) / p["sigma"]
            out = -math.log(p["sigma"]) - 0.5 * _LOG_2PI - 0.5 * z * z
        elif spec.family == "exponential":
            lam = p["lambda"]
            out = np.where(arr >= 0, math.log(lam) - lam * arr, neg_inf)
        elif spec.family == "pareto":
            a, xm = p["alpha"], p["x_m"]
            ok = arr >= xm
            out = np.where(
                ok,
                math.log(a) + a * math.log(xm) - (a + 1.0) * np.log(np.where(ok, arr, 1.0)),
                neg_inf,
            )
        elif spec.family == "lognormal":
            mu, s2 = p["mu"], p["sigma_sq"]
            pos = arr > 0
            lx = np.log(np.where(pos, arr, 1.0))
            val = -lx - 0.5 * math.log(2.0 * math.pi * s2) - (lx - mu) ** 2 / (2.0 * s2)
            out = np.where(pos, val, neg_inf)
        elif spec.family == "loglogistic":
            a, b = p["alpha"], p["beta"]
            pos = arr > 0
            lr = np.log(np.where(pos, arr, 1.0) / a)
            val = math.log(b / a) + (b - 1.0) * lr - 2.0 * np.logaddexp(0.0, b * lr)
            out = np.where(pos, val, _log_boundary(b, 1.0 / a, arr))
        elif spec.family == "weibull":
            g, b = p["weibull_shape"], p["beta"]
            pos = arr > 0
            xa = np.where(pos, arr, 1.0)
            val = math.log(g / b) + (g - 1.0) * np.log(xa) - xa**g / b
            out = np.where(pos, val, _log_boundary(g, g / b, arr))
        else:  # pragma: no cover
            raise ValueError(spec.family)
    return _wrap(out, scalar)


def _log_boundary(shape: float, coeff: float, arr: np.ndarray):
    at_zero = math.log(coeff) if shape == 1.0 else (-np.inf if shape > 1.0 else np.inf)
    return np.where(arr == 0, at_zero, -np.inf)


def cdf(spec: DistSpec, x) -> float | np.ndarray:
    """Cumulative distribution function of `spec` at `x`."""
    arr, scalar = _as_array(x)
    p = spec.params
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if spec.family == "cauchy":
            out = 0.5 + np.arctan((arr - p["mu"]) / p["sigma"]) / math.pi
        elif spec.family == "gumbel":
            out = np.exp(-np.exp(-(arr - p["mu"]) / p["sigma"]))
        elif spec.family == "laplace":
            z = (arr - p["mu"]) / p["sigma"]
            out = np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))
        elif spec.family == "logistic":
            z = (arr - p["mu"]) / p["sigma"]
            out = special.expit(z)
        elif spec.family == "normal":
            out = special.ndtr((arr - p["mu"]) / p["sigma"])
        elif spec.family == "exponential":
            out = np.where(arr >= 0, -np.expm1(-p["lambda"] * arr), 0.0)
        elif spec.family == "pareto":
            a, xm = p["alpha"], p["x_m"]
            out = np.where(arr >= xm, 1.0 - (xm / np.maximum(arr, xm)) ** a, 0.0)
        elif spec.family == "lognormal":
            pos = arr > 0
            lx = np.log(np.where(pos, arr, 1.0))
            out = np.where(pos, special.ndtr((lx - p["mu"]) / math.sqrt(p["sigma_sq"])), 0.0)
        elif spec.family == "loglogistic":
            a, b = p["alpha"], p["beta"]
            pos = arr > 0
            lr = np.log(np.where(pos, arr, 1.0) / a)
            out = np.where(pos, special.expit(b * lr), 0.0)
        elif spec.family == "weibull":
            g, b = p["weibull_shape"], p["beta"]
            pos = arr > 0
            xa = np.where(pos, arr, 1.0)
            out = np.where(pos, -np.expm1(-(xa**g) / b), 0.0)
        else:  # pragma: no cover
            raise ValueError(spec.family)
    return _wrap(out, scalar)


def sample(spec: DistSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `size` i.i.d. values from `spec` using the caller's generator."""
    p = spec.params
    if spec.family == "cauchy":
        return p["mu"] + p["sigma"] * rng.standard_cauchy(size)
    if spec.family == "gumbel":
        return rng.gumbel(p["mu"], p["sigma"], size)
    if spec.family == "laplace":
        return rng.laplace(p["mu"], p["sigma"], size)
    if spec.family == "logistic":
        return rng.logistic(p["mu"], p["sigma"], size)
    if spec.family == "normal":
        return rng.normal(p["mu"], p["sigma"], size)
    if spec.family == "exponential":
        return rng.exponential(1.0 / p["lambda"], size)
    if spec.family == "pareto":
        return p["x_m"] * (1.0 + rng.pareto(p["alpha"], size))
    if spec.family == "lognormal":
        return rng.lognormal(p["mu"], math.sqrt(p["sigma_sq"]), size)
    if spec.family == "loglogistic":
        return np.exp(rng.logistic(math.log(p["alpha"]), 1.0 / p["beta"], size))
    if spec.family == "weibull":
        return p["beta"] ** (1.0 / p["weibull_shape"]) * rng.weibull(p["weibull_shape"], size)
    raise ValueError(spec.family)  # pragma: no cover


# ---------------------------------------------------------------------------
# Robust (median/MAD) estimation for the real-supported families
# ---------------------------------------------------------------------------


def _gumbel_mad_constant() -> float:
    """MAD of the standard gumbel law, solved from its CDF."""
    med = -math.log(math.log(2.0))

    def coverage(c):
        return (
            math.exp(-math.exp(-(med + c))) - math.exp(-math.exp(-(med - c))) - 0.5
        )

    return float(optimize.brentq(coverage, 1e-6, 5.0, xtol=1e-14))


#: 0.75-quantile of each standardized family: MAD(X) = scale * constant.
_MAD_CONSTANT = {
    "cauchy": 1.0,
    "laplace": math.log(2.0),
    "logistic": math.log(3.0),
    "normal": float(special.ndtri(0.75)),
    "gumbel": _gumbel_mad_constant(),
}
#: Median of the standard gumbel law (location offset of the median).
_GUMBEL_STD_MEDIAN = -math.log(math.log(2.0))


def fit_robust(data: Sequence[float], family: str) -> DistSpec:
    """Median/MAD fit for the real-supported families.

    The location estimate is the sample median; the scale is the median
    absolute deviation rescaled by the family's consistency constant so it
    estimates the family's own scale parameter. For the asymmetric gumbel
    family the location parameter is recovered from the median through the
    standard-gumbel median offset.

    Raises:
        DegenerateData: sample too small or MAD == 0.
    """
    family = family.lower()
    if family not in _MAD_CONSTANT:
        raise ValueError(f"robust fitting supports {sorted(_MAD_CONSTANT)}, not {family!r}")
    arr = np.asarray(data, dtype=np.float64)
    if arr.size < 2:
        raise DegenerateData("need at least 2 observations")
    med = float(np.median(arr))
    mad = float(np.median(np.abs(arr - med)))
    if mad == 0.0:
        raise DegenerateData("median absolute deviation is zero")
    sigma = mad / _MAD_CONSTANT[family]
    mu = med if family != "gumbel" else med - sigma * _GUMBEL_STD_MEDIAN
    return DistSpec(family, {"mu": mu, "sigma": sigma})


# ---------------------------------------------------------------------------
# Maximum-likelihood estimation for the positive-supported families
# ---------------------------------------------------------------------------

_MLE_GRAD_TOL = 1e-11
_MLE_MAX_ITER = 200


def fit_mle(data: Sequence[float], family: str, x_m: float | None = None) -> DistSpec:
    """Maximum-likelihood fit for the positive-supported families.

    `x_m` optionally pins the pareto lower bound instead of the min(data)
    maximum-likelihood choice. The loglogistic and weibull shapes are found
    by a damped Newton iteration on the profile likelihood with a bisection
    fallback (per-observation gradient below 1e-11 at convergence).

    Raises:
        NonPositiveData: any observation <= 0.
        DegenerateData: no spread to fit.
        ConvergenceFailure: Newton/bisection iteration cap exceeded.
    """
    family = family.lower()
    if family not in IPD_FAMILIES:
        raise ValueError(f"MLE fitting supports {sorted(IPD_FAMILIES)}, not {family!r}")
    arr = np.asarray(data, dtype=np.float64)
    if arr.size < 2:
        raise DegenerateData("need at least 2 observations")
    if np.any(arr <= 0):
        raise NonPositiveData("all observations must be positive")

    if family == "exponential":
        return DistSpec.exponential(1.0 / float(np.mean(arr)))

    if family == "pareto":
        xm = float(np.min(arr)) if x_m is None else float(x_m)
        if x_m is not None and xm > float(np.min(arr)):
            raise InvalidSupport("fixed x_m exceeds the smallest observation")
        denom = float(np.sum(np.log(arr / xm)))
        if denom <= 0:
            raise DegenerateData("all observations equal the support bound")
        return DistSpec.pareto(arr.size / denom, xm)

    logs = np.log(arr)
    if family == "lognormal":
        mu = float(np.mean(logs))
        s2 = float(np.mean((logs - mu) ** 2))
        if s2 == 0.0:
            raise DegenerateData("zero variance in log-space")
        return DistSpec.lognormal(mu, s2)

    if float(np.ptp(logs)) == 0.0:
        raise DegenerateData("all observations equal")

    if family == "weibull":
        shape, scale = _fit_weibull(arr, logs)
        return DistSpec.weibull(shape, scale)

    alpha, beta = _fit_loglogistic(logs)
    return DistSpec.loglogistic(alpha, beta)


def _safeguarded_newton(g, x0, lo, hi, what: str):
    """Damped Newton (numeric derivative) with a bisection fallback on [lo, hi].

    `g` must change sign over [lo, hi]; returns the root of g to
    _MLE_GRAD_TOL, keeping every iterate inside the shrinking bracket.
    """
    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0.0:
        return lo
    if g_hi == 0.0:
        return hi
    if g_lo * g_hi > 0:
        raise ConvergenceFailure(f"{what}: gradient does not change sign on the bracket")
    x = min(max(x0, lo), hi)
    for _ in range(_MLE_MAX_ITER):
        gx = g(x)
        if abs(gx) < _MLE_GRAD_TOL:
            return x
        if gx * g_lo > 0:
            lo = x
        else:
            hi = x
        h = x * 1e-7 + 1e-12
        dg = (g(x + h) - g(x - h)) / (2.0 * h)
        step = gx / dg if dg != 0 else np.inf
        cand = x - step
        if not (lo < cand < hi) or not math.isfinite(cand):
            cand = 0.5 * (lo + hi)  # bisection fallback
        x = cand
    raise ConvergenceFailure(f"{what}: no convergence in {_MLE_MAX_ITER} iterations")


def _fit_weibull(arr: np.ndarray, logs: np.ndarray) -> tuple[float, float]:
    # Scale data to [0, 1] so x**shape cannot overflow; the shape equation
    # is scale-invariant and beta is mapped back afterwards.
    c = float(np.max(arr))
    y = arr / c
    ly = np.log(y)
    mean_log = float(np.mean(ly))

    def g(shape):
        w = y**shape
        a = float(np.sum(w))
        return 1.0 / shape + mean_log - float(np.sum(w * ly)) / a

    # As shape->0+ g>0, as shape->inf g -> mean_log - max(ly) < 0.
    lo, hi = 1e-3, 8.0
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            raise ConvergenceFailure("weibull: cannot bracket the shape root")
    sd_log = float(np.std(logs))
    x0 = (math.pi / math.sqrt(6.0)) / sd_log if sd_log > 0 else 1.0
    shape = _safeguarded_newton(g, x0, lo, hi, "weibull")
    beta = float(np.mean(y**shape)) * c**shape
    return shape, beta


def _fit_loglogistic(logs: np.ndarray) -> tuple[float, float]:
    # In log-space the model is a logistic location-scale family; profile
    # the scale, solving the location score exactly at each step.
    y = logs
    lo_mu, hi_mu = float(np.min(y)) - 1.0, float(np.max(y)) + 1.0

    def mu_hat(s):
        def score(mu):
            return float(np.mean(special.expit((y - mu) / s))) - 0.5

        return optimize.brentq(score, lo_mu, hi_mu, xtol=1e-13)

    def g(s):
        z = (y - mu_hat(s)) / s
        return float(np.mean(z * (2.0 * special.expit(z) - 1.0))) - 1.0

    sd = float(np.std(y))
    s0 = math.sqrt(3.0) * sd / math.pi
    lo, hi = s0 / 64.0, s0 * 8.0
    while g(lo) < 0:
        lo /= 4.0
        if lo < 1e-12:
            raise ConvergenceFailure("loglogistic: cannot bracket the scale root")
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e9:
            raise ConvergenceFailure("loglogistic: cannot bracket the scale root")
    s = _safeguarded_newton(g, s0, lo, hi, "loglogistic")
    return math.exp(mu_hat(s)), 1.0 / s


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def kld(p: Histogram, q: Histogram) -> float:
    """Kullback-Leibler divergence D(p || q) in nats over shared bins.

    Raises:
        SupportMismatch: p has mass in a bin where q has none.
    """
    if not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share bin edges")
    pm, qm = p.masses, q.masses
    active = pm > 0
    if np.any(qm[active] == 0):
        raise SupportMismatch("first histogram has mass where second has none")
    value = float(np.sum(pm[active] * np.log(pm[active] / qm[active])))
    return max(value, 0.0)


def jsd_sqrt(p: Histogram, q: Histogram) -> float:
    """Square root of the Jensen-Shannon divergence (a metric, in nats)."""
    if not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share bin edges")
    mid = 0.5 * (p.masses + q.masses)
    pm, qm = p.masses, q.masses

    def _half(masses):
        active = masses > 0
        return float(np.sum(masses[active] * np.log(masses[active] / mid[active])))

    return math.sqrt(max(0.5 * (_half(pm) + _half(qm)), 0.0))


def equal_mass_edges(data: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin edges at sample quantiles so each bin holds ~equal mass."""
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.unique(np.quantile(data, qs))
    if edges.size < 3:
        raise DegenerateData("data does not span enough distinct values to bin")
    return edges


def histogram_from_data(
    data: np.ndarray, edges: np.ndarray, smoothing: float = 0.5
) -> Histogram:
    """Histogram of `data` over `edges` with additive count smoothing."""
    counts, _ = np.histogram(data, bins=edges)
    masses = counts + smoothing
    return Histogram(edges, masses / masses.sum())


def histogram_from_model(spec: DistSpec, edges: np.ndarray) -> Histogram:
    """Model probability mass per bin; tail mass folds into the outer bins."""
    cum = np.asarray(cdf(spec, edges), dtype=np.float64)
    masses = np.diff(cum)
    masses = masses.copy()
    masses[0] += cum[0]
    masses[-1] += 1.0 - cum[-1]
    masses = np.clip(masses, 0.0, None)
    total = masses.sum()
    if total <= 0:
        raise DegenerateData("model has no mass on the binned range")
    return Histogram(edges, masses / total)


def goodness_table(
    data: Sequence[float], families: Iterable[str], estimator: str
) -> dict[str, float]:
    """Fit each family to `data` and score it by sqrt-JSD against the sample.

    `estimator` selects "robust" (median/MAD) or "mle" fitting. Lower scores
    are better. Families whose fit fails are omitted from the result rather
    than aborting the sweep.

    Raises:
        DegenerateData: fewer than 100 observations (histogram comparison
            is not meaningful below that).
    """
    if estimator not in ("robust", "mle"):
        raise ValueError("estimator must be 'robust' or 'mle'")
    arr = np.asarray(data, dtype=np.float64)
    families = list(families)
    if not families:
        return {}
    if arr.size < 100:
        raise DegenerateData("need at least 100 observations to score fits")
    n_bins = math.ceil(math.sqrt(arr.size))
    edges = equal_mass_edges(arr, n_bins)
    observed = histogram_from_data(arr, edges)
    fit = fit_robust if estimator == "robust" else fit_mle
    table: dict[str, float] = {}
    for family in families:
        try:
            spec = fit(arr, family)
            table[family] = jsd_sqrt(observed, histogram_from_model(spec, edges))
        except (DegenerateData, NonPositiveData, ConvergenceFailure, ValueError):
            continue
    return table
