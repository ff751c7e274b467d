"""Likelihood-ratio flow linkage tests and nearest-match packet pairing.

Three tests of increasing robustness share one per-packet building block,
the ratio between the jitter density of the IPD residual and a heavy-tail
model of natural IPDs:

* `basic_llr` assumes a one-to-one packet correspondence,
* `robust_llr` scores an injective matching, pricing unmatched packets by a
  loss probability,
* `attack_llr` additionally smears the jitter density by a bounded uniform
  delay that an active adversary may have added.

`synchronize` recovers the unknown clock/path offset between the two
vantage points by an exhaustive grid search that maximizes the score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .errors import (
    EmptyGrid,
    InvalidSupport,
    LengthMismatch,
    UnsupportedJitterFamily,
)
from .flowmodel import DistSpec, FlowTrace, IpdSequence, cdf, log_pdf

try:  # the greedy pairing loop is the hot spot of the grid search
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

__all__ = [
    "DetectorConfig",
    "LossModel",
    "MatchConfig",
    "MatchResult",
    "LlrVerdict",
    "SyncGrid",
    "loss_probability",
    "default_miss_probability",
    "smeared_jitter_pdf",
    "basic_llr",
    "robust_llr",
    "attack_llr",
    "match_packets",
    "synchronize",
]

DEFAULT_GAMMA = 0.075


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossModel:
    """Ingredients of the probability that a source packet stays unmatched.

    `p_nl` is network loss, `p_m` the chance a delivered packet is wrongly
    declared lost by the matcher, and `subflows` the number of paths the
    flow may have been split across (the observed link carries 1/subflows
    of the packets).
    """

    p_nl: float = 0.0
    p_m: float = 0.0
    subflows: int = 1

    def __post_init__(self):
        if not (0.0 <= self.p_nl < 1.0 and 0.0 <= self.p_m < 1.0):
            raise ValueError("loss probabilities must lie in [0, 1)")
        if int(self.subflows) != self.subflows or self.subflows < 1:
            raise ValueError("subflows must be an integer >= 1")
        object.__setattr__(self, "subflows", int(self.subflows))


def loss_probability(loss: LossModel) -> float:
    """Overall probability that a source packet has no match at the detector."""
    s = loss.subflows
    return (s - 1.0 + loss.p_nl + loss.p_m - loss.p_nl * loss.p_m) / s


def default_miss_probability(jitter: DistSpec, gamma: float) -> float:
    """Chance that a true match lands outside the +-gamma window."""
    return float(2.0 * cdf(jitter, -gamma))


@dataclass(frozen=True)
class DetectorConfig:
    """Everything the tests need: jitter model, IPD model, threshold, losses.

    The decision threshold is kept in the log domain (`log_eta`): calibrated
    thresholds for long flows routinely exceed the linear-domain float range.
    """

    jitter: DistSpec
    ipd_model: DistSpec
    log_eta: float = 0.0
    loss: LossModel = field(default_factory=LossModel)
    attack_bound: float = 0.0

    def __post_init__(self):
        if self.jitter.family not in ("cauchy", "laplace"):
            raise ValueError("jitter family must be cauchy or laplace")
        if self.jitter["mu"] != 0.0:
            raise ValueError("jitter location must be 0")
        if self.ipd_model.family != "pareto":
            raise ValueError("IPD model must be pareto")
        if self.attack_bound < 0:
            raise ValueError("attack_bound must be >= 0")


@dataclass(frozen=True)
class MatchConfig:
    """Shift `rho` applied to detector timestamps and loss window `gamma`."""

    rho: float = 0.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class SyncGrid:
    """Inclusive exhaustive-search grid over the synchronization shift."""

    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not (self.lo < self.hi) or self.step <= 0:
            raise EmptyGrid("need lo < hi and step > 0")

    def points(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 0.5 * self.step, self.step)


@dataclass(frozen=True)
class MatchResult:
    """Injective, order-preserving packet pairing plus the survivors.

    `pairs` is strictly increasing in both coordinates. The survivor traces
    hold the matched timestamps of each side in pairing order (equal
    lengths), or None when fewer than 2 packets matched.
    """

    pairs: tuple[tuple[int, int], ...]
    creator_survivors: FlowTrace | None
    detector_survivors: FlowTrace | None
    lost_count: int


@dataclass(frozen=True)
class LlrVerdict:
    """Log score, log threshold and the implied accept/reject decision."""

    log_lambda: float
    log_eta: float
    decision: str

    def __post_init__(self):
        expected = "H1" if self.log_lambda > self.log_eta else "H0"
        if self.decision != expected:
            raise ValueError("decision inconsistent with scores")

    @classmethod
    def from_score(cls, log_lambda: float, log_eta: float) -> "LlrVerdict":
        return cls(log_lambda, log_eta, "H1" if log_lambda > log_eta else "H0")


# ---------------------------------------------------------------------------
# Per-packet score kernels
# ---------------------------------------------------------------------------


def _log_ratio_terms(c: np.ndarray, d: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """log of the per-packet ratio jitter_pdf(d - c) / natural_ipd_pdf(d).

    Raises InvalidSupport when any detector IPD lies below the heavy-tail
    lower bound, where the natural-traffic density is zero and the ratio is
    undefined.
    """
    alpha = cfg.ipd_model["alpha"]
    x_m = cfg.ipd_model["x_m"]
    if np.any(d < x_m):
        raise InvalidSupport("detector IPD below the IPD model support bound")
    return (
        np.asarray(log_pdf(cfg.jitter, d - c), dtype=np.float64)
        + (alpha + 1.0) * np.log(d)
        - math.log(alpha)
        - alpha * math.log(x_m)
    )


def smeared_jitter_pdf(j, a_max: float, sigma: float):
    """Density of heavy-tail jitter plus an unknown uniform delay in [-a_max, a_max].

    Closed form for the cauchy family; evaluated via arctan2 so that the
    far-tail difference of arctangents does not cancel.
    """
    if a_max <= 0:
        raise ValueError("a_max must be positive")
    arr = np.asarray(j, dtype=np.float64)
    num = np.arctan2(2.0 * a_max / sigma, 1.0 + (arr - a_max) * (arr + a_max) / sigma**2)
    out = num / (2.0 * a_max * math.pi)
    return float(out) if np.ndim(j) == 0 else out


def _log_attack_ratio_terms(c: np.ndarray, d: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    alpha = cfg.ipd_model["alpha"]
    x_m = cfg.ipd_model["x_m"]
    if np.any(d < x_m):
        raise InvalidSupport("detector IPD below the IPD model support bound")
    smeared = smeared_jitter_pdf(d - c, cfg.attack_bound, cfg.jitter["sigma"])
    with np.errstate(divide="ignore"):
        log_f = np.log(smeared)
    return log_f + (alpha + 1.0) * np.log(d) - math.log(alpha) - alpha * math.log(x_m)


def _loss_weighted_sum(terms: np.ndarray, n_lost: int, p_l: float) -> float:
    """log of p_l**n_lost * prod(p_l + (1 - p_l) * exp(terms)), stably."""
    if p_l == 0.0:
        total = float(np.sum(terms))
        return total if n_lost == 0 else -math.inf
    log_pl = math.log(p_l)
    log_keep = math.log1p(-p_l)
    factors = np.logaddexp(log_pl, log_keep + terms)
    return n_lost * log_pl + float(np.sum(factors))


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------


def basic_llr(c: IpdSequence, d: IpdSequence, cfg: DetectorConfig) -> LlrVerdict:
    """One-to-one likelihood-ratio test on aligned IPD sequences."""
    if len(c) != len(d):
        raise LengthMismatch(f"IPD lengths differ: {len(c)} vs {len(d)}")
    terms = _log_ratio_terms(c.ipds, d.ipds, cfg)
    return LlrVerdict.from_score(float(np.sum(terms)), cfg.log_eta)


def robust_llr(match: MatchResult, original_length: int, cfg: DetectorConfig) -> LlrVerdict:
    """Loss-aware test over the matched survivors of a length-L flow.

    Unmatched source packets contribute a loss-probability factor; each
    survivor contributes a mixture of the loss probability and the
    per-packet ratio, so the score degrades gracefully as packets vanish.
    """
    c, d, n_survivor_ipds = _survivor_ipds(match)
    if n_survivor_ipds < 1:
        raise LengthMismatch("need at least 2 matched packets to form survivor IPDs")
    if n_survivor_ipds > original_length:
        raise LengthMismatch("more survivor IPDs than the original length")
    terms = _log_ratio_terms(c, d, cfg)
    p_l = loss_probability(cfg.loss)
    score = _loss_weighted_sum(terms, original_length - n_survivor_ipds, p_l)
    return LlrVerdict.from_score(score, cfg.log_eta)


def attack_llr(match: MatchResult, original_length: int, cfg: DetectorConfig) -> LlrVerdict:
    """Loss-aware test hardened against bounded adversarial delays.

    Only the cauchy jitter family has a closed-form smeared density; asking
    for laplace raises UnsupportedJitterFamily.
    """
    if cfg.attack_bound <= 0:
        raise ValueError("attack_llr requires attack_bound > 0")
    if cfg.jitter.family != "cauchy":
        raise UnsupportedJitterFamily("bounded-delay test is derived for cauchy jitter only")
    c, d, n_survivor_ipds = _survivor_ipds(match)
    if n_survivor_ipds < 1:
        raise LengthMismatch("need at least 2 matched packets to form survivor IPDs")
    if n_survivor_ipds > original_length:
        raise LengthMismatch("more survivor IPDs than the original length")
    terms = _log_attack_ratio_terms(c, d, cfg)
    p_l = loss_probability(cfg.loss)
    score = _loss_weighted_sum(terms, original_length - n_survivor_ipds, p_l)
    return LlrVerdict.from_score(score, cfg.log_eta)


def _survivor_ipds(match: MatchResult) -> tuple[np.ndarray, np.ndarray, int]:
    if match.creator_survivors is None or match.detector_survivors is None:
        return np.empty(0), np.empty(0), 0
    c = np.diff(match.creator_survivors.timestamps)
    d = np.diff(match.detector_survivors.timestamps)
    return c, d, int(c.size)


# ---------------------------------------------------------------------------
# Packet matching
# ---------------------------------------------------------------------------


def _greedy_accept(ii: np.ndarray, jj: np.ndarray, n_i: int, n_j: int):
    """Accept candidate pairs in the given order, keeping the pairing monotone.

    A candidate is taken when both endpoints are free and it does not cross
    an already-accepted pair, so the result is injective and strictly
    increasing in both coordinates.
    """
    match_of = np.full(n_i, -1, dtype=np.int64)
    used_j = np.zeros(n_j, dtype=np.bool_)
    taken = 0
    for t in range(ii.shape[0]):
        i = ii[t]
        j = jj[t]
        if match_of[i] >= 0 or used_j[j]:
            continue
        ok = True
        for a in range(i - 1, -1, -1):  # nearest matched creator below i
            if match_of[a] >= 0:
                if match_of[a] > j:
                    ok = False
                break
        if ok:
            for b in range(i + 1, n_i):  # nearest matched creator above i
                if match_of[b] >= 0:
                    if match_of[b] < j:
                        ok = False
                    break
        if ok:
            match_of[i] = j
            used_j[j] = True
            taken += 1
    out_i = np.empty(taken, dtype=np.int64)
    out_j = np.empty(taken, dtype=np.int64)
    k = 0
    for i in range(n_i):
        if match_of[i] >= 0:
            out_i[k] = i
            out_j[k] = match_of[i]
            k += 1
    return out_i, out_j


if _HAVE_NUMBA:
    _greedy_accept = _njit(cache=True)(_greedy_accept)


def _match_arrays(
    x: np.ndarray, y: np.ndarray, rho: float, gamma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Monotone injective pairing of x against y - rho; distances below gamma.

    All feasible (i, j) candidates are ranked by |x_i - (y_j - rho)| with
    (i, j) as the deterministic tie-breaker, then accepted greedily while
    both endpoints are unused and the pairing stays order-preserving. When
    no two source packets contend for the same arrival this reduces to the
    plain nearest-neighbour rule.
    """
    shifted = y - rho
    lo = np.searchsorted(shifted, x - gamma, side="right")
    hi = np.searchsorted(shifted, x + gamma, side="left")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    ii = np.repeat(np.arange(x.size), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    jj = np.arange(total) - np.repeat(starts, counts) + np.repeat(lo, counts)
    dist = np.abs(x[ii] - shifted[jj])
    order = np.lexsort((jj, ii, dist))
    return _greedy_accept(ii[order], jj[order], x.size, y.size)


def match_packets(creator: FlowTrace, detector: FlowTrace, mc: MatchConfig) -> MatchResult:
    """Pair each source packet with its nearest arrival under the shift `rho`.

    Packets without any arrival within `gamma` count as lost. An empty
    pairing is a valid result; downstream tests reject it themselves.
    """
    sel_i, sel_j = _match_arrays(creator.timestamps, detector.timestamps, mc.rho, mc.gamma)
    pairs = tuple((int(i), int(j)) for i, j in zip(sel_i, sel_j))
    c_surv = d_surv = None
    if sel_i.size >= 2:
        c_surv = FlowTrace(creator.timestamps[sel_i], label=creator.label)
        d_surv = FlowTrace(detector.timestamps[sel_j], label=detector.label)
    return MatchResult(
        pairs=pairs,
        creator_survivors=c_surv,
        detector_survivors=d_surv,
        lost_count=len(creator) - sel_i.size,
    )


# ---------------------------------------------------------------------------
# Self-synchronization
# ---------------------------------------------------------------------------


def _score_at_shift(
    x: np.ndarray,
    y: np.ndarray,
    rho: float,
    gamma: float,
    cfg: DetectorConfig,
    p_l: float,
) -> tuple[float, int, float]:
    """(log score, matched count, total match distance) at one candidate shift.

    The score is -inf when no usable matching exists. The total distance
    sum(|x_i - (y_j - rho)|) over accepted pairs serves as a tie-breaker in
    the grid search: the score depends on the matched set only, so every
    shift yielding the same matching scores identically, and the
    best-aligned shift inside that plateau is the meaningful optimum.
    """
    sel_i, sel_j = _match_arrays(x, y, rho, gamma)
    m_plus_1 = sel_i.size
    if m_plus_1 < 2:
        return -math.inf, m_plus_1, math.inf
    dist = float(np.sum(np.abs(x[sel_i] - (y[sel_j] - rho))))
    c = np.diff(x[sel_i])
    d = np.diff(y[sel_j])  # monotone pairing keeps these positive
    original_length = x.size - 1
    try:
        if cfg.attack_bound > 0:
            terms = _log_attack_ratio_terms(c, d, cfg)
        else:
            terms = _log_ratio_terms(c, d, cfg)
    except InvalidSupport:
        return -math.inf, m_plus_1, dist
    n_lost = original_length - (m_plus_1 - 1)
    return _loss_weighted_sum(terms, n_lost, p_l), m_plus_1, dist


def _scan_grid_py(
    x: np.ndarray,
    y: np.ndarray,
    rhos: np.ndarray,
    gamma: float,
    alpha: float,
    x_m: float,
    sigma: float,
    jitter_is_cauchy: bool,
    a_max: float,
    p_l: float,
):
    """Score every candidate shift; returns (best index, best score, matched).

    One compiled pass over the grid: nearest-pair greedy matching, survivor
    IPDs and the loss-weighted score, with the same candidate ordering
    (distance, creator index, detector index) as `match_packets`. Grid
    points whose survivors dip below the IPD support bound score -inf.
    """
    nx = x.size
    ny = y.size
    cap = nx * ny
    cand_i = np.empty(cap, dtype=np.int64)
    cand_j = np.empty(cap, dtype=np.int64)
    cand_d = np.empty(cap, dtype=np.float64)
    match_of = np.empty(nx, dtype=np.int64)
    used_j = np.zeros(ny, dtype=np.bool_)
    xs = np.empty(min(nx, ny), dtype=np.float64)
    ys = np.empty(min(nx, ny), dtype=np.float64)

    log_norm = math.log(alpha) + alpha * math.log(x_m)
    if p_l > 0.0:
        log_pl = math.log(p_l)
        log_keep = math.log1p(-p_l)
    else:
        log_pl = -math.inf
        log_keep = 0.0

    best_idx = -1
    best_score = -math.inf
    best_m1 = 0
    best_dist = math.inf
    for r in range(rhos.size):
        rho = rhos[r]
        # enumerate feasible pairs with a sliding window (x and y are sorted)
        w = 0
        lo = 0
        for i in range(nx):
            target = x[i] + rho
            while lo < ny and y[lo] <= target - gamma:
                lo += 1
            j = lo
            while j < ny and y[j] < target + gamma:
                cand_i[w] = i
                cand_j[w] = j
                cand_d[w] = abs(x[i] - (y[j] - rho))
                j += 1
                w += 1
        if w < 2:
            continue
        order = np.argsort(cand_d[:w], kind="mergesort")  # stable: ties by (i, j)
        for i in range(nx):
            match_of[i] = -1
        for j in range(ny):
            used_j[j] = False
        m1 = 0
        for t in range(w):
            k = order[t]
            i = cand_i[k]
            j = cand_j[k]
            if match_of[i] >= 0 or used_j[j]:
                continue
            good = True
            for a in range(i - 1, -1, -1):  # refuse crossings: keep pairs monotone
                if match_of[a] >= 0:
                    if match_of[a] > j:
                        good = False
                    break
            if good:
                for b in range(i + 1, nx):
                    if match_of[b] >= 0:
                        if match_of[b] < j:
                            good = False
                        break
            if good:
                match_of[i] = j
                used_j[j] = True
                m1 += 1
        if m1 < 2:
            continue
        k = 0
        dist = 0.0
        for i in range(nx):
            if match_of[i] >= 0:
                xs[k] = x[i]
                ys[k] = y[match_of[i]]
                dist += abs(x[i] - (y[match_of[i]] - rho))
                k += 1
        score = 0.0
        ok = True
        for k in range(m1 - 1):
            d = ys[k + 1] - ys[k]
            if d < x_m:
                ok = False
                break
            c = xs[k + 1] - xs[k]
            jd = d - c
            if a_max > 0.0:
                num = math.atan2(
                    2.0 * a_max / sigma, 1.0 + (jd - a_max) * (jd + a_max) / (sigma * sigma)
                )
                log_f = math.log(num) - math.log(2.0 * a_max * math.pi)
            elif jitter_is_cauchy:
                z = jd / sigma
                log_f = -math.log(math.pi * sigma) - math.log1p(z * z)
            else:
                log_f = -math.log(2.0 * sigma) - abs(jd) / sigma
            term = log_f + (alpha + 1.0) * math.log(d) - log_norm
            if p_l > 0.0:
                v = log_keep + term
                if v > log_pl:
                    term = v + math.log1p(math.exp(log_pl - v))
                else:
                    term = log_pl + math.log1p(math.exp(v - log_pl))
            score += term
        if not ok:
            continue
        n_lost = (nx - 1) - (m1 - 1)
        if n_lost > 0:
            if p_l == 0.0:
                continue  # score is -inf
            score += n_lost * log_pl
        # score ties (same matched set) resolve by alignment, then smaller shift
        if score > best_score or (score == best_score and dist < best_dist):
            best_idx = r
            best_score = score
            best_m1 = m1
            best_dist = dist
    return best_idx, best_score, best_m1


if _HAVE_NUMBA:
    _scan_grid = _njit(cache=True)(_scan_grid_py)
else:  # pragma: no cover
    _scan_grid = _scan_grid_py


def _synchronize_full(
    creator: FlowTrace,
    detector: FlowTrace,
    cfg: DetectorConfig,
    search: SyncGrid,
    gamma: float,
) -> tuple[float, float, int]:
    """Exhaustive grid search; returns (rho*, best log score, matched count)."""
    grid = search.points()
    if grid.size == 0:
        raise EmptyGrid("synchronization grid is empty")
    if cfg.attack_bound > 0 and cfg.jitter.family != "cauchy":
        raise UnsupportedJitterFamily("bounded-delay test is derived for cauchy jitter only")
    best_idx, best_score, best_m1 = _scan_grid(
        creator.timestamps,
        detector.timestamps,
        grid,
        gamma,
        cfg.ipd_model["alpha"],
        cfg.ipd_model["x_m"],
        cfg.jitter["sigma"],
        cfg.jitter.family == "cauchy",
        cfg.attack_bound,
        loss_probability(cfg.loss),
    )
    if best_idx < 0:
        return float(grid[0]), -math.inf, 0
    return float(grid[best_idx]), float(best_score), int(best_m1)


def synchronize(
    creator: FlowTrace,
    detector: FlowTrace,
    cfg: DetectorConfig,
    search: SyncGrid,
    gamma: float = DEFAULT_GAMMA,
) -> tuple[float, LlrVerdict]:
    """Find the shift maximizing the loss-aware score over an inclusive grid.

    Uses the bounded-delay test when `cfg.attack_bound > 0`, the plain
    loss-aware test otherwise. Grid points where no usable matching exists
    score -inf; ties resolve toward the smaller shift.
    """
    rho, score, _ = _synchronize_full(creator, detector, cfg, search, gamma)
    return rho, LlrVerdict.from_score(score, cfg.log_eta)
