"""Flow generation, delay channels, countermeasure attacks and watermarking.

Everything here is a pure function of (inputs, generator state): identical
seeds give bit-identical traces. Outputs are always valid flows; whenever a
transformation reorders packets the output is re-sorted and the reorder
count is logged, never silently dropped.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .detector import DetectorConfig
from .errors import EmptyFlow, NegativeDelay
from .flowmodel import DelayTrace, DistSpec, FlowTrace

log = logging.getLogger(__name__)

__all__ = [
    "ParetoSource",
    "ReplaySource",
    "FlowSource",
    "IidChannel",
    "TraceChannel",
    "ChannelSpec",
    "UniformDelay",
    "AdversarialDelay",
    "DelayAttack",
    "AttackSpec",
    "WatermarkSpec",
    "ATTACK_PRESETS",
    "attack_preset",
    "generate_flow",
    "apply_channel",
    "add_chaff",
    "split_flow",
    "delay_attack",
    "embed_watermark",
    "apply_attack_pipeline",
]


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoSource:
    """Synthetic source: i.i.d. heavy-tail IPDs bounded below by x_m."""

    alpha: float = 0.86
    x_m: float = 0.01
    merge_window: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0 or self.x_m <= 0:
            raise ValueError("alpha and x_m must be positive")
        if self.merge_window < 0:
            raise ValueError("merge_window must be >= 0")


@dataclass(frozen=True)
class ReplaySource:
    """Replay source: consecutive IPDs from a recorded list, used circularly.

    The starting offset is drawn at random unless `start_index` pins it.
    """

    ipds: tuple[float, ...]
    merge_window: float = 0.01
    start_index: int | None = None

    def __post_init__(self):
        ipds = tuple(float(v) for v in self.ipds)
        if not ipds:
            raise ValueError("replay list must be non-empty")
        if any(v <= 0 for v in ipds):
            raise ValueError("replay IPDs must be positive")
        if self.merge_window < 0:
            raise ValueError("merge_window must be >= 0")
        object.__setattr__(self, "ipds", ipds)


FlowSource = Union[ParetoSource, ReplaySource]


@dataclass(frozen=True)
class IidChannel:
    """Per-packet delays around `mean_delay` whose differences follow `jitter`.

    The per-packet noise is constructed so that consecutive-delay
    differences have exactly the configured jitter law: a half-scale cauchy
    for cauchy jitter (difference of two cauchys adds scales), a centered
    exponential for laplace jitter (difference of two exponentials is
    laplace).
    """

    jitter: DistSpec
    mean_delay: float

    def __post_init__(self):
        if self.jitter.family not in ("cauchy", "laplace"):
            raise ValueError("iid channel jitter must be cauchy or laplace")
        if self.jitter["mu"] != 0.0:
            raise ValueError("jitter location must be 0")
        if self.mean_delay < 0:
            raise ValueError("mean_delay must be >= 0")


@dataclass(frozen=True)
class TraceChannel:
    """Delays read from a recorded delay trace with linear interpolation."""

    delay: DelayTrace


ChannelSpec = Union[IidChannel, TraceChannel]


@dataclass(frozen=True)
class UniformDelay:
    """Each packet delayed by an independent uniform draw from [0, a_max]."""

    a_max: float

    def __post_init__(self):
        if self.a_max < 0:
            raise ValueError("a_max must be >= 0")


@dataclass(frozen=True)
class AdversarialDelay:
    """Delays picked per packet to suppress the loss-aware score.

    The adversary knows the flow it is perturbing and the detector
    configuration; each packet's delay is chosen greedily from a 1 ms grid
    on [0, a_max] to minimize that packet's per-IPD ratio.
    """

    a_max: float
    cfg: DetectorConfig
    grid_step: float = 0.001

    def __post_init__(self):
        if self.a_max < 0:
            raise ValueError("a_max must be >= 0")
        if self.grid_step <= 0:
            raise ValueError("grid_step must be positive")


DelayAttack = Union[UniformDelay, AdversarialDelay, None]


@dataclass(frozen=True)
class AttackSpec:
    """A countermeasure pipeline: bounded delays, chaff traffic, flow split."""

    chaff_ratio: float = 0.0
    subflows: int = 1
    delay: DelayAttack = None

    def __post_init__(self):
        if self.chaff_ratio < 0:
            raise ValueError("chaff_ratio must be >= 0")
        if int(self.subflows) != self.subflows or self.subflows < 1:
            raise ValueError("subflows must be an integer >= 1")
        object.__setattr__(self, "subflows", int(self.subflows))

    @property
    def is_identity(self) -> bool:
        no_delay = self.delay is None or self.delay.a_max == 0
        return self.chaff_ratio == 0 and self.subflows == 1 and no_delay


@dataclass(frozen=True)
class WatermarkSpec:
    """Keyed per-packet uniform delay in [0, w_max] (seconds)."""

    w_max: float
    seed: int

    def __post_init__(self):
        if self.w_max <= 0:
            raise ValueError("w_max must be positive")


# ---------------------------------------------------------------------------
# Generation and channels
# ---------------------------------------------------------------------------


def synthetic_delay_trace(
    mean: float,
    std: float,
    correlation: float,
    n_samples: int,
    rng: np.random.Generator,
    sample_period: float = 0.05,
) -> DelayTrace:
    """Stand-in for a measured one-way delay recording.

    Generates an AR(1) process on the sampling grid: `correlation` is the
    lag-one autocorrelation (real delay processes are strongly correlated,
    so consecutive packets see nearly the same delay), `std` the marginal
    standard deviation around `mean`.
    """
    if not (0.0 <= correlation < 1.0):
        raise ValueError("correlation must lie in [0, 1)")
    if std < 0 or mean < 0:
        raise ValueError("mean and std must be non-negative")
    innov = rng.standard_normal(n_samples) * std * math.sqrt(1.0 - correlation**2)
    x = np.empty(n_samples)
    x[0] = rng.standard_normal() * std
    for k in range(1, n_samples):
        x[k] = correlation * x[k - 1] + innov[k]
    return DelayTrace(mean + x, sample_period)


def generate_flow(src: FlowSource, length: int, rng: np.random.Generator) -> FlowTrace:
    """Generate a flow of `length` packets starting at time 0."""
    if length < 2:
        raise EmptyFlow("need at least 2 packets")
    n_ipds = length - 1
    if isinstance(src, ParetoSource):
        ipds = src.x_m * (1.0 + rng.pareto(src.alpha, n_ipds))
    else:
        pool = np.asarray(src.ipds)
        start = src.start_index if src.start_index is not None else int(rng.integers(pool.size))
        idx = (start + np.arange(n_ipds)) % pool.size
        ipds = pool[idx]
    ts = np.concatenate(([0.0], np.cumsum(ipds)))
    return FlowTrace(ts)


def _sorted_trace(raw: np.ndarray, label: str, what: str) -> FlowTrace:
    """Re-sort a perturbed timestamp vector, logging how many packets moved."""
    inversions = int(np.sum(np.diff(raw) < 0))
    if inversions:
        log.debug("%s reordered %d adjacent packet pairs; re-sorting", what, inversions)
        raw = np.sort(raw, kind="stable")
    return FlowTrace(raw, label=label)


def _interp_delays(trace: DelayTrace, times: np.ndarray, start_index: int) -> np.ndarray:
    """Linearly interpolated delays at `times`, read circularly from `start_index`."""
    pos = start_index + times / trace.sample_period
    n = trace.samples.size
    if np.any(pos > n - 1):
        log.warning("flow outlives the delay trace; wrapping around circularly")
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    s0 = trace.samples[base % n]
    s1 = trace.samples[(base + 1) % n]
    return s0 * (1.0 - frac) + s1 * frac


def apply_channel(flow: FlowTrace, ch: ChannelSpec, rng: np.random.Generator) -> FlowTrace:
    """Add per-packet network delays; re-sorts (and logs) if delays reorder.

    Raises:
        NegativeDelay: a recorded delay trace produced a negative delay.
    """
    n = len(flow)
    if isinstance(ch, IidChannel):
        sigma = ch.jitter["sigma"]
        if ch.jitter.family == "cauchy":
            noise = 0.5 * sigma * rng.standard_cauchy(n)
        else:
            noise = rng.exponential(sigma, n) - sigma
        delays = ch.mean_delay + noise
        truncated = int(np.sum(delays < 0))
        if truncated:
            log.debug("truncated %d negative sampled delays to 0", truncated)
            delays = np.maximum(delays, 0.0)
    else:
        start = int(rng.integers(ch.delay.samples.size))
        delays = _interp_delays(ch.delay, flow.timestamps - flow.timestamps[0], start)
        if np.any(delays < 0):
            raise NegativeDelay("delay trace produced a negative delay")
    return _sorted_trace(flow.timestamps + delays, flow.label, "channel")


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------


def add_chaff(flow: FlowTrace, ratio: float, rng: np.random.Generator) -> FlowTrace:
    """Insert cover packets as a Poisson process over the flow's span.

    The rate is `ratio` times the flow's own packet rate, so the expected
    number of insertions is ratio * len(flow).
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    if ratio == 0:
        return flow
    count = int(rng.poisson(ratio * len(flow)))
    if count == 0:
        return flow
    first, last = flow.timestamps[0], flow.timestamps[-1]
    chaff = rng.uniform(first, last, count)
    merged = np.sort(np.concatenate([flow.timestamps, chaff]), kind="stable")
    # exact float collisions are vanishingly rare but would break strictness
    keep = np.concatenate(([True], np.diff(merged) > 0))
    return FlowTrace(merged[keep], label=flow.label)


def split_flow(flow: FlowTrace, subflows: int, rng: np.random.Generator) -> FlowTrace:
    """Keep each packet with probability 1/subflows (one observed subflow).

    Raises:
        EmptyFlow: fewer than 2 packets survive the thinning.
    """
    if int(subflows) != subflows or subflows < 1:
        raise ValueError("subflows must be an integer >= 1")
    if subflows == 1:
        return flow
    keep = rng.random(len(flow)) < 1.0 / subflows
    if int(keep.sum()) < 2:
        raise EmptyFlow("fewer than 2 packets survive the split")
    return FlowTrace(flow.timestamps[keep], label=flow.label)


def _adversarial_delays(ts: np.ndarray, spec: AdversarialDelay) -> np.ndarray:
    """Greedy per-packet grid choice minimizing each IPD's score ratio.

    The first packet is left undelayed; packet k's delay is then chosen
    given packet k-1's, which makes the objective separable. This is a
    lower bound on the strength of a jointly optimizing adversary.
    """
    cfg = spec.cfg
    alpha = cfg.ipd_model["alpha"]
    x_m = cfg.ipd_model["x_m"]
    sigma = cfg.jitter["sigma"]
    grid = np.arange(0.0, spec.a_max + 0.5 * spec.grid_step, spec.grid_step)
    delays = np.zeros(ts.size)
    for k in range(1, ts.size):
        d = ts[k] + grid - (ts[k - 1] + delays[k - 1])
        c = ts[k] - ts[k - 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            log_r = np.where(
                d > 0,
                (alpha + 1.0) * np.log(np.maximum(d, 1e-300))
                - np.log1p(((d - c) / sigma) ** 2),
                np.inf,
            )
        delays[k] = grid[int(np.argmin(log_r))]
    return delays


def delay_attack(flow: FlowTrace, spec: DelayAttack, rng: np.random.Generator) -> FlowTrace:
    """Delay each packet by a bounded amount, uniformly or adversarially."""
    if spec is None or spec.a_max == 0:
        return flow
    if isinstance(spec, UniformDelay):
        delays = rng.uniform(0.0, spec.a_max, len(flow))
    else:
        delays = _adversarial_delays(flow.timestamps, spec)
    return _sorted_trace(flow.timestamps + delays, flow.label, "delay attack")


def embed_watermark(flow: FlowTrace, wm: WatermarkSpec) -> FlowTrace:
    """Delay each packet by a keyed uniform draw from [0, w_max].

    Deterministic given the spec's seed. The induced IPD perturbation is
    the difference of two independent uniforms, i.e. symmetric triangular
    on [-w_max, w_max].
    """
    rng = np.random.default_rng(wm.seed)
    delays = rng.uniform(0.0, wm.w_max, len(flow))
    return _sorted_trace(flow.timestamps + delays, flow.label, "watermark")


def apply_attack_pipeline(
    flow: FlowTrace, attack: AttackSpec | None, rng: np.random.Generator
) -> FlowTrace:
    """Run the full countermeasure chain: delay, then chaff, then split.

    Delays are applied first (the adversary perturbs its own forwarded
    packets), chaff is generated at the forwarding host afterwards, and
    splitting thins the merged stream.
    """
    if attack is None or attack.is_identity:
        return flow
    out = delay_attack(flow, attack.delay, rng)
    out = add_chaff(out, attack.chaff_ratio, rng)
    out = split_flow(out, attack.subflows, rng)
    return out


def _presets(cfg: DetectorConfig | None) -> dict[str, AttackSpec]:
    def adv(a_max):
        if cfg is None:
            raise ValueError("adversarial presets need a detector config")
        return AdversarialDelay(a_max, cfg)

    table = {
        "none": AttackSpec(),
        "attack1": AttackSpec(chaff_ratio=5.0),
        "attack2": AttackSpec(subflows=4),
        "attack3a": AttackSpec(delay=UniformDelay(0.05)),
        "attack4a": AttackSpec(chaff_ratio=5.0, delay=UniformDelay(0.05)),
        "attack5a": AttackSpec(chaff_ratio=5.0, subflows=2, delay=UniformDelay(0.05)),
    }
    if cfg is not None:
        table["attack3b"] = AttackSpec(delay=adv(0.05))
        table["attack4b"] = AttackSpec(chaff_ratio=5.0, delay=adv(0.05))
        table["attack5b"] = AttackSpec(chaff_ratio=5.0, subflows=2, delay=adv(0.05))
    return table


ATTACK_PRESETS = tuple(
    ["none", "attack1", "attack2", "attack3a", "attack3b", "attack4a", "attack4b",
     "attack5a", "attack5b"]
)


def attack_preset(name: str, cfg: DetectorConfig | None = None) -> AttackSpec:
    """Named countermeasure profiles; the *b variants need a detector config."""
    table = _presets(cfg)
    if name not in table:
        if name in ATTACK_PRESETS:
            raise ValueError(f"preset {name!r} needs a detector config")
        raise ValueError(f"unknown attack preset {name!r}")
    return table[name]
