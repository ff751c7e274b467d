"""Command-line entry point: fit, simulate, correlate and bench subcommands.

All single-result commands print one JSON document on stdout carrying the
toolkit version, the effective seed and the effective configuration, so
every run is auditable and reproducible. Files are written atomically.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from typing import Sequence

import numpy as np

from . import __version__, bench, detector, flowmodel, simulator
from .errors import FlowCorrError, MonotonicityError, ParseError

SEED_ENV_VAR = "FLOWCORR_SEED"

# Defaults mirror the low-jitter stepping-stone profile the toolkit ships with.
DEFAULT_SIGMA = 0.004
DEFAULT_ALPHA = 0.86
DEFAULT_XM = 0.01
DEFAULT_GAMMA = 0.075
DEFAULT_RHO_GRID = "0:0.5:0.001"
DEFAULT_MERGE_WINDOW = 0.01


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_trace(path: str) -> flowmodel.FlowTrace:
    """Read a "timestamps v1" file: one ascending decimal per line, '#' comments.

    Raises:
        ParseError / MonotonicityError: with the offending line number.
    """
    values: list[float] = []
    last = -math.inf
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                value = float(text)
            except ValueError:
                raise ParseError(lineno, f"not a decimal timestamp: {text!r}") from None
            if value < 0:
                raise ParseError(lineno, "timestamps must be non-negative")
            if value <= last:
                raise MonotonicityError(lineno)
            values.append(value)
            last = value
    if len(values) < 2:
        raise ParseError(max(len(values), 1), "need at least 2 timestamps")
    return flowmodel.FlowTrace(np.array(values))


def read_delays(path: str) -> flowmodel.DelayTrace:
    """Read a "delays v1" file: `period=<seconds>` header then one delay per line."""
    period = None
    values: list[float] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if period is None:
                if not text.startswith("period="):
                    raise ParseError(lineno, "expected 'period=<seconds>' header")
                try:
                    period = float(text.split("=", 1)[1])
                except ValueError:
                    raise ParseError(lineno, "invalid period value") from None
                if period <= 0:
                    raise ParseError(lineno, "period must be positive")
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise ParseError(lineno, f"not a decimal delay: {text!r}") from None
    if period is None:
        raise ParseError(1, "missing 'period=<seconds>' header")
    if len(values) < 2:
        raise ParseError(1, "need at least 2 delay samples")
    return flowmodel.DelayTrace(np.array(values), period)


def _atomic_write(path: str, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".flowcorr-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: flowmodel.FlowTrace, path: str) -> None:
    """Write a canonical "timestamps v1" file (9 fractional digits)."""
    _atomic_write(path, "".join(f"{t:.9f}\n" for t in trace.timestamps))


def read_values(path: str) -> np.ndarray:
    """Read a plain sample file: one decimal per line, '#' comments."""
    values: list[float] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise ParseError(lineno, f"not a decimal value: {text!r}") from None
    if not values:
        raise ParseError(1, "no values in file")
    return np.array(values)


# ---------------------------------------------------------------------------
# Spec-string parsers (shared by flags and plan files)
# ---------------------------------------------------------------------------


def _parse_source(text: str, merge_window: float) -> simulator.FlowSource:
    kind, _, rest = text.partition(":")
    if kind == "pareto":
        try:
            alpha, x_m = (float(v) for v in rest.split(":"))
        except ValueError:
            raise ValueError(f"bad source spec {text!r}; want pareto:<alpha>:<xm>") from None
        return simulator.ParetoSource(alpha, x_m, merge_window)
    if kind == "replay":
        trace_ipds = read_values(rest)
        return simulator.ReplaySource(tuple(trace_ipds), merge_window)
    raise ValueError(f"unknown source kind {kind!r}")


def _parse_channel(text: str) -> simulator.ChannelSpec:
    kind, _, rest = text.partition(":")
    if kind == "iid":
        try:
            family, sigma, mean = rest.split(":")
            spec = flowmodel.DistSpec(family, {"mu": 0.0, "sigma": float(sigma)})
            return simulator.IidChannel(spec, float(mean))
        except ValueError as exc:
            raise ValueError(f"bad channel spec {text!r}: {exc}") from None
    if kind == "trace":
        return simulator.TraceChannel(read_delays(rest))
    raise ValueError(f"unknown channel kind {kind!r}")


def _parse_attack(text: str, cfg: detector.DetectorConfig | None) -> simulator.AttackSpec:
    if text in simulator.ATTACK_PRESETS:
        return simulator.attack_preset(text, cfg)
    chaff, subflows, delay = 0.0, 1, None
    for part in text.split(","):
        key, _, value = part.partition("=")
        if key == "chaff":
            chaff = float(value)
        elif key == "subflows":
            subflows = int(value)
        elif key == "delay":
            mode, _, amount = value.partition(":")
            if mode == "uniform":
                delay = simulator.UniformDelay(float(amount))
            elif mode == "adversarial":
                if cfg is None:
                    raise ValueError("adversarial delay needs detector parameters")
                delay = simulator.AdversarialDelay(float(amount), cfg)
            else:
                raise ValueError(f"unknown delay mode {mode!r}")
        else:
            raise ValueError(f"unknown attack key {key!r}")
    return simulator.AttackSpec(chaff_ratio=chaff, subflows=subflows, delay=delay)


def _parse_watermark(text: str) -> simulator.WatermarkSpec | None:
    if text == "none":
        return None
    try:
        w_max, seed = text.split(":")
        return simulator.WatermarkSpec(float(w_max), int(seed))
    except ValueError:
        raise ValueError(f"bad watermark spec {text!r}; want <wmax>:<seed>") from None


def _parse_grid(text: str) -> detector.SyncGrid | None:
    if text == "none":
        return None
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"bad grid spec {text!r}; want lo:hi:step") from None
    return detector.SyncGrid(lo, hi, step)


def _detector_config(
    jitter_family: str,
    sigma: float,
    alpha: float,
    x_m: float,
    gamma: float,
    p_nl: float,
    p_m: float | None,
    subflows: int,
    a_max: float,
    log_eta: float,
) -> detector.DetectorConfig:
    jitter = flowmodel.DistSpec(jitter_family, {"mu": 0.0, "sigma": sigma})
    miss = detector.default_miss_probability(jitter, gamma) if p_m is None else p_m
    loss = detector.LossModel(p_nl=p_nl, p_m=miss, subflows=subflows)
    return detector.DetectorConfig(
        jitter=jitter,
        ipd_model=flowmodel.DistSpec.pareto(alpha, x_m),
        log_eta=log_eta,
        loss=loss,
        attack_bound=a_max,
    )


def _flatten(payload: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for key in sorted(payload):
        value = payload[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, f"{name}."))
        else:
            rows.append((name, value))
    return rows


def _emit(payload: dict, fmt: str = "json") -> None:
    if fmt == "csv":
        print("key,value")
        for name, value in _flatten(payload):
            print(f"{name},{value}")
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _audit(seed: int | None, config: dict) -> dict:
    return {"version": __version__, "seed": seed, "config": config}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_fit(args) -> int:
    data = read_values(args.data)
    robust = args.family in flowmodel.PDV_FAMILIES
    estimator = args.estimator or ("robust" if robust else "mle")
    if estimator == "robust":
        spec = flowmodel.fit_robust(data, args.family)
    else:
        spec = flowmodel.fit_mle(data, args.family, x_m=args.xm_fixed)
    edges = flowmodel.equal_mass_edges(data, math.ceil(math.sqrt(data.size)))
    score = flowmodel.jsd_sqrt(
        flowmodel.histogram_from_data(data, edges),
        flowmodel.histogram_from_model(spec, edges),
    )
    payload = {
        "family": spec.family,
        "params": spec.params,
        "jsd_sqrt": score,
        **spec.params,
        **_audit(None, {"data": args.data, "estimator": estimator}),
    }
    _emit(payload, args.format)
    return 0


def _cmd_simulate(args) -> int:
    seed = args.seed
    rng = np.random.default_rng(seed)
    source = _parse_source(args.source, args.merge_window)
    flow = simulator.generate_flow(source, args.length, rng)
    watermark = _parse_watermark(args.watermark)
    if watermark is not None:
        flow = simulator.embed_watermark(flow, watermark)
    if args.creator_out:
        write_trace(flow, args.creator_out)
    attack = _parse_attack(args.attack, _default_detector_for_attack(args))
    flow = simulator.apply_attack_pipeline(flow, attack, rng)
    channel = _parse_channel(args.channel)
    flow = simulator.apply_channel(flow, channel, rng)
    write_trace(flow, args.out)
    config = {
        "source": args.source,
        "length": args.length,
        "channel": args.channel,
        "attack": args.attack,
        "watermark": args.watermark,
        "out": args.out,
        "creator_out": args.creator_out,
    }
    _emit({"packets": len(flow), **_audit(seed, config)})
    return 0


def _default_detector_for_attack(args) -> detector.DetectorConfig:
    return _detector_config(
        "cauchy", DEFAULT_SIGMA, DEFAULT_ALPHA, DEFAULT_XM, DEFAULT_GAMMA,
        0.0, None, 1, 0.0, 0.0,
    )


def _cmd_correlate(args) -> int:
    creator = read_trace(args.creator)
    observed = read_trace(args.detector)
    cfg = _detector_config(
        args.jitter, args.sigma, args.alpha, args.xm, args.gamma,
        args.pnl, args.pm, args.subflows, args.amax, args.log_eta,
    )
    if args.merge_window > 0:
        creator = flowmodel.merge_trace(creator, args.merge_window)
        observed = flowmodel.merge_trace(observed, args.merge_window)
    grid = _parse_grid(args.rho_grid)
    if grid is None:
        raise ValueError("correlate needs a --rho-grid lo:hi:step")
    rho, verdict = detector.synchronize(creator, observed, cfg, grid, gamma=args.gamma)
    matched = detector.match_packets(
        creator, observed, detector.MatchConfig(rho=rho, gamma=args.gamma)
    )
    config = {
        "jitter": args.jitter, "sigma": args.sigma, "alpha": args.alpha,
        "xm": args.xm, "gamma": args.gamma, "rho_grid": args.rho_grid,
        "amax": args.amax, "pnl": args.pnl, "subflows": args.subflows,
        "log_eta": args.log_eta, "merge_window": args.merge_window,
    }
    _emit(
        {
            "log_lambda": verdict.log_lambda,
            "log_eta": verdict.log_eta,
            "decision": verdict.decision,
            "rho_star": rho,
            "matched": len(matched.pairs),
            **_audit(None, config),
        },
        args.format,
    )
    return 0


# --- bench plan files -------------------------------------------------------

_PLAN_DEFAULTS = {
    "trials": "1000",
    "flow_length": "20",
    "master_seed": "0",
    "source": "pareto:0.86:0.01",
    "merge_window": str(DEFAULT_MERGE_WINDOW),
    "channel": f"iid:cauchy:{DEFAULT_SIGMA}:0.0631",
    "attack": "none",
    "watermark": "none",
    "jitter": f"cauchy:{DEFAULT_SIGMA}",
    "alpha": str(DEFAULT_ALPHA),
    "xm": str(DEFAULT_XM),
    "gamma": str(DEFAULT_GAMMA),
    "pnl": "0.0",
    "pm": "auto",
    "subflows_assumed": "1",
    "amax": "0.0",
    "log_eta": "0.0",
    "sync": "0:0.2:0.002",
}


def read_plan(path: str) -> bench.ExperimentPlan:
    """Parse a flat key=value plan file into an ExperimentPlan."""
    raw = dict(_PLAN_DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ParseError(lineno, f"expected 'key = value', got {text!r}")
            if key not in raw:
                raise ParseError(lineno, f"unknown plan key {key!r}")
            raw[key] = value
    jitter_family, _, jitter_sigma = raw["jitter"].partition(":")
    cfg = _detector_config(
        jitter_family,
        float(jitter_sigma),
        float(raw["alpha"]),
        float(raw["xm"]),
        float(raw["gamma"]),
        float(raw["pnl"]),
        None if raw["pm"] == "auto" else float(raw["pm"]),
        int(raw["subflows_assumed"]),
        float(raw["amax"]),
        float(raw["log_eta"]),
    )
    return bench.ExperimentPlan(
        trials=int(raw["trials"]),
        flow_length=int(raw["flow_length"]),
        source=_parse_source(raw["source"], float(raw["merge_window"])),
        channel=_parse_channel(raw["channel"]),
        detector=cfg,
        attack=_parse_attack(raw["attack"], cfg),
        match=detector.MatchConfig(rho=0.0, gamma=float(raw["gamma"])),
        sync_grid=_parse_grid(raw["sync"]),
        watermark=_parse_watermark(raw["watermark"]),
        master_seed=int(raw["master_seed"]),
    )


def _cmd_bench(args) -> int:
    plan = read_plan(args.plan)
    scores = bench.run_experiment(plan)
    curve = bench.roc(scores)
    os.makedirs(args.out, exist_ok=True)

    roc_lines = ["p_f,p_d"] + [f"{pf:.10g},{pd:.10g}" for pf, pd in curve.points]
    _atomic_write(os.path.join(args.out, "roc.csv"), "\n".join(roc_lines) + "\n")

    score_lines = ["trial,h1_score,h0_score,rho_h1,rho_h0,m_h1,m_h0"]
    for idx, s in enumerate(scores):
        score_lines.append(
            f"{idx},{s.h1_score:.10g},{s.h0_score:.10g},"
            f"{s.rho_h1:.10g},{s.rho_h0:.10g},{s.m_h1},{s.m_h0}"
        )
    _atomic_write(os.path.join(args.out, "scores.csv"), "\n".join(score_lines) + "\n")

    n1 = len(scores)
    h0_failures = sum(1 for s in scores if not math.isfinite(s.h0_score))
    h1_failures = sum(1 for s in scores if not math.isfinite(s.h1_score))
    n0 = n1 - h0_failures
    pd_table = {}
    for target in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5):
        try:
            p_d, log_eta = bench.pd_at_pf(scores, target)
            pd_table[f"{target:g}"] = {"p_d": p_d, "log_eta": log_eta}
        except FlowCorrError:
            pd_table[f"{target:g}"] = None
    summary = {
        "auc": curve.auc,
        "auc_std_err": bench.auc_std_err(curve.auc, n1, max(n0, 1)),
        "pd_at_pf": pd_table,
        "failures": {"h1": h1_failures, "h0_excluded": h0_failures},
        "trials": plan.trials,
        **_audit(plan.master_seed, {"plan": os.path.abspath(args.plan)}),
    }
    _atomic_write(
        os.path.join(args.out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True)
    )
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcorr", description="timing-based flow correlation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a distribution family to a sample file")
    p_fit.add_argument("--family", required=True, choices=flowmodel.FAMILIES)
    p_fit.add_argument("--data", required=True, help="sample file, one value per line")
    p_fit.add_argument("--estimator", choices=["robust", "mle"], default=None)
    p_fit.add_argument("--xm-fixed", type=float, default=None,
                       help="pin the pareto lower bound instead of min(data)")
    p_fit.add_argument("--format", choices=["json", "csv"], default="json")
    p_fit.set_defaults(func=_cmd_fit)

    p_sim = sub.add_parser("simulate", help="generate a flow through a channel")
    p_sim.add_argument("--source", default="pareto:0.86:0.01")
    p_sim.add_argument("--length", type=int, default=21)
    p_sim.add_argument("--channel", default=f"iid:cauchy:{DEFAULT_SIGMA}:0.0631")
    p_sim.add_argument("--attack", default="none")
    p_sim.add_argument("--watermark", default="none")
    p_sim.add_argument("--merge-window", type=float, default=DEFAULT_MERGE_WINDOW)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--creator-out", default=None,
                       help="also write the pre-channel flow for correlation demos")
    p_sim.set_defaults(func=_cmd_simulate)

    p_cor = sub.add_parser("correlate", help="score two trace files for linkage")
    p_cor.add_argument("--creator", required=True)
    p_cor.add_argument("--detector", required=True)
    p_cor.add_argument("--jitter", choices=["cauchy", "laplace"], default="cauchy")
    p_cor.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p_cor.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p_cor.add_argument("--xm", type=float, default=DEFAULT_XM)
    p_cor.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p_cor.add_argument("--rho-grid", default=DEFAULT_RHO_GRID)
    p_cor.add_argument("--amax", type=float, default=0.0)
    p_cor.add_argument("--pnl", type=float, default=0.0)
    p_cor.add_argument("--pm", type=float, default=None)
    p_cor.add_argument("--subflows", type=int, default=1)
    p_cor.add_argument("--log-eta", type=float, default=0.0)
    p_cor.add_argument("--merge-window", type=float, default=DEFAULT_MERGE_WINDOW)
    p_cor.add_argument("--format", choices=["json", "csv"], default="json")
    p_cor.set_defaults(func=_cmd_correlate)

    p_bench = sub.add_parser("bench", help="run a Monte-Carlo plan file")
    p_bench.add_argument("--plan", required=True)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=_cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments and dispatch; exit 2 on usage errors, 1 on runtime errors."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        env = os.environ.get(SEED_ENV_VAR)
        args.seed = int(env) if env else int(np.random.SeedSequence().entropy % 2**32)
    try:
        return args.func(args)
    except (FlowCorrError, ValueError, OSError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "version": __version__}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
