import numpy as np
import pytest

from flowcorr import flowmodel as fm
from flowcorr.simulator import synthetic_delay_trace


def interactive_ipd_pool(n: int, seed: int) -> tuple[float, ...]:
    """Interactive-traffic-like IPD list: bursts at the 10 ms floor plus
    heavy-tailed pauses, for replay sources."""
    rng = np.random.default_rng(seed)
    ipds: list[float] = []
    burst = True
    while len(ipds) < n:
        if burst:
            run = int(rng.geometric(0.12))
            ipds.extend(0.010 + rng.exponential(0.0008, run))
        else:
            run = int(rng.geometric(0.5))
            ipds.extend(0.012 * (1.0 + rng.pareto(0.86, run)))
        burst = not burst
    return tuple(float(v) for v in ipds[:n])


@pytest.fixture(scope="session")
def stepping_stone_delay_trace() -> fm.DelayTrace:
    """Synthetic stand-in for a measured stepping-stone delay recording:
    mean 63.1 ms, marginal std 4 ms, strongly correlated at the 50 ms grid."""
    return synthetic_delay_trace(0.0631, 0.004, 0.98, 2**15, np.random.default_rng(2024))
