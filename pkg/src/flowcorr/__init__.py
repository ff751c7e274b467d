"""flowcorr: decide whether two packet flows are linked from timing alone.

The toolkit correlates inter-packet delays observed at two vantage points
with likelihood-ratio tests, survives chaff/splitting/bounded-delay
countermeasures through nearest-match pairing and loss-aware scoring, and
ships a seeded Monte-Carlo harness for ROC/AUC evaluation.
"""

__version__ = "0.1.0"

from . import bench, cli, detector, errors, flowmodel, simulator  # noqa: F401
from .flowmodel import (  # noqa: F401
    DelayTrace,
    DistSpec,
    FlowTrace,
    Histogram,
    IpdSequence,
)
