"""questsim: a deterministic discrete-event model of a partitioning separation kernel."""

__version__ = "0.1.0"

from .engine import Simulation, run  # noqa: E402
from .scenario import builtin, load_scenario, validate  # noqa: E402
from .scheduler import aligned_service, rms_admission, window_check  # noqa: E402
from .trace import Trace, export, load_trace  # noqa: E402

__all__ = [
    "Simulation",
    "Trace",
    "aligned_service",
    "builtin",
    "export",
    "load_scenario",
    "load_trace",
    "rms_admission",
    "run",
    "validate",
    "window_check",
]
