"""Random walks in degenerate dynamical random environments on the integer line."""

__version__ = "0.1.0"

from .env import (  # noqa: F401
    UNREACHED,
    EdgeTrajectory,
    EnvironmentWindow,
    ShiftView,
    conductance_at,
    cumulative_conductance,
    shift,
    unit_accumulation_time,
)
