"""plantline: an event-driven control plane for line-based process plants.

Layers, bottom up: message bus, simulated device fleet, actuator
abstraction, group commands, resource interlock, singular operations,
automation routines, plus an event log with timing reports and a CLI
harness.
"""

__version__ = "0.1.0"

from .bus import Envelope, LoopbackBus, topic_matches
from .clock import Scheduler, SimClock, WallClock
from .config import PlantConfig, load, validate
from .events import EventLog, EventRecord
from .harness import Supervisor

__all__ = [
    "Envelope", "EventLog", "EventRecord", "LoopbackBus", "PlantConfig",
    "Scheduler", "SimClock", "Supervisor", "WallClock", "load",
    "topic_matches", "validate", "__version__",
]
