"""plcsim: discrete-event simulator for a power-line ad-hoc LAN.

The medium is the mains wiring: a single collision domain whose noise is
location dependent. Nodes divide each AC cycle into 64 timeslots, sense which
slots are usable, reserve common usable slots for each exchange, and recover
corrupted packets through nearby machines that adopted a clean copy.
"""

__version__ = "0.1.0"

from .channel import (AsyncImpulseNoise, BackgroundNoise, Branch, ChannelParams,
                      DeliveryOutcome, PeriodicAsyncNoise, PeriodicSyncNoise,
                      Placement, Topology, attenuation_db)
from .clock import Phase, SimClock, instant_of, slot_duration
from .engine import Engine, RunResult, Trace, run
from .mac import ProtocolName, backoff_window, compute_required_slots
from .metrics import RunStats, fold, summarize
from .proximity import ProximityList
from .scenario import Scenario, ScenarioError, build_scenario, bundled_scenario, load_scenario
from .slotmap import SlotMask, common, popcount, sense_usable_slots

__all__ = [
    "AsyncImpulseNoise", "BackgroundNoise", "Branch", "ChannelParams",
    "DeliveryOutcome", "Engine", "PeriodicAsyncNoise", "PeriodicSyncNoise",
    "Phase", "Placement", "ProtocolName", "ProximityList", "RunResult", "RunStats",
    "Scenario", "ScenarioError", "SimClock", "SlotMask", "Topology", "Trace",
    "attenuation_db", "backoff_window", "build_scenario", "bundled_scenario",
    "common", "compute_required_slots", "fold", "instant_of", "load_scenario",
    "popcount", "run", "sense_usable_slots", "slot_duration", "summarize",
]
