"""Scenario files: topology, noise, traffic and protocol knobs as JSON.

Loading fills every default and keeps the fully-expanded document around so
run artifacts can echo the exact configuration they were produced from.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources

from .channel import (AsyncImpulseNoise, BackgroundNoise, Branch, ChannelParams,
                      Injection, PeriodicAsyncNoise, PeriodicSyncNoise, Placement,
                      Topology)
from .clock import SLOTS_PER_CYCLE, SUPPORTED_AC_HZ, slot_duration
from .mac import ProtocolName

DEFAULT_SENSING_THRESHOLD_DBM = -60.0


class ScenarioError(ValueError):
    """Validation failure, carrying the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class TrafficFlow:
    src: int
    dst: int
    payload_bytes: int
    poisson_rate_per_s: float = 0.0
    schedule_cycles: tuple[int, ...] = ()
    start_cycle: int = 0
    interval_cycles: int = 0
    count: int = 0

    def arrivals(self, horizon_cycles: int, ac_hz: int, rng: random.Random):
        """Yield (cycle, slot) arrival instants within the horizon."""
        if self.poisson_rate_per_s > 0:
            slot_s = slot_duration(ac_hz)
            horizon_s = horizon_cycles / ac_hz
            t = 0.0
            while True:
                t += rng.expovariate(self.poisson_rate_per_s)
                if t >= horizon_s:
                    break
                abs_slot = int(t / slot_s)
                yield divmod(abs_slot, SLOTS_PER_CYCLE)
        for cycle in self.schedule_cycles:
            if cycle < horizon_cycles:
                yield (cycle, 0)
        if self.interval_cycles > 0 and self.count > 0:
            for i in range(self.count):
                cycle = self.start_cycle + i * self.interval_cycles
                if cycle < horizon_cycles:
                    yield (cycle, 0)


@dataclass
class Scenario:
    name: str
    ac_hz: int
    cycle_limit: int
    protocol: str
    topology: Topology
    noise_sources: list
    sensing_threshold_dbm: float
    traffic: list[TrafficFlow]
    channel_params: ChannelParams
    injections: list[Injection] = field(default_factory=list)
    echo: dict = field(default_factory=dict)

    def canonical_json(self) -> str:
        return json.dumps(self.echo, sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ScenarioError(path, message)


def _get(doc: dict, key: str, default, path: str, types):
    value = doc.get(key, default)
    if value is default and default is not None and key not in doc:
        return default
    _expect(isinstance(value, types), f"{path}.{key}",
            f"expected {types}, got {type(value).__name__}")
    return value


def build_scenario(doc: dict, name: str = "scenario") -> Scenario:
    """Validate a parsed scenario document and fill in all defaults."""
    _expect(isinstance(doc, dict), name, "scenario must be a JSON object")

    ac_hz = _get(doc, "ac_hz", 50, name, int)
    _expect(ac_hz in SUPPORTED_AC_HZ, f"{name}.ac_hz", f"must be one of {SUPPORTED_AC_HZ}")
    cycle_limit = _get(doc, "cycle_limit", 1000, name, int)
    _expect(cycle_limit > 0, f"{name}.cycle_limit", "must be positive")
    protocol = _get(doc, "protocol", "proximity", name, str)
    _expect(protocol in {p.value for p in ProtocolName}, f"{name}.protocol",
            f"must be one of {sorted(p.value for p in ProtocolName)}")

    topo_doc = doc.get("topology")
    _expect(isinstance(topo_doc, dict), f"{name}.topology", "required object")
    branches = []
    branch_ids = set()
    for i, b in enumerate(topo_doc.get("branches", [])):
        path = f"{name}.topology.branches[{i}]"
        _expect(isinstance(b, dict), path, "expected object")
        bid = _get(b, "id", None, path, int)
        _expect(bid is not None, f"{path}.id", "required")
        _expect(bid not in branch_ids, f"{path}.id", f"duplicate branch id {bid}")
        branch_ids.add(bid)
        length = _get(b, "length_m", None, path, (int, float))
        _expect(length is not None and length > 0, f"{path}.length_m",
                "required positive number")
        junctions = tuple(b.get("junctions_m", []))
        for j in junctions:
            _expect(isinstance(j, (int, float)) and 0 <= j <= length,
                    f"{path}.junctions_m", f"junction {j} outside [0, {length}]")
        branches.append(Branch(bid, float(length), junctions))
    _expect(bool(branches), f"{name}.topology.branches", "at least one branch required")

    nodes: dict[int, Placement] = {}
    for i, n in enumerate(topo_doc.get("nodes", [])):
        path = f"{name}.topology.nodes[{i}]"
        _expect(isinstance(n, dict), path, "expected object")
        address = _get(n, "address", None, path, int)
        _expect(address is not None and 0 < address < 0xFFFF, f"{path}.address",
                "required, in [1, 65534]")
        _expect(address not in nodes, f"{path}.address", f"duplicate address {address}")
        branch = _get(n, "branch", None, path, int)
        _expect(branch in branch_ids, f"{path}.branch", f"unknown branch {branch}")
        offset = _get(n, "offset_m", None, path, (int, float))
        blen = next(b.length_m for b in branches if b.branch_id == branch)
        _expect(offset is not None and 0 <= offset <= blen, f"{path}.offset_m",
                f"must lie within branch length {blen}")
        nodes[address] = Placement(branch, float(offset))
    _expect(len(nodes) >= 2, f"{name}.topology.nodes", "at least two nodes required")
    panels = _get(topo_doc, "panels_between_branches", 1, f"{name}.topology", int)
    topology = Topology(branches, nodes, panels)

    sources = []
    for i, s in enumerate(doc.get("noise", [])):
        path = f"{name}.noise[{i}]"
        _expect(isinstance(s, dict), path, "expected object")
        kind = _get(s, "kind", None, path, str)
        source_id = str(s.get("id", f"noise{i}"))
        branch = _get(s, "branch", None, path, int)
        _expect(branch in branch_ids, f"{path}.branch", f"unknown branch {branch}")
        offset = float(_get(s, "offset_m", 0.0, path, (int, float)))
        placement = Placement(branch, offset)
        if kind == "background":
            sources.append(BackgroundNoise(source_id, placement,
                                           float(_get(s, "psd_dbm_per_hz", -150.0, path,
                                                      (int, float)))))
        elif kind == "periodic_sync":
            slots = s.get("slots", [])
            _expect(isinstance(slots, list) and slots, f"{path}.slots",
                    "non-empty slot list required")
            for slot in slots:
                _expect(isinstance(slot, int) and 0 <= slot < SLOTS_PER_CYCLE,
                        f"{path}.slots", f"slot {slot} outside [0, 63]")
            sources.append(PeriodicSyncNoise(source_id, placement,
                                             float(_get(s, "peak_dbm", -30.0, path,
                                                        (int, float))),
                                             frozenset(slots)))
        elif kind == "async_impulse":
            rate = float(_get(s, "rate_per_s", 1.0, path, (int, float)))
            _expect(rate >= 0, f"{path}.rate_per_s", "must be non-negative")
            burst = _get(s, "burst_length_slots", 1, path, int)
            _expect(burst >= 1, f"{path}.burst_length_slots", "must be >= 1")
            lo, hi = s.get("duration_us_range", (10.0, 100.0))
            sources.append(AsyncImpulseNoise(source_id, placement,
                                             float(_get(s, "peak_dbm", -20.0, path,
                                                        (int, float))),
                                             rate, burst, (float(lo), float(hi))))
        elif kind == "periodic_async":
            rep = float(_get(s, "repetition_khz", 100.0, path, (int, float)))
            _expect(50.0 <= rep <= 200.0, f"{path}.repetition_khz",
                    "must be within [50, 200] kHz")
            sources.append(PeriodicAsyncNoise(source_id, placement,
                                              float(_get(s, "peak_dbm", -60.0, path,
                                                         (int, float))), rep))
        else:
            raise ScenarioError(f"{path}.kind", f"unknown noise kind {kind!r}")

    sensing = doc.get("sensing", {})
    _expect(isinstance(sensing, dict), f"{name}.sensing", "expected object")
    threshold = float(_get(sensing, "threshold_dbm", DEFAULT_SENSING_THRESHOLD_DBM,
                           f"{name}.sensing", (int, float)))

    chan_doc = doc.get("channel", {})
    _expect(isinstance(chan_doc, dict), f"{name}.channel", "expected object")
    defaults = ChannelParams()
    def chan(key, attr):
        return float(_get(chan_doc, key, getattr(defaults, attr), f"{name}.channel",
                          (int, float)))
    params = ChannelParams(
        tx_power_dbm=chan("tx_power_dbm", "tx_power_dbm"),
        carrier_sense_floor_dbm=chan("carrier_sense_floor_dbm", "carrier_sense_floor_dbm"),
        demod_snr_db=chan("demod_snr_db", "demod_snr_db"),
        noise_floor_dbm=chan("noise_floor_dbm", "noise_floor_dbm"),
        k1_db_per_m=chan("k1_db_per_m", "k1_db_per_m"),
        k2_db_per_mhz_m=chan("k2_db_per_mhz_m", "k2_db_per_mhz_m"),
        k3_db_per_panel=chan("k3_db_per_panel", "k3_db_per_panel"),
        k4_db_per_junction=chan("k4_db_per_junction", "k4_db_per_junction"),
        carrier_freq_hz=chan("carrier_freq_hz", "carrier_freq_hz"),
        bandwidth_hz=chan("bandwidth_hz", "bandwidth_hz"),
        payload_bytes_per_slot=int(_get(chan_doc, "payload_bytes_per_slot",
                                        defaults.payload_bytes_per_slot,
                                        f"{name}.channel", int)),
    )
    _expect(params.payload_bytes_per_slot > 0, f"{name}.channel.payload_bytes_per_slot",
            "must be positive")

    traffic = []
    for i, t in enumerate(doc.get("traffic", [])):
        path = f"{name}.traffic[{i}]"
        _expect(isinstance(t, dict), path, "expected object")
        src = _get(t, "src", None, path, int)
        _expect(src in nodes, f"{path}.src", f"unknown node {src}")
        dst = _get(t, "dst", None, path, int)
        _expect(dst in nodes, f"{path}.dst", f"unknown node {dst}")
        _expect(src != dst, f"{path}.dst", "src and dst must differ")
        payload_bytes = _get(t, "payload_bytes", 64, path, int)
        _expect(0 <= payload_bytes <= 0xFFFF, f"{path}.payload_bytes",
                "must be in [0, 65535]")
        max_payload = 255 * params.payload_bytes_per_slot
        _expect(payload_bytes <= max_payload, f"{path}.payload_bytes",
                f"must fit 255 slots ({max_payload} bytes)")
        rate = float(_get(t, "poisson_rate_per_s", 0.0, path, (int, float)))
        _expect(rate >= 0, f"{path}.poisson_rate_per_s", "must be non-negative")
        schedule = tuple(t.get("schedule_cycles", []))
        for c in schedule:
            _expect(isinstance(c, int) and c >= 0, f"{path}.schedule_cycles",
                    f"bad cycle {c}")
        interval = _get(t, "interval_cycles", 0, path, int)
        count = _get(t, "count", 0, path, int)
        start = _get(t, "start_cycle", 0, path, int)
        traffic.append(TrafficFlow(src, dst, payload_bytes, rate, schedule,
                                   start, interval, count))

    injections = []
    for i, inj in enumerate(doc.get("injections", [])):
        path = f"{name}.injections[{i}]"
        _expect(isinstance(inj, dict), path, "expected object")
        ftype = _get(inj, "frame", None, path, str)
        _expect(ftype in ("RTS", "CTS", "DATA", "ACK", "NACK", "ANNOUNCE", "TSINFO"),
                f"{path}.frame", f"unknown frame type {ftype!r}")
        occurrence = _get(inj, "occurrence", None, path, int)
        _expect(occurrence is not None and occurrence >= 1, f"{path}.occurrence",
                "must be >= 1")
        receivers = inj.get("receivers", [])
        for r in receivers:
            _expect(r in nodes, f"{path}.receivers", f"unknown node {r}")
        injections.append(Injection(ftype, occurrence, frozenset(receivers)))

    echo = {
        "name": doc.get("name", name),
        "ac_hz": ac_hz,
        "cycle_limit": cycle_limit,
        "protocol": protocol,
        "topology": {
            "branches": [{"id": b.branch_id, "length_m": b.length_m,
                          "junctions_m": list(b.junctions_m)} for b in branches],
            "nodes": [{"address": a, "branch": p.branch, "offset_m": p.offset_m}
                      for a, p in sorted(nodes.items())],
            "panels_between_branches": panels,
        },
        "noise": [_echo_source(s) for s in sources],
        "sensing": {"threshold_dbm": threshold},
        "channel": {
            "tx_power_dbm": params.tx_power_dbm,
            "carrier_sense_floor_dbm": params.carrier_sense_floor_dbm,
            "demod_snr_db": params.demod_snr_db,
            "noise_floor_dbm": params.noise_floor_dbm,
            "k1_db_per_m": params.k1_db_per_m,
            "k2_db_per_mhz_m": params.k2_db_per_mhz_m,
            "k3_db_per_panel": params.k3_db_per_panel,
            "k4_db_per_junction": params.k4_db_per_junction,
            "carrier_freq_hz": params.carrier_freq_hz,
            "bandwidth_hz": params.bandwidth_hz,
            "payload_bytes_per_slot": params.payload_bytes_per_slot,
        },
        "traffic": [{"src": t.src, "dst": t.dst, "payload_bytes": t.payload_bytes,
                     "poisson_rate_per_s": t.poisson_rate_per_s,
                     "schedule_cycles": list(t.schedule_cycles),
                     "start_cycle": t.start_cycle, "interval_cycles": t.interval_cycles,
                     "count": t.count} for t in traffic],
        "injections": [{"frame": i.frame_type, "occurrence": i.occurrence,
                        "receivers": sorted(i.receivers)} for i in injections],
    }
    return Scenario(echo["name"], ac_hz, cycle_limit, protocol, topology, sources,
                    threshold, traffic, params, injections, echo)


def _echo_source(s) -> dict:
    out = {"id": s.source_id, "kind": s.kind, "branch": s.placement.branch,
           "offset_m": s.placement.offset_m}
    if s.kind == "background":
        out["psd_dbm_per_hz"] = s.psd_dbm_per_hz
    elif s.kind == "periodic_sync":
        out["peak_dbm"] = s.peak_dbm
        out["slots"] = sorted(s.slots_covered)
    elif s.kind == "async_impulse":
        out["peak_dbm"] = s.peak_dbm
        out["rate_per_s"] = s.rate_per_s
        out["burst_length_slots"] = s.burst_length_slots
        out["duration_us_range"] = list(s.duration_us_range)
    else:
        out["peak_dbm"] = s.peak_dbm
        out["repetition_khz"] = s.repetition_khz
    return out


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(str(path), f"invalid JSON: {exc}") from exc
    return build_scenario(doc, name=str(path))


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package (e.g. 'figure1')."""
    data = resources.files("plcsim").joinpath(f"scenarios/{name}.json").read_text()
    return build_scenario(json.loads(data), name=name)
