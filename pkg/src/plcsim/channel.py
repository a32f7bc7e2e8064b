"""Branched power-line topology, attenuation and impulse-noise delivery model.

The wiring is a tree of branches joined at the breaker, so exactly one path
exists between any two outlets. Frame outcomes are decided per receiver from
an SNR threshold: the transmit power attenuated over the unique tree path
against the noise power present at the receiver's position during the slot
interval. Noise is location dependent because every source's contribution is
attenuated over the source-to-receiver path.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field
from enum import Enum

from .clock import HALF_CYCLE_SLOTS, SLOTS_PER_CYCLE, slot_duration


class UnknownAddress(KeyError):
    """Address not present in the topology."""


class UnknownPath(ValueError):
    """No path is defined (e.g. from a node to itself)."""


class TopologyInvalid(ValueError):
    """Structurally inconsistent topology description."""


@dataclass(frozen=True)
class Branch:
    branch_id: int
    length_m: float
    junctions_m: tuple[float, ...] = ()


@dataclass(frozen=True)
class Placement:
    """A node or noise source plugged in along a branch."""

    branch: int
    offset_m: float


@dataclass(frozen=True)
class PathSummary:
    length_m: float
    panels_crossed: int
    junctions_crossed: int


class Topology:
    """Tree of branches rooted at the breaker, with addressed nodes."""

    def __init__(self, branches, nodes, panels_between_branches: int = 1):
        self._branches: dict[int, Branch] = {}
        for b in branches:
            if b.branch_id in self._branches:
                raise TopologyInvalid(f"duplicate branch id {b.branch_id}")
            if b.length_m <= 0:
                raise TopologyInvalid(f"branch {b.branch_id} has non-positive length")
            for j in b.junctions_m:
                if not 0 <= j <= b.length_m:
                    raise TopologyInvalid(f"branch {b.branch_id} junction {j} outside branch")
            self._branches[b.branch_id] = b
        self._nodes: dict[int, Placement] = {}
        for address, placement in nodes.items():
            self._check_placement(placement, what=f"node {address}")
            self._nodes[address] = placement
        self.panels_between_branches = panels_between_branches

    def _check_placement(self, placement: Placement, what: str) -> None:
        branch = self._branches.get(placement.branch)
        if branch is None:
            raise TopologyInvalid(f"{what} references unknown branch {placement.branch}")
        if not 0 <= placement.offset_m <= branch.length_m:
            raise TopologyInvalid(f"{what} offset {placement.offset_m} outside branch "
                                  f"{placement.branch} (length {branch.length_m})")

    def addresses(self) -> list[int]:
        return sorted(self._nodes)

    def placement(self, address: int) -> Placement:
        try:
            return self._nodes[address]
        except KeyError:
            raise UnknownAddress(address) from None

    def path(self, a: int, b: int) -> PathSummary:
        """Metrics of the unique tree path between two nodes; symmetric."""
        if a == b:
            raise UnknownPath(f"no path from node {a} to itself")
        return self.path_between(self.placement(a), self.placement(b))

    def path_between(self, pa: Placement, pb: Placement) -> PathSummary:
        if pa.branch == pb.branch:
            lo, hi = sorted((pa.offset_m, pb.offset_m))
            junctions = self._junctions_between(pa.branch, lo, hi)
            return PathSummary(hi - lo, 0, junctions)
        # Different branches join only at the breaker.
        junctions = (self._junctions_between(pa.branch, 0.0, pa.offset_m)
                     + self._junctions_between(pb.branch, 0.0, pb.offset_m))
        return PathSummary(pa.offset_m + pb.offset_m, self.panels_between_branches, junctions)

    def _junctions_between(self, branch_id: int, lo: float, hi: float) -> int:
        return sum(1 for j in self._branches[branch_id].junctions_m if lo < j < hi)


@dataclass(frozen=True)
class ChannelParams:
    """Scenario-level radio abstractions; none of these are physical constants."""

    tx_power_dbm: float = 0.0
    carrier_sense_floor_dbm: float = -100.0
    demod_snr_db: float = 10.0
    noise_floor_dbm: float = -110.0
    k1_db_per_m: float = 0.1
    k2_db_per_mhz_m: float = 0.02
    k3_db_per_panel: float = 6.0
    k4_db_per_junction: float = 2.0
    carrier_freq_hz: float = 10e6
    bandwidth_hz: float = 1e6
    payload_bytes_per_slot: int = 256


DEFAULT_PARAMS = ChannelParams()


def attenuation_db(path: PathSummary, freq_hz: float, params: ChannelParams = DEFAULT_PARAMS) -> float:
    """Line attenuation: grows with length and frequency, plus fixed panel and
    junction penalties (junctions stand in for multipath losses)."""
    freq_mhz = freq_hz / 1e6
    return (params.k1_db_per_m * path.length_m
            + params.k2_db_per_mhz_m * freq_mhz * path.length_m
            + params.k3_db_per_panel * path.panels_crossed
            + params.k4_db_per_junction * path.junctions_crossed)


# --- noise sources -----------------------------------------------------------

@dataclass(frozen=True)
class BackgroundNoise:
    """Coloured background floor, characterised by its spectral density."""

    source_id: str
    placement: Placement
    psd_dbm_per_hz: float

    kind = "background"


@dataclass(frozen=True)
class PeriodicSyncNoise:
    """Impulses phase-locked to the mains: the slot pattern repeats every half
    cycle, so covered slot indices are taken modulo 32."""

    source_id: str
    placement: Placement
    peak_dbm: float
    slots_covered: frozenset[int]

    kind = "periodic_sync"

    def active_in_slot(self, slot: int) -> bool:
        rel = slot % HALF_CYCLE_SLOTS
        return any(rel == s % HALF_CYCLE_SLOTS for s in self.slots_covered)


@dataclass(frozen=True)
class AsyncImpulseNoise:
    """Switching impulses independent of mains phase: short 10-100 us spikes,
    or multi-slot bursts when burst_length_slots > 1 (stove/iron style)."""

    source_id: str
    placement: Placement
    peak_dbm: float
    rate_per_s: float
    burst_length_slots: int = 1
    duration_us_range: tuple[float, float] = (10.0, 100.0)

    kind = "async_impulse"


@dataclass(frozen=True)
class PeriodicAsyncNoise:
    """Switched-supply interference repeating at 50-200 kHz: the repetition is
    far faster than a slot, so it elevates every slot it can reach."""

    source_id: str
    placement: Placement
    peak_dbm: float
    repetition_khz: float = 100.0

    kind = "periodic_async"


NoiseSource = BackgroundNoise | PeriodicSyncNoise | AsyncImpulseNoise | PeriodicAsyncNoise


class DeliveryOutcome(str, Enum):
    INTACT = "intact"
    CORRUPTED = "corrupted"
    UNDETECTED = "undetected"


def _dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def _mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw) if mw > 0 else -math.inf


@dataclass(frozen=True)
class Injection:
    """Scripted corruption: force the nth transmission of a frame type to be
    corrupted at specific receivers (test instrumentation)."""

    frame_type: str
    occurrence: int
    receivers: frozenset[int]


class Channel:
    """Per-run channel state: pre-drawn impulse timeline plus static noise.

    All randomness is drawn up front from the supplied RNG so that delivery
    outcomes are a pure function of (topology, sources, seed, time).
    """

    def __init__(self, topology: Topology, params: ChannelParams, sources,
                 ac_hz: int, horizon_cycles: int, rng: random.Random,
                 injections=()):
        self.topology = topology
        self.params = params
        self.ac_hz = ac_hz
        self._slot_s = slot_duration(ac_hz)
        self._sources = list(sources)
        self._floor_mw = _dbm_to_mw(params.noise_floor_dbm)

        addresses = topology.addresses()
        # Pairwise signal attenuation between nodes.
        self._rx_power: dict[tuple[int, int], float] = {}
        for a in addresses:
            for b in addresses:
                if a == b:
                    continue
                att = attenuation_db(topology.path(a, b), params.carrier_freq_hz, params)
                self._rx_power[(a, b)] = params.tx_power_dbm - att

        # Static (always-on or slot-indexed) noise power per node and slot.
        self._static_mw: dict[int, list[float]] = {}
        # Per async source: (starts, ends, max duration, rx power per node).
        self._impulses: list[tuple[list[float], list[float], float, dict[int, float]]] = []
        for addr in addresses:
            base = self._floor_mw
            per_slot = [base] * SLOTS_PER_CYCLE
            self._static_mw[addr] = per_slot
        for src in self._sources:
            if src.kind == "background":
                level = src.psd_dbm_per_hz + 10.0 * math.log10(params.bandwidth_hz)
                self._add_static(src.placement, level, lambda s: True)
            elif src.kind == "periodic_async":
                self._add_static(src.placement, src.peak_dbm, lambda s: True)
            elif src.kind == "periodic_sync":
                self._add_static(src.placement, src.peak_dbm, src.active_in_slot)
            elif src.kind == "async_impulse":
                self._impulses.append(self._draw_impulses(src, horizon_cycles, rng))
            else:  # pragma: no cover - guarded by scenario validation
                raise TopologyInvalid(f"unknown noise source kind {src.kind!r}")

        self._injections: dict[tuple[str, int], frozenset[int]] = {}
        for inj in injections:
            self._injections[(inj.frame_type, inj.occurrence)] = inj.receivers
        self._occurrence: dict[str, int] = {}

    # -- construction helpers --

    def _add_static(self, placement: Placement, level_dbm: float, active) -> None:
        for addr in self.topology.addresses():
            rx = level_dbm - attenuation_db(
                self.topology.path_between(placement, self.topology.placement(addr)),
                self.params.carrier_freq_hz, self.params)
            mw = _dbm_to_mw(rx)
            per_slot = self._static_mw[addr]
            for s in range(SLOTS_PER_CYCLE):
                if active(s):
                    per_slot[s] += mw
        # A source co-located with a node has a zero-length path, which
        # path_between handles (0 m, 0 panels, 0 junctions).

    def _draw_impulses(self, src: AsyncImpulseNoise, horizon_cycles: int, rng: random.Random):
        horizon_s = horizon_cycles / self.ac_hz
        starts: list[float] = []
        ends: list[float] = []
        t = 0.0
        lo_us, hi_us = src.duration_us_range
        while src.rate_per_s > 0:
            t += rng.expovariate(src.rate_per_s)
            if t >= horizon_s:
                break
            if src.burst_length_slots > 1:
                dur = src.burst_length_slots * self._slot_s
            else:
                dur = rng.uniform(lo_us, hi_us) * 1e-6
            starts.append(t)
            ends.append(t + dur)
        rx_mw = {}
        for addr in self.topology.addresses():
            rx = src.peak_dbm - attenuation_db(
                self.topology.path_between(src.placement, self.topology.placement(addr)),
                self.params.carrier_freq_hz, self.params)
            rx_mw[addr] = _dbm_to_mw(rx)
        max_dur = (src.burst_length_slots * self._slot_s
                   if src.burst_length_slots > 1 else hi_us * 1e-6)
        return (starts, ends, max_dur, rx_mw)

    # -- queries --

    def rx_power_dbm(self, tx: int, rx: int) -> float:
        return self._rx_power[(tx, rx)]

    def noise_power_mw(self, address: int, slot: int, t0: float, t1: float) -> float:
        """Linear power sum of the floor and every source active in [t0, t1)."""
        total = self._static_mw[address][slot % SLOTS_PER_CYCLE]
        for starts, ends, max_dur, rx_mw in self._impulses:
            contribution = rx_mw[address]
            # Impulses sorted by start; one overlaps iff start < t1 and end > t0.
            # Walking backward from the last start < t1, no impulse beginning
            # before t0 - max_dur can still be active at t0.
            i = bisect.bisect_left(starts, t1)
            oldest_relevant = t0 - max_dur
            while i > 0:
                i -= 1
                if starts[i] < oldest_relevant:
                    break
                if ends[i] > t0:
                    total += contribution
        return total

    def noise_power_dbm(self, address: int, slot: int, t0: float, t1: float) -> float:
        return _mw_to_dbm(self.noise_power_mw(address, slot, t0, t1))

    def detectable(self, tx: int, rx: int) -> bool:
        return self._rx_power[(tx, rx)] >= self.params.carrier_sense_floor_dbm

    def next_occurrence(self, frame_type: str) -> int:
        """1-based transmission counter per frame type, for scripted injections."""
        n = self._occurrence.get(frame_type, 0) + 1
        self._occurrence[frame_type] = n
        return n

    def injected(self, frame_type: str, occurrence: int, receiver: int) -> bool:
        hit = self._injections.get((frame_type, occurrence))
        return hit is not None and receiver in hit

    def resolve(self, transmissions, interval: tuple[float, float], slot: int):
        """Outcomes of simultaneous transmissions for every other node.

        transmissions: list of (tx_address, frame_type, occurrence).
        Returns {receiver: [outcome per transmission]}. Two detectable signals
        overlapping at a receiver corrupt each other (single collision domain);
        a single detectable signal is checked against the SNR threshold.
        """
        t0, t1 = interval
        out: dict[int, list[DeliveryOutcome]] = {}
        for rx in self.topology.addresses():
            outcomes = []
            detected = [i for i, (tx, _, _) in enumerate(transmissions)
                        if tx != rx and self.detectable(tx, rx)]
            for i, (tx, ftype, occurrence) in enumerate(transmissions):
                if tx == rx:
                    outcomes.append(None)
                    continue
                if i not in detected:
                    outcomes.append(DeliveryOutcome.UNDETECTED)
                    continue
                if len(detected) > 1:
                    outcomes.append(DeliveryOutcome.CORRUPTED)
                    continue
                snr = self._rx_power[(tx, rx)] - self.noise_power_dbm(rx, slot, t0, t1)
                if snr < self.params.demod_snr_db or self.injected(ftype, occurrence, rx):
                    outcomes.append(DeliveryOutcome.CORRUPTED)
                else:
                    outcomes.append(DeliveryOutcome.INTACT)
            out[rx] = outcomes
        return out

    def deliver(self, tx: int, frame_type: str, interval: tuple[float, float],
                slot: int) -> dict[int, DeliveryOutcome]:
        """Single-transmission outcome per receiver (no concurrent senders)."""
        occurrence = self.next_occurrence(frame_type)
        resolved = self.resolve([(tx, frame_type, occurrence)], interval, slot)
        return {rx: outs[0] for rx, outs in resolved.items() if rx != tx}
