"""Deterministic discrete-event engine clocked by power-cycle timeslots.

Events are totally ordered by (cycle, slot, phase, kind rank, target address,
insertion sequence), so one (scenario, seed) pair always replays the same
trace byte for byte. The engine owns the event heap, resolves all concurrent
transmissions of a slot phase through the channel in one step (collisions are
mutual corruption), and drives every node's protocol handlers in address
order.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field

from . import frames
from .channel import Channel, DeliveryOutcome
from .clock import (SLOTS_PER_CYCLE, Phase, absolute_slot, cycle_slot, instant_of,
                    phase_interval)
from .mac import FEATURES, MacNode, ProtocolName
from .slotmap import FULL_MASK, SlotMask

# Tie-break ranks for events sharing (cycle, slot, phase). Sensing completion
# is a timer, so timers rank ahead of SlotStart: a refreshed mask must exist
# before the same slot's transmit decisions run.
RANK_SENSING_DUE = 0
RANK_MASK_EXPIRY = 1
RANK_TIMER = 2
RANK_SLOT_START = 3
RANK_TRAFFIC = 4
RANK_DELIVERY = 5

TRACE_COLUMNS = ("time_s", "cycle", "slot", "phase", "event_kind", "src", "dst",
                 "frame_type", "outcome", "detail")

_PHASE_NAMES = {p: p.name.lower() for p in Phase}
_FRAME_NAMES = {
    frames.Rts: "RTS", frames.Cts: "CTS", frames.Data: "DATA", frames.Ack: "ACK",
    frames.Nack: "NACK", frames.Announce: "ANNOUNCE", frames.Tsinfo: "TSINFO",
}


class Trace:
    """Append-only event log; one row per simulator event."""

    def __init__(self, ac_hz: int):
        self.ac_hz = ac_hz
        self.rows: list[tuple[str, ...]] = []

    def append(self, cycle: int, slot: int, phase: Phase, kind: str, src, dst,
               frame_type: str, outcome: str, detail: str) -> None:
        t = instant_of(cycle, slot, self.ac_hz, phase)
        self.rows.append((f"{t:.9f}", str(cycle), str(slot), _PHASE_NAMES[phase],
                          kind, str(src), str(dst), frame_type, outcome, detail))

    def to_csv_bytes(self, preamble: str = "") -> bytes:
        lines = []
        if preamble:
            lines.extend(f"# {line}" for line in preamble.splitlines())
        lines.append(",".join(TRACE_COLUMNS))
        lines.extend(",".join(row) for row in self.rows)
        return ("\n".join(lines) + "\n").encode()

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv_bytes()).hexdigest()


@dataclass
class _PendingTx:
    addr: int
    frame: frames.Frame
    ftype: str
    occurrence: int
    chunk: tuple[int, int] | None


@dataclass
class _ChunkAcc:
    frame: frames.Data
    occurrence: int
    total: int
    seen: int = 0
    outcomes: dict[int, DeliveryOutcome] = field(default_factory=dict)


def _merge(a: DeliveryOutcome | None, b: DeliveryOutcome) -> DeliveryOutcome:
    if a is None:
        return b
    if DeliveryOutcome.CORRUPTED in (a, b) or a is not b:
        # A partially detected frame cannot pass its CRC either.
        return DeliveryOutcome.CORRUPTED
    return a


@dataclass
class RunResult:
    trace: Trace
    seed: int
    cycle_limit: int
    protocol: str


class Engine:
    """One simulation run; owns all mutable state for it."""

    def __init__(self, scenario, seed: int, cycle_limit: int | None = None):
        self.scenario = scenario
        self.seed = seed
        self.cycle_limit = cycle_limit if cycle_limit is not None else scenario.cycle_limit
        self.ac_hz = scenario.ac_hz
        self.rng = random.Random(f"{seed}:mac")
        self.channel = Channel(scenario.topology, scenario.channel_params,
                               scenario.noise_sources, scenario.ac_hz,
                               self.cycle_limit, random.Random(f"{seed}:channel"),
                               scenario.injections)
        self.trace = Trace(scenario.ac_hz)

        self._heap: list = []
        self._eseq = 0
        self._wakes: dict[tuple[int, int], set[int]] = {}
        self._delivery_scheduled: set[tuple[int, int, Phase]] = set()
        self._pending: dict[tuple[int, int, Phase], list[_PendingTx]] = {}
        self._chunks: dict[tuple[int, int, int, int], _ChunkAcc] = {}
        self._now = (0, 0, Phase.SENSE_GUARD)

        protocol = ProtocolName(scenario.protocol)
        self.nodes: dict[int, MacNode] = {}
        for addr in scenario.topology.addresses():
            node = MacNode(self, addr, protocol,
                           threshold_dbm=scenario.sensing_threshold_dbm,
                           payload_bytes_per_slot=scenario.channel_params.payload_bytes_per_slot,
                           horizon_cycles=self.cycle_limit)
            self.nodes[addr] = node
            if FEATURES[protocol].sensing:
                self._push(0, 0, Phase.SENSE_GUARD, RANK_SENSING_DUE, addr, ("sensing_due",))
            else:
                node.mask = SlotMask(FULL_MASK, addr, 0)

        traffic_rng = random.Random(f"{seed}:traffic")
        for flow in scenario.traffic:
            for cycle, slot in flow.arrivals(self.cycle_limit, scenario.ac_hz, traffic_rng):
                self._push(cycle, slot, Phase.SENSE_GUARD, RANK_TRAFFIC, flow.src,
                           ("traffic", flow.dst, flow.payload_bytes))

    # ------------------------------------------------------------------
    # scheduling primitives (the node-facing api)

    @property
    def now(self) -> tuple[int, int]:
        return self._now[0], self._now[1]

    def _push(self, cycle: int, slot: int, phase: Phase, rank: int, target: int,
              payload: tuple) -> None:
        if cycle >= self.cycle_limit:
            return
        self._eseq += 1
        heapq.heappush(self._heap, (cycle, slot, int(phase), rank, target,
                                    self._eseq, payload))

    def wake(self, addr: int, cycle: int, slot: int) -> None:
        key = (cycle, slot)
        if key not in self._wakes:
            if cycle >= self.cycle_limit:
                return
            self._wakes[key] = set()
            self._push(cycle, slot, Phase.SENSE_GUARD, RANK_SLOT_START, 0, ("slot",))
        self._wakes[key].add(addr)

    def set_timer(self, addr: int, cycle: int, slot: int, tag: str, token,
                  phase: Phase = Phase.TURNAROUND) -> None:
        if tag == "sensing_done":
            phase = Phase.SENSE_GUARD
        self._push(cycle, slot, phase, RANK_TIMER, addr, ("timer", tag, token))

    def schedule_mask_expiry(self, addr: int, cycle: int) -> None:
        self._push(cycle, 0, Phase.SENSE_GUARD, RANK_MASK_EXPIRY, addr, ("mask_expiry",))
        self._push(cycle, 0, Phase.SENSE_GUARD, RANK_SENSING_DUE, addr, ("sensing_due",))

    def emit(self, addr: int, frame: frames.Frame, phase: Phase, *,
             chunk: tuple[int, int] | None = None, detail: str = "") -> None:
        cycle, slot, _ = self._now
        ftype = _FRAME_NAMES[type(frame)]
        if chunk is None or chunk[0] == 0:
            occurrence = self.channel.next_occurrence(ftype)
        else:
            occurrence = self._chunks[self._chunk_key(frame)].occurrence
        if chunk is not None and chunk[0] == 0:
            self._chunks[self._chunk_key(frame)] = _ChunkAcc(frame, occurrence, chunk[1])
        key = (cycle, slot, phase)
        self._pending.setdefault(key, []).append(
            _PendingTx(addr, frame, ftype, occurrence, chunk))
        if key not in self._delivery_scheduled:
            self._delivery_scheduled.add(key)
            self._push(cycle, slot, phase, RANK_DELIVERY, 0, ("delivery",))
        self.trace.append(cycle, slot, phase, "tx", frame.src, frame.dst, ftype,
                          "sent", self._frame_detail(frame, chunk, detail))

    @staticmethod
    def _chunk_key(frame: frames.Data) -> tuple[int, int, int, int]:
        return (frame.src, frame.dst, frame.seq, frame.retx)

    # ------------------------------------------------------------------
    # trace helpers used by nodes

    def _log(self, kind: str, src="", dst="", frame_type="", outcome="", detail="") -> None:
        cycle, slot, phase = self._now
        self.trace.append(cycle, slot, phase, kind, src, dst, frame_type, outcome, detail)

    def log_state(self, addr: int, fsm: str, state: str, exchange=None) -> None:
        detail = f"{fsm}:{state}"
        if exchange is not None:
            detail += f";key={exchange[0]}-{exchange[1]}-{exchange[2]}"
        self._log("state", src=addr, detail=detail)

    def log_mask(self, addr: int, mask: SlotMask) -> None:
        self._log("sensing_done", src=addr,
                  detail=f"mask={mask.bits:016x};valid_until={mask.valid_until_cycle}")

    def log_arrival(self, addr: int, dst: int, seq: int, nbytes: int) -> None:
        self._log("arrival", src=addr, dst=dst, detail=f"seq={seq};bytes={nbytes}")

    def log_delivery(self, addr: int, original_src: int, seq: int, nbytes: int,
                     via: str) -> None:
        self._log("deliver", src=original_src, dst=addr,
                  detail=f"seq={seq};bytes={nbytes};via={via}")

    def log_duplicate(self, addr: int, original_src: int, seq: int) -> None:
        self._log("dup", src=original_src, dst=addr, detail=f"seq={seq}")

    def log_adoption(self, addr: int, key) -> None:
        self._log("adopt", src=key[0], dst=key[1],
                  detail=f"holder={addr};seq={key[2]}")

    def log_adoption_drop(self, addr: int, key, cause: str) -> None:
        self._log("adopt_drop", src=key[0], dst=key[1],
                  detail=f"holder={addr};seq={key[2]};cause={cause}")

    def log_exchange_done(self, addr: int, dst: int, seq: int, via: str,
                          failures: int) -> None:
        self._log("exchange_done", src=addr, dst=dst,
                  detail=f"seq={seq};via={via};failures={failures}")

    def log_lost(self, addr: int, dst: int, seq: int, reason: str) -> None:
        self._log("lost", src=addr, dst=dst, detail=f"seq={seq};reason={reason}")

    # ------------------------------------------------------------------
    # main loop

    def run(self) -> RunResult:
        prev_key = None
        while self._heap:
            cycle, slot, phase_i, rank, target, _, payload = heapq.heappop(self._heap)
            if cycle >= self.cycle_limit:
                break
            key = (cycle, slot, phase_i, rank)
            assert prev_key is None or key >= prev_key, "event processed out of order"
            prev_key = key
            self._now = (cycle, slot, Phase(phase_i))
            kind = payload[0]
            if kind == "slot":
                for addr in sorted(self._wakes.pop((cycle, slot), ())):
                    self.nodes[addr].on_slot(cycle, slot)
            elif kind == "delivery":
                self._resolve_phase(cycle, slot, Phase(phase_i))
            elif kind == "timer":
                _, tag, token = payload
                self.nodes[target].on_timer(tag, token, cycle, slot)
            elif kind == "traffic":
                _, dst, nbytes = payload
                self.nodes[target].on_traffic(dst, bytes(nbytes), cycle)
            elif kind == "sensing_due":
                self._log("sensing_due", src=target)
                self.nodes[target].on_sensing_due(cycle)
            elif kind == "mask_expiry":
                self._log("mask_expiry", src=target)
                self.nodes[target].on_mask_expiry(cycle)
        return RunResult(self.trace, self.seed, self.cycle_limit,
                         self.scenario.protocol)

    # ------------------------------------------------------------------
    # transmission resolution

    def _resolve_phase(self, cycle: int, slot: int, phase: Phase) -> None:
        key = (cycle, slot, phase)
        self._delivery_scheduled.discard(key)
        txs = self._pending.pop(key, [])
        if not txs:
            return
        interval = phase_interval(cycle, slot, phase, self.ac_hz)
        resolved = self.channel.resolve([(t.frame.src, t.ftype, t.occurrence) for t in txs],
                                        interval, slot)
        finished: list[_ChunkAcc] = []
        for t in txs:
            if t.chunk is not None:
                acc = self._chunks[self._chunk_key(t.frame)]
                acc.seen += 1
                if acc.seen == acc.total:
                    finished.append(acc)
                    del self._chunks[self._chunk_key(t.frame)]
        for rx in self.channel.topology.addresses():
            outcomes = resolved[rx]
            for t, outcome in zip(txs, outcomes):
                if outcome is None:
                    continue
                if t.chunk is not None:
                    acc = self._chunks.get(self._chunk_key(t.frame))
                    if acc is None:  # final chunk: accumulator moved to finished
                        acc = next(a for a in finished
                                   if self._chunk_key(a.frame) == self._chunk_key(t.frame))
                    acc.outcomes[rx] = _merge(acc.outcomes.get(rx), outcome)
                    continue
                self._dispatch(t.frame, t.ftype, rx, outcome, cycle, slot, phase)
        for acc in finished:
            for rx in self.channel.topology.addresses():
                if rx == acc.frame.src:
                    continue
                outcome = acc.outcomes.get(rx, DeliveryOutcome.UNDETECTED)
                self._dispatch(acc.frame, "DATA", rx, outcome, cycle, slot, phase)

    def _dispatch(self, frame, ftype: str, rx: int, outcome: DeliveryOutcome,
                  cycle: int, slot: int, phase: Phase) -> None:
        if outcome is not DeliveryOutcome.UNDETECTED or rx == frame.dst:
            detail = f"at={rx};seq={frame.seq}"
            if ftype == "DATA":
                detail += f";retx={frame.retx}"
            self.trace.append(cycle, slot, phase, "rx", frame.src, frame.dst, ftype,
                              outcome.value, detail)
        if outcome is DeliveryOutcome.UNDETECTED:
            return
        self.nodes[rx].on_frame(frame, outcome, cycle, slot, phase)

    # ------------------------------------------------------------------

    @staticmethod
    def _frame_detail(frame, chunk, extra: str) -> str:
        parts = [f"seq={frame.seq}"]
        if isinstance(frame, frames.Rts):
            parts.append(f"retx={frame.retx};dur={frame.duration_slots}")
        elif isinstance(frame, frames.Data):
            parts.append(f"retx={frame.retx};orig={frame.original_src}")
            if chunk is not None:
                parts.append(f"chunk={chunk[0] + 1}/{chunk[1]}")
        elif isinstance(frame, frames.Ack):
            parts.append(f"orig={frame.original_src}")
        elif isinstance(frame, frames.Nack):
            parts.append(f"orig={frame.original_src};pa1={frame.pa1};pa2={frame.pa2}"
                         f";dur={frame.duration_slots}")
        elif isinstance(frame, frames.Announce):
            parts.append(f"orig={frame.original_src}")
        elif isinstance(frame, frames.Tsinfo):
            parts.append(f"mask={frame.mask:016x}")
        if extra:
            parts.append(extra)
        return ";".join(parts)


def run(scenario, seed: int, cycle_limit: int | None = None) -> RunResult:
    """Execute one deterministic run and return its trace."""
    return Engine(scenario, seed, cycle_limit).run()
