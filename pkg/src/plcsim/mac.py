"""Adaptive CSMA/CA over power-cycle timeslots.

Every node runs three roles at once: a sender (RTS -> CTS -> DATA -> ACK/NACK
with slot reservation), a receiver (grants reservations, acknowledges, and on
corruption names its two best proximity peers in the NACK), and an observer
(sets NAV from overheard CTS/ANNOUNCE frames, adopts CRC-valid data packets,
and retransmits them when named). Reservations always append one ack slot and
two contingency slots where the named peers may announce a retransmission.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from . import frames
from .channel import DeliveryOutcome
from .clock import SLOTS_PER_CYCLE, Phase, absolute_slot, cycle_slot
from .proximity import ProximityList
from .slotmap import FULL_MASK, SENSING_CYCLES, SlotMask, common, sense_usable_slots

CW_MIN = 4
CW_CAP = 64
RETRY_LIMIT = 7
DEDUPE_WINDOW = 64
# CTS/ANNOUNCE encode cycle offsets in one byte.
MAX_RESERVATION_LOOKAHEAD_CYCLES = 255


class NoCommonSlots(ValueError):
    """The two masks share no usable slot."""


class NoWindow(ValueError):
    """Not enough shared slots before the mask expires."""


class MediumBusy(RuntimeError):
    pass


class MaskExpired(RuntimeError):
    pass


class ProtocolName(str, Enum):
    PROXIMITY = "proximity"
    SENDER_ONLY = "sender-only"
    PLAIN = "plain"


@dataclass(frozen=True)
class Features:
    sensing: bool
    proximity: bool


FEATURES = {
    ProtocolName.PROXIMITY: Features(sensing=True, proximity=True),
    ProtocolName.SENDER_ONLY: Features(sensing=True, proximity=False),
    ProtocolName.PLAIN: Features(sensing=False, proximity=False),
}


class NavKind(str, Enum):
    PRIMARY = "primary"
    EXTENDED = "extended"


@dataclass(frozen=True)
class NavEntry:
    src: int
    dst: int
    kind: NavKind
    key: tuple[int, int, int]  # (sender, receiver, seq)


class Nav:
    """Slots this node believes are reserved by some exchange."""

    def __init__(self):
        self._entries: dict[int, NavEntry] = {}

    def add(self, abs_slots, src: int, dst: int, kind: NavKind,
            key: tuple[int, int, int]) -> None:
        entry = NavEntry(src, dst, kind, key)
        for abs_slot in abs_slots:
            # First reservation heard for a slot wins in this node's view.
            self._entries.setdefault(abs_slot, entry)

    def reserved(self, abs_slot: int) -> bool:
        return abs_slot in self._entries

    def entry(self, abs_slot: int) -> NavEntry | None:
        return self._entries.get(abs_slot)

    def drop_exchange(self, key: tuple[int, int, int], from_abs: int) -> None:
        """Release the remaining slots of a finished exchange."""
        dead = [s for s, e in self._entries.items() if e.key == key and s >= from_abs]
        for s in dead:
            del self._entries[s]

    def prune_before(self, abs_slot: int) -> None:
        old = [s for s in self._entries if s < abs_slot]
        for s in old:
            del self._entries[s]

    def __len__(self) -> int:
        return len(self._entries)


def backoff_window(attempt: int) -> int:
    """Contention-window size after the attempt-th failure (CWmin 4, cap 64)."""
    if attempt < 1:
        raise ValueError(f"attempt must be >= 1, got {attempt}")
    return min(CW_MIN * 2 ** (attempt - 1), CW_CAP)


def compute_required_slots(common_bits: int, duration_slots: int, nav: Nav,
                           start_abs: int, expiry_cycle: int,
                           contingency: bool = True) -> list[int]:
    """Earliest usable reservation: D data slots, one ack slot, and (for a
    fresh exchange) two contingency slots, scanning forward from start_abs.

    Only slots set in common_bits and absent from the NAV qualify; slots that
    are skipped stay free for other pairs' contention. Slots at or past the
    mask expiry are never reserved.
    """
    if duration_slots < 1:
        raise ValueError(f"duration_slots must be >= 1, got {duration_slots}")
    if common_bits == 0:
        raise NoCommonSlots("masks share no usable slot")
    needed = duration_slots + 1 + (2 if contingency else 0)
    limit = expiry_cycle * SLOTS_PER_CYCLE  # exclusive
    out: list[int] = []
    abs_slot = start_abs
    while abs_slot < limit:
        if (common_bits >> (abs_slot % SLOTS_PER_CYCLE)) & 1 and not nav.reserved(abs_slot):
            out.append(abs_slot)
            if len(out) == needed:
                return out
        abs_slot += 1
    raise NoWindow(f"only {len(out)} of {needed} slots available before cycle {expiry_cycle}")


class DedupeWindow:
    """At-most-once delivery filter: last 64 sequence numbers per source."""

    def __init__(self, size: int = DEDUPE_WINDOW):
        self._size = size
        self._recent: dict[int, deque[int]] = {}
        self._sets: dict[int, set[int]] = {}

    def seen_before(self, src: int, seq: int) -> bool:
        """Record (src, seq); True when it was already in the window."""
        order = self._recent.setdefault(src, deque())
        members = self._sets.setdefault(src, set())
        if seq in members:
            return True
        order.append(seq)
        members.add(seq)
        if len(order) > self._size:
            members.discard(order.popleft())
        return False


# --- FSM state names ---------------------------------------------------------

class SenderState(str, Enum):
    IDLE = "idle"
    AWAIT_CTS = "await_cts"
    TRANSMITTING = "transmitting"
    AWAIT_ACK_NACK = "await_ack_nack"
    AWAIT_PA_ACK = "await_pa_ack"
    BACKOFF = "backoff"


class ReceiverState(str, Enum):
    IDLE = "idle"
    RESERVED = "reserved"
    AWAIT_DATA = "await_data"
    AWAIT_ANNOUNCE = "await_announce"
    AWAIT_ADOPTED = "await_adopted"


class ObserverState(str, Enum):
    IDLE = "idle"
    DEFERRING = "deferring"
    HOLDING = "holding_adopted"
    AWAIT_ANNOUNCE = "await_announce"
    RETRANSMITTING = "retransmitting"


@dataclass
class AppPacket:
    dst: int
    payload: bytes
    seq: int
    offered_cycle: int


@dataclass
class SenderCtx:
    packet: AppPacket
    data_frame: frames.Data
    data_crc: int
    duration: int
    state: SenderState = SenderState.AWAIT_CTS
    failures: int = 0
    data_slots: list[int] = field(default_factory=list)
    ack_slot: int | None = None
    cont_slots: list[int] = field(default_factory=list)
    chunks_sent: int = 0
    announce_seen: bool = False
    announced_ack_slot: int | None = None
    attempt_id: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.data_frame.src, self.packet.dst, self.packet.seq)


@dataclass
class ReceiverCtx:
    sender: int
    seq: int
    duration: int
    data_slots: list[int]
    ack_slot: int
    cont_slots: list[int]
    state: ReceiverState = ReceiverState.RESERVED
    response: frames.Ack | frames.Nack | None = None
    announced_data_slots: list[int] = field(default_factory=list)
    announced_ack_slot: int | None = None

    def key(self, receiver: int) -> tuple[int, int, int]:
        return (self.sender, receiver, self.seq)


@dataclass
class ObserverCtx:
    key: tuple[int, int, int]
    sender: int
    receiver: int
    seq: int
    duration: int
    data_slots: list[int]
    ack_slot: int
    cont_slots: list[int]
    state: ObserverState = ObserverState.DEFERRING
    payload: bytes | None = None
    data_crc: int | None = None
    adopted_at_cycle: int | None = None
    pa_role: int | None = None
    nack_receiver_mask: int = 0
    nack_duration: int = 0
    heard_announce: bool = False
    announced_data_slots: list[int] = field(default_factory=list)
    announced_ack_slot: int | None = None
    retx_frame: frames.Data | None = None
    retx_chunks_sent: int = 0

    @property
    def holds_packet(self) -> bool:
        return self.payload is not None


class MacNode:
    """Protocol state and behaviour of one machine on the line.

    The engine drives it through on_slot / on_frame / on_timer and the node
    talks back through the engine api (emit, wake, set_timer, log...).
    """

    def __init__(self, api, address: int, protocol: ProtocolName, *,
                 threshold_dbm: float, payload_bytes_per_slot: int,
                 horizon_cycles: int):
        self.api = api
        self.address = address
        self.protocol = protocol
        self.features = FEATURES[protocol]
        self.threshold_dbm = threshold_dbm
        self.payload_bytes_per_slot = payload_bytes_per_slot
        self.horizon_cycles = horizon_cycles

        self.mask: SlotMask | None = None
        self.mask_never_expires = not self.features.sensing
        self.sensing_since: int | None = None
        self.nav = Nav()
        self.prox = ProximityList(address)
        self.queue: deque[AppPacket] = deque()
        self.seq_counter = 0
        self.sender: SenderCtx | None = None
        self.receiver: ReceiverCtx | None = None
        self.observers: dict[tuple[int, int, int], ObserverCtx] = {}
        self.dedupe = DedupeWindow()
        self.backoff_remaining = 0
        self.next_contention_abs: int | None = None
        self.tsinfo_pending = False
        self._attempt_counter = 0
        self._last_prune_abs = 0

    # ------------------------------------------------------------------
    # helpers

    def _mask_valid(self, cycle: int) -> bool:
        if self.mask is None:
            return False
        if self.mask_never_expires:
            return True
        return self.mask.valid_at(cycle)

    def _mask_bits(self) -> int:
        return self.mask.bits if self.mask is not None else 0

    def _expiry_bound(self, from_cycle: int) -> int:
        lookahead = from_cycle + MAX_RESERVATION_LOOKAHEAD_CYCLES + 1
        if self.mask_never_expires or self.mask is None:
            return min(self.horizon_cycles, lookahead)
        return min(self.mask.valid_until_cycle, lookahead)

    def _log_sender(self, state: SenderState) -> None:
        self.api.log_state(self.address, "sender", state.value)

    def _log_receiver(self, state: ReceiverState) -> None:
        self.api.log_state(self.address, "receiver", state.value)

    def _log_observer(self, ctx: ObserverCtx, state: ObserverState) -> None:
        ctx.state = state
        self.api.log_state(self.address, "observer", state.value, exchange=ctx.key)

    def is_sensing(self, cycle: int) -> bool:
        return self.sensing_since is not None and cycle < self.sensing_since + SENSING_CYCLES

    # ------------------------------------------------------------------
    # sensing and traffic entry points

    def on_sensing_due(self, cycle: int) -> None:
        self.sensing_since = cycle
        self.api.set_timer(self.address, cycle + SENSING_CYCLES, 0, "sensing_done", cycle)

    def on_sensing_complete(self, cycle: int, start_cycle: int) -> None:
        self.sensing_since = None
        self.mask = sense_usable_slots(self.api.channel, self.address, start_cycle,
                                       self.threshold_dbm)
        self.api.log_mask(self.address, self.mask)
        self.api.schedule_mask_expiry(self.address, self.mask.valid_until_cycle)
        self.prox.refresh_own_mask(self.mask.bits, cycle)
        self._sweep_observers(cycle)
        min_abs = None
        if self.features.proximity and self.mask.bits:
            self.tsinfo_pending = True
            # Spread the per-refresh broadcasts so they do not all collide.
            min_abs = absolute_slot(cycle, 0) + self.api.rng.randrange(SLOTS_PER_CYCLE)
        self._plan_contention(min_abs)

    def on_mask_expiry(self, cycle: int) -> None:
        if self.mask is not None and self.mask.valid_until_cycle == cycle:
            self.mask = None

    def on_traffic(self, dst: int, payload: bytes, cycle: int) -> None:
        self.seq_counter = (self.seq_counter + 1) & 0xFFFF or 1
        packet = AppPacket(dst, payload, self.seq_counter, cycle)
        self.queue.append(packet)
        self.api.log_arrival(self.address, dst, packet.seq, len(payload))
        self._plan_contention(None)

    # ------------------------------------------------------------------
    # contention

    def _sender_can_contend(self) -> bool:
        # BACKOFF counts as pending, not active: the node may still serve as a
        # receiver meanwhile, and must retry once the counter runs out.
        return self.sender is None or self.sender.state is SenderState.BACKOFF

    def _wants_contention(self) -> bool:
        if self.tsinfo_pending:
            return True
        return bool(self.queue) and self._sender_can_contend() and self.receiver is None

    def _plan_contention(self, min_abs: int | None) -> None:
        """Pick the next candidate slot and ask the engine for a wake there."""
        if not self._wants_contention():
            return
        cycle, slot = self.api.now
        from_abs = absolute_slot(cycle, slot) + 1
        if min_abs is not None and min_abs > from_abs:
            from_abs = min_abs
        nxt = self._next_candidate(from_abs)
        if nxt is None:
            self.next_contention_abs = None
            return
        self.next_contention_abs = nxt
        self.api.wake(self.address, *cycle_slot(nxt))

    def _next_candidate(self, from_abs: int) -> int | None:
        """First slot usable in the own mask, outside the NAV, before expiry."""
        cycle = from_abs // SLOTS_PER_CYCLE
        if self.is_sensing(cycle) or not self._mask_valid(cycle):
            return None  # re-planned when the fresh mask lands
        bits = self._mask_bits()
        if bits == 0:
            return None
        limit = (self.horizon_cycles if self.mask_never_expires
                 else self.mask.valid_until_cycle) * SLOTS_PER_CYCLE
        abs_slot = from_abs
        while abs_slot < limit:
            if (bits >> (abs_slot % SLOTS_PER_CYCLE)) & 1 and not self.nav.reserved(abs_slot):
                return abs_slot
            abs_slot += 1
        return None

    def _contend(self, cycle: int, slot: int) -> None:
        abs_now = absolute_slot(cycle, slot)
        if self.next_contention_abs != abs_now:
            return
        self.next_contention_abs = None
        if not self._wants_contention():
            return
        # Conditions may have changed since the wake was scheduled.
        if (self.is_sensing(cycle) or not self._mask_valid(cycle)
                or not self.mask.usable(slot) or self.nav.reserved(abs_now)):
            self._plan_contention(abs_now + 1)
            return
        if self.tsinfo_pending:
            self.tsinfo_pending = False
            frame = frames.Tsinfo(self.address, frames.BROADCAST, 0, self._mask_bits())
            self.api.emit(self.address, frame, Phase.CONTROL_A)
            self._plan_contention(abs_now + 1)
            return
        if self.backoff_remaining > 0:
            self.backoff_remaining -= 1
            self._plan_contention(abs_now + 1)
            return
        self._start_exchange(cycle, slot)

    def _start_exchange(self, cycle: int, slot: int) -> None:
        packet = self.queue[0]
        duration = max(1, -(-len(packet.payload) // self.payload_bytes_per_slot))
        if self.sender is None:
            data = frames.Data(self.address, packet.dst, packet.seq, packet.payload, 0,
                               frames.NULL_ADDRESS)
            self.sender = SenderCtx(packet, data, frames.frame_crc(data), duration)
        ctx = self.sender
        ctx.state = SenderState.AWAIT_CTS
        self._attempt_counter += 1
        ctx.attempt_id = self._attempt_counter
        retx = 1 if ctx.failures else 0
        rts = frames.Rts(self.address, packet.dst, packet.seq, self._mask_bits(),
                         duration, retx)
        self._log_sender(SenderState.AWAIT_CTS)
        self.api.emit(self.address, rts, Phase.CONTROL_A)
        self.api.set_timer(self.address, cycle, slot, "cts_timeout", ctx.attempt_id)

    # ------------------------------------------------------------------
    # slot duties

    def on_slot(self, cycle: int, slot: int) -> None:
        abs_now = absolute_slot(cycle, slot)
        if abs_now - self._last_prune_abs >= 4 * SLOTS_PER_CYCLE:
            self._last_prune_abs = abs_now
            self.nav.prune_before(abs_now)
        if self.is_sensing(cycle):
            return
        sender = self.sender
        if sender is not None and sender.state is SenderState.TRANSMITTING \
                and abs_now in sender.data_slots:
            index = sender.data_slots.index(abs_now)
            self.api.emit(self.address, sender.data_frame, Phase.PAYLOAD,
                          chunk=(index, sender.duration))
            sender.chunks_sent += 1
            if sender.chunks_sent == sender.duration:
                sender.state = SenderState.AWAIT_ACK_NACK
                self._log_sender(SenderState.AWAIT_ACK_NACK)

        receiver = self.receiver
        if receiver is not None:
            if receiver.state is ReceiverState.RESERVED and receiver.data_slots \
                    and abs_now == receiver.data_slots[0]:
                receiver.state = ReceiverState.AWAIT_DATA
                self._log_receiver(ReceiverState.AWAIT_DATA)
            if abs_now == receiver.ack_slot and receiver.response is not None:
                self._emit_receiver_response(cycle, slot)
            elif receiver.announced_ack_slot == abs_now and receiver.response is not None:
                self._emit_receiver_response(cycle, slot)

        for ctx in self._observer_duties(abs_now):
            self._observer_slot_duty(ctx, cycle, slot, abs_now)

        self._contend(cycle, slot)

    def _observer_duties(self, abs_now: int) -> list[ObserverCtx]:
        duties = [ctx for ctx in self.observers.values()
                  if abs_now in ctx.cont_slots or abs_now in ctx.announced_data_slots]
        duties.sort(key=lambda c: c.key)
        return duties

    def _observer_slot_duty(self, ctx: ObserverCtx, cycle: int, slot: int, abs_now: int) -> None:
        if ctx.state is ObserverState.RETRANSMITTING and abs_now in ctx.announced_data_slots:
            index = ctx.announced_data_slots.index(abs_now)
            self.api.emit(self.address, ctx.retx_frame, Phase.PAYLOAD,
                          chunk=(index, ctx.nack_duration))
            ctx.retx_chunks_sent += 1
            if ctx.retx_chunks_sent == ctx.nack_duration:
                self._drop_adoption(ctx, "retransmitted")
            return
        if ctx.pa_role is None or not ctx.holds_packet:
            return
        if ctx.cont_slots and abs_now == ctx.cont_slots[0] and ctx.pa_role == 1:
            self._pa_announce(ctx, cycle, slot)
        elif len(ctx.cont_slots) > 1 and abs_now == ctx.cont_slots[1] and ctx.pa_role == 2:
            if ctx.heard_announce:
                # The first contingency slot carried an announce; duty passed.
                self._drop_adoption(ctx, "pa1_announced")
            else:
                self._pa_announce(ctx, cycle, slot)

    def _pa_announce(self, ctx: ObserverCtx, cycle: int, slot: int) -> None:
        if not self._mask_valid(cycle) or not self.mask.usable(slot):
            return  # stay silent; the other candidate or the sender recovers
        common_bits = common(self._mask_bits(), ctx.nack_receiver_mask)
        try:
            slots = compute_required_slots(common_bits, ctx.nack_duration, self.nav,
                                           absolute_slot(cycle, slot) + 1,
                                           self._expiry_bound(cycle), contingency=False)
        except (NoCommonSlots, NoWindow):
            return
        reserved = tuple((c - cycle, s) for c, s in (cycle_slot(a) for a in slots))
        announce = frames.Announce(self.address, ctx.receiver, ctx.seq, reserved,
                                   ctx.sender, ctx.seq)
        ctx.announced_data_slots = slots[:-1]
        ctx.announced_ack_slot = slots[-1]
        ctx.retx_frame = frames.Data(self.address, ctx.receiver, ctx.seq, ctx.payload,
                                     1, ctx.sender)
        self.nav.add(slots, self.address, ctx.receiver, NavKind.EXTENDED, ctx.key)
        self._log_observer(ctx, ObserverState.RETRANSMITTING)
        self.api.emit(self.address, announce, Phase.CONTROL_A,
                      detail=f"role=pa{ctx.pa_role};slots=" + "+".join(map(str, slots)))
        for abs_slot in ctx.announced_data_slots:
            self.api.wake(self.address, *cycle_slot(abs_slot))

    def _emit_receiver_response(self, cycle: int, slot: int) -> None:
        receiver = self.receiver
        response = receiver.response
        receiver.response = None
        self.api.emit(self.address, response, Phase.PAYLOAD)
        if isinstance(response, frames.Ack):
            # Exchange complete on this side.
            self.nav.drop_exchange(receiver.key(self.address),
                                   absolute_slot(cycle, slot) + 1)
            self._close_receiver()
        else:
            receiver.state = ReceiverState.AWAIT_ANNOUNCE
            self._log_receiver(ReceiverState.AWAIT_ANNOUNCE)
            end_c, end_s = cycle_slot(receiver.cont_slots[-1])
            self.api.set_timer(self.address, end_c, end_s, "recv_announce_window",
                               receiver.seq)

    def _close_receiver(self) -> None:
        self.receiver = None
        self._log_receiver(ReceiverState.IDLE)
        self._plan_contention(None)

    # ------------------------------------------------------------------
    # frame reception

    def on_frame(self, frame, outcome: DeliveryOutcome, cycle: int, slot: int,
                 phase: Phase) -> None:
        if outcome is DeliveryOutcome.CORRUPTED:
            self._on_corrupted(frame, cycle, slot)
            return
        if outcome is not DeliveryOutcome.INTACT:
            return
        kind = type(frame)
        if kind is frames.Rts:
            self._on_rts(frame, cycle, slot)
        elif kind is frames.Cts:
            self._on_cts(frame, cycle, slot)
        elif kind is frames.Data:
            self._on_data(frame, outcome, cycle, slot)
        elif kind is frames.Ack:
            self._on_ack(frame, cycle, slot)
        elif kind is frames.Nack:
            self._on_nack(frame, cycle, slot)
        elif kind is frames.Announce:
            self._on_announce(frame, cycle, slot)
        elif kind is frames.Tsinfo:
            if self.features.proximity and self.mask is not None:
                self.prox.observe(frame.src, frame.mask, self._mask_bits(), cycle)

    def _on_corrupted(self, frame, cycle: int, slot: int) -> None:
        abs_now = absolute_slot(cycle, slot)
        if isinstance(frame, frames.Announce):
            # Detected energy in a contingency slot silences the second
            # candidate even when the announce itself did not decode.
            for ctx in self.observers.values():
                if ctx.cont_slots and abs_now in ctx.cont_slots:
                    ctx.heard_announce = True
        elif isinstance(frame, frames.Data):
            self._on_data(frame, DeliveryOutcome.CORRUPTED, cycle, slot)

    # -- receiver side --

    def _on_rts(self, frame: frames.Rts, cycle: int, slot: int) -> None:
        if self.features.proximity and self.mask is not None:
            self.prox.observe(frame.src, frame.sender_mask, self._mask_bits(), cycle)
        if frame.dst != self.address:
            return  # defer through ControlB and watch for the CTS
        if (self.sender is not None and self.sender.state is not SenderState.BACKOFF) \
                or self.receiver is not None:
            return  # busy: silence, the sender times out and retries
        if self.is_sensing(cycle) or not self._mask_valid(cycle) or not self.mask.usable(slot):
            return
        nav_entry = self.nav.entry(absolute_slot(cycle, slot))
        if nav_entry is not None and self.address not in (nav_entry.src, nav_entry.dst):
            return  # the slot is reserved for somebody else's exchange
        common_bits = common(self._mask_bits(), frame.sender_mask)
        try:
            slots = compute_required_slots(common_bits, frame.duration_slots, self.nav,
                                           absolute_slot(cycle, slot) + 1,
                                           self._expiry_bound(cycle))
        except (NoCommonSlots, NoWindow):
            return  # no suitable window: silence
        reserved = tuple((c - cycle, s) for c, s in (cycle_slot(a) for a in slots))
        cts = frames.Cts(self.address, frame.src, frame.seq, reserved, frame.duration_slots)
        self.receiver = ReceiverCtx(frame.src, frame.seq, frame.duration_slots,
                                    slots[:frame.duration_slots],
                                    slots[frame.duration_slots],
                                    slots[frame.duration_slots + 1:])
        key = (frame.src, self.address, frame.seq)
        self.nav.add(slots, frame.src, self.address, NavKind.PRIMARY, key)
        self._log_receiver(ReceiverState.RESERVED)
        self.api.emit(self.address, cts, Phase.CONTROL_B,
                      detail="slots=" + "+".join(map(str, slots)))
        self.api.wake(self.address, *cycle_slot(self.receiver.data_slots[0]))
        self.api.wake(self.address, *cycle_slot(self.receiver.ack_slot))
        ack_c, ack_s = cycle_slot(self.receiver.ack_slot)
        self.api.set_timer(self.address, ack_c, ack_s, "recv_close", frame.seq)

    def _on_data(self, frame: frames.Data, outcome: DeliveryOutcome, cycle: int,
                 slot: int) -> None:
        if frame.dst == self.address:
            self._receiver_on_data(frame, outcome, cycle, slot)
        elif self.features.proximity:
            self._observer_on_data(frame, outcome, cycle)

    def _receiver_on_data(self, frame: frames.Data, outcome: DeliveryOutcome,
                          cycle: int, slot: int) -> None:
        receiver = self.receiver
        if frame.retx == 0:
            if receiver is None or receiver.sender != frame.src or receiver.seq != frame.seq:
                return
            if outcome is DeliveryOutcome.INTACT:
                crc = frames.frame_crc(frame)
                receiver.response = frames.Ack(self.address, frame.src, frame.seq,
                                               crc, frame.src)
                self._deliver_app(frame.src, frame.seq, frame.payload, "direct")
            else:
                pa1, pa2 = (self.prox.top_two() if self.features.proximity
                            else (None, None))
                receiver.response = frames.Nack(
                    self.address, frame.src, frame.seq, frames.frame_crc(frame),
                    frame.src, pa1 or frames.NULL_ADDRESS, pa2 or frames.NULL_ADDRESS,
                    self._mask_bits(), receiver.duration)
            return
        # Retransmitted copy: ACK goes to the original sender; a corrupted
        # retransmission draws no NACK.
        if outcome is not DeliveryOutcome.INTACT:
            return
        crc = frames.frame_crc(frame)
        ack = frames.Ack(self.address, frame.original_src, frame.seq, crc,
                         frame.original_src)
        if receiver is not None and receiver.sender == frame.original_src \
                and receiver.seq == frame.seq:
            receiver.response = ack
            if receiver.announced_ack_slot is None:
                # Announce was missed: answer in the next usable slot instead.
                receiver.announced_ack_slot = self._fallback_ack_slot(cycle, slot)
            if receiver.announced_ack_slot is not None:
                self.api.wake(self.address, *cycle_slot(receiver.announced_ack_slot))
                self._deliver_app(frame.original_src, frame.seq, frame.payload, "pa")
        elif receiver is None:
            # Exchange context already closed; acknowledge statelessly.
            ack_abs = self._fallback_ack_slot(cycle, slot)
            if ack_abs is not None:
                self.receiver = ReceiverCtx(frame.original_src, frame.seq, 1, [],
                                            -1, [], state=ReceiverState.AWAIT_ADOPTED,
                                            response=ack, announced_ack_slot=ack_abs)
                self.api.wake(self.address, *cycle_slot(ack_abs))
                self._deliver_app(frame.original_src, frame.seq, frame.payload, "pa")

    def _fallback_ack_slot(self, cycle: int, slot: int) -> int | None:
        abs_next = absolute_slot(cycle, slot) + 1
        if not self._mask_valid(abs_next // SLOTS_PER_CYCLE):
            return None
        if self.mask.usable(abs_next % SLOTS_PER_CYCLE):
            return abs_next
        return self._next_candidate(abs_next)

    def _deliver_app(self, original_src: int, seq: int, payload: bytes, via: str) -> None:
        if self.dedupe.seen_before(original_src, seq):
            self.api.log_duplicate(self.address, original_src, seq)
        else:
            self.api.log_delivery(self.address, original_src, seq, len(payload), via)

    # -- observer side --

    def _observer_on_data(self, frame: frames.Data, outcome: DeliveryOutcome,
                          cycle: int) -> None:
        if frame.retx:
            return  # a retransmitted copy is never adopted
        ctx = self.observers.get((frame.src, frame.dst, frame.seq))
        if ctx is None:
            return
        if outcome is DeliveryOutcome.INTACT:
            ctx.payload = frame.payload
            ctx.data_crc = frames.frame_crc(frame)
            ctx.adopted_at_cycle = cycle
            self.api.log_adoption(self.address, ctx.key)
            self._log_observer(ctx, ObserverState.HOLDING)
        else:
            self.api.log_adoption_drop(self.address, ctx.key, "crc")

    def _on_cts(self, frame: frames.Cts, cycle: int, slot: int) -> None:
        abs_slots = [absolute_slot(cycle + off, s) for off, s in frame.reserved]
        sender = self.sender
        if sender is not None and sender.state is SenderState.AWAIT_CTS \
                and frame.dst == self.address and frame.src == sender.packet.dst \
                and frame.seq == sender.packet.seq:
            sender.data_slots = abs_slots[:sender.duration]
            sender.ack_slot = abs_slots[sender.duration]
            sender.cont_slots = abs_slots[sender.duration + 1:]
            sender.chunks_sent = 0
            sender.state = SenderState.TRANSMITTING
            self._log_sender(SenderState.TRANSMITTING)
            self.nav.add(abs_slots, self.address, frame.src, NavKind.PRIMARY, sender.key)
            for abs_slot in sender.data_slots:
                self.api.wake(self.address, *cycle_slot(abs_slot))
            ack_c, ack_s = cycle_slot(sender.ack_slot)
            self.api.set_timer(self.address, ack_c, ack_s, "ack_timeout", sender.attempt_id)
            return
        if frame.dst == self.address or frame.src == self.address:
            return
        # Observer: reserve every listed slot.
        key = (frame.dst, frame.src, frame.seq)
        self.nav.add(abs_slots, frame.dst, frame.src, NavKind.PRIMARY, key)
        if self.features.proximity:
            duration = frame.duration_slots
            ctx = ObserverCtx(key, frame.dst, frame.src, frame.seq, duration,
                              abs_slots[:duration], abs_slots[duration],
                              abs_slots[duration + 1:])
            old = self.observers.get(key)
            if old is not None and old.holds_packet:
                # A sender redo of the same packet: the adopted copy is still
                # the right payload, only the reservation moved.
                ctx.payload = old.payload
                ctx.data_crc = old.data_crc
                ctx.adopted_at_cycle = old.adopted_at_cycle
                ctx.state = ObserverState.HOLDING
            self.observers[key] = ctx
            self._log_observer(ctx, ctx.state)
        self._reroute_contention(abs_slots)

    def _reroute_contention(self, reserved_abs: list[int]) -> None:
        if self.next_contention_abs is not None and self.next_contention_abs in reserved_abs:
            self._plan_contention(self.next_contention_abs)

    def _sweep_observers(self, cycle: int) -> None:
        """Evict exchange contexts whose resolution was never overheard."""
        abs_now = absolute_slot(cycle, 0)
        for key in [k for k, c in self.observers.items() if self._expired(c, abs_now)]:
            ctx = self.observers.pop(key)
            if ctx.holds_packet:
                self.api.log_adoption_drop(self.address, key, "timeout")
            self._log_observer(ctx, ObserverState.IDLE)

    @staticmethod
    def _expired(ctx: ObserverCtx, abs_now: int) -> bool:
        last = max([ctx.ack_slot, *ctx.cont_slots, *ctx.announced_data_slots,
                    ctx.announced_ack_slot or 0])
        return last + 2 * SLOTS_PER_CYCLE < abs_now

    def _on_ack(self, frame: frames.Ack, cycle: int, slot: int) -> None:
        key = (frame.original_src, frame.src, frame.seq)
        self.nav.drop_exchange(key, absolute_slot(cycle, slot) + 1)
        sender = self.sender
        if sender is not None and frame.dst == self.address \
                and frame.original_src == self.address \
                and frame.src == sender.packet.dst and frame.seq == sender.packet.seq:
            # The echoed CRC of a retransmitted copy differs from ours.
            via = "direct" if frame.echoed_crc == sender.data_crc else "pa"
            self.api.log_exchange_done(self.address, sender.packet.dst,
                                       sender.packet.seq, via, sender.failures)
            self.queue.popleft()
            self.sender = None
            self._log_sender(SenderState.IDLE)
            self._plan_contention(None)
        ctx = self.observers.pop(key, None)
        if ctx is not None:
            if ctx.holds_packet and ctx.state is not ObserverState.RETRANSMITTING:
                self.api.log_adoption_drop(self.address, key, "acked")
            self._log_observer(ctx, ObserverState.IDLE)

    def _on_nack(self, frame: frames.Nack, cycle: int, slot: int) -> None:
        key = (frame.original_src, frame.src, frame.seq)
        sender = self.sender
        if sender is not None and frame.dst == self.address \
                and frame.original_src == self.address \
                and frame.src == sender.packet.dst and frame.seq == sender.packet.seq:
            assert sender.data_frame.retx == 0
            sender.state = SenderState.AWAIT_PA_ACK
            self._log_sender(SenderState.AWAIT_PA_ACK)
            if sender.cont_slots:
                end_c, end_s = cycle_slot(sender.cont_slots[-1])
                self.api.set_timer(self.address, end_c, end_s, "pa_window_end",
                                   sender.attempt_id)
            return
        ctx = self.observers.get(key)
        if ctx is None:
            return
        if self.address == frame.pa1 and ctx.holds_packet:
            ctx.pa_role = 1
        elif self.address == frame.pa2 and ctx.holds_packet:
            ctx.pa_role = 2
        else:
            if ctx.holds_packet:
                ctx.payload = None
                self.api.log_adoption_drop(self.address, key, "nack_other")
            self._log_observer(ctx, ObserverState.AWAIT_ANNOUNCE)
            return
        duty = ctx.cont_slots[0] if ctx.pa_role == 1 else ctx.cont_slots[1]
        if duty <= absolute_slot(cycle, slot):
            # Contingency slots from a reservation this node missed; it cannot
            # know where to announce, so it stays silent.
            ctx.pa_role = None
            return
        ctx.nack_receiver_mask = frame.receiver_mask
        ctx.nack_duration = frame.duration_slots
        self.api.wake(self.address, *cycle_slot(duty))

    def _on_announce(self, frame: frames.Announce, cycle: int, slot: int) -> None:
        abs_now = absolute_slot(cycle, slot)
        abs_slots = [absolute_slot(cycle + off, s) for off, s in frame.reserved]
        key = (frame.original_src, frame.dst, frame.echoed_seq)
        if frame.src != self.address:
            self.nav.add(abs_slots, frame.src, frame.dst, NavKind.EXTENDED, key)
            self._reroute_contention(abs_slots)
        for ctx in list(self.observers.values()):
            if ctx.cont_slots and abs_now in ctx.cont_slots:
                ctx.heard_announce = True
                if ctx.key == key and ctx.pa_role == 2 and frame.src != self.address \
                        and ctx.holds_packet:
                    self._drop_adoption(ctx, "pa1_announced")
        sender = self.sender
        if sender is not None and frame.original_src == self.address \
                and frame.echoed_seq == sender.packet.seq \
                and sender.state is SenderState.AWAIT_PA_ACK:
            sender.announce_seen = True
            sender.announced_ack_slot = abs_slots[-1]
            end_c, end_s = cycle_slot(abs_slots[-1])
            self.api.set_timer(self.address, end_c, end_s, "pa_ack_timeout",
                               sender.attempt_id)
        receiver = self.receiver
        if receiver is not None and frame.dst == self.address \
                and receiver.key(self.address) == key \
                and receiver.state is ReceiverState.AWAIT_ANNOUNCE:
            receiver.state = ReceiverState.AWAIT_ADOPTED
            self._log_receiver(ReceiverState.AWAIT_ADOPTED)
            receiver.announced_data_slots = abs_slots[:-1]
            receiver.announced_ack_slot = abs_slots[-1]
            end_c, end_s = cycle_slot(abs_slots[-1])
            self.api.set_timer(self.address, end_c, end_s, "recv_retx_close",
                               receiver.seq)

    def _drop_adoption(self, ctx: ObserverCtx, cause: str) -> None:
        if ctx.holds_packet:
            ctx.payload = None
            self.api.log_adoption_drop(self.address, ctx.key, cause)
        self.observers.pop(ctx.key, None)
        self._log_observer(ctx, ObserverState.IDLE)

    # ------------------------------------------------------------------
    # timers

    def on_timer(self, tag: str, token, cycle: int, slot: int) -> None:
        if tag == "sensing_done":
            if self.sensing_since == token:
                self.on_sensing_complete(cycle, token)
            return
        if tag == "cts_timeout":
            sender = self.sender
            if sender is not None and sender.attempt_id == token \
                    and sender.state is SenderState.AWAIT_CTS:
                self._fail_attempt("no_cts")
            return
        if tag == "ack_timeout":
            sender = self.sender
            if sender is not None and sender.attempt_id == token \
                    and sender.state is SenderState.AWAIT_ACK_NACK:
                self._fail_attempt("no_ack_nack")
            return
        if tag == "pa_window_end":
            sender = self.sender
            if sender is not None and sender.attempt_id == token \
                    and sender.state is SenderState.AWAIT_PA_ACK \
                    and not sender.announce_seen:
                self._fail_attempt("no_announce")
            return
        if tag == "pa_ack_timeout":
            sender = self.sender
            if sender is not None and sender.attempt_id == token \
                    and sender.state is SenderState.AWAIT_PA_ACK:
                self._fail_attempt("no_pa_ack")
            return
        if tag == "recv_announce_window":
            receiver = self.receiver
            if receiver is not None and receiver.seq == token \
                    and receiver.state is ReceiverState.AWAIT_ANNOUNCE:
                self._close_receiver()
            return
        if tag in ("recv_close", "recv_retx_close"):
            receiver = self.receiver
            if receiver is not None and receiver.seq == token:
                if tag == "recv_close" and receiver.state in (ReceiverState.RESERVED,
                                                              ReceiverState.AWAIT_DATA):
                    self._close_receiver()
                elif tag == "recv_retx_close" \
                        and receiver.state is ReceiverState.AWAIT_ADOPTED:
                    self._close_receiver()
            return

    def _fail_attempt(self, reason: str) -> None:
        sender = self.sender
        sender.failures += 1
        cycle, slot = self.api.now
        self.nav.drop_exchange(sender.key, absolute_slot(cycle, slot) + 1)
        if sender.failures > RETRY_LIMIT:
            self.api.log_lost(self.address, sender.packet.dst, sender.packet.seq,
                              reason)
            self.queue.popleft()
            self.sender = None
            self._log_sender(SenderState.IDLE)
            self._plan_contention(None)
            return
        sender.state = SenderState.BACKOFF
        sender.data_slots = []
        sender.ack_slot = None
        sender.cont_slots = []
        sender.announce_seen = False
        self._log_sender(SenderState.BACKOFF)
        self.backoff_remaining = self.api.rng.randint(0, backoff_window(sender.failures) - 1)
        self._plan_contention(None)
