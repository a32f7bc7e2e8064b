"""Power-cycle clock arithmetic: 64 timeslots per AC cycle, phased slots."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

SLOTS_PER_CYCLE = 64
HALF_CYCLE_SLOTS = SLOTS_PER_CYCLE // 2
SUPPORTED_AC_HZ = (50, 60)


class Phase(IntEnum):
    """Fixed intra-slot sequence; control exchanges precede the payload.

    A reservation handshake completes inside one slot: the request goes out
    in CONTROL_A and the grant comes back in CONTROL_B of the same slot.
    """

    SENSE_GUARD = 0
    CONTROL_A = 1
    CONTROL_B = 2
    PAYLOAD = 3
    TURNAROUND = 4


# Fraction of the slot at which each phase begins (5/15/15/60/5 split).
PHASE_START_FRACTION = {
    Phase.SENSE_GUARD: 0.00,
    Phase.CONTROL_A: 0.05,
    Phase.CONTROL_B: 0.20,
    Phase.PAYLOAD: 0.35,
    Phase.TURNAROUND: 0.95,
}
PHASE_END_FRACTION = {
    Phase.SENSE_GUARD: 0.05,
    Phase.CONTROL_A: 0.20,
    Phase.CONTROL_B: 0.35,
    Phase.PAYLOAD: 0.95,
    Phase.TURNAROUND: 1.00,
}


class UnsupportedFrequency(ValueError):
    """AC mains frequency outside the supported 50/60 Hz set."""


class SlotOutOfRange(ValueError):
    """Slot index outside [0, 63]."""


def slot_duration(ac_hz: int) -> float:
    """Seconds occupied by one of the 64 slots of a power cycle."""
    if ac_hz not in SUPPORTED_AC_HZ:
        raise UnsupportedFrequency(f"ac_hz must be one of {SUPPORTED_AC_HZ}, got {ac_hz!r}")
    return (1.0 / ac_hz) / SLOTS_PER_CYCLE


def instant_of(cycle: int, slot: int, ac_hz: int, phase: Phase = Phase.SENSE_GUARD) -> float:
    """Wall-clock seconds at which (cycle, slot, phase) begins."""
    if not 0 <= slot < SLOTS_PER_CYCLE:
        raise SlotOutOfRange(f"slot must be in [0, {SLOTS_PER_CYCLE - 1}], got {slot}")
    dur = slot_duration(ac_hz)
    return cycle / ac_hz + slot * dur + PHASE_START_FRACTION[phase] * dur


def phase_interval(cycle: int, slot: int, phase: Phase, ac_hz: int) -> tuple[float, float]:
    """[start, end) seconds spanned by one phase of one slot."""
    if not 0 <= slot < SLOTS_PER_CYCLE:
        raise SlotOutOfRange(f"slot must be in [0, {SLOTS_PER_CYCLE - 1}], got {slot}")
    dur = slot_duration(ac_hz)
    base = cycle / ac_hz + slot * dur
    return (base + PHASE_START_FRACTION[phase] * dur, base + PHASE_END_FRACTION[phase] * dur)


def slot_interval(cycle: int, slot: int, ac_hz: int) -> tuple[float, float]:
    """[start, end) seconds spanned by a whole slot."""
    if not 0 <= slot < SLOTS_PER_CYCLE:
        raise SlotOutOfRange(f"slot must be in [0, {SLOTS_PER_CYCLE - 1}], got {slot}")
    dur = slot_duration(ac_hz)
    start = cycle / ac_hz + slot * dur
    return (start, start + dur)


def absolute_slot(cycle: int, slot: int) -> int:
    """Flatten (cycle, slot) into a single monotonically increasing index."""
    return cycle * SLOTS_PER_CYCLE + slot


def cycle_slot(abs_slot: int) -> tuple[int, int]:
    """Inverse of absolute_slot."""
    return divmod(abs_slot, SLOTS_PER_CYCLE)


@dataclass(frozen=True, order=True)
class SimClock:
    """An instant on the simulation timeline.

    Ordering is lexicographic (cycle, slot, phase), matching the strictly
    increasing wall-clock mapping of seconds().
    """

    cycle: int
    slot: int
    phase: Phase = Phase.SENSE_GUARD

    def __post_init__(self):
        if self.cycle < 0:
            raise ValueError(f"cycle must be non-negative, got {self.cycle}")
        if not 0 <= self.slot < SLOTS_PER_CYCLE:
            raise SlotOutOfRange(f"slot must be in [0, {SLOTS_PER_CYCLE - 1}], got {self.slot}")

    def seconds(self, ac_hz: int) -> float:
        return instant_of(self.cycle, self.slot, ac_hz, self.phase)
