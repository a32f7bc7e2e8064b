"""Usable-timeslot masks: 3-cycle sensing, 300-cycle validity, mask algebra."""

from __future__ import annotations

from dataclasses import dataclass

from .clock import SLOTS_PER_CYCLE, slot_interval

SENSING_CYCLES = 3
MASK_VALIDITY_CYCLES = 300
FULL_MASK = (1 << SLOTS_PER_CYCLE) - 1
MASK_BYTES = SLOTS_PER_CYCLE // 8


class SensingInterrupted(RuntimeError):
    """A node was forced to transmit mid-sensing; the 3-cycle scan restarts."""


@dataclass(frozen=True)
class SlotMask:
    """Bit i set means slot i is usable. Replaced whole at each refresh."""

    bits: int
    owner: int
    sensed_at_cycle: int

    @property
    def valid_until_cycle(self) -> int:
        return self.sensed_at_cycle + MASK_VALIDITY_CYCLES

    def usable(self, slot: int) -> bool:
        return bool((self.bits >> slot) & 1)

    def valid_at(self, cycle: int) -> bool:
        return self.sensed_at_cycle <= cycle < self.valid_until_cycle


def common(bits_a: int, bits_b: int) -> int:
    """Slots usable by both parties (bitwise intersection)."""
    return bits_a & bits_b


def popcount(bits: int) -> int:
    return bits.bit_count()


def mask_to_bytes(bits: int) -> bytes:
    """Wire form: 8 bytes big-endian with wire bit 63 carrying slot 0."""
    wire = int(format(bits & FULL_MASK, "064b")[::-1], 2)
    return wire.to_bytes(MASK_BYTES, "big")


def mask_from_bytes(raw: bytes) -> int:
    if len(raw) != MASK_BYTES:
        raise ValueError(f"mask must be {MASK_BYTES} bytes, got {len(raw)}")
    wire = int.from_bytes(raw, "big")
    return int(format(wire, "064b")[::-1], 2)


def sense_usable_slots(channel, address: int, start_cycle: int,
                       threshold_dbm: float) -> SlotMask:
    """Mask from 3 full cycles of listening at the node's position.

    A slot is usable when the worst (maximum) noise power seen in it over the
    3 cycles stays below the threshold; the max statistic guarantees that an
    impulse recurring every half cycle is caught.
    """
    bits = 0
    ac_hz = channel.ac_hz
    for slot in range(SLOTS_PER_CYCLE):
        worst = -float("inf")
        for c in range(SENSING_CYCLES):
            t0, t1 = slot_interval(start_cycle + c, slot, ac_hz)
            level = channel.noise_power_dbm(address, slot, t0, t1)
            if level > worst:
                worst = level
        if worst < threshold_dbm:
            bits |= 1 << slot
    return SlotMask(bits, address, start_cycle + SENSING_CYCLES)


def schedule_refresh(mask: SlotMask) -> int:
    """Cycle at which re-sensing falls due (the mask's expiry)."""
    return mask.valid_until_cycle
