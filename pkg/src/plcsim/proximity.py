"""Per-node ranked list of the peers sharing the most usable timeslots.

"Closeness" here is common-usable-slot count, not meters. The list is fed by
overheard reservation requests and by the periodic timeslot broadcasts, and
its top two entries become the candidate retransmitters named in a NACK.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .slotmap import MASK_VALIDITY_CYCLES, common, popcount

CAPACITY = 3
# An entry that missed two consecutive broadcast periods is presumed gone.
STALE_AFTER_CYCLES = 2 * MASK_VALIDITY_CYCLES


@dataclass
class ProximityEntry:
    peer: int
    peer_mask: int
    common_count: int
    observed_at_cycle: int


@dataclass
class ProximityList:
    owner: int
    entries: list[ProximityEntry] = field(default_factory=list)

    def observe(self, peer: int, peer_mask: int, own_mask: int, cycle: int) -> None:
        """Insert or update a peer from a decoded mask advertisement."""
        if peer == self.owner:
            return
        self._evict_stale(cycle)
        count = popcount(common(own_mask, peer_mask))
        for entry in self.entries:
            if entry.peer == peer:
                entry.peer_mask = peer_mask
                entry.common_count = count
                entry.observed_at_cycle = cycle
                break
        else:
            self.entries.append(ProximityEntry(peer, peer_mask, count, cycle))
        self._sort_and_truncate()

    def refresh_own_mask(self, own_mask: int, cycle: int) -> None:
        """Recompute ranks after the owner's own mask was replaced."""
        self._evict_stale(cycle)
        for entry in self.entries:
            entry.common_count = popcount(common(own_mask, entry.peer_mask))
        self._sort_and_truncate()

    def top_two(self) -> tuple[int | None, int | None]:
        first = self.entries[0].peer if self.entries else None
        second = self.entries[1].peer if len(self.entries) > 1 else None
        return first, second

    def _sort_and_truncate(self) -> None:
        # Most common slots first; ties to the lower address, then the more
        # recently observed.
        self.entries.sort(key=lambda e: (-e.common_count, e.peer, -e.observed_at_cycle))
        del self.entries[CAPACITY:]

    def _evict_stale(self, cycle: int) -> None:
        self.entries = [e for e in self.entries
                        if cycle - e.observed_at_cycle <= STALE_AFTER_CYCLES]
