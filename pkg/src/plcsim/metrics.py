"""Trace aggregation: delivery, throughput and retransmission accounting.

Stats are a pure fold over trace rows, so recomputing them from a persisted
trace file reproduces the in-memory summary exactly.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

CONTROL_FRAMES = {"RTS", "CTS", "ACK", "NACK", "ANNOUNCE", "TSINFO"}


class UnknownEvent(ValueError):
    pass


class ScenarioMismatch(ValueError):
    pass


@dataclass
class RunStats:
    protocol: str = ""
    seed: int = 0
    packets_offered: int = 0
    delivered: int = 0
    lost: int = 0
    exchanges: int = 0
    sender_retransmissions: int = 0
    pa1_retransmissions: int = 0
    pa2_retransmissions: int = 0
    pa_rescues: int = 0
    duplicates: int = 0
    slots_transmitted: int = 0
    slots_reserved: int = 0
    control_overhead_slots: int = 0
    delivered_payload_bytes: int = 0
    adoption_count: int = 0
    offered_per_node: dict = field(default_factory=lambda: defaultdict(int))
    delivered_per_node: dict = field(default_factory=lambda: defaultdict(int))
    lost_per_node: dict = field(default_factory=lambda: defaultdict(int))

    @property
    def pa_retransmissions(self) -> int:
        return self.pa1_retransmissions + self.pa2_retransmissions

    @property
    def in_flight(self) -> int:
        return self.packets_offered - self.delivered - self.lost


_KNOWN_KINDS = {"arrival", "deliver", "dup", "lost", "tx", "rx", "state", "adopt",
                "adopt_drop", "exchange_done", "sensing_due", "sensing_done",
                "mask_expiry"}


def _detail_fields(detail: str) -> dict[str, str]:
    out = {}
    for part in detail.split(";"):
        if "=" in part:
            k, _, v = part.partition("=")
            out[k] = v
    return out


def record(stats: RunStats, row) -> RunStats:
    """Update counters from one trace row (columns as written by the engine)."""
    kind = row[4]
    if kind not in _KNOWN_KINDS:
        raise UnknownEvent(f"unknown trace event kind {kind!r}")
    detail = _detail_fields(row[9])
    if kind == "arrival":
        stats.packets_offered += 1
        stats.offered_per_node[row[5]] += 1
    elif kind == "deliver":
        stats.delivered += 1
        stats.delivered_per_node[row[6]] += 1
        stats.delivered_payload_bytes += int(detail.get("bytes", "0"))
        if detail.get("via") == "pa":
            stats.pa_rescues += 1
    elif kind == "dup":
        stats.duplicates += 1
    elif kind == "lost":
        stats.lost += 1
        stats.lost_per_node[row[5]] += 1
    elif kind == "adopt":
        stats.adoption_count += 1
    elif kind == "tx":
        ftype = row[7]
        stats.slots_transmitted += 1
        if ftype in CONTROL_FRAMES:
            stats.control_overhead_slots += 1
        if ftype == "RTS":
            if detail.get("retx") == "0":
                stats.exchanges += 1
            else:
                stats.sender_retransmissions += 1
        elif ftype in ("CTS", "ANNOUNCE"):
            slots = detail.get("slots", "")
            stats.slots_reserved += len(slots.split("+")) if slots else 0
            if ftype == "ANNOUNCE":
                if detail.get("role") == "pa1":
                    stats.pa1_retransmissions += 1
                elif detail.get("role") == "pa2":
                    stats.pa2_retransmissions += 1
    return stats


def fold(rows, protocol: str = "", seed: int = 0) -> RunStats:
    stats = RunStats(protocol=protocol, seed=seed)
    for row in rows:
        record(stats, row)
    return stats


def fold_csv_bytes(data: bytes, protocol: str = "", seed: int = 0) -> RunStats:
    """Recompute stats from a persisted trace file ('#' lines are provenance)."""
    text = data.decode()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader)
    if header and header[0] != "time_s":
        raise UnknownEvent("not a trace file (missing header)")
    return fold(list(reader), protocol=protocol, seed=seed)


def summarize(stats: RunStats, ac_hz: int, cycles: int) -> dict:
    """Reduce a run's counters to the headline quantities."""
    sim_seconds = cycles / ac_hz
    out = {
        "protocol": stats.protocol,
        "seed": stats.seed,
        "sim_seconds": sim_seconds,
        "packets_offered": stats.packets_offered,
        "delivered": stats.delivered,
        "lost": stats.lost,
        "in_flight": stats.in_flight,
        "exchanges": stats.exchanges,
        "sender_retransmissions": stats.sender_retransmissions,
        "pa_retransmissions": {"pa1": stats.pa1_retransmissions,
                               "pa2": stats.pa2_retransmissions},
        "pa_rescues": stats.pa_rescues,
        "duplicates": stats.duplicates,
        "slots_transmitted": stats.slots_transmitted,
        "slots_reserved": stats.slots_reserved,
        "control_overhead_slots": stats.control_overhead_slots,
        "adoptions": stats.adoption_count,
        "per_node": {
            "offered": dict(sorted(stats.offered_per_node.items())),
            "delivered": dict(sorted(stats.delivered_per_node.items())),
            "lost": dict(sorted(stats.lost_per_node.items())),
        },
    }
    # Ratios are omitted rather than divided by zero.
    if stats.packets_offered > 0:
        out["delivery_ratio"] = stats.delivered / stats.packets_offered
    if sim_seconds > 0:
        out["goodput_bits_per_s"] = stats.delivered_payload_bytes * 8 / sim_seconds
    if stats.delivered > 0:
        out["mean_slots_per_delivered"] = stats.slots_transmitted / stats.delivered
    if stats.slots_reserved > 0:
        data_acks = stats.slots_transmitted - stats.control_overhead_slots
        out["reservation_utilization"] = data_acks / stats.slots_reserved
    return out


COMPARE_METRICS = ("delivery_ratio", "goodput_bits_per_s", "mean_slots_per_delivered",
                   "delivered", "lost", "slots_transmitted")


def compare(summary_a: dict, summary_b: dict, scenario_hash_a: str = "",
            scenario_hash_b: str = "") -> list[tuple[str, float, float, float]]:
    """Per-metric deltas between two runs of the same scenario and seed."""
    if scenario_hash_a != scenario_hash_b:
        raise ScenarioMismatch("runs come from different scenarios")
    if summary_a.get("seed") != summary_b.get("seed"):
        raise ScenarioMismatch("runs use different seeds")
    rows = []
    for metric in COMPARE_METRICS:
        va = summary_a.get(metric)
        vb = summary_b.get(metric)
        if va is None or vb is None:
            continue
        rows.append((metric, float(va), float(vb), float(vb) - float(va)))
    return rows
