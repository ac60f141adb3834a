"""Execution tracing and simulation statistics.

Trace events are buffered per thread (no locking on the hot path) and merged
at export into a TSV with one row per executed task body.  The trace-convert
step turns that TSV into the JSON array consumed by browser profilers
(chrome://tracing, Perfetto).

SimStats rows carry, per rank: task counts at both levels, message and byte
counters, the high-water mark of pending outgoing messages, and a work proxy
(leaf tasks executed times n^3 for the leaf edge n).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

TRACE_COLUMNS = ("rank", "thread", "task_id", "kind", "level", "start_ns", "end_ns")

STATS_COLUMNS = ("rank", "tasks_l0", "tasks_l1", "msgs_out", "msgs_in",
                 "bytes", "max_pending", "work_proxy")


class TraceBuffer:
    """Append-only event buffer owned by exactly one thread."""

    __slots__ = ("rank", "thread", "events")

    def __init__(self, rank: int, thread: int):
        self.rank = rank
        self.thread = thread
        self.events: list[tuple] = []

    def record(self, task_id: int, kind: str, level: int, start_ns: int, end_ns: int):
        self.events.append((self.rank, self.thread, task_id, kind, level,
                            start_ns, end_ns))


def merge_traces(buffers) -> list[tuple]:
    events = []
    for buf in buffers:
        events.extend(buf.events)
    events.sort(key=lambda e: (e[0], e[1], e[5]))
    return events


def write_trace_tsv(path: str, events):
    with open(path, "w") as fh:
        fh.write("\t".join(TRACE_COLUMNS) + "\n")
        for ev in events:
            fh.write("\t".join(str(x) for x in ev) + "\n")


def read_trace_tsv(path: str) -> list[tuple]:
    events = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        for line in fh:
            rank, thread, task_id, kind, level, t0, t1 = line.rstrip("\n").split("\t")
            events.append((int(rank), int(thread), int(task_id), kind,
                           int(level), int(t0), int(t1)))
    return events


def trace_to_chrome(events) -> list[dict]:
    """Complete ("X") events in microseconds, pid = rank, tid = thread."""
    out = []
    for rank, thread, task_id, kind, level, t0, t1 in events:
        out.append({
            "name": kind,
            "cat": f"level{level}",
            "ph": "X",
            "ts": t0 / 1000.0,
            "dur": max(t1 - t0, 0) / 1000.0,
            "pid": rank,
            "tid": thread,
            "args": {"task_id": task_id, "level": level},
        })
    return out


def convert_trace(tsv_path: str, json_path: str) -> int:
    events = read_trace_tsv(tsv_path)
    with open(json_path, "w") as fh:
        json.dump(trace_to_chrome(events), fh)
    return len(events)


@dataclass
class RankStats:
    rank: int
    tasks_l0: int = 0
    tasks_l1: int = 0
    msgs_out: int = 0
    msgs_in: int = 0
    bytes: int = 0
    max_pending: int = 0
    work_proxy: int = 0

    def row(self):
        return [self.rank, self.tasks_l0, self.tasks_l1, self.msgs_out,
                self.msgs_in, self.bytes, self.max_pending, self.work_proxy]


def write_stats_csv(path: str, stats: list[RankStats]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for s in sorted(stats, key=lambda s: s.rank):
            w.writerow(s.row())


def read_stats_csv(path: str) -> list[RankStats]:
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != STATS_COLUMNS:
        raise ValueError(f"unexpected stats header in {path}")
    for row in rows[1:]:
        out.append(RankStats(*[int(x) for x in row]))
    return out
