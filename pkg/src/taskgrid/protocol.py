"""Wire format, listener bookkeeping, and traffic accounting.

A message is a fixed 40-byte little-endian header followed by the payload:

    0   msg_type        u8    1=DATA, 2=SIM_DATA, 3=SHUTDOWN
    1   pad             u8[3]
    4   source          u32
    8   dest            u32
    12  handle_id       u64
    20  version         u64
    28  payload_length  u64
    36  checksum        u32   CRC-32 of the payload

DATA carries a pool block (header + content); SIM_DATA replaces it with a
single byte in simulation mode; SHUTDOWN is empty.

Listeners are created at the data owner while traversing the task stream:
one listener per (handle, version, destination), carrying a multiplicity
count when several tasks at that destination need the same version.  Firing
sends one message per listener and advances the owner's version once per
counted access, which keeps the execution-side version in step with the
submission-side arithmetic that counted every access.
"""
from __future__ import annotations

import struct
import zlib

from .errors import ProtocolError

MSG_DATA = 1
MSG_SIM_DATA = 2
MSG_SHUTDOWN = 3

HEADER = struct.Struct("<B3xIIQQQI")
HEADER_SIZE = HEADER.size  # 40


def pack_message(msg_type: int, source: int, dest: int, handle_id: int,
                 version: int, payload: bytes = b"") -> bytes:
    head = HEADER.pack(msg_type, source, dest, handle_id, version,
                       len(payload), zlib.crc32(payload) & 0xFFFFFFFF)
    return head + payload


def unpack_header(buf) -> dict:
    if len(buf) < HEADER_SIZE:
        raise ProtocolError(f"short header: {len(buf)} bytes")
    msg_type, source, dest, handle_id, version, payload_length, checksum = \
        HEADER.unpack_from(buf, 0)
    if msg_type not in (MSG_DATA, MSG_SIM_DATA, MSG_SHUTDOWN):
        raise ProtocolError(f"unknown message type {msg_type}")
    return {"msg_type": msg_type, "source": source, "dest": dest,
            "handle_id": handle_id, "version": version,
            "payload_length": payload_length, "checksum": checksum}


def unpack_message(buf) -> tuple[dict, bytes]:
    """Split and validate a complete message; checksum mismatch is fatal."""
    head = unpack_header(buf)
    payload = bytes(buf[HEADER_SIZE:])
    if len(payload) != head["payload_length"]:
        raise ProtocolError(
            f"payload length {len(payload)} != header {head['payload_length']}")
    if zlib.crc32(payload) & 0xFFFFFFFF != head["checksum"]:
        raise ProtocolError(
            f"checksum mismatch for handle {head['handle_id']} "
            f"version {head['version']}")
    return head, payload


class Listener:
    """A pending remote delivery: send `handle` at `version` to rank `dest`.

    `count` is the number of registered accesses this delivery stands for;
    duplicates from the same destination merge here instead of queueing twice.
    """

    __slots__ = ("handle_id", "version", "dest", "count")

    def __init__(self, handle_id, version, dest):
        self.handle_id = handle_id
        self.version = version
        self.dest = dest
        self.count = 1

    def __repr__(self):
        return f"Listener(h={self.handle_id}, v={self.version}, dest={self.dest}, n={self.count})"


class ListenerTable:
    """Owner-side queue of listeners per handle, ordered by version."""

    def __init__(self):
        self._by_handle: dict[int, dict[int, dict[int, Listener]]] = {}
        self.created = 0
        self.fired = 0

    def add(self, handle_id: int, version: int, dest: int) -> bool:
        """Register interest; returns True when a new listener was created,
        False when an existing one absorbed the duplicate."""
        versions = self._by_handle.setdefault(handle_id, {})
        dests = versions.setdefault(version, {})
        lst = dests.get(dest)
        if lst is not None:
            lst.count += 1
            return False
        dests[dest] = Listener(handle_id, version, dest)
        self.created += 1
        return True

    def due(self, handle_id: int, runtime_version: int):
        """Pop and return listeners whose version has been reached, in
        version order (deterministic: destinations sorted)."""
        versions = self._by_handle.get(handle_id)
        if not versions:
            return []
        ripe = sorted(v for v in versions if v <= runtime_version)
        out = []
        for v in ripe:
            dests = versions.pop(v)
            out.extend(dests[d] for d in sorted(dests))
        if not versions:
            self._by_handle.pop(handle_id, None)
        self.fired += len(out)
        return out

    @property
    def pending(self) -> int:
        return sum(len(d) for v in self._by_handle.values() for d in v.values())


class TrafficLedger:
    """Statically derived expectations of every send and receive.

    Both sides run the same traversal, so the owner knows exactly which
    messages it will send and each consumer knows exactly which it will
    receive; quiescence is the local condition that all of them happened.
    """

    def __init__(self):
        self._expect_recv: dict[tuple[int, int], bool] = {}  # (handle, version) -> arrived
        self._expect_send: set[tuple[int, int, int]] = set()  # (handle, version, dest)
        self.sends_done = 0
        self.recvs_done = 0
        self.early: int = 0  # receives parked before their record existed

    def expect_send(self, handle_id: int, version: int, dest: int) -> bool:
        key = (handle_id, version, dest)
        if key in self._expect_send:
            return False
        self._expect_send.add(key)
        return True

    def expect_recv(self, handle_id: int, version: int) -> bool:
        key = (handle_id, version)
        if key in self._expect_recv:
            return False
        self._expect_recv[key] = False
        return True

    def has_recv_record(self, handle_id: int, version: int) -> bool:
        return (handle_id, version) in self._expect_recv

    def mark_sent(self, handle_id: int, version: int, dest: int):
        key = (handle_id, version, dest)
        if key not in self._expect_send:
            raise ProtocolError(f"send of unexpected message {key}")
        self._expect_send.discard(key)
        self.sends_done += 1

    def mark_received(self, handle_id: int, version: int):
        key = (handle_id, version)
        state = self._expect_recv.get(key)
        if state is None:
            raise ProtocolError(f"unexpected message for {key}")
        if state:
            raise ProtocolError(f"duplicate message for {key}")
        self._expect_recv[key] = True
        self.recvs_done += 1

    @property
    def pending_sends(self) -> int:
        return len(self._expect_send)

    @property
    def pending_recvs(self) -> int:
        return sum(1 for v in self._expect_recv.values() if not v)


def quiescent(*, submission_done: bool, tasks_outstanding: int,
              listeners_pending: int, recvs_pending: int,
              sends_unposted: int, transport_pending: int,
              inbox_parked: int) -> bool:
    """Local termination condition; every operand is locally decidable
    because the ledger is derived from the shared global traversal."""
    return (submission_done and tasks_outstanding == 0
            and listeners_pending == 0 and recvs_pending == 0
            and sends_unposted == 0 and transport_pending == 0
            and inbox_parked == 0)
