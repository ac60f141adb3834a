"""Non-blocking point-to-point transports.

Two implementations behind one small surface (post_send / poll / close):

* SimNet: an in-process router connecting all ranks, with a deterministic,
  seedable delivery schedule.  Latency is measured in poll ticks; messages on
  one source->dest channel always deliver in posting order.  Given the same
  seed and the same sequence of post/poll calls, delivery is identical.

* Sockets: TCP mesh for real multi-process runs, built from a rank-table
  file of "rank host:port" lines.  Sends are queued and flushed from poll();
  nothing ever blocks on the network.

Every endpoint keeps an audit log of every message header it sent or
received.  Audit entries are (dir, msg_type, source, dest, handle_id,
version, payload_length); `audit_sorted` gives a canonical ordering for
cross-run comparison (the set of messages is deterministic, the arrival
interleaving across channels is not).
"""
from __future__ import annotations

import random
import selectors
import socket
import threading
import time

from . import protocol
from .errors import ConfigError, ProtocolError


class Ticket:
    """Handle for one posted send; `done` flips when the transport is
    finished with the bytes."""

    __slots__ = ("seq", "done")

    def __init__(self, seq):
        self.seq = seq
        self.done = False


def _audit_entry(direction: str, data: bytes):
    h = protocol.unpack_header(data)
    return (direction, h["msg_type"], h["source"], h["dest"],
            h["handle_id"], h["version"], h["payload_length"])


class _AuditMixin:
    def _init_audit(self):
        self.audit: list[tuple] = []
        self.max_pending = 0

    def audit_sorted(self):
        return sorted(self.audit)

    def _note_pending(self, n: int):
        if n > self.max_pending:
            self.max_pending = n


class SimRouter:
    """Shared fabric for all SimNet endpoints of one run (thread-safe)."""

    def __init__(self, nranks: int, seed: int = 0, latency=(1, 3),
                 capacity: int = 0):
        self.nranks = nranks
        self.seed = seed
        if isinstance(latency, int):
            latency = (latency, latency)
        lo, hi = latency
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad latency window {latency}")
        self.latency = (lo, hi)
        self.capacity = capacity          # max in-flight per source; 0 = unbounded
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._tick = 0
        self._seq = 0
        self._inflight: dict[int, list] = {r: [] for r in range(nranks)}
        self._backlog: dict[int, list] = {r: [] for r in range(nranks)}
        self._chan_last: dict[tuple[int, int], int] = {}
        self._completed: dict[int, list] = {r: [] for r in range(nranks)}
        self._endpoints: dict[int, "SimEndpoint"] = {}

    def endpoint(self, rank: int) -> "SimEndpoint":
        if rank in self._endpoints:
            raise ConfigError(f"rank {rank} already registered")
        ep = SimEndpoint(self, rank)
        self._endpoints[rank] = ep
        return ep

    def _schedule(self, src, dest, data, ticket):
        lo, hi = self.latency
        lat = lo if lo == hi else self._rng.randint(lo, hi)
        due = self._tick + lat
        # FIFO per channel: never deliver before an earlier message on it
        last = self._chan_last.get((src, dest), -1)
        due = max(due, last)
        self._chan_last[(src, dest)] = due
        self._inflight[src].append((due, self._seq, src, dest, data, ticket))
        self._seq += 1

    def post(self, src: int, dest: int, data: bytes, ticket: Ticket):
        if not 0 <= dest < self.nranks:
            raise ProtocolError(f"destination {dest} out of range")
        with self._lock:
            if self.capacity and len(self._inflight[src]) >= self.capacity:
                self._backlog[src].append((dest, data, ticket))
            else:
                self._schedule(src, dest, data, ticket)
            return len(self._inflight[src]) + len(self._backlog[src])

    def poll(self, rank: int):
        """Advance time one tick; deliver due messages addressed to `rank`
        and collect completed tickets for its sends."""
        with self._lock:
            self._tick += 1
            delivered = []
            for src in range(self.nranks):
                flight = self._inflight[src]
                keep = []
                for item in flight:
                    due, seq, s, d, data, ticket = item
                    if d == rank and due <= self._tick:
                        delivered.append((seq, data))
                        ticket.done = True
                        self._completed[s].append(ticket)
                    else:
                        keep.append(item)
                if len(keep) != len(flight):
                    self._inflight[src] = keep
                    # promote backlog into freed capacity
                    while (self._backlog[src] and
                           (not self.capacity or
                            len(self._inflight[src]) < self.capacity)):
                        dd, data2, t2 = self._backlog[src].pop(0)
                        self._schedule(src, dd, data2, t2)
            delivered.sort()
            completed = self._completed[rank]
            self._completed[rank] = []
            return completed, [d for _, d in delivered]

    def pending(self, rank: int) -> int:
        with self._lock:
            return len(self._inflight[rank]) + len(self._backlog[rank])


class SimEndpoint(_AuditMixin):
    """One rank's attachment to a SimRouter."""

    def __init__(self, router: SimRouter, rank: int):
        self.router = router
        self.rank = rank
        self.closed = False
        self._next_seq = 0
        self._init_audit()

    def post_send(self, dest: int, data: bytes) -> Ticket:
        if self.closed:
            raise ProtocolError(f"send on closed endpoint {self.rank}")
        ticket = Ticket(self._next_seq)
        self._next_seq += 1
        self.audit.append(_audit_entry("out", data))
        pending = self.router.post(self.rank, dest, data, ticket)
        self._note_pending(pending)
        return ticket

    def poll(self):
        """Returns (completed tickets, received raw messages)."""
        if self.closed:
            return [], []
        completed, received = self.router.poll(self.rank)
        for data in received:
            self.audit.append(_audit_entry("in", data))
        return completed, received

    @property
    def pending_sends(self) -> int:
        return self.router.pending(self.rank)

    def close(self):
        self.closed = True


def parse_rank_table(path: str) -> dict[int, tuple[str, int]]:
    """Read "rank host:port" lines; ranks must be dense from 0."""
    table = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rank_s, addr = line.split()
            host, port_s = addr.rsplit(":", 1)
            table[int(rank_s)] = (host, int(port_s))
    if sorted(table) != list(range(len(table))):
        raise ConfigError(f"rank table {path} is not dense from 0")
    return table


class SocketEndpoint(_AuditMixin):
    """TCP mesh endpoint: rank r accepts connections from higher ranks and
    dials lower ones; a 4-byte rank id opens each stream."""

    def __init__(self, rank: int, table: dict[int, tuple[str, int]],
                 connect_timeout: float = 20.0):
        self.rank = rank
        self.nranks = len(table)
        self.closed = False
        self._peers: dict[int, socket.socket] = {}
        self._sendq: dict[int, list] = {r: [] for r in table if r != rank}
        self._rbuf: dict[int, bytearray] = {r: bytearray() for r in table if r != rank}
        self._sel = selectors.DefaultSelector()
        self._next_seq = 0
        self._init_audit()
        self._connect_mesh(table, connect_timeout)

    def _connect_mesh(self, table, timeout):
        host, port = table[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(self.nranks)
        listener.settimeout(timeout)
        deadline = time.monotonic() + timeout
        for peer in range(self.rank):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.settimeout(timeout)
            while True:
                try:
                    sock.connect(table[peer])
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        listener.close()
                        raise ConfigError(f"rank {self.rank}: cannot reach rank {peer}")
                    time.sleep(0.05)
            sock.sendall(self.rank.to_bytes(4, "little"))
            self._adopt(peer, sock)
        for _ in range(self.rank + 1, self.nranks):
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                listener.close()
                raise ConfigError(f"rank {self.rank}: timed out waiting for peers")
            ident = b""
            while len(ident) < 4:
                chunk = sock.recv(4 - len(ident))
                if not chunk:
                    raise ConfigError(f"rank {self.rank}: peer hung up during handshake")
                ident += chunk
            self._adopt(int.from_bytes(ident, "little"), sock)
        listener.close()

    def _adopt(self, peer: int, sock: socket.socket):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._peers[peer] = sock
        self._sel.register(sock, selectors.EVENT_READ, peer)

    def post_send(self, dest: int, data: bytes) -> Ticket:
        if self.closed:
            raise ProtocolError(f"send on closed endpoint {self.rank}")
        if dest not in self._peers:
            raise ProtocolError(f"rank {self.rank}: no peer {dest}")
        ticket = Ticket(self._next_seq)
        self._next_seq += 1
        self.audit.append(_audit_entry("out", data))
        self._sendq[dest].append([memoryview(bytes(data)), ticket])
        self._note_pending(self.pending_sends)
        return ticket

    def _flush(self, dest: int):
        q = self._sendq[dest]
        sock = self._peers[dest]
        completed = []
        while q:
            view, ticket = q[0]
            try:
                sent = sock.send(view)
            except BlockingIOError:
                break
            if sent == len(view):
                ticket.done = True
                completed.append(ticket)
                q.pop(0)
            else:
                q[0][0] = view[sent:]
                break
        return completed

    def poll(self):
        if self.closed:
            return [], []
        completed = []
        for dest in list(self._sendq):
            completed.extend(self._flush(dest))
        received = []
        for key, _ in self._sel.select(timeout=0):
            peer = key.data
            try:
                chunk = key.fileobj.recv(1 << 16)
            except BlockingIOError:
                continue
            except OSError:
                continue
            if not chunk:
                continue
            buf = self._rbuf[peer]
            buf.extend(chunk)
            while True:
                if len(buf) < protocol.HEADER_SIZE:
                    break
                head = protocol.unpack_header(buf)
                total = protocol.HEADER_SIZE + head["payload_length"]
                if len(buf) < total:
                    break
                data = bytes(buf[:total])
                del buf[:total]
                self.audit.append(_audit_entry("in", data))
                received.append(data)
        return completed, received

    @property
    def pending_sends(self) -> int:
        return sum(len(q) for q in self._sendq.values())

    def close(self):
        if self.closed:
            return
        # best-effort final flush so SHUTDOWN leaves the building
        deadline = time.monotonic() + 5.0
        while self.pending_sends and time.monotonic() < deadline:
            for dest in list(self._sendq):
                self._flush(dest)
            time.sleep(0.005)
        self.closed = True
        for sock in self._peers.values():
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()
