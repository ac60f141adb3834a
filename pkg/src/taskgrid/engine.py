"""Two-level distributed task engine.

Every rank traverses the same level-0 statement stream: each statement's
accesses run through register_access on every rank (which keeps the version
arithmetic globally consistent), each rank scans the statement for messaging
duties (it owns data a remote task needs -> queue a listener; it owns a task
needing remote data -> record an expected receive), and only the owning rank
enqueues the task.  A task's owner is the owner of its first output access.

Level-0 task bodies run on the rank's coordinator; they submit level-1
children working on tiles of the parent's blocks.  Children execute on worker
threads with per-worker deques and random-victim oldest-first stealing; their
completions flow back to the coordinator over a queue, and only the
coordinator mutates versioning state.  A parent's accesses complete (versions
advance, listeners may fire) only when its last child has drained.

Termination needs no extra protocol: the traversal tells every rank exactly
which messages it will send and receive (the traffic ledger), so each rank
decides quiescence locally; rank 0 then broadcasts SHUTDOWN.

In simulation mode kernels are replaced by empty ones and DATA payloads by a
single byte; children are accounted and traced but run as zero-duration
bodies at submission, which is a legal schedule for empty kernels and keeps
large sweeps cheap.  True byte volumes still come from the descriptors.
"""
from __future__ import annotations

import random
import threading
import time
from collections import Counter, deque
from queue import Empty, SimpleQueue

import numpy as np

from . import mempool, partition, protocol, telemetry, versioning
from .errors import ConfigError, ContractViolation, KernelError, ProtocolError, TaskgridError
from .versioning import Access

DUMMY_HANDLE_ID = 0


# -- program elements ----------------------------------------------------

class BlockRef:
    """Rank-agnostic reference to one level-1 partition of a data object."""

    __slots__ = ("data_id", "key")

    def __init__(self, data_id: int, key: tuple):
        self.data_id = data_id
        self.key = key

    def __repr__(self):
        return f"BlockRef({self.data_id}, {self.key})"


class Statement:
    """One level-0 task: accesses in program order plus a body that submits
    the level-1 children.  `body(ctx)` may be None for a childless task."""

    __slots__ = ("kind", "accesses", "body", "tag")

    def __init__(self, kind: str, accesses, body=None, tag=None):
        self.kind = kind
        self.accesses = list(accesses)
        self.body = body
        self.tag = tag


class StepBegin:
    __slots__ = ("index",)

    def __init__(self, index: int):
        self.index = index


class StepEnd:
    __slots__ = ("index",)

    def __init__(self, index: int):
        self.index = index


def paced_steps(step_iter):
    """Wrap an iterable of per-step statement iterables with step markers so
    the engine can pace submission through the dummy handle."""
    for idx, stmts in enumerate(step_iter):
        yield StepBegin(idx)
        yield from stmts
        yield StepEnd(idx)


class MatrixData:
    """App-side facade for a registered matrix."""

    def __init__(self, desc: partition.MatrixDescriptor):
        self.desc = desc

    def block(self, i: int, j: int) -> BlockRef:
        if not self.desc.stored(i, j):
            raise ConfigError(f"block ({i},{j}) not stored")
        return BlockRef(self.desc.data_id, (i, j))


class VectorData:
    """App-side facade for a registered vector."""

    def __init__(self, desc: partition.VectorDescriptor):
        self.desc = desc

    def block(self, i: int) -> BlockRef:
        if not 0 <= i < self.desc.blocks:
            raise ConfigError(f"block row {i} out of range")
        return BlockRef(self.desc.data_id, (i,))


# -- views ---------------------------------------------------------------

class TileView:
    """Tile access into one matrix block's flat content (None in sim mode)."""

    __slots__ = ("desc", "arr")

    def __init__(self, desc, arr):
        self.desc = desc
        self.arr = None
        if arr is not None:
            b, n = desc.subblocks, desc.tile
            self.arr = arr.reshape(b, b, n, n)

    def tile(self, i2: int, j2: int):
        return None if self.arr is None else self.arr[i2, j2]


class ChunkView:
    """Sub-chunk access into one vector block's content (None in sim mode)."""

    __slots__ = ("desc", "arr")

    def __init__(self, desc, arr):
        self.desc = desc
        self.arr = arr

    def chunk(self, r: int):
        if self.arr is None:
            return None
        s = self.desc.sub
        return self.arr[r * s:(r + 1) * s]

    @property
    def full(self):
        return self.arr


# -- tasks ---------------------------------------------------------------

class Task:
    __slots__ = ("task_id", "level", "kind", "accesses", "refs", "body",
                 "kernel", "parent", "pending_children", "body_done",
                 "step", "pinned", "guards", "done")

    def __init__(self, task_id, level, kind):
        self.task_id = task_id
        self.level = level
        self.kind = kind
        self.accesses = []
        self.refs = []
        self.body = None
        self.kernel = None
        self.parent = None
        self.pending_children = 0
        self.body_done = False
        self.step = None
        self.pinned = []
        self.guards = []     # (handle, required) pairs asserted at kernel start
        self.done = False


class Activation:
    """Readiness examination state: accesses are checked in order, parking at
    the first unreached version, then writer tokens are taken all-or-nothing."""

    __slots__ = ("task", "next_idx")

    def __init__(self, task: Task):
        self.task = task
        self.next_idx = 0


class ParentCtx:
    """Passed to a level-0 body; exposes block views and child submission."""

    __slots__ = ("_coord", "_task", "views", "_sealed")

    def __init__(self, coord, task, views):
        self._coord = coord
        self._task = task
        self.views = views
        self._sealed = False

    def tile(self, idx: int, i2: int, j2: int):
        return self.views[idx].tile(i2, j2)

    def chunk(self, idx: int, r: int):
        return self.views[idx].chunk(r)

    def full(self, idx: int):
        return self.views[idx].full

    def submit(self, kind: str, fn, reads=(), writes=(), adds=()):
        """Submit one level-1 child.  `reads`/`writes`/`adds` are
        (access_index, tile_key) pairs naming tiles of the parent's accessed
        blocks; tiles of blocks this rank does not own are pinned by the
        parent instead of version-guarded."""
        if self._sealed:
            raise ContractViolation(
                f"child submission after parent {self._task.task_id} started draining")
        self._coord._submit_child(self._task, kind, fn, reads, writes, adds)


# -- executors -----------------------------------------------------------

_STOP = object()


class ThreadedExecutor:
    """Worker threads with per-worker deques; owners pop newest, thieves
    steal oldest from a random victim."""

    def __init__(self, rank: int, nworkers: int, seed: int, debug: bool,
                 assign: str = "roundrobin"):
        self.rank = rank
        self.nworkers = nworkers
        self.seed = seed
        self.debug = debug
        self.assign = assign
        self.deques = [deque() for _ in range(nworkers)]
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.completions = SimpleQueue()
        self.buffers = [telemetry.TraceBuffer(rank, w + 1) for w in range(nworkers)]
        self.steals = [0] * nworkers
        self.threads = []
        self.epoch = 0
        self._stop = False
        self._rr = 0

    def start(self):
        for w in range(self.nworkers):
            t = threading.Thread(target=self._run, args=(w,), daemon=True,
                                 name=f"taskgrid-r{self.rank}-w{w}")
            self.threads.append(t)
            t.start()

    def dispatch(self, task: Task):
        with self.lock:
            if self.assign == "worker0":
                w = 0
            else:
                w = self._rr
                self._rr = (self._rr + 1) % self.nworkers
            self.deques[w].append(task)
            self.cond.notify_all()

    def drain(self, timeout: float | None = None):
        out = []
        try:
            if timeout:
                out.append(self.completions.get(timeout=timeout))
            while True:
                out.append(self.completions.get_nowait())
        except Empty:
            pass
        return out

    def idle(self):
        return self.completions.empty() and all(not d for d in self.deques)

    def stop(self):
        with self.lock:
            self._stop = True
            self.cond.notify_all()
        for t in self.threads:
            t.join()
        self.threads = []

    def _take(self, wid: int, rng):
        with self.lock:
            own = self.deques[wid]
            if own:
                return own.pop()
            order = [v for v in range(self.nworkers) if v != wid]
            rng.shuffle(order)
            for v in order:
                victim = self.deques[v]
                if victim:
                    self.steals[wid] += 1
                    return victim.popleft()
            if self._stop:
                return _STOP
            self.cond.wait(0.05)
            return None

    def _run(self, wid: int):
        rng = random.Random(self.seed * 1000003 + wid)
        buf = self.buffers[wid]
        while True:
            task = self._take(wid, rng)
            if task is None:
                continue
            if task is _STOP:
                return
            exc = None
            t0 = time.monotonic_ns() - self.epoch
            try:
                if self.debug:
                    for handle, required in task.guards:
                        if handle.runtime_version < required:
                            raise ContractViolation(
                                f"task {task.task_id} ran before handle "
                                f"{handle.handle_id} reached {required}")
                task.kernel()
            except Exception as e:     # propagated to the coordinator
                exc = e
            t1 = time.monotonic_ns() - self.epoch
            buf.record(task.task_id, task.kind, task.level, t0, t1)
            self.completions.put((task, exc))


class InlineExecutor:
    """Runs leaves on the coordinator thread: eagerly at dispatch, or pooled
    and picked in random order by the deterministic driver (schedule fuzz)."""

    def __init__(self, rank: int, mode: str, buffer, rng=None, debug: bool = False):
        self.rank = rank
        self.mode = mode
        self.buffer = buffer
        self.rng = rng
        self.debug = debug
        self.pool: list[Task] = []
        self.completions: list = []

    def start(self):
        pass

    def stop(self):
        pass

    def _execute(self, task: Task):
        exc = None
        t0 = time.monotonic_ns() - self.epoch
        try:
            if self.debug:
                for handle, required in task.guards:
                    if handle.runtime_version < required:
                        raise ContractViolation(
                            f"task {task.task_id} ran before handle "
                            f"{handle.handle_id} reached {required}")
            task.kernel()
        except Exception as e:
            exc = e
        t1 = time.monotonic_ns() - self.epoch
        self.buffer.record(task.task_id, task.kind, task.level, t0, t1)
        self.completions.append((task, exc))

    epoch = 0

    def dispatch(self, task: Task):
        if self.mode == "eager":
            self._execute(task)
        else:
            self.pool.append(task)

    def run_some(self, limit: int = 1):
        ran = 0
        while self.pool and ran < limit:
            idx = self.rng.randrange(len(self.pool)) if self.rng else 0
            self._execute(self.pool.pop(idx))
            ran += 1
        return ran

    def drain(self, timeout=None):
        out = self.completions
        self.completions = []
        return out

    def idle(self):
        return not self.pool and not self.completions

    steals = ()


# -- coordinator ---------------------------------------------------------

class RunConfig:
    def __init__(self, nranks: int, workers: int = 1, window: int = 4,
                 seed: int = 0, sim: bool = False, debug: bool = True,
                 pool_capacity: int = 16 << 20, work_unit: int = 0,
                 threaded: bool = True, fuzz_seed=None, assign: str = "roundrobin"):
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        self.nranks = nranks
        self.workers = workers
        self.window = window
        self.seed = seed
        self.sim = sim
        self.debug = debug
        self.pool_capacity = pool_capacity
        self.work_unit = work_unit
        self.threaded = threaded
        self.fuzz_seed = fuzz_seed
        self.assign = assign


class _DataEntry:
    __slots__ = ("desc", "kind")

    def __init__(self, desc, kind):
        self.desc = desc
        self.kind = kind


class Coordinator:
    """Per-rank engine: traversal, scheduling, messaging, and statistics."""

    def __init__(self, rank: int, cfg: RunConfig, endpoint):
        self.rank = rank
        self.cfg = cfg
        self.endpoint = endpoint
        self.pool = mempool.Pool(cfg.pool_capacity)
        self.listeners = protocol.ListenerTable()
        self.ledger = protocol.TrafficLedger()
        self.stats = telemetry.RankStats(rank)
        self.trace = telemetry.TraceBuffer(rank, 0)
        self.epoch = 0

        self.handles: dict[tuple, versioning.Handle] = {}
        self.handle_by_id: dict[int, versioning.Handle] = {}
        self.content_len: dict[int, int] = {}
        self.owned_blocks: dict[int, mempool.Block] = {}
        self.data: dict[int, _DataEntry] = {}
        self._next_handle_id = 1
        self._tiles: dict[tuple, versioning.Handle] = {}
        self._next_tile_id = 1
        self._next_task_id = 0

        self.dummy = versioning.Handle(DUMMY_HANDLE_ID, owner=rank)
        self.handle_by_id[DUMMY_HANDLE_ID] = self.dummy

        self._program = None
        self._program_done = False
        self._pushback = None
        self._open_step = None
        self._steps_opened = 0
        self._step_reqs: dict[int, versioning.AccessRequest] = {}
        self._step_outstanding: dict[int, int] = {}
        self._step_closed: dict[int, bool] = {}
        self.max_inflight_steps = 0

        self._ready_parents: deque[Task] = deque()
        self._outstanding = 0
        self._pending_reads: dict[int, Counter] = {}
        self._parked_inbox: list[bytes] = []
        self._worklist: deque = deque()
        self.submission_log: list[tuple[int, int]] = []

        self._shutdown_seen = False
        self._shutdown_sent = False
        self.finished = False
        self.error: Exception | None = None
        self.abort: threading.Event | None = None

        if cfg.threaded and not cfg.sim:
            self.executor = ThreadedExecutor(rank, cfg.workers, cfg.seed, cfg.debug,
                                             cfg.assign)
        else:
            rng = random.Random(cfg.fuzz_seed * 7919 + rank + 1) \
                if cfg.fuzz_seed is not None else None
            mode = "random" if rng is not None else "eager"
            self.executor = InlineExecutor(rank, mode, self.trace, rng, cfg.debug)

    # -- data registration (identical call order on every rank) ----------

    def add_matrix(self, desc: partition.MatrixDescriptor, init=None) -> None:
        self.data[desc.data_id] = _DataEntry(desc, "matrix")
        if self.cfg.work_unit == 0:
            self.cfg.work_unit = desc.tile ** 3
        for (i, j) in desc.stored_blocks():
            owner = desc.owner_of(i, j)
            hid = self._next_handle_id
            self._next_handle_id += 1
            h = versioning.Handle(hid, owner)
            self.handles[(desc.data_id, (i, j))] = h
            self.handle_by_id[hid] = h
            clen = desc.content_length(i, j)
            self.content_len[hid] = clen
            if owner == self.rank and not self.cfg.sim:
                block = self.pool.acquire(hid, 0, clen, owner=owner, owned=True)
                if init is not None:
                    block.array()[:] = init(i, j)
                else:
                    block.array()[:] = 0.0
                self.owned_blocks[hid] = block

    def add_vector(self, desc: partition.VectorDescriptor, init=None) -> None:
        self.data[desc.data_id] = _DataEntry(desc, "vector")
        for i in range(desc.blocks):
            owner = desc.owner_of(i)
            hid = self._next_handle_id
            self._next_handle_id += 1
            h = versioning.Handle(hid, owner)
            self.handles[(desc.data_id, (i,))] = h
            self.handle_by_id[hid] = h
            clen = desc.content_length(i)
            self.content_len[hid] = clen
            if owner == self.rank and not self.cfg.sim:
                block = self.pool.acquire(hid, 0, clen, owner=owner, owned=True)
                if init is not None:
                    block.array()[:] = init(i)
                else:
                    block.array()[:] = 0.0
                self.owned_blocks[hid] = block

    def attach_program(self, program_iter):
        self._program = iter(program_iter)

    # -- main loops ------------------------------------------------------

    def run(self):
        """Threaded driver: loop until globally shut down."""
        self.executor.epoch = self.epoch
        self.executor.start()
        try:
            while True:
                if self.abort is not None and self.abort.is_set():
                    raise TaskgridError(f"rank {self.rank}: aborted by peer failure")
                progress = self.step()
                if self.finished:
                    break
                if not progress:
                    done = self._drain_completions(timeout=0.001)
                    if done:
                        self._handle_completions(done)
        except Exception as e:
            self.error = e
            if self.abort is not None:
                self.abort.set()
        finally:
            self.executor.stop()

    def step(self) -> bool:
        """One bounded scheduling slice; returns True on any progress."""
        progress = False
        if self._admit():
            progress = True
        done = self._drain_completions()
        if done:
            self._handle_completions(done)
            progress = True
        while self._ready_parents:
            self._run_parent(self._ready_parents.popleft())
            progress = True
            done = self._drain_completions()
            if done:
                self._handle_completions(done)
        if isinstance(self.executor, InlineExecutor) and self.executor.pool:
            if self.executor.run_some():
                progress = True
            done = self._drain_completions()
            if done:
                self._handle_completions(done)
        if self._poll_transport():
            progress = True
        if self._parked_inbox:
            if self._replay_parked():
                progress = True
        if not self.finished and self._locally_quiescent():
            if self._shutdown_step():
                self._finish()
                progress = True
        return progress

    def _finish(self):
        self.endpoint.close()
        self.stats.max_pending = self.endpoint.max_pending
        self.stats.work_proxy = self.stats.tasks_l1 * self.cfg.work_unit
        self.finished = True

    # -- admission -------------------------------------------------------

    def _next_item(self):
        if self._pushback is not None:
            item, self._pushback = self._pushback, None
            return item
        if self._program is None or self._program_done:
            return None
        try:
            return next(self._program)
        except StopIteration:
            self._program_done = True
            return None

    def _admit(self, quota: int = 128) -> bool:
        progress = False
        while quota > 0:
            item = self._next_item()
            if item is None:
                break
            if isinstance(item, StepBegin):
                inflight = self._steps_opened - self.dummy.runtime_version
                if inflight >= self.cfg.window:
                    self._pushback = item
                    break
                req = versioning.register_access(self.dummy, Access.MODIFY)
                self._step_reqs[item.index] = req
                self._step_outstanding[item.index] = 0
                self._step_closed[item.index] = False
                self._open_step = item.index
                self._steps_opened += 1
                inflight = self._steps_opened - self.dummy.runtime_version
                if inflight > self.max_inflight_steps:
                    self.max_inflight_steps = inflight
            elif isinstance(item, StepEnd):
                self._step_closed[item.index] = True
                self._open_step = None
                if self._step_outstanding[item.index] == 0:
                    self._complete_step(item.index)
            else:
                self._process_statement(item)
            progress = True
            quota -= 1
        self._process_worklist()
        return progress

    def _complete_step(self, index: int):
        req = self._step_reqs.pop(index)
        versioning.complete_access(self.dummy, req)
        del self._step_outstanding[index]
        del self._step_closed[index]

    def _process_statement(self, st: Statement):
        reqs = []
        owner = None
        for ref, acc in st.accesses:
            h = self.handles.get((ref.data_id, ref.key))
            if h is None:
                raise ConfigError(f"unknown partition {ref}")
            req = versioning.register_access(h, acc)
            reqs.append(req)
            if owner is None and acc.is_write:
                owner = h.owner
            if self.cfg.debug:
                self.submission_log.append((h.handle_id, req.required))
        if owner is None:
            raise ConfigError(f"task {st.kind} has no output access")
        for (ref, acc), req in zip(st.accesses, reqs):
            h = req.handle
            if acc.is_write:
                if h.owner != owner:
                    raise ProtocolError(
                        f"remote write: task {st.kind} owned by {owner} writes "
                        f"handle {h.handle_id} owned by {h.owner}")
                continue
            if h.owner == self.rank and owner != self.rank:
                if self.listeners.add(h.handle_id, req.required, owner):
                    self.ledger.expect_send(h.handle_id, req.required, owner)
                self._maybe_fire(h)
            elif owner == self.rank and h.owner != self.rank:
                self.ledger.expect_recv(h.handle_id, req.required)
                self._pending_reads.setdefault(h.handle_id, Counter())[req.required] += 1
        if owner == self.rank:
            task = Task(self._next_task_id, 0, st.kind)
            self._next_task_id += 1
            task.accesses = reqs
            task.refs = [ref for ref, _ in st.accesses]
            task.body = st.body
            task.step = self._open_step
            if task.step is not None:
                self._step_outstanding[task.step] += 1
            self._outstanding += 1
            self.stats.tasks_l0 += 1
            self._examine(Activation(task))

    # -- readiness -------------------------------------------------------

    def _examine(self, act: Activation):
        task = act.task
        while act.next_idx < len(task.accesses):
            req = task.accesses[act.next_idx]
            h = req.handle
            if h.runtime_version < req.required:
                versioning.enqueue_waiter(h, req.required, act)
                return
            if (task.level == 0 and not req.access.is_write
                    and h.owner != self.rank and not self.cfg.sim):
                # remote input: its copy must be resident before we move on
                if self.pool.bind(h.handle_id, req.required) is None:
                    versioning.enqueue_waiter(h, req.required, act)
                    return
            act.next_idx += 1
        writers = sorted((r for r in task.accesses if r.access.is_write),
                         key=lambda r: r.handle.handle_id)
        taken = []
        for req in writers:
            if req.handle in taken:
                continue
            if versioning.try_acquire_token(req.handle):
                taken.append(req.handle)
            else:
                for h in taken:
                    versioning.release_token(h)
                    if h.token_waiters:
                        self._worklist.append(h.token_waiters.popleft())
                versioning.enqueue_token_waiter(req.handle, act)
                return
        self._make_ready(task)

    def _make_ready(self, task: Task):
        if task.level == 0:
            self._ready_parents.append(task)
        else:
            self._leaves_ready(task)

    def _leaves_ready(self, task: Task):
        if self.cfg.debug:
            task.guards = [(r.handle, r.required) for r in task.accesses]
        self.executor.dispatch(task)

    def _process_worklist(self):
        while self._worklist:
            self._examine(self._worklist.popleft())

    # -- parent execution ------------------------------------------------

    def _run_parent(self, task: Task):
        views = []
        t0 = time.monotonic_ns() - self.epoch
        for req, ref in zip(task.accesses, task.refs):
            entry = self.data[ref.data_id]
            h = req.handle
            arr = None
            if not self.cfg.sim:
                if h.owner == self.rank:
                    arr = self.owned_blocks[h.handle_id].array()
                else:
                    self._evict_stale(h)
                    block = self.pool.bind(h.handle_id, req.required)
                    if block is None:
                        raise ContractViolation(
                            f"no resident copy of handle {h.handle_id} "
                            f"for version {req.required}")
                    self.pool.pin(block)
                    task.pinned.append(block)
                    arr = block.array()
            if entry.kind == "matrix":
                views.append(TileView(entry.desc, arr))
            else:
                views.append(ChunkView(entry.desc, arr))
        ctx = ParentCtx(self, task, views)
        if task.body is not None:
            task.body(ctx)
        ctx._sealed = True
        task.body_done = True
        t1 = time.monotonic_ns() - self.epoch
        self.trace.record(task.task_id, task.kind, 0, t0, t1)
        if task.pending_children == 0:
            self._complete_task(task)

    def _evict_stale(self, h: versioning.Handle):
        """Release copies older than any still-pending local reader's bind."""
        pend = self._pending_reads.get(h.handle_id)
        floor_req = min(pend) if pend else h.runtime_version
        block = self.pool.bind(h.handle_id, floor_req)
        if block is not None:
            self.pool.evict_older(h.handle_id, block.version)

    def _submit_child(self, parent: Task, kind, fn, reads, writes, adds):
        task_id = self._next_task_id
        self._next_task_id += 1
        self.stats.tasks_l1 += 1
        if self.cfg.sim:
            # zero-duration body at submission: a legal schedule for empty kernels
            t = time.monotonic_ns() - self.epoch
            self.trace.record(task_id, kind, 1, t, t)
            return
        child = Task(task_id, 1, kind)
        child.kernel = fn
        child.parent = parent
        parent.pending_children += 1
        for group, acc in ((reads, Access.READ), (writes, Access.MODIFY),
                           (adds, Access.ADD)):
            for idx, tkey in group:
                ref = parent.refs[idx]
                h = parent.accesses[idx].handle
                if h.owner != self.rank:
                    continue    # pinned read-only copy, no tile guard needed
                th = self._tile_handle(ref, tkey)
                child.accesses.append(versioning.register_access(th, acc))
        self._examine(Activation(child))

    def _tile_handle(self, ref: BlockRef, tkey) -> versioning.Handle:
        key = (ref.data_id, ref.key, tkey)
        th = self._tiles.get(key)
        if th is None:
            th = versioning.Handle(self._next_tile_id, self.rank)
            self._next_tile_id += 1
            self._tiles[key] = th
        return th

    # -- completion ------------------------------------------------------

    def _drain_completions(self, timeout=None):
        return self.executor.drain(timeout)

    def _handle_completions(self, done):
        for task, exc in done:
            if exc is not None:
                raise KernelError(
                    f"rank {self.rank}: task {task.task_id} ({task.kind}) failed: {exc}"
                ) from exc
            self._complete_task(task)
        self._process_worklist()

    def _complete_task(self, task: Task):
        if task.done:
            raise ContractViolation(f"task {task.task_id} completed twice")
        task.done = True
        for req in task.accesses:
            h = req.handle
            rv, woken = versioning.complete_access(h, req)
            self._worklist.extend(woken)
            if task.level == 0:
                if h.owner == self.rank:
                    block = self.owned_blocks.get(h.handle_id)
                    if block is not None:
                        block.set_version(rv)
                    self._maybe_fire(h)
                elif not req.access.is_write:
                    pend = self._pending_reads.get(h.handle_id)
                    if pend is not None:
                        pend[req.required] -= 1
                        if pend[req.required] == 0:
                            del pend[req.required]
                        if not pend:
                            del self._pending_reads[h.handle_id]
        for block in task.pinned:
            self.pool.unpin(block)
        task.pinned = []
        if task.level == 0:
            self._outstanding -= 1
            if task.step is not None:
                self._step_outstanding[task.step] -= 1
                if (self._step_closed[task.step]
                        and self._step_outstanding[task.step] == 0):
                    self._complete_step(task.step)
        else:
            parent = task.parent
            parent.pending_children -= 1
            if parent.pending_children == 0 and parent.body_done:
                self._complete_task(parent)
        self._process_worklist()

    # -- messaging -------------------------------------------------------

    def _maybe_fire(self, h: versioning.Handle):
        while True:
            due = self.listeners.due(h.handle_id, h.runtime_version)
            if not due:
                return
            for lst in due:
                clen = self.content_len[h.handle_id]
                if self.cfg.sim:
                    msg = protocol.pack_message(protocol.MSG_SIM_DATA, self.rank,
                                                lst.dest, h.handle_id, lst.version,
                                                b"\x00")
                else:
                    block = self.owned_blocks[h.handle_id]
                    block.set_version(lst.version)
                    msg = protocol.pack_message(protocol.MSG_DATA, self.rank,
                                                lst.dest, h.handle_id, lst.version,
                                                bytes(block.raw()))
                    block.set_version(h.runtime_version)
                self.endpoint.post_send(lst.dest, msg)
                self.ledger.mark_sent(h.handle_id, lst.version, lst.dest)
                self.stats.msgs_out += 1
                self.stats.bytes += clen
                for _ in range(lst.count):
                    _, woken = versioning.complete_access(
                        h, versioning.AccessRequest(h, Access.READ, lst.version))
                    self._worklist.extend(woken)

    def _poll_transport(self) -> bool:
        completed, received = self.endpoint.poll()
        progress = bool(completed)
        for raw in received:
            self._on_receive(raw)
            progress = True
        if received:
            self._process_worklist()
        return progress

    def _on_receive(self, raw: bytes):
        head, payload = protocol.unpack_message(raw)
        if head["msg_type"] == protocol.MSG_SHUTDOWN:
            self._shutdown_seen = True
            return
        hid, version = head["handle_id"], head["version"]
        if not self.ledger.has_recv_record(hid, version):
            # the sender's traversal ran ahead of ours; replayed after admission
            self._parked_inbox.append(raw)
            self.ledger.early += 1
            return
        self._accept_data(head, payload)

    def _accept_data(self, head, payload):
        hid, version = head["handle_id"], head["version"]
        self.ledger.mark_received(hid, version)
        h = self.handle_by_id[hid]
        if head["msg_type"] == protocol.MSG_DATA:
            inner = mempool.parse_header(payload)
            if inner["handle_id"] != hid or inner["version"] != version:
                raise ProtocolError(
                    f"payload header ({inner['handle_id']},{inner['version']}) "
                    f"does not match message ({hid},{version})")
            block = self.pool.acquire(hid, version, inner["content_length"],
                                      owner=inner["owner"])
            block.raw()[:] = payload
        self.stats.msgs_in += 1
        _, woken = versioning.advance_to(h, version)
        self._worklist.extend(woken)

    def _replay_parked(self) -> bool:
        progress = False
        keep = []
        for raw in self._parked_inbox:
            head, payload = protocol.unpack_message(raw)
            if self.ledger.has_recv_record(head["handle_id"], head["version"]):
                self._accept_data(head, payload)
                progress = True
            else:
                keep.append(raw)
        self._parked_inbox = keep
        if progress:
            self._process_worklist()
        return progress

    # -- termination -----------------------------------------------------

    def _locally_quiescent(self) -> bool:
        return protocol.quiescent(
            submission_done=self._program_done and self._pushback is None,
            tasks_outstanding=self._outstanding,
            listeners_pending=self.listeners.pending,
            recvs_pending=self.ledger.pending_recvs,
            sends_unposted=self.ledger.pending_sends,
            transport_pending=self.endpoint.pending_sends,
            inbox_parked=len(self._parked_inbox),
        ) and self.executor.idle()

    def _shutdown_step(self) -> bool:
        if self.rank == 0:
            if not self._shutdown_sent:
                for r in range(1, self.cfg.nranks):
                    self.endpoint.post_send(
                        r, protocol.pack_message(protocol.MSG_SHUTDOWN,
                                                 self.rank, r, 0, 0))
                self._shutdown_sent = True
            return self.endpoint.pending_sends == 0
        return self._shutdown_seen

    # -- introspection ---------------------------------------------------

    def trace_buffers(self):
        bufs = [self.trace]
        if isinstance(self.executor, ThreadedExecutor):
            bufs.extend(self.executor.buffers)
        return bufs

    def owned_content(self, hid: int) -> np.ndarray:
        return self.owned_blocks[hid].array()


# -- multi-rank in-process engine ---------------------------------------

class Engine:
    """Hosts all ranks of a run in one process over the simulated network."""

    def __init__(self, ranks: int, grid=None, workers: int = 1, window: int = 4,
                 seed: int = 0, sim: bool = False, debug: bool = True,
                 latency=(1, 3), capacity: int = 0, pool_capacity: int = 16 << 20,
                 work_unit: int = 0, threaded: bool = True, fuzz_seed=None,
                 assign: str = "roundrobin"):
        from .transport import SimRouter
        if grid is None:
            grid = (ranks, 1)
        p, q = grid
        if p * q != ranks:
            raise ConfigError(f"grid {p}x{q} does not match {ranks} ranks")
        self.ranks = ranks
        self.grid = partition.ProcessGrid(p, q)
        self.router = SimRouter(ranks, seed=seed, latency=latency, capacity=capacity)
        if sim or fuzz_seed is not None:
            threaded = False
        self._started = False
        self.cfgs = []
        self.coordinators = []
        for r in range(ranks):
            cfg = RunConfig(ranks, workers=workers, window=window, seed=seed,
                            sim=sim, debug=debug, pool_capacity=pool_capacity,
                            work_unit=work_unit, threaded=threaded,
                            fuzz_seed=fuzz_seed, assign=assign)
            self.cfgs.append(cfg)
            self.coordinators.append(Coordinator(r, cfg, self.router.endpoint(r)))
        self.threaded = threaded
        self._next_data_id = 0
        self.wall_ns = 0

    def enable_sim_mode(self):
        """Switch every rank to simulation mode; only before the run starts."""
        if self._started:
            raise ConfigError("cannot toggle simulation mode mid-run")
        for c in self.coordinators:
            c.cfg.sim = True
            if isinstance(c.executor, ThreadedExecutor):
                c.executor = InlineExecutor(c.rank, "eager", c.trace,
                                            None, c.cfg.debug)
        self.threaded = False

    # -- data ------------------------------------------------------------

    def matrix(self, n_global: int, blocks: int, subblocks: int,
               symmetry: str = "full", init=None) -> MatrixData:
        data_id = self._next_data_id
        self._next_data_id += 1
        desc = partition.MatrixDescriptor(data_id, n_global, blocks, subblocks,
                                          self.grid, symmetry)
        for c in self.coordinators:
            c.add_matrix(desc, init)
        return MatrixData(desc)

    def vector(self, n_global: int, blocks: int, subblocks: int,
               init=None) -> VectorData:
        data_id = self._next_data_id
        self._next_data_id += 1
        desc = partition.VectorDescriptor(data_id, n_global, blocks, subblocks,
                                          self.ranks)
        for c in self.coordinators:
            c.add_vector(desc, init)
        return VectorData(desc)

    # -- running ---------------------------------------------------------

    def run(self, program_fn):
        """Execute the program; `program_fn(rank)` must yield the identical
        statement stream on every rank."""
        self._started = True
        epoch = time.monotonic_ns()
        for c in self.coordinators:
            c.epoch = epoch
            c.attach_program(program_fn(c.rank))
        t0 = time.monotonic_ns()
        if self.threaded:
            self._run_threaded()
        else:
            self._run_deterministic()
        self.wall_ns = time.monotonic_ns() - t0
        for c in self.coordinators:
            if c.error is not None:
                raise c.error

    def _run_threaded(self):
        abort = threading.Event()
        for c in self.coordinators:
            c.abort = abort
        threads = [threading.Thread(target=c.run, daemon=True,
                                    name=f"taskgrid-coord-{c.rank}")
                   for c in self.coordinators]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def _run_deterministic(self, stall_limit: int = 100000):
        fuzz = self.cfgs[0].fuzz_seed
        rng = random.Random(0xC0FFEE ^ fuzz) if fuzz is not None else None
        for c in self.coordinators:
            c.executor.epoch = c.epoch
            c.executor.start()
        stall = 0
        try:
            while True:
                active = [c for c in self.coordinators if not c.finished]
                if not active:
                    break
                if rng is not None:
                    rng.shuffle(active)
                progress = False
                for c in active:
                    try:
                        if c.step():
                            progress = True
                    except Exception as e:
                        c.error = e
                        return
                if progress:
                    stall = 0
                else:
                    stall += 1
                    if stall > stall_limit:
                        states = {c.rank: {
                            "outstanding": c._outstanding,
                            "listeners": c.listeners.pending,
                            "recvs": c.ledger.pending_recvs,
                            "sends": c.ledger.pending_sends,
                            "parked": len(c._parked_inbox),
                        } for c in self.coordinators if not c.finished}
                        raise TaskgridError(f"engine stalled; rank states: {states}")
        finally:
            for c in self.coordinators:
                c.executor.stop()

    # -- results ---------------------------------------------------------

    def stats(self) -> list[telemetry.RankStats]:
        return [c.stats for c in self.coordinators]

    def trace_events(self):
        bufs = []
        for c in self.coordinators:
            bufs.extend(c.trace_buffers())
        return telemetry.merge_traces(bufs)

    def audit_logs(self):
        return {c.rank: c.endpoint.audit_sorted() for c in self.coordinators}

    def gather_matrix(self, data: MatrixData) -> np.ndarray:
        desc = data.desc
        if self.cfgs[0].sim:
            raise ConfigError("no content to gather in simulation mode")
        blocks = {}
        for (i, j) in desc.stored_blocks():
            owner = desc.owner_of(i, j)
            h = self.coordinators[owner].handles[(desc.data_id, (i, j))]
            blocks[(i, j)] = np.array(
                self.coordinators[owner].owned_content(h.handle_id))
        return partition.assemble_matrix(blocks, desc)

    def gather_vector(self, data: VectorData) -> np.ndarray:
        desc = data.desc
        if self.cfgs[0].sim:
            raise ConfigError("no content to gather in simulation mode")
        out = np.zeros(desc.n_global)
        for i in range(desc.blocks):
            owner = desc.owner_of(i)
            h = self.coordinators[owner].handles[(desc.data_id, (i,))]
            out[i * desc.chunk:(i + 1) * desc.chunk] = \
                self.coordinators[owner].owned_content(h.handle_id)
        return out
