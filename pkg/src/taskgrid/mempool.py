"""Per-rank memory pool for data blocks.

Each block is one contiguous range inside an arena: a 64-byte header followed
by the content.  The header is part of the stored bytes (header + content is
exactly what goes on the wire), with fixed little-endian field offsets:

    0   handle_id       u64
    8   version         u64
    16  content_length  u64
    24  owner           u32
    28  flags           u32
    32  reserved        zero padding to 64

Several versions of one handle may be resident at once (a reader of an old
copy can still be running when a newer copy arrives).  Eviction releases
strictly older versions; blocks still referenced are only marked obsolete and
returned to the free list when their last reference drops.  Arenas grow
geometrically and existing blocks never move, so numpy views into a block
stay valid for its lifetime.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import PoolError

HEADER = 64
_HDR = struct.Struct("<QQQII")
_ALIGN = 64

FLAG_OWNED = 1
FLAG_BYPASS = 2


def _fit(nbytes: int) -> int:
    return (nbytes + _ALIGN - 1) // _ALIGN * _ALIGN


class Block:
    """One allocated block; exposes zero-copy views of its bytes."""

    __slots__ = ("pool", "arena", "offset", "size", "handle_id", "version",
                 "content_length", "owner", "flags", "refcount", "obsolete", "freed")

    def __init__(self, pool, arena, offset, size, handle_id, version,
                 content_length, owner, flags):
        self.pool = pool
        self.arena = arena          # arena index, or None for bypass blocks
        self.offset = offset
        self.size = size
        self.handle_id = handle_id
        self.version = version
        self.content_length = content_length
        self.owner = owner
        self.flags = flags
        self.refcount = 0
        self.obsolete = False
        self.freed = False
        self.write_header()

    def _buf(self):
        if self.arena is None:
            return self.pool._bypass_bufs[id(self)]
        return self.pool._arenas[self.arena]

    def write_header(self):
        _HDR.pack_into(self._buf(), self.offset, self.handle_id, self.version,
                       self.content_length, self.owner, self.flags)

    def set_version(self, version: int):
        """Update the stored version in place (owned blocks advance this way)."""
        self.version = version
        self.write_header()

    def raw(self) -> memoryview:
        """Header + content bytes, the wire payload."""
        return memoryview(self._buf())[self.offset:self.offset + HEADER + self.content_length]

    def content(self) -> memoryview:
        return memoryview(self._buf())[self.offset + HEADER:
                                       self.offset + HEADER + self.content_length]

    def array(self) -> np.ndarray:
        """Content as a flat float64 view (content starts 8-byte aligned)."""
        return np.frombuffer(self._buf(), dtype=np.float64,
                             count=self.content_length // 8,
                             offset=self.offset + HEADER)


def parse_header(buf, offset: int = 0):
    """Decode a block header from bytes; returns a dict of its fields."""
    handle_id, version, content_length, owner, flags = _HDR.unpack_from(buf, offset)
    return {"handle_id": handle_id, "version": version,
            "content_length": content_length, "owner": owner, "flags": flags}


class Pool:
    """Arena allocator keyed by (handle_id, version)."""

    def __init__(self, capacity: int = 1 << 20):
        if capacity < _ALIGN:
            raise PoolError(f"capacity {capacity} too small")
        self._arenas = [bytearray(capacity)]
        self._free = [[(0, capacity)]]          # per arena, sorted (offset, size)
        self._by_handle: dict[int, dict[int, Block]] = {}
        self._bypass: set[int] = set()
        self._bypass_bufs: dict[int, bytearray] = {}
        self.capacity = capacity
        self.grow_events = 0

    # -- allocation ------------------------------------------------------

    def _alloc(self, size: int):
        for ai, freelist in enumerate(self._free):
            for fi, (off, sz) in enumerate(freelist):
                if sz >= size:
                    if sz == size:
                        freelist.pop(fi)
                    else:
                        freelist[fi] = (off + size, sz - size)
                    return ai, off
        # grow: a new arena at least doubling total capacity; blocks never move
        new_size = max(_fit(size), self.capacity)
        self._arenas.append(bytearray(new_size))
        self._free.append([] if new_size == size else [(size, new_size - size)])
        self.capacity += new_size
        self.grow_events += 1
        return len(self._arenas) - 1, 0

    def _release(self, block: Block):
        if block.freed:
            raise PoolError(f"double release of block ({block.handle_id}, {block.version})")
        block.freed = True
        versions = self._by_handle.get(block.handle_id)
        if versions is not None:
            versions.pop(block.version, None)
            if not versions:
                del self._by_handle[block.handle_id]
        if block.arena is None:
            del self._bypass_bufs[id(block)]
            return
        freelist = self._free[block.arena]
        off, size = block.offset, block.size
        # merge with neighbours to keep the free list coalesced
        lo = 0
        while lo < len(freelist) and freelist[lo][0] < off:
            lo += 1
        if lo > 0 and freelist[lo - 1][0] + freelist[lo - 1][1] == off:
            off = freelist[lo - 1][0]
            size += freelist[lo - 1][1]
            freelist.pop(lo - 1)
            lo -= 1
        if lo < len(freelist) and off + size == freelist[lo][0]:
            size += freelist[lo][1]
            freelist.pop(lo)
        freelist.insert(lo, (off, size))

    # -- public API ------------------------------------------------------

    def acquire(self, handle_id: int, version: int, content_length: int,
                owner: int = 0, owned: bool = False) -> Block:
        """Allocate a block for (handle_id, version); duplicate versions error."""
        versions = self._by_handle.setdefault(handle_id, {})
        if version in versions:
            raise PoolError(f"block ({handle_id}, {version}) already resident")
        flags = FLAG_OWNED if owned else 0
        if handle_id in self._bypass:
            buf = bytearray(HEADER + content_length)
            block = Block.__new__(Block)
            block.pool = self
            block.arena = None
            block.offset = 0
            block.size = HEADER + content_length
            block.handle_id = handle_id
            block.version = version
            block.content_length = content_length
            block.owner = owner
            block.flags = flags | FLAG_BYPASS
            block.refcount = 0
            block.obsolete = False
            block.freed = False
            self._bypass_bufs[id(block)] = buf
            block.write_header()
        else:
            ai, off = self._alloc(_fit(HEADER + content_length))
            block = Block(self, ai, off, _fit(HEADER + content_length),
                          handle_id, version, content_length, owner, flags)
        versions[version] = block
        return block

    def lookup(self, handle_id: int, version: int) -> Block | None:
        return self._by_handle.get(handle_id, {}).get(version)

    def resident_versions(self, handle_id: int):
        return sorted(self._by_handle.get(handle_id, {}))

    def bind(self, handle_id: int, required: int) -> Block | None:
        """The block a reader requiring `required` should see: the resident
        version closest below or at it."""
        versions = self._by_handle.get(handle_id)
        if not versions:
            return None
        best = max((v for v in versions if v <= required), default=None)
        return None if best is None else versions[best]

    def pin(self, block: Block):
        block.refcount += 1

    def unpin(self, block: Block):
        if block.refcount <= 0:
            raise PoolError(f"unpin of unpinned block ({block.handle_id}, {block.version})")
        block.refcount -= 1
        if block.refcount == 0 and block.obsolete:
            self._release(block)

    def evict_older(self, handle_id: int, version: int) -> int:
        """Release resident versions strictly below `version`; blocks still
        pinned are marked obsolete and freed at their last unpin.  Returns the
        number released immediately."""
        versions = self._by_handle.get(handle_id)
        if not versions:
            return 0
        released = 0
        for v in sorted(versions):
            if v >= version:
                break
            block = versions[v]
            if block.flags & FLAG_OWNED:
                continue
            if block.refcount == 0:
                self._release(block)
                released += 1
            else:
                block.obsolete = True
        return released

    def release(self, block: Block):
        """Explicitly return a block to the pool (it must be unreferenced)."""
        if block.refcount != 0:
            raise PoolError(f"release of pinned block ({block.handle_id}, {block.version})")
        self._release(block)

    def disable_pooling(self, handle_id: int):
        """Route future allocations for this handle outside the arenas."""
        if self._by_handle.get(handle_id):
            raise PoolError(f"handle {handle_id} has resident blocks")
        self._bypass.add(handle_id)

    @property
    def free_bytes(self) -> int:
        return sum(sz for fl in self._free for _, sz in fl)

    @property
    def live_blocks(self) -> int:
        return sum(len(v) for v in self._by_handle.values())
