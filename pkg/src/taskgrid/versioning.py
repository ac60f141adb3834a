"""Version-counter dependency tracking for shared data handles.

Every piece of shared data is represented by a handle whose version starts
at 0 and increases by one for each completed access.  At submission time each
access is assigned the version it requires before it may run; consecutive
accesses of the same reorderable type (Read, or the commutative Add) share a
required version so they may run in any order, while Modify always opens a
new group.  A task becomes runnable when every accessed handle has reached
the required version; Add and Modify additionally hold a per-handle exclusive
token so at most one writer body runs at a time.

All mutating operations on one Handle must be serialized by the caller; the
engine satisfies this by touching handle state only from the owning rank's
coordinator thread.
"""
from __future__ import annotations

import enum
from collections import deque

from .errors import ContractViolation


class Access(enum.IntEnum):
    """Access types, ordered by how restrictive they are."""

    READ = 0
    ADD = 1
    MODIFY = 2

    @property
    def is_write(self) -> bool:
        return self is not Access.READ

    @property
    def reorderable(self) -> bool:
        """Whether consecutive accesses of this type may run in any order."""
        return self is not Access.MODIFY


class AccessRequest:
    """One registered access: the handle, the type, and the required version."""

    __slots__ = ("handle", "access", "required")

    def __init__(self, handle: "Handle", access: Access, required: int):
        self.handle = handle
        self.access = access
        self.required = required

    def __repr__(self):
        return f"AccessRequest({self.handle.handle_id}, {self.access.name}, {self.required})"


class Handle:
    """Version state for one data partition on one rank.

    `runtime_version` is the execution-side counter; the `sub_*` fields hold
    the submission-side grouping state used by register_access.  Waiters are
    parked task activations: `waiters` maps a required version to a FIFO of
    activations to re-examine when that version is reached, `token_waiters`
    holds writers blocked only on the exclusive token.
    """

    __slots__ = (
        "handle_id", "owner", "runtime_version",
        "sub_base", "sub_count", "sub_last",
        "token_held", "waiters", "token_waiters",
        "write_audit",
    )

    def __init__(self, handle_id: int, owner: int = 0):
        self.handle_id = handle_id
        self.owner = owner
        self.runtime_version = 0
        self.sub_base = 0
        self.sub_count = 0
        self.sub_last: Access | None = None
        self.token_held = False
        self.waiters: dict[int, deque] = {}
        self.token_waiters: deque = deque()
        self.write_audit = 0

    @property
    def registered_accesses(self) -> int:
        """Total accesses registered so far."""
        return self.sub_base + self.sub_count

    def __repr__(self):
        return (f"Handle(id={self.handle_id}, owner={self.owner}, "
                f"rv={self.runtime_version}, next={self.registered_accesses})")


def register_access(handle: Handle, access: Access) -> AccessRequest:
    """Assign the required version for the next access in program order.

    Consecutive accesses of the same reorderable type join the open group and
    share its base version; anything else closes the group and starts a new
    one at base + group size.
    """
    if access is handle.sub_last and access.reorderable:
        handle.sub_count += 1
        return AccessRequest(handle, access, handle.sub_base)
    handle.sub_base += handle.sub_count
    handle.sub_count = 1
    handle.sub_last = access
    return AccessRequest(handle, access, handle.sub_base)


def try_acquire_token(handle: Handle) -> bool:
    """Acquire the exclusive writer token if free."""
    if handle.token_held:
        return False
    handle.token_held = True
    return True


def release_token(handle: Handle):
    if not handle.token_held:
        raise ContractViolation(f"token of handle {handle.handle_id} not held")
    handle.token_held = False


def is_satisfied(handle: Handle, req: AccessRequest) -> bool:
    """Check whether `req` may run now; a true return for a write access
    atomically acquires the exclusive token."""
    if handle.runtime_version < req.required:
        return False
    if req.access.is_write:
        return try_acquire_token(handle)
    return True


def enqueue_waiter(handle: Handle, version: int, waiter):
    """Park `waiter` until `version` is reached."""
    if handle.runtime_version >= version:
        raise ContractViolation(
            f"handle {handle.handle_id} already at {handle.runtime_version} >= {version}")
    handle.waiters.setdefault(version, deque()).append(waiter)


def enqueue_token_waiter(handle: Handle, waiter):
    """Park `waiter` until the exclusive token is released."""
    handle.token_waiters.append(waiter)


def complete_access(handle: Handle, req: AccessRequest):
    """Complete one access: bump the version, release the token for writes,
    and return (new_version, waiters due for re-examination).

    Waiters parked at the newly reached version wake here; a released token
    additionally wakes the first token waiter.  Each waiter is handed back
    exactly once; re-parking is the caller's re-examination logic.
    """
    if handle.runtime_version >= handle.registered_accesses:
        raise ContractViolation(
            f"completing unregistered access on handle {handle.handle_id}: "
            f"version {handle.runtime_version}, registered {handle.registered_accesses}")
    handle.runtime_version += 1
    due = handle.waiters.pop(handle.runtime_version, None)
    woken = list(due) if due else []
    if req.access.is_write:
        release_token(handle)
        if handle.token_waiters:
            woken.append(handle.token_waiters.popleft())
    return handle.runtime_version, woken


def advance_to(handle: Handle, version: int):
    """Jump the version forward (receive path) and return waiters at
    versions <= the new version.

    Used when a data message stamps the local mirror; always collects due
    waiters even when the version does not move, so a waiter parked at an
    already-reached version (fresh handle read at version 0) is not lost.
    """
    if version > handle.runtime_version:
        handle.runtime_version = version
    woken = []
    if handle.waiters:
        for v in sorted(k for k in handle.waiters if k <= handle.runtime_version):
            woken.extend(handle.waiters.pop(v))
    return handle.runtime_version, woken
