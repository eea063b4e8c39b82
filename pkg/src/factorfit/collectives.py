"""Message-passing collectives over pluggable backends.

All inter-worker communication in the fitters goes through the four
collectives defined here: ``reduce_sum``, ``broadcast``, ``gather`` and
``barrier``. Three backends implement them:

* ``serial``  -- size 1, everything is a local no-op;
* ``threads`` -- workers are threads of one process sharing a hub;
* ``sockets`` -- workers are OS processes; rank 0 listens on a TCP
  address and the others connect (star topology). Ranks learn their
  identity from the ``FACTORFIT_RANK``, ``FACTORFIT_SIZE`` and
  ``FACTORFIT_COORD`` environment variables or explicit arguments.

Reductions accumulate in ascending-rank order, never in arrival or tree
order, so a program built on these collectives produces bit-identical
results on every backend. Collective calls are matched by a per-
communicator sequence number; mixing collectives across ranks is a
programming error reported as :class:`CollectiveContractError`.

Wire format (sockets): each frame is an 8-byte little-endian unsigned
payload length followed by the payload; the payload starts with a
1-byte opcode and an 8-byte little-endian sequence number.
"""

import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CollectiveContractError, ConfigError, TransportError

__all__ = [
    "Communicator",
    "SerialCommunicator",
    "ThreadCommunicator",
    "SocketCommunicator",
    "create_thread_communicators",
    "reduce_sum",
    "broadcast",
    "gather",
    "barrier",
    "rank_offsets",
    "ENV_RANK",
    "ENV_SIZE",
    "ENV_COORD",
]

ENV_RANK = "FACTORFIT_RANK"
ENV_SIZE = "FACTORFIT_SIZE"
ENV_COORD = "FACTORFIT_COORD"

_OP_HELLO = 0
_OP_REDUCE = 1
_OP_BCAST = 2
_OP_GATHER = 3
_OP_BARRIER = 4

_LEN = struct.Struct("<Q")
_HEAD = struct.Struct("<BQ")
_DIMS = struct.Struct("<QQ")


@dataclass
class CollectiveStats:
    """Logical per-rank communication accounting, backend independent.

    ``*_bytes`` count the payload this rank contributes to (reduce,
    gather) or receives from (broadcast) each collective, regardless of
    whether the backend physically moves bytes. ``seconds`` is wall time
    spent inside collective calls.
    """

    reduce_calls: int = 0
    reduce_bytes: int = 0
    bcast_calls: int = 0
    bcast_bytes: int = 0
    gather_calls: int = 0
    gather_bytes: int = 0
    barrier_calls: int = 0
    seconds: float = field(default=0.0)


def _as_payload(a, name="payload"):
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise CollectiveContractError(f"{name} must be a 2-D float64 matrix")
    return out


class Communicator:
    """Rank/size handle exposing the collectives.

    One communicator per worker; not shareable between concurrently
    executing workers. ``rank`` 0 is the root by convention.
    """

    backend = "abstract"

    def __init__(self, rank, size):
        if size < 1 or not (0 <= rank < size):
            raise ConfigError(f"invalid rank/size ({rank}/{size})")
        self.rank = rank
        self.size = size
        self.stats = CollectiveStats()
        self._seq = 0

    def _next_seq(self):
        self._seq += 1
        return self._seq

    def reduce_sum(self, local):
        """Elementwise sum across ranks, valid on root only.

        Root receives the sum accumulated in ascending-rank order;
        non-root ranks receive ``None``.
        """
        local = _as_payload(local, "reduce_sum payload")
        t0 = time.perf_counter()
        try:
            out = self._reduce_sum(local, self._next_seq())
        finally:
            self.stats.seconds += time.perf_counter() - t0
        self.stats.reduce_calls += 1
        self.stats.reduce_bytes += local.nbytes
        return out

    def broadcast(self, buf):
        """Copy root's payload to every rank (non-root may pass None)."""
        if self.rank == 0:
            buf = _as_payload(buf, "broadcast payload")
        t0 = time.perf_counter()
        try:
            out = self._broadcast(buf, self._next_seq())
        finally:
            self.stats.seconds += time.perf_counter() - t0
        self.stats.bcast_calls += 1
        self.stats.bcast_bytes += out.nbytes
        return out

    def gather(self, local):
        """Collect one byte string per rank, ordered by rank, on root."""
        local = bytes(local)
        t0 = time.perf_counter()
        try:
            out = self._gather(local, self._next_seq())
        finally:
            self.stats.seconds += time.perf_counter() - t0
        self.stats.gather_calls += 1
        self.stats.gather_bytes += len(local)
        return out

    def barrier(self):
        """Return only after every rank has entered."""
        t0 = time.perf_counter()
        try:
            self._barrier(self._next_seq())
        finally:
            self.stats.seconds += time.perf_counter() - t0
        self.stats.barrier_calls += 1

    def close(self):
        pass

    def abort(self):
        """Unblock peers waiting on this rank (used on worker failure)."""
        self.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SerialCommunicator(Communicator):
    """Single-worker backend; all collectives are local."""

    backend = "serial"

    def __init__(self):
        super().__init__(0, 1)

    def _reduce_sum(self, local, seq):
        return local.copy()

    def _broadcast(self, buf, seq):
        return buf.copy()

    def _gather(self, local, seq):
        return [local]

    def _barrier(self, seq):
        pass


class _ThreadHub:
    """Shared state for one group of thread communicators."""

    def __init__(self, size, timeout):
        self.size = size
        self.timeout = timeout
        self.slots = [None] * size
        self.meta = [None] * size
        self.result = None
        self.error = None
        self.barrier = threading.Barrier(size)

    def _wait(self):
        try:
            self.barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError:
            raise TransportError(
                f"collective did not complete within {self.timeout} s "
                "(a worker is missing or stuck)"
            ) from None

    def run(self, rank, opcode, seq, payload, compute):
        """Execute one collective; ``compute`` runs on rank 0 only."""
        self.slots[rank] = payload
        self.meta[rank] = (opcode, seq)
        self._wait()
        if rank == 0:
            self.error = None
            self.result = None
            try:
                expected = self.meta[0]
                for r, got in enumerate(self.meta):
                    if got != expected:
                        raise CollectiveContractError(
                            f"rank {r} called {got}, rank 0 called {expected}"
                        )
                self.result = compute(self.slots)
            except Exception as exc:  # re-raised on every rank below
                self.error = exc
        self._wait()
        error, result = self.error, self.result
        if error is not None:
            raise error
        return result


class ThreadCommunicator(Communicator):
    """One rank of an in-process thread group."""

    backend = "threads"

    def __init__(self, rank, hub):
        super().__init__(rank, hub.size)
        self._hub = hub

    def _reduce_sum(self, local, seq):
        def compute(slots):
            shape = slots[0].shape
            for r, arr in enumerate(slots):
                if arr.shape != shape:
                    raise CollectiveContractError(
                        f"reduce_sum shape mismatch: rank {r} has {arr.shape}, "
                        f"rank 0 has {shape}"
                    )
            acc = slots[0].copy()
            for arr in slots[1:]:
                acc += arr
            return acc

        out = self._hub.run(self.rank, _OP_REDUCE, seq, local, compute)
        return out if self.rank == 0 else None

    def _broadcast(self, buf, seq):
        out = self._hub.run(self.rank, _OP_BCAST, seq, buf, lambda slots: slots[0])
        return out.copy()

    def _gather(self, local, seq):
        out = self._hub.run(self.rank, _OP_GATHER, seq, local, list)
        return out if self.rank == 0 else None

    def _barrier(self, seq):
        self._hub.run(self.rank, _OP_BARRIER, seq, None, lambda slots: None)

    def abort(self):
        self._hub.barrier.abort()


def create_thread_communicators(size, timeout=60.0):
    """Build one communicator per worker thread of an in-process group."""
    hub = _ThreadHub(size, timeout)
    return [ThreadCommunicator(r, hub) for r in range(size)]


def _pack_array(a):
    return _DIMS.pack(a.shape[0], a.shape[1]) + a.astype("<f8", copy=False).tobytes()


def _unpack_array(body):
    rows, cols = _DIMS.unpack_from(body, 0)
    data = np.frombuffer(body, dtype="<f8", offset=_DIMS.size, count=rows * cols)
    return data.reshape(rows, cols).copy()


class SocketCommunicator(Communicator):
    """TCP star topology: rank 0 accepts one connection per peer rank."""

    backend = "sockets"

    def __init__(self, rank, size, coord, timeout=60.0):
        super().__init__(rank, size)
        self.timeout = timeout
        host, _, port = str(coord).rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"coordinator address must be host:port, got {coord!r}")
        port = int(port)
        self._peers = {}
        if size == 1:
            return
        if rank == 0:
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            server.settimeout(timeout)
            server.bind((host, port))
            server.listen(size - 1)
            try:
                for _ in range(size - 1):
                    conn, _addr = server.accept()
                    conn.settimeout(timeout)
                    op, seq, body = self._recv_raw(conn, rank_hint=None)
                    if op != _OP_HELLO:
                        raise CollectiveContractError("expected hello frame")
                    peer = _LEN.unpack(body)[0]
                    if not (1 <= peer < size) or peer in self._peers:
                        raise CollectiveContractError(f"bad hello from rank {peer}")
                    self._peers[peer] = conn
            except socket.timeout:
                missing = sorted(set(range(1, size)) - set(self._peers))
                raise TransportError(
                    f"ranks {missing} did not connect within {timeout} s"
                ) from None
            finally:
                server.close()
        else:
            conn = None
            deadline = time.monotonic() + timeout
            while True:
                try:
                    conn = socket.create_connection((host, port), timeout=timeout)
                    break
                except OSError:
                    if time.monotonic() >= deadline:
                        raise TransportError(
                            f"could not reach coordinator at {coord} within {timeout} s",
                            rank=0,
                        ) from None
                    time.sleep(0.05)
            conn.settimeout(timeout)
            self._peers[0] = conn
            self._send(0, _OP_HELLO, 0, _LEN.pack(rank))

    @classmethod
    def from_env(cls, env=None, rank=None, size=None, coord=None, timeout=60.0):
        """Build from FACTORFIT_RANK / FACTORFIT_SIZE / FACTORFIT_COORD."""
        env = os.environ if env is None else env
        try:
            rank = int(env[ENV_RANK]) if rank is None else int(rank)
            size = int(env[ENV_SIZE]) if size is None else int(size)
            coord = env[ENV_COORD] if coord is None else coord
        except KeyError as missing:
            raise ConfigError(
                f"sockets backend needs {missing} in the environment or flags"
            ) from None
        return cls(rank, size, coord, timeout=timeout)

    def _send(self, peer, opcode, seq, body):
        frame = _HEAD.pack(opcode, seq) + body
        try:
            self._peers[peer].sendall(_LEN.pack(len(frame)) + frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}", rank=peer) from None

    def _recv_raw(self, conn, rank_hint):
        def read(n):
            chunks = []
            while n:
                try:
                    chunk = conn.recv(n)
                except socket.timeout:
                    raise TransportError(
                        f"no frame within {self.timeout} s", rank=rank_hint
                    ) from None
                except OSError as exc:
                    raise TransportError(f"recv failed: {exc}", rank=rank_hint) from None
                if not chunk:
                    raise TransportError("peer disconnected", rank=rank_hint)
                chunks.append(chunk)
                n -= len(chunk)
            return b"".join(chunks)

        (length,) = _LEN.unpack(read(_LEN.size))
        frame = read(length)
        op, seq = _HEAD.unpack_from(frame, 0)
        return op, seq, frame[_HEAD.size:]

    def _recv_expect(self, peer, opcode, seq):
        op, got_seq, body = self._recv_raw(self._peers[peer], peer)
        if op != opcode or got_seq != seq:
            raise CollectiveContractError(
                f"rank {peer} sent collective (op={op}, seq={got_seq}), "
                f"expected (op={opcode}, seq={seq})"
            )
        return body

    def _reduce_sum(self, local, seq):
        if self.rank != 0:
            self._send(0, _OP_REDUCE, seq, _pack_array(local))
            return None
        acc = local.copy()
        for peer in range(1, self.size):
            arr = _unpack_array(self._recv_expect(peer, _OP_REDUCE, seq))
            if arr.shape != acc.shape:
                raise CollectiveContractError(
                    f"reduce_sum shape mismatch: rank {peer} has {arr.shape}, "
                    f"rank 0 has {acc.shape}"
                )
            acc += arr
        return acc

    def _broadcast(self, buf, seq):
        if self.rank == 0:
            body = _pack_array(buf)
            for peer in range(1, self.size):
                self._send(peer, _OP_BCAST, seq, body)
            return buf.copy()
        return _unpack_array(self._recv_expect(0, _OP_BCAST, seq))

    def _gather(self, local, seq):
        if self.rank != 0:
            self._send(0, _OP_GATHER, seq, local)
            return None
        out = [local]
        for peer in range(1, self.size):
            out.append(self._recv_expect(peer, _OP_GATHER, seq))
        return out

    def _barrier(self, seq):
        if self.rank != 0:
            self._send(0, _OP_BARRIER, seq, b"")
            self._recv_expect(0, _OP_BARRIER, seq)
            return
        for peer in range(1, self.size):
            self._recv_expect(peer, _OP_BARRIER, seq)
        for peer in range(1, self.size):
            self._send(peer, _OP_BARRIER, seq, b"")

    def close(self):
        for conn in self._peers.values():
            try:
                conn.close()
            except OSError:
                pass
        self._peers.clear()


def reduce_sum(local, comm):
    return comm.reduce_sum(local)


def broadcast(buf, comm):
    return comm.broadcast(buf)


def gather(local, comm):
    return comm.gather(local)


def barrier(comm):
    comm.barrier()


def rank_offsets(comm, local_count):
    """Exchange per-rank item counts; return (this rank's offset, total).

    Lets every rank derive the global index of its locally held items
    without any rank knowing the full layout up front.
    """
    blobs = comm.gather(_LEN.pack(local_count))
    if comm.rank == 0:
        counts = np.array([_LEN.unpack(b)[0] for b in blobs], dtype=np.float64)
        offsets = np.concatenate(([0.0], np.cumsum(counts)[:-1]))
        table = np.vstack([offsets, counts])
    else:
        table = None
    table = comm.broadcast(table)
    return int(table[0, comm.rank]), int(table[1].sum())
