"""Message transports between the server and source workers.

``InprocTransport`` runs each worker on its own thread and passes message
objects through queues. ``TcpTransport`` runs the same workers behind
loopback sockets and serializes every message as newline-delimited JSON.
Both deliver the identical broadcast to every worker and hand back one
reply per worker per round.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Sequence

from ..errors import WorkerFailure
from .messages import GradientReport, Hello, ParamBroadcast, Stop, WorkerError, decode, encode
from .worker import SourceWorker

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0


def _serve(worker: SourceWorker, msg: ParamBroadcast):
    try:
        return worker.handle(msg)
    except Exception as exc:  # reported to the server, which aborts the round
        log.exception("worker %d failed in round %d", worker.source_id, msg.round)
        return WorkerError(worker.source_id, msg.round, f"{type(exc).__name__}: {exc}")


class InprocTransport:
    def __init__(self, workers: Sequence[SourceWorker], timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._outbox: queue.Queue = queue.Queue()
        self._inboxes: dict[int, queue.Queue] = {}
        self._threads = []
        for worker in workers:
            inbox: queue.Queue = queue.Queue()
            self._inboxes[worker.source_id] = inbox
            t = threading.Thread(target=self._loop, args=(worker, inbox), daemon=True)
            t.start()
            self._threads.append(t)

    def _loop(self, worker: SourceWorker, inbox: queue.Queue) -> None:
        while True:
            msg = inbox.get()
            if isinstance(msg, Stop):
                return
            self._outbox.put(_serve(worker, msg))

    def exchange(self, msg: ParamBroadcast) -> list:
        for inbox in self._inboxes.values():
            inbox.put(msg)
        replies = []
        for _ in self._inboxes:
            try:
                replies.append(self._outbox.get(timeout=self.timeout))
            except queue.Empty:
                raise WorkerFailure(f"round {msg.round}: timed out waiting for workers") from None
        return replies

    def close(self) -> None:
        for inbox in self._inboxes.values():
            inbox.put(Stop())
        for t in self._threads:
            t.join(timeout=5.0)


def _tcp_worker(worker: SourceWorker, address) -> None:
    with socket.create_connection(address) as sock, sock.makefile("rwb") as stream:
        stream.write(encode(Hello(worker.source_id)))
        stream.flush()
        for line in stream:
            msg = decode(line)
            if isinstance(msg, Stop):
                return
            stream.write(encode(_serve(worker, msg)))
            stream.flush()


class TcpTransport:
    """Loopback TCP server; workers connect, say hello, then answer broadcasts."""

    def __init__(
        self,
        workers: Sequence[SourceWorker],
        host: str = "127.0.0.1",
        port: int = 0,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        self.timeout = timeout
        self._server = socket.create_server((host, port))
        self._server.settimeout(timeout)
        self.address = self._server.getsockname()
        self._threads = [
            threading.Thread(target=_tcp_worker, args=(w, self.address), daemon=True)
            for w in workers
        ]
        for t in self._threads:
            t.start()
        self._streams: dict[int, object] = {}
        self._conns = []
        expected = {w.source_id for w in workers}
        while set(self._streams) != expected:
            conn, _ = self._server.accept()
            conn.settimeout(timeout)
            stream = conn.makefile("rwb")
            hello = decode(stream.readline())
            if not isinstance(hello, Hello) or hello.source_id not in expected:
                raise WorkerFailure(f"unexpected handshake {hello!r}")
            self._conns.append(conn)
            self._streams[hello.source_id] = stream

    def exchange(self, msg: ParamBroadcast) -> list:
        payload = encode(msg)
        for stream in self._streams.values():
            stream.write(payload)
            stream.flush()
        replies = []
        for sid in sorted(self._streams):
            try:
                line = self._streams[sid].readline()
            except OSError as exc:
                raise WorkerFailure(f"round {msg.round}: source {sid} connection failed: {exc}") from exc
            if not line:
                raise WorkerFailure(f"round {msg.round}: source {sid} disconnected")
            replies.append(decode(line))
        return replies

    def close(self) -> None:
        for stream in self._streams.values():
            try:
                stream.write(encode(Stop()))
                stream.flush()
                stream.close()
            except OSError:
                pass
        for conn in self._conns:
            conn.close()
        self._server.close()
        for t in self._threads:
            t.join(timeout=5.0)


def make_transport(kind: str, workers: Sequence[SourceWorker]):
    if kind == "inproc":
        return InprocTransport(workers)
    if kind == "tcp":
        return TcpTransport(workers)
    raise ValueError(f"unknown transport {kind!r}")


__all__ = ["InprocTransport", "TcpTransport", "make_transport", "GradientReport"]
