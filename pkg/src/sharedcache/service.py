"""Text-protocol TCP front end for :class:`SharedCache`.

Each connection binds itself to a proxy with ``PROXY <id>`` and then issues
``GET``/``SET`` commands on that proxy's list.  Framing is CRLF text with a
raw payload after ``SET``::

    PROXY 0
    SET <key> <nbytes>\\r\\n<payload>\\r\\n   -> STORED <evictions>
    GET <key>                             -> VALUE <key> <nbytes>\\r\\n<payload>\\r\\nEND | END
    STATS                                 -> STAT <name> <value> ... END
    QUIT

A payload of ``n`` bytes is charged ``n`` memory units.  All engine calls go
through one lock, so clients see a single total order of cache operations.
"""

from __future__ import annotations

import logging
import signal
import socketserver
import threading
from collections import Counter
from dataclasses import dataclass, field

from .core import CapacityExhausted, ObjectTooLarge, Outcome, SharedCache

log = logging.getLogger(__name__)

CRLF = b"\r\n"
MAX_LINE = 4096
_DISCARD_CHUNK = 1 << 16


@dataclass
class Session:
    conn_id: int
    proxy: int | None = None


@dataclass
class ProxyCounters:
    gets: int = 0
    list_hits: int = 0
    list_miss_cache_hits: int = 0
    misses: int = 0
    sets: int = 0
    evictions: int = 0


@dataclass
class ServiceState:
    """Cache plus counters, guarded by a single lock."""

    cache: SharedCache
    lock: threading.Lock = field(default_factory=threading.Lock)
    counters: list = field(init=False)
    eviction_histogram: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.counters = [ProxyCounters() for _ in range(self.cache.num_proxies)]

    def bind(self, session: Session, arg: str) -> bytes:
        try:
            proxy = int(arg)
        except ValueError:
            return b"CLIENT_ERROR bad proxy id" + CRLF
        if not 0 <= proxy < self.cache.num_proxies:
            return b"CLIENT_ERROR unknown proxy" + CRLF
        session.proxy = proxy
        return b"OK" + CRLF

    def handle_get(self, session: Session, key: str) -> bytes:
        if session.proxy is None:
            return b"ERROR" + CRLF
        p = session.proxy
        with self.lock:
            out = self.cache.get(p, key)
            c = self.counters[p]
            c.gets += 1
            if out.kind is Outcome.MISS:
                c.misses += 1
                return b"END" + CRLF
            if out.kind is Outcome.LIST_HIT:
                c.list_hits += 1
            else:
                c.list_miss_cache_hits += 1
            c.evictions += out.num_evictions
            payload = self.cache.record(key).value
        head = f"VALUE {key} {len(payload)}".encode()
        return head + CRLF + payload + CRLF + b"END" + CRLF

    def handle_set(self, session: Session, key: str, payload: bytes) -> bytes:
        if session.proxy is None:
            return b"ERROR" + CRLF
        if not payload:
            return b"CLIENT_ERROR empty payload" + CRLF
        p = session.proxy
        with self.lock:
            c = self.counters[p]
            try:
                out = self.cache.set(p, key, len(payload), bytes(payload))
            except ObjectTooLarge:
                return b"SERVER_ERROR object too large for allocation" + CRLF
            except CapacityExhausted as exc:
                n = len(exc.trace.entries) if exc.trace is not None else 0
                c.evictions += n
                return b"SERVER_ERROR out of memory" + CRLF
            c.sets += 1
            c.evictions += out.num_evictions
            self.eviction_histogram[out.num_evictions] += 1
        return f"STORED {out.num_evictions}".encode() + CRLF

    def stats_lines(self) -> list[tuple[str, object]]:
        with self.lock:
            st = self.cache.stats()
            rows: list[tuple[str, object]] = [
                ("proxies", self.cache.num_proxies),
                ("capacity", self.cache.capacity),
                ("occupancy", st["occupancy"]),
                ("objects", st["objects"]),
                ("orphans", st["orphan_count"]),
            ]
            for i, c in enumerate(self.counters):
                for name in ("gets", "list_hits", "list_miss_cache_hits", "misses", "sets", "evictions"):
                    rows.append((f"proxy{i}:{name}", getattr(c, name)))
                rows.append((f"proxy{i}:list_size", st["list_sizes"][i]))
                rows.append((f"proxy{i}:virtual_length", st["virtual_lengths"][i]))
            for n in sorted(self.eviction_histogram):
                rows.append((f"evictions_per_set:{n}", self.eviction_histogram[n]))
        return rows

    def handle_stats(self, session: Session) -> bytes:
        body = b"".join(f"STAT {k} {v}".encode() + CRLF for k, v in self.stats_lines())
        return body + b"END" + CRLF


class _Handler(socketserver.StreamRequestHandler):
    server: "CacheServer"

    def handle(self):
        state = self.server.state
        session = Session(self.server.next_conn_id())
        rfile, wfile = self.rfile, self.wfile
        while True:
            line = rfile.readline(MAX_LINE + 2)
            if not line:
                return
            if not line.endswith(CRLF):
                if len(line) > MAX_LINE:
                    wfile.write(b"CLIENT_ERROR line too long" + CRLF)
                    return
                if not line.endswith(b"\n"):
                    return  # peer hung up mid-line
            parts = line.decode("utf-8", "replace").split()
            if not parts:
                wfile.write(b"ERROR" + CRLF)
                continue
            cmd, args = parts[0].upper(), parts[1:]
            if cmd == "QUIT":
                return
            if cmd == "PROXY" and len(args) == 1:
                reply = state.bind(session, args[0])
            elif cmd == "GET" and len(args) == 1:
                reply = state.handle_get(session, args[0])
            elif cmd == "SET" and len(args) == 2:
                reply = self._read_set(state, session, args)
                if reply is None:
                    return
            elif cmd == "STATS" and not args:
                reply = state.handle_stats(session)
            else:
                reply = b"ERROR" + CRLF
            wfile.write(reply)

    def _read_set(self, state: ServiceState, session: Session, args) -> bytes | None:
        key, raw_len = args
        try:
            n = int(raw_len)
            if n < 0:
                raise ValueError
        except ValueError:
            return b"CLIENT_ERROR bad data chunk" + CRLF
        if n > state.cache.capacity:
            # skip the payload to keep the stream framed
            left = n + 2
            while left:
                chunk = self.rfile.read(min(left, _DISCARD_CHUNK))
                if not chunk:
                    return None
                left -= len(chunk)
            return b"SERVER_ERROR object too large for cache" + CRLF
        data = self.rfile.read(n + 2)
        if len(data) < n + 2:
            return None
        if data[n:] != CRLF:
            if not data.endswith(b"\n"):
                self.rfile.readline(MAX_LINE)  # swallow the rest of the chunk
            return b"CLIENT_ERROR bad data chunk" + CRLF
        return state.handle_set(session, key, data[:n])


class CacheServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, cache: SharedCache):
        super().__init__(address, _Handler)
        self.state = ServiceState(cache)
        self._ids = 0
        self._ids_lock = threading.Lock()

    def next_conn_id(self) -> int:
        with self._ids_lock:
            self._ids += 1
            return self._ids


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def start_server(address, cache: SharedCache) -> tuple[CacheServer, threading.Thread]:
    """Run a server on a background thread; stop it with ``server.shutdown()``."""
    if isinstance(address, str):
        address = parse_address(address)
    server = CacheServer(address, cache)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def serve(address, cache: SharedCache) -> None:
    """Serve in the foreground until SIGINT or SIGTERM."""
    if isinstance(address, str):
        address = parse_address(address)

    def _stop(signum, frame):
        raise KeyboardInterrupt

    previous = signal.signal(signal.SIGTERM, _stop)
    with CacheServer(address, cache) as server:
        log.info("listening on %s:%d", *server.server_address[:2])
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("shutting down")
        finally:
            signal.signal(signal.SIGTERM, previous)
