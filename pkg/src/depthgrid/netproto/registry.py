"""Registry naming service: servers register endpoints, clients discover them.

Line-oriented text protocol over TCP:

    REGISTER <name> <host> <port> <camera_id...>   -> OK | ERR duplicate
    PING <name>                                    -> OK | ERR unknown
    LIST                                           -> ENTRY <name> <host> <port> <ids...>
                                                      ... then END

Entries expire when not pinged within the TTL, so a crashed server's name
becomes reusable without manual cleanup.
"""
from __future__ import annotations

import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, replace

log = logging.getLogger(__name__)

DEFAULT_REGISTRY_PORT = 7400
DEFAULT_STREAM_PORT = 7401
REGISTRY_ENV_VAR = "DEPTHGRID_REGISTRY"
DEFAULT_TTL = 10.0


class RegistryError(RuntimeError):
    pass


class DuplicateServerNameError(RegistryError):
    pass


@dataclass(frozen=True)
class RegistryEntry:
    server_name: str
    host: str
    port: int
    camera_ids: tuple[int, ...] = ()
    last_heartbeat: float = 0.0


def resolve_registry_endpoint(arg: str | None = None) -> tuple[str, int]:
    """Pick the registry endpoint: explicit arg, then env var, then default."""
    raw = arg or os.environ.get(REGISTRY_ENV_VAR) or f"127.0.0.1:{DEFAULT_REGISTRY_PORT}"
    host, sep, port = raw.rpartition(":")
    if not sep:
        return raw, DEFAULT_REGISTRY_PORT
    return host, int(port)


class RegistryServer:
    """Threaded TCP registry; command handling is socket-free for unit tests."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_REGISTRY_PORT,
                 ttl: float = DEFAULT_TTL, clock=time.monotonic):
        self.host = host
        self.port = port
        self.ttl = ttl
        self.clock = clock
        self._entries: dict[str, RegistryEntry] = {}
        self._lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()

    # ---- command handling ----

    def _sweep(self, now: float) -> None:
        dead = [n for n, e in self._entries.items() if now - e.last_heartbeat > self.ttl]
        for name in dead:
            log.info("registry: expiring %s", name)
            del self._entries[name]

    def handle_line(self, line: str) -> list[str]:
        fields = line.split()
        if not fields:
            return ["ERR malformed empty command"]
        cmd = fields[0].upper()
        now = self.clock()
        with self._lock:
            self._sweep(now)
            if cmd == "REGISTER":
                if len(fields) < 4:
                    return ["ERR malformed REGISTER needs name host port [ids...]"]
                name, host = fields[1], fields[2]
                try:
                    port = int(fields[3])
                    ids = tuple(int(x) for x in fields[4:])
                except ValueError:
                    return ["ERR malformed non-integer field"]
                if not 1 <= port <= 65535:
                    return ["ERR malformed port out of range"]
                if name in self._entries:
                    return ["ERR duplicate"]
                self._entries[name] = RegistryEntry(name, host, port, ids, now)
                return ["OK"]
            if cmd == "PING":
                if len(fields) != 2:
                    return ["ERR malformed PING needs name"]
                entry = self._entries.get(fields[1])
                if entry is None:
                    return ["ERR unknown"]
                self._entries[fields[1]] = replace(entry, last_heartbeat=now)
                return ["OK"]
            if cmd == "LIST":
                out = [
                    f"ENTRY {e.server_name} {e.host} {e.port} "
                    + " ".join(str(i) for i in e.camera_ids)
                    for e in sorted(self._entries.values(), key=lambda e: e.server_name)
                ]
                out.append("END")
                return [line.rstrip() for line in out]
        return [f"ERR malformed unknown command {cmd}"]

    # ---- socket plumbing ----

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen()
        self.port = listener.getsockname()[1]
        self._listener = listener
        t = threading.Thread(target=self._accept_loop, name="registry-accept", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("registry listening on %s:%d", self.host, self.port)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(
                target=self._serve_connection, args=(conn,), daemon=True,
                name=f"registry-conn-{addr[1]}",
            )
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as fh:
            for line in fh:
                for reply in self.handle_line(line.strip()):
                    fh.write(reply + "\n")
                fh.flush()

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()


class RegistryClient:
    """One-shot connections to the registry; each call is a fresh exchange."""

    def __init__(self, endpoint: tuple[str, int], timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _exchange(self, command: str, multiline: bool = False) -> list[str]:
        with socket.create_connection(self.endpoint, timeout=self.timeout) as sock:
            with sock.makefile("rw", encoding="utf-8", newline="\n") as fh:
                fh.write(command + "\n")
                fh.flush()
                if not multiline:
                    reply = fh.readline().strip()
                    if not reply:
                        raise RegistryError("registry closed the connection")
                    return [reply]
                lines = []
                for line in fh:
                    line = line.strip()
                    if line == "END":
                        return lines
                    lines.append(line)
        raise RegistryError("registry reply missing END")

    def register(self, name: str, host: str, port: int, camera_ids) -> None:
        ids = " ".join(str(i) for i in camera_ids)
        reply = self._exchange(f"REGISTER {name} {host} {port} {ids}".strip())[0]
        if reply == "OK":
            return
        if reply == "ERR duplicate":
            raise DuplicateServerNameError(name)
        raise RegistryError(reply)

    def ping(self, name: str) -> bool:
        return self._exchange(f"PING {name}")[0] == "OK"

    def list_entries(self) -> list[RegistryEntry]:
        entries = []
        for line in self._exchange("LIST", multiline=True):
            fields = line.split()
            if len(fields) < 4 or fields[0] != "ENTRY":
                raise RegistryError(f"bad LIST reply line: {line!r}")
            entries.append(
                RegistryEntry(
                    fields[1], fields[2], int(fields[3]),
                    tuple(int(x) for x in fields[4:]),
                )
            )
        return entries


class HeartbeatLoop:
    """Keeps a registration alive; re-registers if the registry forgot us."""

    def __init__(self, client: RegistryClient, name: str, host: str, port: int,
                 camera_ids, interval: float = DEFAULT_TTL / 3.0):
        self.client = client
        self.name = name
        self.host = host
        self.port = port
        self.camera_ids = tuple(camera_ids)
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="heartbeat", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                if not self.client.ping(self.name):
                    self.client.register(self.name, self.host, self.port, self.camera_ids)
            except DuplicateServerNameError:
                log.warning("heartbeat: name %s re-taken, giving up", self.name)
                return
            except OSError as exc:
                log.warning("heartbeat: registry unreachable: %s", exc)
