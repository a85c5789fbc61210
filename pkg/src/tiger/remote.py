"""Client side of the newline-delimited JSON scorer protocol.

Requests carry a ``u64`` id that the server echoes back; replies may arrive
in any order, so the client matches them by id.  One connection carries at
most one in-flight request; callers wanting parallelism open several
connections.
"""

from __future__ import annotations

import json
import os
import selectors
import shlex
import socket
import subprocess
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import (
    HandshakeError,
    ProtocolError,
    ScorerTimeoutError,
    TokenOutOfRangeError,
    TransportError,
    UnsupportedError,
)
from .scorer import Context, Scorer, ScorerInfo, toy_scorer_from_table

DEFAULT_TIMEOUT = 30.0


class _StdioTransport:
    """Line transport over a child process's stdin/stdout."""

    def __init__(self, command: str) -> None:
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
            )
        except OSError as exc:
            raise TransportError(f"cannot spawn scorer process {command!r}: {exc}") from exc
        self._buffer = b""
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._proc.stdout, selectors.EVENT_READ)

    def send_line(self, line: str) -> None:
        if self._proc.poll() is not None:
            raise TransportError("scorer process exited")
        try:
            self._proc.stdin.write(line.encode("utf-8") + b"\n")
            self._proc.stdin.flush()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise TransportError(f"write to scorer process failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        while True:
            newline = self._buffer.find(b"\n")
            if newline >= 0:
                line = self._buffer[:newline]
                self._buffer = self._buffer[newline + 1 :]
                return line.decode("utf-8")
            if not self._selector.select(timeout):
                raise ScorerTimeoutError(f"no reply within {timeout}s")
            chunk = os.read(self._proc.stdout.fileno(), 65536)
            if not chunk:
                raise TransportError("scorer process closed its output")
            self._buffer += chunk

    def close(self) -> None:
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=5)
        except Exception:
            self._proc.kill()
        finally:
            self._selector.close()


class _TcpTransport:
    """Line transport over a TCP socket."""

    def __init__(self, host: str, port: int, timeout: float) -> None:
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._buffer = b""

    def send_line(self, line: str) -> None:
        try:
            self._sock.sendall(line.encode("utf-8") + b"\n")
        except OSError as exc:
            raise TransportError(f"socket write failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        self._sock.settimeout(timeout)
        while True:
            newline = self._buffer.find(b"\n")
            if newline >= 0:
                line = self._buffer[:newline]
                self._buffer = self._buffer[newline + 1 :]
                return line.decode("utf-8")
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout as exc:
                raise ScorerTimeoutError(f"no reply within {timeout}s") from exc
            except OSError as exc:
                raise TransportError(f"socket read failed: {exc}") from exc
            if not chunk:
                raise TransportError("server closed the connection")
            self._buffer += chunk

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


_ERROR_MAP = {
    "token_out_of_range": TokenOutOfRangeError,
    "unsupported": UnsupportedError,
}


class ExternalScorer(Scorer):
    """Scorer proxied over the wire protocol."""

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._transport = transport
        self._timeout = timeout
        self._next_id = 0
        try:
            reply = self._request({"op": "info"})
        except TransportError as exc:
            raise HandshakeError(f"info handshake failed: {exc}") from exc
        try:
            self._info = ScorerInfo(
                vocab_size=int(reply["vocab_size"]),
                image_start=int(reply["image_start"]),
                image_end=int(reply["image_end"]),
                visual_range=(int(reply["visual_lo"]), int(reply["visual_hi"])),
                supports_tokenize=bool(reply["supports_tokenize"]),
                name=str(reply["name"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise HandshakeError(f"malformed info reply: {reply!r}") from exc

    def _request(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        request_id = self._next_id
        self._next_id += 1
        payload = {"id": request_id, **payload}
        self._transport.send_line(json.dumps(payload))
        raw = self._transport.recv_line(self._timeout)
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable reply: {raw[:200]!r}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError(f"reply is not an object: {raw[:200]!r}")
        if reply.get("id") != request_id:
            raise ProtocolError(f"reply id {reply.get('id')!r} does not match request {request_id}")
        if "error" in reply:
            code = reply["error"]
            message = reply.get("message", "")
            raise _ERROR_MAP.get(code, ProtocolError)(f"server error {code}: {message}")
        return reply

    def info(self) -> ScorerInfo:
        return self._info

    def next_logprobs(self, contexts: Sequence[Context]) -> List[np.ndarray]:
        if len(contexts) == 0:
            raise ValueError("batch must be non-empty")
        reply = self._request({"op": "logprobs", "contexts": [list(c) for c in contexts]})
        rows = reply.get("logprobs")
        if not isinstance(rows, list) or len(rows) != len(contexts):
            raise ProtocolError("logprobs reply has wrong batch size")
        out: List[np.ndarray] = []
        for row in rows:
            vec = np.asarray(row, dtype=np.float64)
            if vec.shape != (self._info.vocab_size,):
                raise ProtocolError(
                    f"logprob vector has length {vec.shape}, expected {self._info.vocab_size}"
                )
            vec.flags.writeable = False
            out.append(vec)
        return out

    def tokenize(self, text: str) -> List[int]:
        if not self._info.supports_tokenize:
            raise UnsupportedError(f"scorer {self._info.name!r} has no tokenizer")
        reply = self._request({"op": "tokenize", "text": text})
        tokens = reply.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ProtocolError(f"malformed tokenize reply: {reply!r}")
        return tokens

    def close(self) -> None:
        self._transport.close()


def connect_external(spec: str, timeout: float = DEFAULT_TIMEOUT) -> ExternalScorer:
    """Connect to a scorer server: ``stdio:<command>`` or ``tcp:<host:port>``."""
    kind, _, rest = spec.partition(":")
    if kind == "stdio":
        return ExternalScorer(_StdioTransport(rest), timeout=timeout)
    if kind == "tcp":
        host, _, port_text = rest.rpartition(":")
        if not host:
            raise TransportError(f"tcp spec needs host:port, got {rest!r}")
        try:
            port = int(port_text)
        except ValueError:
            raise TransportError(f"bad tcp port {port_text!r}") from None
        return ExternalScorer(_TcpTransport(host, port, timeout), timeout=timeout)
    raise TransportError(f"unknown transport {kind!r} (expected stdio: or tcp:)")


def open_scorer(spec: Optional[str], timeout: float = DEFAULT_TIMEOUT) -> Scorer:
    """Resolve a scorer spec: ``toy:<table>`` | ``stdio:<command>`` | ``tcp:<host:port>``.

    Falls back to the ``TIGER_SCORER`` environment variable when ``spec``
    is None.
    """
    if spec is None:
        spec = os.environ.get("TIGER_SCORER")
    if not spec:
        raise TransportError("no scorer specified (flag or TIGER_SCORER)")
    if spec.startswith("toy:"):
        return toy_scorer_from_table(spec[len("toy:") :])
    return connect_external(spec, timeout=timeout)
