"""Wire protocol and client for out-of-process skills.

Newline-delimited JSON envelopes over a child process's stdio (default) or a
TCP socket. Strict request/response alternation with monotone message ids;
masks cross the wire as run-length arrays over an explicit grid, so payloads
are bit-exact. Protocol version "aharness-skill/1".
"""

from __future__ import annotations

import json
import select
import socket
import subprocess
from dataclasses import dataclass, field

from .evidence import EvidenceType, payload_from_json, payload_to_json
from .skills import SkillAction, SkillOutput

PROTOCOL_VERSION = "aharness-skill/1"


class ProtocolError(RuntimeError):
    """Framing or schema violation; fails the current call only."""


class SkillFailure(RuntimeError):
    """The remote skill reported an error; budget is still charged."""


class ConnectionLost(ProtocolError):
    """Peer went away; the skill should be deregistered for the batch."""


def encode_request(message_id: int, action: SkillAction, scene_ref: str,
                   instruction: str, seed: int) -> bytes:
    p = action.params
    pp = p.prompt_point
    body = {
        "id": message_id,
        "kind": "invoke",
        "skill": action.skill,
        "scene": scene_ref,
        "instruction": instruction,
        "seed": seed,
        "params": {
            "roi": p.roi.to_list(),
            "scale": p.scale,
            "query": p.query,
            "prompt_point": None if pp is None else [pp.x, pp.y],
            "extras": [[k, v] for k, v in p.extras],
        },
    }
    return (json.dumps(body, sort_keys=True) + "\n").encode("utf-8")


def decode_request(line: bytes) -> dict:
    try:
        body = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed request line: {e}") from e
    if not isinstance(body, dict) or "kind" not in body:
        raise ProtocolError("request missing kind")
    return body


def encode_result(message_id: int, output: SkillOutput) -> bytes:
    items = [{"type": kind.value,
              "payload": payload_to_json(kind, payload),
              "confidence": conf}
             for kind, payload, conf in output.items]
    body = {"id": message_id, "kind": "result", "skill": output.producer,
            "cost": output.cost, "items": items}
    return (json.dumps(body, sort_keys=True) + "\n").encode("utf-8")


def encode_error(message_id, message: str) -> bytes:
    body = {"id": message_id, "kind": "error", "message": message}
    return (json.dumps(body, sort_keys=True) + "\n").encode("utf-8")


def decode_response(line: bytes, expect_id: int) -> SkillOutput:
    """Parse a result line. Raises SkillFailure on error envelopes and
    ProtocolError on anything that breaks the framing contract."""
    try:
        body = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed response line: {e}") from e
    if not isinstance(body, dict):
        raise ProtocolError("response is not an object")
    kind = body.get("kind")
    if kind == "error":
        raise SkillFailure(str(body.get("message", "remote error")))
    if kind != "result":
        raise ProtocolError(f"unexpected envelope kind {kind!r}")
    if body.get("id") != expect_id:
        raise ProtocolError(f"id mismatch: got {body.get('id')}, "
                            f"want {expect_id}")
    out = SkillOutput(producer=body.get("skill", ""), items=[],
                      cost=float(body.get("cost", 1.0)))
    try:
        for item in body["items"]:
            kind = EvidenceType(item["type"])
            payload = payload_from_json(kind, item["payload"])
            out.items.append((kind, payload, float(item["confidence"])))
    except (KeyError, ValueError, TypeError) as e:
        raise ProtocolError(f"malformed result payload: {e}") from e
    return out


@dataclass
class Capabilities:
    version: str
    skills: list = field(default_factory=list)   # {skill, types, cost_hint}

    @classmethod
    def from_body(cls, body: dict) -> "Capabilities":
        skills = body.get("skills", [])
        names = [s.get("skill") for s in skills]
        if len(names) != len(set(names)):
            raise ProtocolError("duplicate skill ids in capabilities")
        return cls(version=body.get("version", ""), skills=skills)


class BridgeConnection:
    """One sequential request/response channel to an external skill server."""

    def __init__(self, reader, writer, proc=None, sock=None):
        self._reader = reader
        self._writer = writer
        self._proc = proc
        self._sock = sock
        self._next_id = 0
        self.capabilities: Capabilities | None = None

    @classmethod
    def spawn(cls, argv: list, timeout: float = 10.0) -> "BridgeConnection":
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE)
        conn = cls(proc.stdout, proc.stdin, proc=proc)
        conn.handshake(timeout)
        return conn

    @classmethod
    def connect_tcp(cls, host: str, port: int,
                    timeout: float = 10.0) -> "BridgeConnection":
        sock = socket.create_connection((host, port), timeout=timeout)
        f = sock.makefile("rwb")
        conn = cls(f, f, sock=sock)
        conn.handshake(timeout)
        return conn

    def _send(self, data: bytes):
        try:
            self._writer.write(data)
            self._writer.flush()
        except (BrokenPipeError, OSError) as e:
            raise ConnectionLost(str(e)) from e

    def _read_line(self, timeout: float | None) -> bytes:
        if timeout is not None:
            if self._sock is not None:
                self._sock.settimeout(timeout)
            else:
                fd = self._reader.fileno()
                ready, _, _ = select.select([fd], [], [], timeout)
                if not ready:
                    raise SkillFailure("timeout waiting for response")
        try:
            line = self._reader.readline()
        except (socket.timeout, TimeoutError) as e:
            raise SkillFailure("timeout waiting for response") from e
        except OSError as e:
            raise ConnectionLost(str(e)) from e
        if not line:
            raise ConnectionLost("end of stream")
        return line

    def handshake(self, timeout: float = 10.0):
        self._next_id += 1
        mid = self._next_id
        self._send((json.dumps({"id": mid, "kind": "hello",
                                "version": PROTOCOL_VERSION}) + "\n").encode())
        body = decode_request(self._read_line(timeout))
        if body.get("kind") != "capabilities":
            raise ProtocolError("expected capabilities after hello")
        if body.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol mismatch: {body.get('version')!r}")
        self.capabilities = Capabilities.from_body(body)

    def invoke(self, action: SkillAction, scene_ref: str, instruction: str,
               seed: int, timeout: float | None = 30.0) -> SkillOutput:
        if self.capabilities is None:
            raise ProtocolError("handshake not completed")
        self._next_id += 1
        mid = self._next_id
        self._send(encode_request(mid, action, scene_ref, instruction, seed))
        while True:
            line = self._read_line(timeout)
            try:
                return decode_response(line, mid)
            except ProtocolError as e:
                # stale response from an earlier failed call: skip it
                try:
                    stale = json.loads(line.decode("utf-8"))
                    if isinstance(stale, dict) and isinstance(stale.get("id"), int) \
                            and stale["id"] < mid:
                        continue
                except (UnicodeDecodeError, json.JSONDecodeError):
                    pass
                raise e

    def close(self):
        try:
            if self._writer is not None:
                self._writer.close()
        except OSError:
            pass
        if self._proc is not None:
            try:
                self._proc.stdin and self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            self._proc.wait(timeout=5)
        if self._sock is not None:
            self._sock.close()


def scene_ref(scene) -> str:
    return str(scene.seed)


def register_bridged_skills(registry, conn: BridgeConnection,
                            timeout: float = 30.0, rename: dict | None = None):
    """Expose every advertised remote skill through the local registry.

    On connection loss the skill deregisters itself for the rest of the
    batch; the failed call surfaces as a skill failure (sentinel evidence).
    """
    names = []
    for cap in conn.capabilities.skills if conn.capabilities else []:
        remote = cap["skill"]
        local = (rename or {}).get(remote, remote)

        def invoker(scene, instruction, params, noise,
                    _remote=remote, _local=local):
            action = SkillAction(_remote, params)
            try:
                return conn.invoke(action, scene_ref(scene), instruction,
                                   noise.seed, timeout)
            except ConnectionLost:
                registry.deregister(_local)
                raise SkillFailure(f"connection lost invoking {_remote}")

        registry.register(local, invoker, cost_hint=float(cap.get("cost_hint", 1.0)),
                          external=True)
        names.append(local)
    return names
