"""Request loop speaking "aharness-skill/1" over stdio or TCP.

One connection is one strict request/response channel. Malformed lines get
an error envelope and the server stays alive; end-of-input shuts it down
cleanly. Nothing but protocol lines ever touches the output stream.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from dataclasses import dataclass, field

from .oracle import HANDLERS, BadParams
from .world import SceneView

PROTOCOL_VERSION = "aharness-skill/1"

CAPABILITIES = [
    {"skill": "detect", "types": ["box"], "cost_hint": 1.0},
    {"skill": "segment", "types": ["mask"], "cost_hint": 1.0},
]

DEFAULT_NOISE = {"difficulty": 1.0, "p_det": 0.8, "p_seg": 0.9,
                 "zoom_relief": 0.6}


@dataclass
class ServerConfig:
    scene_dir: str
    transport: str = "stdio"        # "stdio" or "tcp"
    port: int = 0
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))


class SceneCache:
    def __init__(self, scene_dir: str):
        self._dir = scene_dir
        self._scenes: dict[str, SceneView] = {}

    def get(self, ref: str) -> SceneView:
        if ref not in self._scenes:
            path = os.path.join(self._dir, f"{ref}.json")
            if os.path.basename(ref) != ref or not os.path.isfile(path):
                raise KeyError(ref)
            self._scenes[ref] = SceneView.load(path)
        return self._scenes[ref]


def _envelope(body: dict) -> bytes:
    return (json.dumps(body, sort_keys=True) + "\n").encode("utf-8")


def _error(message_id, message: str) -> bytes:
    return _envelope({"id": message_id, "kind": "error", "message": message})


class Session:
    """Protocol state for one connection: handshake, then invokes."""

    def __init__(self, config: ServerConfig, scenes: SceneCache):
        self._config = config
        self._scenes = scenes
        self._greeted = False

    def handle_line(self, line: bytes) -> bytes:
        try:
            body = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            return _error(None, f"malformed request line: {e}")
        if not isinstance(body, dict):
            return _error(None, "request is not an object")
        mid = body.get("id")
        kind = body.get("kind")
        if kind == "hello":
            if body.get("version") != PROTOCOL_VERSION:
                return _error(mid, f"unsupported protocol {body.get('version')!r}")
            self._greeted = True
            return _envelope({"id": mid, "kind": "capabilities",
                              "version": PROTOCOL_VERSION,
                              "skills": CAPABILITIES})
        if kind != "invoke":
            return _error(mid, f"unknown kind {kind!r}")
        if not self._greeted:
            return _error(mid, "invoke before hello")
        return self._handle_invoke(mid, body)

    def _handle_invoke(self, mid, body: dict) -> bytes:
        skill = body.get("skill")
        if skill not in HANDLERS:
            return _error(mid, f"unsupported skill {skill!r}")
        try:
            scene = self._scenes.get(str(body["scene"]))
        except KeyError:
            return _error(mid, f"unknown scene {body.get('scene')!r}")
        try:
            params = dict(body["params"])
            extras = dict(params.get("extras") or [])
            seed = int(body["seed"])
            step = int(extras.get("step", 1))
            items = HANDLERS[skill](scene, params, self._config.noise,
                                    seed, step)
        except BadParams as e:
            return _error(mid, str(e))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            return _error(mid, f"malformed invoke: {e}")
        return _envelope({"id": mid, "kind": "result", "skill": skill,
                          "cost": 1.0, "items": items})


def _pump(session: Session, reader, writer):
    for line in reader:
        writer.write(session.handle_line(line))
        writer.flush()


def serve(config: ServerConfig):
    scenes = SceneCache(config.scene_dir)
    if config.transport == "stdio":
        _pump(Session(config, scenes),
              sys.stdin.buffer, sys.stdout.buffer)
        return
    if config.transport != "tcp":
        raise ValueError(f"unknown transport {config.transport!r}")
    srv = socket.create_server(("127.0.0.1", config.port))
    # the bound port goes to stderr so a parent can discover an ephemeral one
    print(f"listening on {srv.getsockname()[1]}", file=sys.stderr, flush=True)
    try:
        while True:
            conn, _ = srv.accept()
            with conn, conn.makefile("rwb") as f:
                _pump(Session(config, scenes), f, f)
    except KeyboardInterrupt:
        pass
    finally:
        srv.close()


def main(argv=None):
    ap = argparse.ArgumentParser(
        description="Reference skill server (aharness-skill/1).")
    ap.add_argument("--scene-dir", required=True)
    ap.add_argument("--transport", choices=["stdio", "tcp"], default="stdio")
    ap.add_argument("--port", type=int, default=0)
    for key, default in DEFAULT_NOISE.items():
        ap.add_argument(f"--{key.replace('_', '-')}", type=float,
                        default=default, dest=key)
    args = ap.parse_args(argv)
    noise = {k: getattr(args, k) for k in DEFAULT_NOISE}
    serve(ServerConfig(scene_dir=args.scene_dir, transport=args.transport,
                       port=args.port, noise=noise))


if __name__ == "__main__":
    main()
