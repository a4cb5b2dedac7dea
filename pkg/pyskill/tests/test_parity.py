"""Cross-process conformance: the reference server vs the in-process suite.

These tests import the host runtime, so they need both packages installed.
The contract under test: identical (scene, params, seed) produce byte
identical result envelopes, and a bridged batch run reproduces the
in-process metrics and traces exactly.
"""

import json
import subprocess
import sys

import pytest

from aharness import skillbridge as sb
from aharness import skills as sk
from aharness.geometry import Box, KeyPoint
from aharness.memory import MemoryStore
from aharness.runtime import RunConfig, run_single_batch
from aharness.scenario import build_benchmark, generate_scene
from pyskill.server import SceneCache, ServerConfig, Session

pytestmark = pytest.mark.filterwarnings("ignore::ResourceWarning")


def export_scenes(scenes, dirpath):
    for s in scenes:
        (dirpath / f"{s.seed}.json").write_text(json.dumps(s.to_json()))


def local_registry(names=("zoom", "web_search", "dreamer")):
    reg = sk.SkillRegistry()
    for name in names:
        def invoker(scene, instruction, params, noise, _n=name):
            return sk.invoke(_n, scene, instruction, params, noise)
        reg.register(name, invoker)
    return reg


@pytest.fixture()
def bench(tmp_path):
    b = build_benchmark({"easy": 17, "medium": 17, "hard": 16}, seed=9)
    export_scenes(b.eval_scenes, tmp_path)
    return b


@pytest.fixture()
def conn(tmp_path, bench):
    c = sb.BridgeConnection.spawn(
        [sys.executable, "-m", "pyskill", "--scene-dir", str(tmp_path)])
    yield c
    c.close()


class TestEnvelopeParity:
    def test_byte_identical_results(self, tmp_path):
        """Sweep skills x difficulties x steps x views; compare raw bytes."""
        cfgs = [(101, 0.0), (102, 0.35), (103, 0.7), (104, 0.95)]
        scenes = [generate_scene(seed, d, occlusion=d / 2) for seed, d in cfgs]
        export_scenes(scenes, tmp_path)
        session = Session(ServerConfig(scene_dir=str(tmp_path)),
                          SceneCache(str(tmp_path)))
        hello = {"id": 0, "kind": "hello", "version": sb.PROTOCOL_VERSION}
        session.handle_line((json.dumps(hello) + "\n").encode())

        noise = sk.NoiseModel(seed=77)
        mid = 0
        checked = 0
        for scene in scenes:
            g = scene.grid
            views = [
                (g.full_box(), 1, None),
                (g.full_box(), 1, KeyPoint(g.width / 2, g.height / 2)),
                (Box(0, 0, g.width // 2, g.height // 2), 2,
                 KeyPoint(g.width / 4, g.height / 4)),
                (Box(g.width // 4, g.height // 4,
                     3 * g.width // 4, 3 * g.height // 4), 2, None),
            ]
            for roi, scale, pp in views:
                for step in (1, 2, 3):
                    for skill in ("detect", "segment"):
                        mid += 1
                        params = sk.SkillParams(
                            roi=roi, scale=scale, prompt_point=pp,
                            extras=(("step", float(step)),))
                        out = sk.invoke(skill, scene, scene.instruction,
                                        params, noise)
                        want = sb.encode_result(mid, out)
                        req = sb.encode_request(
                            mid, sk.SkillAction(skill, params),
                            str(scene.seed), scene.instruction, noise.seed)
                        got = session.handle_line(req)
                        assert got == want, (scene.seed, skill, step, scale)
                        checked += 1
        assert checked == 96

    def test_parameter_error_becomes_error_envelope(self, tmp_path):
        scene = generate_scene(101, 0.2, 0.0)
        export_scenes([scene], tmp_path)
        session = Session(ServerConfig(scene_dir=str(tmp_path)),
                          SceneCache(str(tmp_path)))
        hello = {"id": 0, "kind": "hello", "version": sb.PROTOCOL_VERSION}
        session.handle_line((json.dumps(hello) + "\n").encode())
        params = sk.SkillParams(roi=scene.grid.full_box(), scale=2)
        with pytest.raises(sk.ParameterError):
            sk.invoke("segment", scene, "", params, sk.NoiseModel(seed=1))
        req = sb.encode_request(1, sk.SkillAction("segment", params),
                                str(scene.seed), "", 1)
        reply = json.loads(session.handle_line(req))
        assert reply["kind"] == "error"


class TestBatchParity:
    def test_bridged_batch_matches_in_process(self, bench, conn):
        cfg = RunConfig()
        res_local = run_single_batch(bench.eval_scenes, MemoryStore(), cfg,
                                     sk.default_registry())
        reg = local_registry()
        names = sb.register_bridged_skills(reg, conn)
        assert sorted(names) == ["detect", "segment"]
        res_bridge = run_single_batch(bench.eval_scenes, MemoryStore(), cfg,
                                      reg)
        assert res_bridge.metrics.to_json() == res_local.metrics.to_json()
        assert res_bridge.accepted_rate == res_local.accepted_rate
        for a, b in zip(res_local.traces, res_bridge.traces):
            assert a.to_json() == b.to_json()

    def test_malformed_injection_fails_only_affected_calls(
            self, bench, conn, monkeypatch):
        reg = local_registry()
        sb.register_bridged_skills(reg, conn)
        real = sb.encode_request
        state = {"n": 0, "bad": 0}

        def corrupting(mid, action, scene_ref, instruction, seed):
            state["n"] += 1
            if state["n"] % 5 == 0:
                state["bad"] += 1
                return b'{"id": %d, "kind": "inv\n' % mid
            return real(mid, action, scene_ref, instruction, seed)

        monkeypatch.setattr(sb, "encode_request", corrupting)
        res = run_single_batch(bench.eval_scenes, MemoryStore(), RunConfig(),
                               reg)
        assert state["bad"] > 0
        assert len(res.traces) == len(bench.eval_scenes)
        # the server survived: the post-injection calls still succeeded
        assert res.metrics.giou > 0.0


class TestTcpTransport:
    def test_tcp_round_trip(self, tmp_path, bench):
        proc = subprocess.Popen(
            [sys.executable, "-m", "pyskill", "--scene-dir", str(tmp_path),
             "--transport", "tcp", "--port", "0"],
            stderr=subprocess.PIPE)
        try:
            port = int(proc.stderr.readline().split()[-1])
            conn = sb.BridgeConnection.connect_tcp("127.0.0.1", port)
            scene = bench.eval_scenes[0]
            params = sk.SkillParams(roi=scene.grid.full_box(),
                                    extras=(("step", 1.0),))
            out = conn.invoke(sk.SkillAction("detect", params),
                              str(scene.seed), scene.instruction, 5)
            want = sk.invoke("detect", scene, scene.instruction, params,
                             sk.NoiseModel(seed=5))
            assert sb.encode_result(0, out) == sb.encode_result(0, want)
            conn.close()
        finally:
            proc.terminate()
            proc.wait(timeout=5)
