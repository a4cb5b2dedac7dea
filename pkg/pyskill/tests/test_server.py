"""Protocol behavior of the reference server, no host runtime involved."""

import json

import pytest

from pyskill.server import (PROTOCOL_VERSION, SceneCache, ServerConfig,
                            Session)

GRID = 16


def rect_runs(x1, y1, x2, y2, width=GRID):
    return [[y * width + x1, x2 - x1] for y in range(y1, y2)]


def scene_json(difficulty=0.0, distractors=()):
    return {
        "grid": [GRID, GRID],
        "difficulty": difficulty,
        "observed_target": rect_runs(4, 4, 10, 9),
        "distractors": [list(d) for d in distractors],
    }


@pytest.fixture()
def session(tmp_path):
    (tmp_path / "7.json").write_text(json.dumps(scene_json()))
    cfg = ServerConfig(scene_dir=str(tmp_path))
    return Session(cfg, SceneCache(str(tmp_path)))


def send(session, body):
    return json.loads(session.handle_line(
        (json.dumps(body) + "\n").encode()))


def hello(session, mid=1):
    return send(session, {"id": mid, "kind": "hello",
                          "version": PROTOCOL_VERSION})


def invoke_body(mid, skill, *, step=1.0, scene="7", prompt=None):
    return {"id": mid, "kind": "invoke", "skill": skill, "scene": scene,
            "instruction": "", "seed": 11,
            "params": {"roi": [0, 0, GRID, GRID], "scale": 1, "query": "",
                       "prompt_point": prompt,
                       "extras": [["step", step]]}}


class TestHandshake:
    def test_hello_capabilities(self, session):
        reply = hello(session)
        assert reply["kind"] == "capabilities"
        assert reply["version"] == PROTOCOL_VERSION
        assert [s["skill"] for s in reply["skills"]] == ["detect", "segment"]

    def test_invoke_before_hello(self, session):
        reply = send(session, invoke_body(1, "detect"))
        assert reply["kind"] == "error" and "hello" in reply["message"]

    def test_version_mismatch(self, session):
        reply = send(session, {"id": 1, "kind": "hello", "version": "bogus/9"})
        assert reply["kind"] == "error"


class TestInvoke:
    def test_zero_noise_segment_is_ground_truth(self, session):
        hello(session)
        reply = send(session, invoke_body(2, "segment", prompt=[6, 6]))
        assert reply["kind"] == "result" and reply["id"] == 2
        (item,) = reply["items"]
        assert item["confidence"] == 1.0
        assert item["payload"]["mask"]["runs"] == rect_runs(4, 4, 10, 9)

    def test_determinism_modulo_id(self, session):
        hello(session)
        a = send(session, invoke_body(2, "detect"))
        b = send(session, invoke_body(3, "detect"))
        a.pop("id"), b.pop("id")
        assert a == b

    def test_distinct_steps_distinct_draws(self, tmp_path):
        (tmp_path / "8.json").write_text(json.dumps(scene_json(difficulty=0.7)))
        s = Session(ServerConfig(scene_dir=str(tmp_path)),
                    SceneCache(str(tmp_path)))
        hello(s)
        a = send(s, invoke_body(2, "segment", scene="8", prompt=[6, 6]))
        b = send(s, invoke_body(3, "segment", scene="8", step=2.0,
                                prompt=[6, 6]))
        assert a["items"] != b["items"]

    def test_unknown_scene(self, session):
        hello(session)
        reply = send(session, invoke_body(2, "detect", scene="99"))
        assert reply["kind"] == "error" and reply["id"] == 2

    def test_scene_ref_cannot_escape_dir(self, session):
        hello(session)
        reply = send(session, invoke_body(2, "detect", scene="../7"))
        assert reply["kind"] == "error"

    def test_unsupported_skill(self, session):
        hello(session)
        reply = send(session, invoke_body(2, "dreamer"))
        assert reply["kind"] == "error" and "unsupported" in reply["message"]

    def test_bad_scale(self, session):
        hello(session)
        body = invoke_body(2, "detect")
        body["params"]["scale"] = 3
        assert send(session, body)["kind"] == "error"

    def test_oversized_roi_for_scale(self, session):
        hello(session)
        body = invoke_body(2, "segment", prompt=[6, 6])
        body["params"]["scale"] = 2  # full-frame roi cannot be doubled
        assert send(session, body)["kind"] == "error"


class TestResilience:
    def test_malformed_line_keeps_serving(self, session):
        hello(session)
        reply = json.loads(session.handle_line(b'{"id": 2, "kind":\n'))
        assert reply["kind"] == "error"
        ok = send(session, invoke_body(3, "detect"))
        assert ok["kind"] == "result"

    def test_non_object_request(self, session):
        assert json.loads(session.handle_line(b"[1,2]\n"))["kind"] == "error"

    def test_missing_fields(self, session):
        hello(session)
        reply = send(session, {"id": 4, "kind": "invoke", "skill": "detect",
                               "scene": "7"})
        assert reply["kind"] == "error" and reply["id"] == 4
