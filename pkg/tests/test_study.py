import json
import urllib.error
import urllib.request

import numpy as np
import pytest
from PIL import Image

from cxinpaint.study import (StudyConfigError, StudyPair, StudyServer,
                             balanced_placements, read_pairs_manifest,
                             report_from_log)
from cxinpaint.tensor import Rng


def http(method, url, body=None):
    req = urllib.request.Request(url, method=method)
    data = None
    if body is not None:
        data = json.dumps(body).encode()
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, data=data) as resp:
            raw = resp.read()
            ctype = resp.headers.get("Content-Type", "")
            return resp.status, json.loads(raw) if "json" in ctype else raw
    except urllib.error.HTTPError as e:
        raw = e.read()
        try:
            return e.code, json.loads(raw)
        except json.JSONDecodeError:
            return e.code, raw


@pytest.fixture
def study(tmp_path):
    rng = np.random.default_rng(0)
    pairs = []
    for k in range(10):
        orig = tmp_path / f"orig_{k}.png"
        recon = tmp_path / f"recon_{k}.png"
        Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8),
                        mode="L").save(orig, format="PNG")
        Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8),
                        mode="L").save(recon, format="PNG")
        pairs.append(StudyPair(original=orig, reconstructed=recon))
    log = tmp_path / "responses.jsonl"
    server = StudyServer(pairs, results_path=log, seed=7)
    server.start()
    yield server, f"http://127.0.0.1:{server.port}", log
    server.stop()


def test_session_lifecycle_and_report(study):
    server, base, log = study
    status, created = http("POST", f"{base}/session")
    assert status == 200 and created["trial_count"] == 10
    sid = created["session_id"]

    # answer by fixed rule: always choose left
    for k in range(10):
        status, trial = http("GET", f"{base}/session/{sid}/trial/{k}")
        assert status == 200
        assert trial["left"].endswith(f"/trial/{k}/image/left")
        assert not trial["answered"]
        status, _ = http("POST", f"{base}/session/{sid}/trial/{k}/response",
                         {"choice": "left"})
        assert status == 200

    status, report = http("GET", f"{base}/session/{sid}/report")
    assert status == 200
    assert report["answered"] == 10
    # always-left scores exactly the number of trials with the original on
    # the left; placement is balanced so that is 5 of 10
    assert report["correct"] == 5
    assert report["accuracy"] == 0.5
    # report is a pure function of the append-only log
    assert report_from_log(log, sid)["accuracy"] == report["accuracy"]


def test_known_rule_accuracy(study):
    server, base, log = study
    _, created = http("POST", f"{base}/session")
    sid = created["session_id"]
    session = server.registry.sessions[sid]
    # simulated observer: answers correctly on the first 6 trials and
    # incorrectly on the remaining 4 -> accuracy 0.6
    for k, trial in enumerate(session.trials):
        right_answer = "left" if trial.original_on_left else "right"
        wrong_answer = "right" if trial.original_on_left else "left"
        choice = right_answer if k < 6 else wrong_answer
        status, _ = http("POST", f"{base}/session/{sid}/trial/{k}/response",
                         {"choice": choice})
        assert status == 200
    _, report = http("GET", f"{base}/session/{sid}/report")
    assert report["correct"] == 6 and report["accuracy"] == 0.6


def test_double_answer_rejected_and_log_unchanged(study):
    server, base, log = study
    _, created = http("POST", f"{base}/session")
    sid = created["session_id"]
    status, _ = http("POST", f"{base}/session/{sid}/trial/3/response",
                     {"choice": "left"})
    assert status == 200
    log_before = log.read_text()
    status, err = http("POST", f"{base}/session/{sid}/trial/3/response",
                       {"choice": "right"})
    assert status == 409
    assert log.read_text() == log_before


def test_error_statuses(study):
    server, base, log = study
    assert http("GET", f"{base}/session/nope/trial/0")[0] == 404
    _, created = http("POST", f"{base}/session")
    sid = created["session_id"]
    assert http("GET", f"{base}/session/{sid}/trial/99")[0] == 404
    assert http("POST", f"{base}/session/{sid}/trial/0/response",
                {"choice": "up"})[0] == 400
    req = urllib.request.Request(
        f"{base}/session/{sid}/trial/0/response", method="POST",
        data=b"not json")
    try:
        urllib.request.urlopen(req)
        raise AssertionError("expected 400")
    except urllib.error.HTTPError as e:
        assert e.code == 400


def test_no_identity_leak_before_report(study):
    server, base, log = study
    _, created = http("POST", f"{base}/session")
    sid = created["session_id"]
    for k in range(3):
        status, trial = http("GET", f"{base}/session/{sid}/trial/{k}")
        payload = json.dumps(trial)
        assert "orig" not in payload and "recon" not in payload
        assert ".png" not in payload
        status, img = http("GET", f"{base}/session/{sid}/trial/{k}/image/left")
        assert status == 200 and img[:8] == b"\x89PNG\r\n\x1a\n"


def test_images_follow_placement(study):
    server, base, log = study
    _, created = http("POST", f"{base}/session")
    sid = created["session_id"]
    session = server.registry.sessions[sid]
    for k, trial in enumerate(session.trials):
        _, left = http("GET", f"{base}/session/{sid}/trial/{k}/image/left")
        _, right = http("GET", f"{base}/session/{sid}/trial/{k}/image/right")
        pair = server.registry.pairs[k]
        orig_bytes = pair.original.read_bytes()
        if trial.original_on_left:
            assert left == orig_bytes and right != orig_bytes
        else:
            assert right == orig_bytes and left != orig_bytes


def test_balanced_placements_property():
    for n in (1, 2, 9, 10, 33):
        bits = balanced_placements(n, Rng(5))
        lefts = sum(bits)
        assert abs(lefts - (n - lefts)) <= 1
    assert balanced_placements(10, Rng(5)) == balanced_placements(10, Rng(5))


def test_sessions_have_distinct_placements(study):
    server, base, log = study
    _, c1 = http("POST", f"{base}/session")
    _, c2 = http("POST", f"{base}/session")
    s1 = server.registry.sessions[c1["session_id"]]
    s2 = server.registry.sessions[c2["session_id"]]
    p1 = [t.original_on_left for t in s1.trials]
    p2 = [t.original_on_left for t in s2.trials]
    assert p1 != p2  # independent child streams (10 trials, 2^10 layouts)


def test_observer_name_recorded(study):
    server, base, log = study
    status, created = http("POST", f"{base}/session", {"observer": "dr-a"})
    assert status == 200
    sid = created["session_id"]
    http("POST", f"{base}/session/{sid}/trial/0/response", {"choice": "left"})
    _, report = http("GET", f"{base}/session/{sid}/report")
    assert report["observer"] == "dr-a"
    last = json.loads(log.read_text().splitlines()[-1])
    assert last["observer"] == "dr-a" and last["session"] == sid


def test_pairs_manifest(tmp_path):
    m = tmp_path / "pairs.csv"
    m.write_text("original,reconstructed\na.png,b.png\n")
    pairs = read_pairs_manifest(m)
    assert pairs[0].original == tmp_path / "a.png"
    m.write_text("left,right\n")
    with pytest.raises(StudyConfigError):
        read_pairs_manifest(m)
