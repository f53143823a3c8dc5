"""HTTP service for the two-alternative forced choice observer study.

An observer repeatedly sees one original and one reconstructed image side
by side and must pick the original. Placement is randomized per trial from
a seeded stream but balanced within +/-1 per session; no payload or URL
reveals which side is the original before the session report. Responses go
to an append-only JSON-lines log and the report is recomputable from that
log alone.

Endpoints (JSON unless noted):
  POST /session  {"observer": "name"}?   -> {session_id, trial_count}
  GET  /session/{id}/trial/{k}           -> {trial, trial_count, left, right, answered}
  GET  /session/{id}/trial/{k}/image/{side}  -> image/png bytes
  POST /session/{id}/trial/{k}/response  {"choice": "left"|"right"}
  GET  /session/{id}/report              -> {answered, correct, accuracy, trials}
"""

from __future__ import annotations

import csv
import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .tensor import Rng


class StudyConfigError(ValueError):
    pass


@dataclass
class StudyPair:
    original: Path
    reconstructed: Path


def read_pairs_manifest(path) -> list:
    """CSV with header original,reconstructed; paths relative to the manifest."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or [h.strip() for h in rows[0]] != ["original", "reconstructed"]:
        raise StudyConfigError(f"{path}: header must be original,reconstructed")
    base = path.parent
    pairs = []
    for row in rows[1:]:
        if len(row) != 2:
            raise StudyConfigError(f"{path}: malformed row {row!r}")
        pairs.append(StudyPair(original=base / row[0].strip(),
                               reconstructed=base / row[1].strip()))
    return pairs


@dataclass
class Trial:
    index: int
    original_on_left: bool
    choice: str | None = None
    correct: bool | None = None


@dataclass
class StudySession:
    session_id: str
    observer: str = ""
    trials: list = field(default_factory=list)

    @property
    def answered(self) -> int:
        return sum(1 for t in self.trials if t.choice is not None)

    @property
    def correct_count(self) -> int:
        return sum(1 for t in self.trials if t.correct)

    def report(self) -> dict:
        answered = self.answered
        correct = self.correct_count
        return {
            "session_id": self.session_id,
            "observer": self.observer,
            "trial_count": len(self.trials),
            "answered": answered,
            "correct": correct,
            "accuracy": (correct / answered) if answered else 0.0,
            "trials": [{"trial": t.index, "choice": t.choice,
                        "correct": t.correct}
                       for t in self.trials if t.choice is not None],
        }


def balanced_placements(n: int, rng: Rng) -> list:
    """n left/right bits with counts differing by at most one, order shuffled."""
    bits = [True] * (n // 2) + [False] * (n - n // 2)
    order = rng.permutation(n)
    return [bits[i] for i in order]


def report_from_log(log_path, session_id: str) -> dict:
    """Recompute a session report purely from the response log."""
    answered = 0
    correct = 0
    with open(log_path) as f:
        for line in f:
            rec = json.loads(line)
            if rec["session"] == session_id:
                answered += 1
                correct += int(rec["correct"])
    return {"answered": answered, "correct": correct,
            "accuracy": (correct / answered) if answered else 0.0}


class _Registry:
    """Session store plus the serialized response log."""

    def __init__(self, pairs, results_path, seed):
        self.pairs = pairs
        self.results_path = Path(results_path) if results_path else None
        self.rng = Rng(seed)
        self.sessions = {}
        self.counter = 0
        self.lock = threading.Lock()

    def create_session(self, observer: str = "") -> StudySession:
        with self.lock:
            self.counter += 1
            sid = f"s{self.counter:04d}"
            placements = balanced_placements(len(self.pairs),
                                             self.rng.child(self.counter))
            session = StudySession(session_id=sid, observer=observer, trials=[
                Trial(index=i, original_on_left=p)
                for i, p in enumerate(placements)])
            self.sessions[sid] = session
            return session

    def record(self, session: StudySession, trial: Trial, choice: str) -> bool:
        """Apply a response; False if the trial was already answered."""
        with self.lock:
            if trial.choice is not None:
                return False
            trial.choice = choice
            chose_left = choice == "left"
            trial.correct = chose_left == trial.original_on_left
            if self.results_path:
                rec = {"session": session.session_id,
                       "observer": session.observer, "trial": trial.index,
                       "shown_left": ("original" if trial.original_on_left
                                      else "reconstructed"),
                       "choice": choice, "correct": trial.correct,
                       "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
                with open(self.results_path, "a") as f:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
            return True


_TRIAL_RE = re.compile(r"^/session/([^/]+)/trial/(\d+)$")
_IMAGE_RE = re.compile(r"^/session/([^/]+)/trial/(\d+)/image/(left|right)$")
_RESPONSE_RE = re.compile(r"^/session/([^/]+)/trial/(\d+)/response$")
_REPORT_RE = re.compile(r"^/session/([^/]+)/report$")

_STATIC_TYPES = {".html": "text/html", ".js": "text/javascript",
                 ".css": "text/css", ".map": "application/json"}


class _Handler(BaseHTTPRequestHandler):
    registry: _Registry = None
    ui_dir: Path | None = None

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _json(self, status: int, payload: dict):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str):
        self._json(status, {"error": message})

    def _session_trial(self, sid: str, k: int):
        session = self.registry.sessions.get(sid)
        if session is None:
            self._error(404, f"unknown session {sid}")
            return None, None
        if k >= len(session.trials):
            self._error(404, f"session {sid} has no trial {k}")
            return None, None
        return session, session.trials[k]

    def do_POST(self):
        if self.path == "/session":
            length = int(self.headers.get("Content-Length", 0))
            observer = ""
            if length:
                try:
                    body = json.loads(self.rfile.read(length))
                    observer = str(body.get("observer", ""))
                except json.JSONDecodeError:
                    self._error(400, "body must be JSON")
                    return
            session = self.registry.create_session(observer)
            self._json(200, {"session_id": session.session_id,
                             "trial_count": len(session.trials)})
            return
        m = _RESPONSE_RE.match(self.path)
        if m:
            session, trial = self._session_trial(m.group(1), int(m.group(2)))
            if session is None:
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._error(400, "body must be JSON")
                return
            choice = body.get("choice")
            if choice not in ("left", "right"):
                self._error(400, "choice must be 'left' or 'right'")
                return
            if not self.registry.record(session, trial, choice):
                self._error(409, f"trial {trial.index} already answered")
                return
            nxt = trial.index + 1
            self._json(200, {"accepted": True,
                             "next": nxt if nxt < len(session.trials) else None})
            return
        self._error(404, "no such endpoint")

    def do_GET(self):
        m = _TRIAL_RE.match(self.path)
        if m:
            session, trial = self._session_trial(m.group(1), int(m.group(2)))
            if session is None:
                return
            base = f"/session/{session.session_id}/trial/{trial.index}/image"
            self._json(200, {"trial": trial.index,
                             "trial_count": len(session.trials),
                             "left": f"{base}/left", "right": f"{base}/right",
                             "answered": trial.choice is not None})
            return
        m = _IMAGE_RE.match(self.path)
        if m:
            session, trial = self._session_trial(m.group(1), int(m.group(2)))
            if session is None:
                return
            pair = self.registry.pairs[trial.index]
            left_is_original = trial.original_on_left
            want_original = (m.group(3) == "left") == left_is_original
            path = pair.original if want_original else pair.reconstructed
            try:
                data = Path(path).read_bytes()
            except OSError:
                self._error(404, "image unavailable")
                return
            self.send_response(200)
            self.send_header("Content-Type", "image/png")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        m = _REPORT_RE.match(self.path)
        if m:
            session = self.registry.sessions.get(m.group(1))
            if session is None:
                self._error(404, f"unknown session {m.group(1)}")
                return
            self._json(200, session.report())
            return
        if self.ui_dir is not None:
            rel = "index.html" if self.path in ("/", "") else self.path.lstrip("/")
            target = (self.ui_dir / rel).resolve()
            if self.ui_dir.resolve() in target.parents and target.is_file():
                data = target.read_bytes()
                self.send_response(200)
                self.send_header("Content-Type", _STATIC_TYPES.get(
                    target.suffix, "application/octet-stream"))
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)
                return
        self._error(404, "no such endpoint")


class StudyServer:
    """Threaded study service; start() binds, stop() shuts it down."""

    def __init__(self, pairs: list, results_path=None, seed: int = 0,
                 host: str = "127.0.0.1", port: int = 0, ui_dir=None):
        registry = _Registry(pairs, results_path, seed)
        handler = type("BoundHandler", (_Handler,), {
            "registry": registry,
            "ui_dir": Path(ui_dir) if ui_dir else None,
        })
        self.registry = registry
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
