"""HTTP service for the human-evaluation procedures.

Three session modes:

  * ``likert``     - rate how well a paraphrase preserves a caption, 1-5;
  * ``preference`` - pick which of two captions (draft vs corrected, identity
                     hidden and sides randomized per item) fits the audio;
  * ``triage``     - judge whether a retrieved audio matches a query.

State is an append-only newline-delimited JSON event log per session,
fsynced before a response is acknowledged and replayed on startup, so a
killed service never loses an accepted response. Media files are served with
byte-range support; a static UI directory can be mounted at the root.

API surface (JSON bodies, errors as {"code", "message"}):

  POST /api/sessions                      {mode, items, seed} -> {session_id}
  GET  /api/sessions/{id}/next            -> {done} | {item, progress}
  POST /api/sessions/{id}/responses       {item_id, payload} -> {accepted, summary}
  GET  /api/sessions/{id}/summary         -> StudySummary
  GET  /media/{path}                      (Range supported)
  GET  /                                  static UI, when configured
"""

from __future__ import annotations

import json
import mimetypes
import os
import re
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateResponse,
    OutOfRange,
    ParaclapError,
    UnknownItem,
    UnknownSession,
    ValidationError,
)

MODES = ("likert", "preference", "triage")

_TEXT_KEYS = {
    "likert": ("original", "paraphrase"),
    "preference": ("draft", "corrected"),
    "triage": ("query", "retrieved_description"),
}

LIKERT_GUIDELINES = {
    1: "Completely different meanings with no semantic overlap.",
    2: "Shares some similar words but conveys a different overall meaning.",
    3: "Common topic but differs in details or emphasis.",
    4: "Largely similar meanings with minor variation in detail.",
    5: "The core information being conveyed is same.",
}


@dataclass
class AnnotationItem:
    item_id: str
    audio_url: str
    texts: dict
    # preference only: which presented side holds the corrected caption
    corrected_side: str | None = None

    def presented_texts(self, mode: str) -> dict:
        """What the annotator may see; never leaks the hidden identity."""
        if mode != "preference":
            return dict(self.texts)
        if self.corrected_side == "a":
            return {"a": self.texts["corrected"], "b": self.texts["draft"]}
        return {"a": self.texts["draft"], "b": self.texts["corrected"]}


@dataclass
class AnnotationSession:
    session_id: str
    mode: str
    items: list  # order fixed at creation (seeded shuffle)
    seed: int
    created_at: str
    responses: dict = field(default_factory=dict)  # item_id -> payload

    @property
    def done(self) -> bool:
        return len(self.responses) == len(self.items)

    def next_unanswered(self):
        for index, item in enumerate(self.items):
            if item.item_id not in self.responses:
                return index, item
        return None, None


def _validate_payload(mode: str, payload):
    if mode == "likert":
        if isinstance(payload, bool) or not isinstance(payload, int) or not 1 <= payload <= 5:
            raise OutOfRange(f"likert rating must be an integer in [1, 5], got {payload!r}")
    elif mode == "preference":
        if payload not in ("a", "b"):
            raise OutOfRange(f"preference payload must be 'a' or 'b', got {payload!r}")
    elif mode == "triage":
        if payload not in ("correct", "incorrect"):
            raise OutOfRange(
                f"triage payload must be 'correct' or 'incorrect', got {payload!r}"
            )
    else:
        raise ValidationError(f"unknown mode {mode!r}")


def _validate_items(mode: str, items) -> list[dict]:
    if not isinstance(items, list) or not items:
        raise ValidationError("items must be a non-empty list")
    keys = _TEXT_KEYS[mode]
    seen = set()
    out = []
    for i, raw in enumerate(items):
        if not isinstance(raw, dict):
            raise ValidationError(f"item {i} is not an object")
        if not isinstance(raw.get("item_id"), str) or not raw["item_id"]:
            raise ValidationError(f"item {i} needs a string item_id")
        if raw["item_id"] in seen:
            raise ValidationError(f"duplicate item_id {raw['item_id']!r}")
        seen.add(raw["item_id"])
        if not isinstance(raw.get("audio_url"), str):
            raise ValidationError(f"item {i} needs an audio_url")
        texts = raw.get("texts")
        if not isinstance(texts, dict) or set(texts) != set(keys):
            raise ValidationError(f"item {i} texts must have exactly keys {sorted(keys)}")
        if not all(isinstance(texts[k], str) for k in keys):
            raise ValidationError(f"item {i} texts must be strings")
        out.append({"item_id": raw["item_id"], "audio_url": raw["audio_url"], "texts": texts})
    return out


@dataclass
class StudySummary:
    mode: str
    n_items: int
    n_answered: int
    likert_mean: float | None = None
    likert_histogram: dict | None = None
    preference_rate: float | None = None
    correct_rate: float | None = None

    def to_dict(self) -> dict:
        doc = {"mode": self.mode, "n_items": self.n_items, "n_answered": self.n_answered}
        if self.mode == "likert":
            doc["likert_mean"] = self.likert_mean
            doc["likert_histogram"] = self.likert_histogram
        elif self.mode == "preference":
            doc["preference_rate"] = self.preference_rate
        elif self.mode == "triage":
            doc["correct_rate"] = self.correct_rate
        return doc


def summarize(session: AnnotationSession) -> StudySummary:
    """Pure function of the stored responses."""
    summary = StudySummary(
        mode=session.mode, n_items=len(session.items), n_answered=len(session.responses)
    )
    if not session.responses:
        return summary
    if session.mode == "likert":
        values = list(session.responses.values())
        summary.likert_mean = sum(values) / len(values)
        summary.likert_histogram = {
            str(score): sum(1 for v in values if v == score) for score in range(1, 6)
        }
        summary.likert_histogram = {
            k: v for k, v in summary.likert_histogram.items() if v > 0
        }
    elif session.mode == "preference":
        by_id = {item.item_id: item for item in session.items}
        chose_corrected = [
            1 if by_id[item_id].corrected_side == side else 0
            for item_id, side in session.responses.items()
        ]
        summary.preference_rate = sum(chose_corrected) / len(chose_corrected)
    elif session.mode == "triage":
        values = list(session.responses.values())
        summary.correct_rate = sum(1 for v in values if v == "correct") / len(values)
    return summary


class SessionStore:
    """Sessions persisted as per-session append-only event logs."""

    def __init__(self, store_dir):
        self.store_dir = Path(store_dir)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, AnnotationSession] = {}
        self._files: dict[str, object] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global_lock = threading.Lock()
        self._replay()

    # -- persistence --

    def _log_path(self, session_id: str) -> Path:
        return self.store_dir / f"{session_id}.events.jsonl"

    def _replay(self) -> None:
        for path in sorted(self.store_dir.glob("*.events.jsonl")):
            session = None
            lines = path.read_text(encoding="utf-8").splitlines()
            for i, line in enumerate(lines):
                if not line.strip():
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError:
                    if i == len(lines) - 1:
                        break  # torn trailing write from a crash
                    raise
                if event["event"] == "created":
                    session = AnnotationSession(
                        session_id=event["session_id"],
                        mode=event["mode"],
                        items=[
                            AnnotationItem(
                                item_id=it["item_id"],
                                audio_url=it["audio_url"],
                                texts=it["texts"],
                                corrected_side=it.get("corrected_side"),
                            )
                            for it in event["items"]
                        ],
                        seed=event["seed"],
                        created_at=event["created_at"],
                    )
                elif event["event"] == "response" and session is not None:
                    session.responses[event["item_id"]] = event["payload"]
            if session is not None:
                self._sessions[session.session_id] = session
                self._locks[session.session_id] = threading.Lock()

    def _append(self, session_id: str, event: dict) -> None:
        f = self._files.get(session_id)
        if f is None:
            f = open(self._log_path(session_id), "a", encoding="utf-8")
            self._files[session_id] = f
        f.write(json.dumps(event, ensure_ascii=False, sort_keys=True) + "\n")
        f.flush()
        os.fsync(f.fileno())

    def close(self) -> None:
        for f in self._files.values():
            f.close()
        self._files.clear()

    # -- operations --

    def create_session(self, mode: str, items, seed: int) -> str:
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValidationError("seed must be an integer")
        clean = _validate_items(mode, items)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(clean))
        shuffled = []
        for i in order:
            raw = clean[int(i)]
            side = None
            if mode == "preference":
                side = "a" if rng.random() < 0.5 else "b"
            shuffled.append(
                AnnotationItem(
                    item_id=raw["item_id"],
                    audio_url=raw["audio_url"],
                    texts=raw["texts"],
                    corrected_side=side,
                )
            )
        session_id = uuid.uuid4().hex
        import datetime

        session = AnnotationSession(
            session_id=session_id,
            mode=mode,
            items=shuffled,
            seed=seed,
            created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        )
        with self._global_lock:
            self._sessions[session_id] = session
            self._locks[session_id] = threading.Lock()
        self._append(
            session_id,
            {
                "event": "created",
                "session_id": session_id,
                "mode": mode,
                "seed": seed,
                "created_at": session.created_at,
                "items": [
                    {
                        "item_id": it.item_id,
                        "audio_url": it.audio_url,
                        "texts": it.texts,
                        "corrected_side": it.corrected_side,
                    }
                    for it in shuffled
                ],
            },
        )
        return session_id

    def _get(self, session_id: str) -> AnnotationSession:
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(session_id)
        return session

    def next_item(self, session_id: str) -> dict:
        session = self._get(session_id)
        with self._locks[session_id]:
            index, item = session.next_unanswered()
            if item is None:
                return {"done": True, "mode": session.mode, "total": len(session.items)}
            return {
                "done": False,
                "mode": session.mode,
                "item": {
                    "item_id": item.item_id,
                    "audio_url": item.audio_url,
                    "texts": item.presented_texts(session.mode),
                },
                "index": index,
                "answered": len(session.responses),
                "total": len(session.items),
            }

    def submit_response(self, session_id: str, item_id, payload) -> StudySummary:
        session = self._get(session_id)
        with self._locks[session_id]:
            if not isinstance(item_id, str) or all(
                item.item_id != item_id for item in session.items
            ):
                raise UnknownItem(str(item_id))
            if item_id in session.responses:
                raise DuplicateResponse(item_id)
            _validate_payload(session.mode, payload)
            # persist before acknowledging; a crash after fsync keeps the vote
            self._append(
                session_id, {"event": "response", "item_id": item_id, "payload": payload}
            )
            session.responses[item_id] = payload
            return summarize(session)

    def summary(self, session_id: str) -> StudySummary:
        session = self._get(session_id)
        with self._locks[session_id]:
            return summarize(session)


# --- HTTP layer -------------------------------------------------------------------


_ERROR_STATUS = {
    "ValidationError": 400,
    "UnknownSession": 404,
    "UnknownItem": 404,
    "DuplicateResponse": 409,
    "OutOfRange": 422,
}

_SESSION_ROUTE = re.compile(r"^/api/sessions/([0-9a-f]+)/(next|summary|responses)$")


def _error_code(exc: ParaclapError) -> str:
    name = type(exc).__name__
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "paraclap-annotate"

    # injected by make_server
    store: SessionStore = None
    media_dir: Path | None = None
    ui_dir: Path | None = None

    def log_message(self, fmt, *args):  # quiet by default; tests spam requests
        pass

    # -- plumbing --

    def _send_json(self, status: int, doc: dict) -> None:
        body = json.dumps(doc, ensure_ascii=False, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, exc: ParaclapError) -> None:
        status = _ERROR_STATUS.get(type(exc).__name__, 400)
        self._send_json(status, {"code": _error_code(exc), "message": str(exc)})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length <= 0:
            raise ValidationError("request body required")
        try:
            return json.loads(self.rfile.read(length).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"body is not valid JSON: {exc}") from exc

    # -- routes --

    def do_POST(self):
        try:
            if self.path == "/api/sessions":
                body = self._read_body()
                if not isinstance(body, dict):
                    raise ValidationError("body must be an object")
                session_id = self.store.create_session(
                    mode=body.get("mode"),
                    items=body.get("items"),
                    seed=body.get("seed", 0),
                )
                self._send_json(200, {"session_id": session_id})
                return
            m = _SESSION_ROUTE.match(self.path)
            if m and m.group(2) == "responses":
                body = self._read_body()
                summary = self.store.submit_response(
                    m.group(1), body.get("item_id"), body.get("payload")
                )
                self._send_json(200, {"accepted": True, "summary": summary.to_dict()})
                return
            self._send_json(404, {"code": "not_found", "message": f"no route {self.path}"})
        except ParaclapError as exc:
            self._send_error_json(exc)

    def do_GET(self):
        try:
            m = _SESSION_ROUTE.match(self.path)
            if m and m.group(2) == "next":
                self._send_json(200, self.store.next_item(m.group(1)))
                return
            if m and m.group(2) == "summary":
                self._send_json(200, self.store.summary(m.group(1)).to_dict())
                return
            if self.path.startswith("/media/"):
                self._serve_media(self.path[len("/media/") :])
                return
            if self.path == "/api/likert-guidelines":
                self._send_json(200, {str(k): v for k, v in LIKERT_GUIDELINES.items()})
                return
            self._serve_static()
        except ParaclapError as exc:
            self._send_error_json(exc)

    # -- media with range support --

    def _resolve_under(self, root: Path, rel: str) -> Path | None:
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve()) + os.sep) and target != root.resolve():
            return None
        return target if target.is_file() else None

    def _serve_media(self, rel: str) -> None:
        if self.media_dir is None:
            self._send_json(404, {"code": "not_found", "message": "no media directory configured"})
            return
        target = self._resolve_under(self.media_dir, rel)
        if target is None:
            self._send_json(404, {"code": "not_found", "message": f"no media file {rel!r}"})
            return
        size = target.stat().st_size
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        range_header = self.headers.get("Range")
        start, end = 0, size - 1
        status = 200
        if range_header:
            m = re.match(r"bytes=(\d*)-(\d*)$", range_header.strip())
            if not m or (not m.group(1) and not m.group(2)):
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{size}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            if m.group(1):
                start = int(m.group(1))
                end = int(m.group(2)) if m.group(2) else size - 1
            else:
                # suffix range: last N bytes
                start = max(0, size - int(m.group(2)))
            end = min(end, size - 1)
            if start > end or start >= size:
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{size}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            status = 206
        with open(target, "rb") as f:
            f.seek(start)
            chunk = f.read(end - start + 1)
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Accept-Ranges", "bytes")
        if status == 206:
            self.send_header("Content-Range", f"bytes {start}-{end}/{size}")
        self.send_header("Content-Length", str(len(chunk)))
        self.end_headers()
        self.wfile.write(chunk)

    # -- static UI --

    def _serve_static(self) -> None:
        rel = self.path.lstrip("/") or "index.html"
        rel = rel.split("?", 1)[0]
        target = self._resolve_under(self.ui_dir, rel) if self.ui_dir else None
        if target is None:
            if self.path in ("/", "/index.html"):
                body = (
                    b"<!doctype html><title>annotation service</title>"
                    b"<p>API is up. Build the frontend bundle to serve the UI here.</p>"
                )
                self.send_response(200)
                self.send_header("Content-Type", "text/html; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            self._send_json(404, {"code": "not_found", "message": f"no route {self.path}"})
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def make_server(
    store_dir, media_dir=None, ui_dir=None, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Build a ready-to-serve HTTP server; port 0 picks an ephemeral port."""
    store = SessionStore(store_dir)
    handler = type(
        "BoundHandler",
        (_Handler,),
        {
            "store": store,
            "media_dir": Path(media_dir) if media_dir else None,
            "ui_dir": Path(ui_dir) if ui_dir else None,
        },
    )
    server = ThreadingHTTPServer((host, port), handler)
    server.store = store
    return server
