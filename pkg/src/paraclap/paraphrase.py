"""Two-step paraphrase pipeline over a provider-agnostic chat endpoint.

Step 1 drafts a paraphrase from in-context examples; step 2 asks the model to
reason about the draft and correct it when the sound-event nuance drifted.
Both steps run against anything with a ``complete(ChatRequest)`` method: the
bundled HTTP client, the deterministic offline mock, or a test double.

Every (item, level) unit produces a ledger record - corrected drafts and
quarantined failures alike - appended to newline-delimited JSON and fsynced,
so a killed run resumes without re-requesting finished work.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datapack import Dataset, Variant, load_manifest, save_manifest
from .errors import EndpointError, MalformedResponse, UnparseableVerdict
from .prompts import CORRECTION_MARKER, DEFAULT_PROMPTS, P1_MARKER, P2_MARKER, PromptSet

LEVELS = ("p1", "p2")
TRANSIENT_STATUSES = frozenset({408, 429, 500, 502, 503, 504})
TOKEN_ENV_VAR = "PARACLAP_API_TOKEN"


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple  # ((role, content), ...)
    temperature: float = 0.0
    max_tokens: int = 256
    stop: tuple = ()

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0


class HttpChatClient:
    """POSTs OpenAI-style chat bodies to a configured URL.

    Bearer token comes from the environment; transient failures raise
    ``EndpointError`` and are retried by the ``Backoff`` wrapper, not here.
    """

    def __init__(self, url: str, model: str, token_env: str = TOKEN_ENV_VAR, timeout: float = 60.0):
        self.url = url
        self.model = model
        self.token_env = token_env
        self.timeout = timeout

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stop": list(request.stop),
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(
            self.url, data=json.dumps(body).encode(), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            raise EndpointError(exc.code, exc.reason) from exc
        except (urllib.error.URLError, TimeoutError) as exc:
            raise EndpointError(503, str(exc)) from exc
        try:
            choice = payload["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(502, f"response missing choices[0].message.content: {exc}") from exc
        usage = payload.get("usage", {})
        return ChatResponse(
            content=content,
            finish_reason=choice.get("finish_reason", "stop"),
            prompt_tokens=usage.get("prompt_tokens", 0),
            completion_tokens=usage.get("completion_tokens", 0),
        )


class Backoff:
    """Retries transient endpoint failures with exponential backoff."""

    def __init__(self, inner, max_retries: int = 3, base: float = 1.0, sleep=time.sleep):
        self.inner = inner
        self.max_retries = max_retries
        self.base = base
        self.sleep = sleep
        self.model = getattr(inner, "model", "default")

    def complete(self, request: ChatRequest) -> ChatResponse:
        attempt = 0
        while True:
            try:
                return self.inner.complete(request)
            except EndpointError as exc:
                if exc.status not in TRANSIENT_STATUSES or attempt >= self.max_retries:
                    raise
                self.sleep(self.base * 2**attempt)
                attempt += 1


# --- deterministic offline mock ----------------------------------------------------

STOPWORDS = frozenset(
    """a an the of in on at by to is are was were as while then and with its it some
    someone something followed from into amid amidst over up down out off there
    their his her being been be""".split()
)

_SYNONYMS = {
    "gunfire": "shots",
    "pots": "utensils",
    "water": "liquid",
    "faucet": "tap",
    "man": "male",
    "woman": "female",
    "men": "males",
    "women": "females",
    "laugh": "chuckle",
    "laughs": "chuckles",
    "snoring": "snores",
    "music": "melody",
    "dog": "hound",
    "barks": "woofs",
    "cat": "feline",
    "meows": "mews",
    "bird": "songbird",
    "chirps": "tweets",
    "talks": "speaks",
    "talking": "speaking",
    "child": "kid",
    "cries": "wails",
    "car": "vehicle",
    "honks": "beeps",
    "train": "locomotive",
    "rumbles": "thunders",
    "engine": "motor",
    "hums": "drones",
    "rain": "rainfall",
    "falls": "patters",
    "wind": "breeze",
    "blows": "gusts",
    "thunder": "storm",
    "roars": "booms",
    "crowd": "audience",
    "cheers": "applauds",
    "phone": "telephone",
    "rings": "buzzes",
    "door": "hinge",
    "creaks": "squeaks",
    "clock": "timepiece",
    "ticks": "clicks",
    "drips": "trickles",
    "machine": "device",
    "whirs": "spins",
    "bell": "carillon",
    "chimes": "tolls",
    "plays": "sounds",
    "loudly": "noisily",
    "softly": "quietly",
    "steadily": "evenly",
    "faintly": "weakly",
    "repeatedly": "often",
}

#: exemplar caption -> known-good vocabulary-shifting paraphrase; applied at
#: level p2 so level p1 keeps its keep-the-wording guarantee.
_P2_FIXTURES = {
    "gunfire, followed by a click and shattering glass.": "Shots ring out, then a click and glass breaks into fragments.",
    "pots clatter as water flows from a turned-on faucet.": "Utensils clatter while liquid streams from an open tap.",
    "a man and woman laugh, followed by a man shouting and a woman joining in with childlike giggles.": "A couple chuckles, then a male yells, and a female responds with youthful giggles.",
    "a woman delivers a formal address.": "A female presents an official speech.",
    "high-pitched snoring echoes repeatedly.": "Sharp snores resound over and over.",
    "music is playing.": "A melody fills the air.",
}

#: (original keyword, draft keyword) -> (replacement, reasoning); first match
#: wins. Models the judge catching a nuance drift.
_CORRECTION_RULES = (
    (
        "meow",
        "cries",
        "meows",
        'The term "cries" implies a distressed or loud sound, while the original '
        'caption describes the softer, playful sound of meows.',
    ),
    (
        "meow",
        "cry",
        "meow",
        'The term "cry" implies distress; the original caption describes a meow.',
    ),
    (
        "snor",
        "heavy breathing",
        "disruptive nasal noises",
        '"Heavy breathing" misses the disruptive character of snoring.',
    ),
)

_CLAUSE_SPLIT = re.compile(
    r",\s*|\s+while\s+|\s+as\s+|\s+followed by\s+|\s+and then\s+|\s+then\s+", re.IGNORECASE
)


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9'-]+", text.lower())


def content_words(text: str) -> list[str]:
    """Sorted multiset of non-stopword tokens; the p1 conservation law."""
    return sorted(t for t in _tokens(text) if t not in STOPWORDS)


def _stable_seed(caption: str, level: str, seed: int) -> int:
    return zlib.crc32(f"{seed}:{level}:{caption}".encode())


def _substitute(text: str, table=_SYNONYMS) -> str:
    def repl(match):
        word = match.group(0)
        sub = table.get(word.lower())
        if sub is None:
            return word
        return sub.capitalize() if word[0].isupper() else sub

    return re.sub(r"[A-Za-z'-]+", repl, text)


def mock_paraphrase(caption: str, level: str, seed: int = 0) -> str:
    """Deterministic offline paraphrase: clause reordering for p1, plus a
    synonym-table pass for p2. Pure function of (caption, level, seed)."""
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    if level == "p2":
        fixture = _P2_FIXTURES.get(caption.strip().lower())
        if fixture is not None:
            return fixture

    body = caption.strip().rstrip(".")
    clauses = [c.strip() for c in _CLAUSE_SPLIT.split(body) if c.strip()]
    rng = np.random.default_rng(_stable_seed(caption, level, seed))
    if len(clauses) > 1:
        # any non-identity permutation keeps the output an actual rewrite
        while True:
            order = rng.permutation(len(clauses))
            if len(clauses) == 1 or list(order) != list(range(len(clauses))):
                break
        reordered = [clauses[i] for i in order]
        joined = " while ".join([", ".join(reordered[:-1])] + [reordered[-1]])
    else:
        words = body.split()
        k = 1 + int(rng.integers(max(1, len(words) - 1)))
        joined = " ".join(words[k:] + words[:k])
    joined = joined[0].upper() + joined[1:].lower() + "."
    if level == "p2":
        joined = _substitute(joined)
    return joined


def mock_correction(caption: str, draft: str):
    """(verdict, corrected, reasoning) the mock judge would produce."""
    cap = caption.lower()
    low = draft.lower()
    for orig_kw, draft_kw, replacement, reasoning in _CORRECTION_RULES:
        if orig_kw in cap and draft_kw in low:
            pattern = re.compile(re.escape(draft_kw), re.IGNORECASE)
            return "correction_required", pattern.sub(replacement, draft), reasoning
    return "not_required", draft, "This is accurate."


class MockChatClient:
    """Offline stand-in for the chat endpoint.

    Recognizes which template a request came from via the prompt markers,
    answers with ``mock_paraphrase``/``mock_correction``, and can follow a
    scripted failure schedule for retry/backoff tests. ``calls`` records
    (kind, caption) per completed request.
    """

    model = "mock"

    def __init__(self, seed: int = 0, fail_schedule=()):
        self.seed = seed
        self._fail_schedule = list(fail_schedule)
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def _next_failure(self):
        with self._lock:
            if self._fail_schedule:
                return self._fail_schedule.pop(0)
        return None

    def complete(self, request: ChatRequest) -> ChatResponse:
        failure = self._next_failure()
        if failure is not None:
            kind, arg = failure
            if kind == "status":
                raise EndpointError(arg, "scripted failure")
            if kind == "content":
                return ChatResponse(content=arg)
            if kind == "crash":
                raise arg
            raise ValueError(f"unknown scripted failure {failure!r}")

        prompt = request.messages[-1][1]
        if CORRECTION_MARKER in prompt:
            caption = _extract_after(prompt, "Input Caption:")
            draft = _extract_after(prompt, "Paraphrase Caption:")
            with self._lock:
                self.calls.append(("correct", caption))
            verdict, corrected, reasoning = mock_correction(caption, draft)
            token = "foo" if verdict == "correction_required" else "bar"
            corrected_line = corrected if verdict == "correction_required" else "Not required"
            content = (
                f"Correction: {token}\n"
                f"Corrected Paraphrase Caption: {corrected_line}\n"
                f"Reasoning: {reasoning}"
            )
            return ChatResponse(content=content)
        if P1_MARKER in prompt or P2_MARKER in prompt:
            level = "p1" if P1_MARKER in prompt else "p2"
            caption = _extract_after(prompt, "Input Caption:")
            with self._lock:
                self.calls.append((f"generate_{level}", caption))
            return ChatResponse(content=mock_paraphrase(caption, level, self.seed))
        return ChatResponse(content="")


def _extract_after(prompt: str, marker: str) -> str:
    idx = prompt.rfind(marker)
    if idx < 0:
        return ""
    return prompt[idx + len(marker) :].splitlines()[0].strip()


# --- the two pipeline steps ---------------------------------------------------------


@dataclass(frozen=True)
class ParaphraseRecord:
    id: str
    original: str
    level: str
    draft: str
    verdict: str  # "correction_required" | "not_required"
    corrected: str
    reasoning: str
    attempts: int = 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "ok",
                "id": self.id,
                "level": self.level,
                "original": self.original,
                "draft": self.draft,
                "verdict": self.verdict,
                "corrected": self.corrected,
                "reasoning": self.reasoning,
                "attempts": self.attempts,
            },
            ensure_ascii=False,
            sort_keys=True,
        )


def generate_paraphrase(
    caption: str,
    level: str,
    client,
    prompt_set: PromptSet = DEFAULT_PROMPTS,
    max_retries: int = 3,
    temperature: float = 0.7,
):
    """Step 1: single-line draft. Returns (draft, attempts used).

    Empty or multi-line responses are re-asked up to ``max_retries`` times,
    then raise MalformedResponse.
    """
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    request = ChatRequest(
        model=getattr(client, "model", "default"),
        messages=prompt_set.generation_messages(caption, level),
        temperature=temperature,
        max_tokens=128,
    )
    for attempt in range(1, max_retries + 1):
        response = client.complete(request)
        draft = response.content.strip()
        if draft.lower().startswith("paraphrase caption:"):
            draft = draft[len("paraphrase caption:") :].strip()
        if draft and "\n" not in draft:
            return draft, attempt
    raise MalformedResponse(max_retries, f"no usable single-line draft for {caption!r}")


_CORRECTED_LINE = re.compile(r"^\s*corrected paraphrase caption\s*:\s*(.*)$", re.IGNORECASE)
_REASONING_LINE = re.compile(r"^\s*reasoning\s*:\s*(.*)$", re.IGNORECASE)


def parse_correction(raw: str, draft: str):
    """Extract (verdict, corrected, reasoning) from a correction response.

    The verdict keys on the corrected-caption line alone: "Not required"
    (any casing, trailing period tolerated) keeps the draft; any other
    non-empty value is a correction. The literal token on the "Correction:"
    line is ignored - judge responses are not trusted to keep it meaningful.
    """
    corrected_value = None
    reasoning_parts = []
    in_reasoning = False
    for line in raw.splitlines():
        m = _CORRECTED_LINE.match(line)
        if m and corrected_value is None:
            corrected_value = m.group(1).strip()
            in_reasoning = False
            continue
        m = _REASONING_LINE.match(line)
        if m:
            reasoning_parts.append(m.group(1).strip())
            in_reasoning = True
            continue
        if in_reasoning and line.strip():
            reasoning_parts.append(line.strip())
    if corrected_value is None or not corrected_value:
        raise UnparseableVerdict(raw)
    reasoning = " ".join(part for part in reasoning_parts if part)
    if corrected_value.rstrip(".").strip().lower() == "not required":
        return "not_required", draft, reasoning
    return "correction_required", corrected_value, reasoning


def correct_paraphrase(
    caption: str,
    draft: str,
    client,
    prompt_set: PromptSet = DEFAULT_PROMPTS,
    temperature: float = 0.0,
):
    """Step 2: reasoned verdict. Returns (verdict, corrected, reasoning)."""
    if not caption.strip() or not draft.strip():
        raise ValueError("caption and draft must be non-empty")
    request = ChatRequest(
        model=getattr(client, "model", "default"),
        messages=prompt_set.correction_messages(caption, draft),
        temperature=temperature,
        max_tokens=256,
    )
    response = client.complete(request)
    return parse_correction(response.content, draft)


# --- pipeline -------------------------------------------------------------------------


@dataclass
class PipelineResult:
    manifest_path: Path
    ledger_path: Path
    n_items: int
    n_ok: int
    n_quarantined: int
    n_skipped: int


def _read_ledger(path: Path):
    """Replay a ledger; a torn trailing line (crash mid-append) is dropped."""
    done: dict[tuple[str, str], dict] = {}
    quarantined = []
    if not path.is_file():
        return done, quarantined
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise
        if rec.get("kind") == "ok":
            done[(rec["id"], rec["level"])] = rec
        else:
            quarantined.append(rec)
    return done, quarantined


def run_pipeline(
    manifest_in,
    client,
    out_dir,
    levels=LEVELS,
    concurrency: int = 1,
    seed: int = 0,
    prompt_set: PromptSet = DEFAULT_PROMPTS,
    backoff_base: float = 1.0,
    max_backoff_retries: int = 3,
    sleep=time.sleep,
) -> PipelineResult:
    """Both steps over every (item, level); resumable and quarantine-safe.

    Records are written in deterministic work order and fsynced one by one,
    so output bytes are reproducible for a deterministic client and a killed
    run never re-requests work that reached the ledger.
    """
    dataset: Dataset = load_manifest(manifest_in)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger_path = out / "paraphrase_ledger.jsonl"
    manifest_path = out / "manifest.jsonl"

    done, _prior_quarantined = _read_ledger(ledger_path)
    work = [
        (item, level)
        for item in dataset.items
        for level in levels
        if (item.id, level) not in done
    ]
    n_skipped = len(dataset.items) * len(levels) - len(work)

    wrapped = Backoff(client, max_retries=max_backoff_retries, base=backoff_base, sleep=sleep)

    def run_unit(unit):
        item, level = unit
        try:
            draft, attempts = generate_paraphrase(
                item.caption, level, wrapped, prompt_set
            )
        except (EndpointError, MalformedResponse) as exc:
            return {
                "kind": "quarantined",
                "id": item.id,
                "level": level,
                "original": item.caption,
                "draft": None,
                "error": type(exc).__name__,
                "raw": str(exc),
            }
        try:
            verdict, corrected, reasoning = correct_paraphrase(
                item.caption, draft, wrapped, prompt_set
            )
        except UnparseableVerdict as exc:
            return {
                "kind": "quarantined",
                "id": item.id,
                "level": level,
                "original": item.caption,
                "draft": draft,
                "error": "UnparseableVerdict",
                "raw": exc.raw,
            }
        except (EndpointError, MalformedResponse) as exc:
            return {
                "kind": "quarantined",
                "id": item.id,
                "level": level,
                "original": item.caption,
                "draft": draft,
                "error": type(exc).__name__,
                "raw": str(exc),
            }
        return ParaphraseRecord(
            id=item.id,
            original=item.caption,
            level=level,
            draft=draft,
            verdict=verdict,
            corrected=corrected,
            reasoning=reasoning,
            attempts=attempts,
        )

    n_ok = 0
    n_quarantined = 0
    with open(ledger_path, "a", encoding="utf-8") as ledger:

        def persist(result):
            nonlocal n_ok, n_quarantined
            if isinstance(result, ParaphraseRecord):
                line = result.to_json()
                done[(result.id, result.level)] = json.loads(line)
                n_ok += 1
            else:
                line = json.dumps(result, ensure_ascii=False, sort_keys=True)
                n_quarantined += 1
            ledger.write(line + "\n")
            ledger.flush()
            os.fsync(ledger.fileno())

        if concurrency <= 1:
            for unit in work:
                persist(run_unit(unit))
        else:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                # persist in submission order: deterministic ledger bytes
                for future in [pool.submit(run_unit, u) for u in work]:
                    persist(future.result())

    def rebase(ref):
        # refs are relative to their manifest; keep them valid from out_dir
        if ref is None:
            return None
        rel = os.path.relpath(dataset.base_dir / ref.file, out)
        return replace(ref, file=rel.replace(os.sep, "/"))

    items_out = []
    for item in dataset.items:
        variants = {
            name: replace(v, feature_ref=rebase(v.feature_ref))
            for name, v in item.variants.items()
        }
        for level in levels:
            rec = done.get((item.id, level))
            if rec is not None:
                variants[level] = Variant(text=rec["corrected"], feature_ref=None)
        items_out.append(
            replace(item, audio_ref=rebase(item.audio_ref), variants=variants)
        )
    save_manifest(items_out, manifest_path)
    return PipelineResult(
        manifest_path=manifest_path,
        ledger_path=ledger_path,
        n_items=len(dataset.items),
        n_ok=n_ok,
        n_quarantined=n_quarantined,
        n_skipped=n_skipped,
    )
