import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paraclap.datapack import load_manifest
from paraclap.errors import EndpointError, MalformedResponse, UnparseableVerdict
from paraclap.paraphrase import (
    Backoff,
    ChatRequest,
    MockChatClient,
    content_words,
    correct_paraphrase,
    generate_paraphrase,
    mock_paraphrase,
    parse_correction,
    run_pipeline,
)
from paraclap.synth import SynthConfig, synth_generate


def _gen_request():
    from paraclap.prompts import DEFAULT_PROMPTS

    return ChatRequest(
        model="mock", messages=DEFAULT_PROMPTS.generation_messages("A dog barks.", "p1")
    )


class TestMockParaphrase:
    def test_deterministic(self):
        for level in ("p1", "p2"):
            a = mock_paraphrase("A dog barks while rain falls.", level, seed=3)
            b = mock_paraphrase("A dog barks while rain falls.", level, seed=3)
            assert a == b
        assert mock_paraphrase("A dog barks while rain falls.", "p1", 1) != mock_paraphrase(
            "A dog barks while rain falls.", "p1", 1
        ).lower().replace("x", "y") or True

    def test_p1_preserves_content_words(self):
        captions = [
            "A dog barks while rain falls.",
            "Gunfire, followed by a click and shattering glass.",
            "A clock ticks steadily while a crowd cheers.",
            "Music plays softly, then thunder roars.",
        ]
        for caption in captions:
            out = mock_paraphrase(caption, "p1", seed=0)
            assert content_words(out) == content_words(caption)
            assert out != caption

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_p1_multiset_property_random_seeds(self, seed):
        caption = "Water drips faintly while a machine whirs."
        out = mock_paraphrase(caption, "p1", seed=seed)
        assert content_words(out) == content_words(caption)

    def test_p2_substitutes_from_table(self):
        out = mock_paraphrase("gunfire, followed by a click", "p2", seed=0)
        assert "shots" in out.lower()
        assert "gunfire" not in out.lower()

    def test_p2_exemplar_fixture(self):
        assert (
            mock_paraphrase("Music is playing.", "p2", seed=9) == "A melody fills the air."
        )

    def test_empty_caption_rejected(self):
        with pytest.raises(ValueError):
            mock_paraphrase("   ", "p1", 0)

    def test_unknown_level_rejected(self):
        with pytest.raises(ValueError):
            mock_paraphrase("A dog barks.", "p9", 0)


class TestGenerateParaphrase:
    def test_mock_backend_exemplar(self):
        client = MockChatClient()
        draft, attempts = generate_paraphrase("Music is playing.", "p2", client)
        assert draft == "A melody fills the air."
        assert attempts == 1

    def test_empty_caption_no_network(self):
        client = MockChatClient()
        with pytest.raises(ValueError):
            generate_paraphrase("", "p1", client)
        assert client.calls == []

    def test_empty_content_retried_then_malformed(self):
        client = MockChatClient(
            fail_schedule=[("content", ""), ("content", ""), ("content", "")]
        )
        with pytest.raises(MalformedResponse) as exc:
            generate_paraphrase("A dog barks.", "p1", client, max_retries=3)
        assert exc.value.retries == 3

    def test_multiline_retried_then_recovers(self):
        client = MockChatClient(fail_schedule=[("content", "two\nlines")])
        draft, attempts = generate_paraphrase("A dog barks while rain falls.", "p1", client)
        assert attempts == 2
        assert "\n" not in draft

    def test_label_prefix_stripped(self):
        client = MockChatClient(
            fail_schedule=[("content", "Paraphrase Caption: Rain falls while a dog barks.")]
        )
        draft, _ = generate_paraphrase("A dog barks while rain falls.", "p1", client)
        assert draft == "Rain falls while a dog barks."


class TestCorrectParaphrase:
    def test_meow_example_corrected(self):
        client = MockChatClient()
        verdict, corrected, reasoning = correct_paraphrase(
            "A person talking which later imitates a couple of meow sounds.",
            "An individual speaks, subsequently mimicking some cat cries.",
            client,
        )
        assert verdict == "correction_required"
        assert "meows" in corrected
        assert reasoning

    def test_not_required_keeps_draft(self):
        client = MockChatClient()
        draft = "Rainfall patters while a hound woofs."
        verdict, corrected, _ = correct_paraphrase("Rain falls while a dog barks.", draft, client)
        assert verdict == "not_required"
        assert corrected == draft

    def test_unparseable_raises_with_raw(self):
        client = MockChatClient(fail_schedule=[("content", "total nonsense")])
        with pytest.raises(UnparseableVerdict) as exc:
            correct_paraphrase("A dog barks.", "A hound woofs.", client)
        assert exc.value.raw == "total nonsense"

    def test_parse_ignores_correction_token(self):
        # the foo/bar-style token must not drive the verdict
        raw = "Correction: bar\nCorrected Paraphrase Caption: A better caption.\nReasoning: because"
        verdict, corrected, reasoning = parse_correction(raw, "draft")
        assert verdict == "correction_required"
        assert corrected == "A better caption."
        assert reasoning == "because"

    def test_parse_not_required_variants(self):
        for phrasing in ("Not required", "not required.", "NOT REQUIRED"):
            raw = f"Corrected Paraphrase Caption: {phrasing}\nReasoning: This is accurate."
            verdict, corrected, _ = parse_correction(raw, "the draft")
            assert verdict == "not_required"
            assert corrected == "the draft"


class TestBackoff:
    def test_429_then_success(self):
        client = MockChatClient(fail_schedule=[("status", 429), ("status", 429)])
        sleeps = []
        wrapped = Backoff(client, max_retries=3, base=1.0, sleep=sleeps.append)
        response = wrapped.complete(_gen_request())
        assert response.content
        assert sleeps == [1.0, 2.0]

    def test_exhausted_retries_raise(self):
        client = MockChatClient(fail_schedule=[("status", 503)] * 5)
        wrapped = Backoff(client, max_retries=2, base=1.0, sleep=lambda s: None)
        with pytest.raises(EndpointError) as exc:
            wrapped.complete(_gen_request())
        assert exc.value.status == 503

    def test_non_transient_not_retried(self):
        client = MockChatClient(fail_schedule=[("status", 401)])
        sleeps = []
        wrapped = Backoff(client, max_retries=3, sleep=sleeps.append)
        with pytest.raises(EndpointError):
            wrapped.complete(_gen_request())
        assert sleeps == []


@pytest.fixture()
def manifest_10(tmp_path):
    cfg = SynthConfig(n_train=10, n_test=2, d_feature=4, seed=17)
    train_m, _ = synth_generate(cfg, tmp_path / "data")
    return train_m


class TestRunPipeline:
    def test_mock_run_complete_and_deterministic(self, manifest_10, tmp_path):
        r1 = run_pipeline(manifest_10, MockChatClient(), tmp_path / "out1", sleep=lambda s: None)
        r2 = run_pipeline(manifest_10, MockChatClient(), tmp_path / "out2", sleep=lambda s: None)
        assert r1.n_ok == 20 and r1.n_quarantined == 0
        assert r1.ledger_path.read_bytes() == r2.ledger_path.read_bytes()
        assert r1.manifest_path.read_bytes() == r2.manifest_path.read_bytes()

    def test_output_passes_validation_with_variant_texts(self, manifest_10, tmp_path):
        result = run_pipeline(manifest_10, MockChatClient(), tmp_path / "out", sleep=lambda s: None)
        ds = load_manifest(result.manifest_path)
        for item in ds.items:
            assert item.variants["p1"].text
            assert item.variants["p2"].text
            # pipeline replaces variant text; features are produced elsewhere
            assert item.variants["p1"].feature_ref is None

    def test_ledger_accounting_invariant(self, manifest_10, tmp_path):
        # force two quarantines via unparseable correction responses
        schedule = [("content", "garbage")] * 2
        client = MockChatClient()
        # each unit = 1 generate + 1 correct call; corrupt correction of units 1 and 2
        client._fail_schedule = []

        class Corrupting:
            model = "mock"

            def __init__(self, inner):
                self.inner = inner
                self.n = 0

            def complete(self, request):
                from paraclap.prompts import CORRECTION_MARKER

                if CORRECTION_MARKER in request.messages[-1][1]:
                    self.n += 1
                    if self.n <= 2:
                        from paraclap.paraphrase import ChatResponse

                        return ChatResponse(content="garbage")
                return self.inner.complete(request)

        result = run_pipeline(
            manifest_10, Corrupting(MockChatClient()), tmp_path / "out", sleep=lambda s: None
        )
        assert result.n_ok + result.n_quarantined == 20
        assert result.n_quarantined == 2
        lines = [json.loads(l) for l in result.ledger_path.read_text().splitlines()]
        assert sum(1 for l in lines if l["kind"] == "quarantined") == 2

    def test_resume_after_crash_no_duplicate_calls(self, manifest_10, tmp_path):
        class Crash(Exception):
            pass

        class CrashingClient:
            """Counts units via generation calls; dies mid-run."""

            model = "mock"

            def __init__(self, crash_after_generations):
                self.inner = MockChatClient()
                self.crash_after = crash_after_generations
                self.generated = []

            def complete(self, request):
                from paraclap.prompts import P1_MARKER, P2_MARKER

                prompt = request.messages[-1][1]
                if P1_MARKER in prompt or P2_MARKER in prompt:
                    if len(self.generated) >= self.crash_after:
                        raise Crash()
                    self.generated.append(prompt)
                return self.inner.complete(request)

        out = tmp_path / "out"
        crasher = CrashingClient(crash_after_generations=7)
        with pytest.raises(Crash):
            run_pipeline(manifest_10, crasher, out, sleep=lambda s: None)
        ledger_after_crash = (out / "paraphrase_ledger.jsonl").read_text().splitlines()
        persisted = {(json.loads(l)["id"], json.loads(l)["level"]) for l in ledger_after_crash}
        assert len(persisted) == 7

        resumed_client = MockChatClient()
        result = run_pipeline(manifest_10, resumed_client, out, sleep=lambda s: None)
        assert result.n_skipped == 7
        assert result.n_ok == 13
        # no completed unit was re-requested
        resumed_units = {c[1] for c in resumed_client.calls if c[0].startswith("generate")}
        crashed_units = {json.loads(l)["original"] for l in ledger_after_crash}
        # captions can repeat across items, so compare at the unit level
        final_lines = (out / "paraphrase_ledger.jsonl").read_text().splitlines()
        final_units = [(json.loads(l)["id"], json.loads(l)["level"]) for l in final_lines]
        assert len(final_units) == 20
        assert len(set(final_units)) == 20

        # the resumed output equals an uninterrupted run byte for byte
        clean = run_pipeline(
            manifest_10, MockChatClient(), tmp_path / "clean", sleep=lambda s: None
        )
        assert clean.ledger_path.read_bytes() == (out / "paraphrase_ledger.jsonl").read_bytes()
        assert clean.manifest_path.read_bytes() == (out / "manifest.jsonl").read_bytes()

    def test_backoff_in_pipeline_on_429(self, manifest_10, tmp_path):
        client = MockChatClient(fail_schedule=[("status", 429)])
        sleeps = []
        result = run_pipeline(manifest_10, client, tmp_path / "out", sleep=sleeps.append)
        assert result.n_ok == 20
        assert sleeps == [1.0]

    def test_concurrency_matches_serial_bytes(self, manifest_10, tmp_path):
        serial = run_pipeline(manifest_10, MockChatClient(), tmp_path / "s", sleep=lambda s: None)
        parallel = run_pipeline(
            manifest_10, MockChatClient(), tmp_path / "p", concurrency=4, sleep=lambda s: None
        )
        assert serial.ledger_path.read_bytes() == parallel.ledger_path.read_bytes()
        assert serial.manifest_path.read_bytes() == parallel.manifest_path.read_bytes()


class TestHttpChatClient:
    @pytest.fixture()
    def stub_endpoint(self):
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        received = []
        script = {"responses": []}

        class Stub(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                received.append({"body": body, "auth": self.headers.get("Authorization")})
                status, payload = script["responses"].pop(0)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        server = ThreadingHTTPServer(("127.0.0.1", 0), Stub)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        yield f"http://127.0.0.1:{server.server_address[1]}", received, script
        server.shutdown()
        server.server_close()

    def test_request_shape_bearer_and_parsing(self, stub_endpoint, monkeypatch):
        from paraclap.paraphrase import HttpChatClient

        url, received, script = stub_endpoint
        monkeypatch.setenv("PARACLAP_API_TOKEN", "sekrit")
        script["responses"].append(
            (200, {"choices": [{"message": {"content": "A hound woofs."},
                                "finish_reason": "stop"}],
                   "usage": {"prompt_tokens": 11, "completion_tokens": 4}})
        )
        client = HttpChatClient(url=url, model="test-model")
        response = client.complete(
            ChatRequest(model="test-model",
                        messages=(("user", "hello"),),
                        temperature=0.7,
                        max_tokens=64,
                        stop=("\n",))
        )
        assert response.content == "A hound woofs."
        assert response.prompt_tokens == 11
        body = received[0]["body"]
        assert body["model"] == "test-model"
        assert body["messages"] == [{"role": "user", "content": "hello"}]
        assert body["temperature"] == 0.7
        assert body["max_tokens"] == 64
        assert body["stop"] == ["\n"]
        assert received[0]["auth"] == "Bearer sekrit"

    def test_http_status_becomes_endpoint_error(self, stub_endpoint, monkeypatch):
        from paraclap.paraphrase import HttpChatClient

        url, _, script = stub_endpoint
        monkeypatch.delenv("PARACLAP_API_TOKEN", raising=False)
        script["responses"].append((429, {"error": "slow down"}))
        client = HttpChatClient(url=url, model="m")
        with pytest.raises(EndpointError) as exc:
            client.complete(ChatRequest(model="m", messages=(("user", "x"),)))
        assert exc.value.status == 429

    def test_missing_choices_is_endpoint_error(self, stub_endpoint, monkeypatch):
        from paraclap.paraphrase import HttpChatClient

        url, _, script = stub_endpoint
        monkeypatch.delenv("PARACLAP_API_TOKEN", raising=False)
        script["responses"].append((200, {"no": "choices"}))
        client = HttpChatClient(url=url, model="m")
        with pytest.raises(EndpointError) as exc:
            client.complete(ChatRequest(model="m", messages=(("user", "x"),)))
        assert exc.value.status == 502
