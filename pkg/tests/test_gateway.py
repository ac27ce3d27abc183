import json

import httpx
import pytest

from pairjudge.gateway import (
    BackendRefused,
    ChatRequest,
    ConfigurationError,
    Gateway,
    HTTPBackend,
    ImagePart,
    MockBackend,
    MockRule,
    MockScript,
    RateLimited,
    RunStore,
    SchemaViolation,
    StructuredOutputFailed,
    TextPart,
    TransportError,
    Truncated,
    Unparseable,
    cache_key,
    extract_json,
    image_marker,
    wire_body,
)

GOOD = json.dumps({"Overall": {"winner": "A", "reasoning": "A handles the edge case."}})


def req(text="hello", tag="final_judge", **kw):
    return ChatRequest.from_prompt("m", text, tag, **kw)


def gw(responses, **kw):
    backend = MockBackend(MockScript([MockRule(response=responses)]), **kw)
    return Gateway(backend, RunStore(), sleep=lambda s: None), backend


def test_cache_key_depends_on_content_not_tag():
    assert cache_key(req("x", tag="a")) == cache_key(req("x", tag="b"))
    assert cache_key(req("x")) != cache_key(req("y"))
    assert cache_key(req("x")) != cache_key(req("x"), "final_judge")
    assert cache_key(req("x")) != cache_key(req("x", temperature=0.5))


def test_cache_key_includes_image_bytes(tmp_path):
    img = tmp_path / "s.png"
    img.write_bytes(b"one")
    k1 = cache_key(req(f"see {image_marker(str(img))}"))
    img.write_bytes(b"two")
    assert cache_key(req(f"see {image_marker(str(img))}")) != k1


def test_image_markers_become_parts():
    r = req(f"before {image_marker('x.png')} after")
    parts = r.messages[-1].parts
    assert parts == (TextPart("before "), ImagePart("x.png"), TextPart(" after"))
    assert r.has_images


def test_second_identical_call_is_a_cache_hit():
    g, backend = gw("hi")
    assert g.complete(req()).text == "hi"
    second = g.complete(req())
    assert second.cached and len(backend.requests) == 1
    assert (g.stats.network_calls, g.stats.cache_hits) == (1, 1)


def test_transport_errors_retry_with_backoff():
    delays = []
    backend = MockBackend(MockScript([MockRule(response=[RateLimited("slow"), TransportError("x"), "ok"])]))
    g = Gateway(backend, RunStore(), sleep=delays.append, backoff_s=0.5)
    resp = g.complete(req())
    assert resp.text == "ok" and resp.retries == 2
    assert delays == [0.5, 1.0]
    assert g.transcript[-1]["retries"] == 2


def test_retries_exhausted_raise():
    g, backend = gw([RateLimited("slow")])
    with pytest.raises(RateLimited):
        g.complete(req())
    assert len(backend.requests) == 3
    assert g.transcript[-1]["error"]


def test_refusal_is_not_retried():
    g, backend = gw([BackendRefused("400")])
    with pytest.raises(BackendRefused):
        g.complete(req())
    assert len(backend.requests) == 1


def test_images_rejected_by_text_only_backend():
    g, backend = gw("x", supports_images=False)
    with pytest.raises(ConfigurationError):
        g.complete(req(image_marker("https://h/x.png")))
    assert backend.requests == []


def test_structured_repair_then_success():
    g, backend = gw(["not json at all", GOOD])
    value = g.complete_structured(req(), "final_judge")
    assert value["Overall"]["winner"] == "A"
    assert len(backend.requests) == 2
    assert "could not be used" in backend.requests[1].prompt_text


def test_structured_schema_violation_is_repaired():
    bad = json.dumps({"Overall": {"winner": "C", "reasoning": "x"}})
    g, backend = gw([bad, GOOD])
    assert g.complete_structured(req(), "final_judge")["Overall"]["winner"] == "A"
    assert "Overall/winner" in backend.requests[1].prompt_text


def test_structured_gives_up_after_repairs():
    g, backend = gw("nope")
    with pytest.raises(StructuredOutputFailed) as err:
        g.complete_structured(req(), "final_judge", max_repair_rounds=2)
    assert err.value.attempts == 3 and len(backend.requests) == 3


def test_truncated_reply_is_not_cached():
    class Cut:
        backend_id, supports_images = "cut", True

        def send(self, r):
            from pairjudge.gateway import BackendReply

            return BackendReply("{", finish_reason="length")

    g = Gateway(Cut(), RunStore())
    with pytest.raises(Truncated):
        g.complete(req())
    assert g.store.get(cache_key(req())) is None


@pytest.mark.parametrize(
    "raw",
    [
        GOOD,
        f"```json\n{GOOD}\n```",
        f"Here you go:\n```\n{GOOD}\n```\nthanks",
        f"Sure! {GOOD} Hope this helps.",
    ],
)
def test_extract_json_variants(raw):
    assert extract_json(raw, "final_judge")["Overall"]["winner"] == "A"


def test_extract_json_errors():
    with pytest.raises(Unparseable):
        extract_json("no braces", "final_judge")
    with pytest.raises(SchemaViolation):
        extract_json('{"Overall": {}}', "final_judge")
    with pytest.raises(KeyError):
        extract_json("{}", "no_such_schema")


def test_run_store_persists_and_first_write_wins(tmp_path):
    s = RunStore(tmp_path)
    s.put("ab" * 32, {"text": "first"})
    s.put("ab" * 32, {"text": "second"})
    assert RunStore(tmp_path).get("ab" * 32) == {"text": "first"}
    assert "cd" * 32 not in s


def test_transcript_file_written(tmp_path):
    backend = MockBackend(MockScript(default="x"))
    g = Gateway(backend, RunStore(tmp_path), transcript_path=tmp_path / "t.jsonl")
    g.complete(req())
    g.complete(req())
    lines = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [l["cache_hit"] for l in lines] == [False, True]
    assert lines[0]["tag"] == "final_judge"


def _http(handler, monkeypatch, key="sekrit"):
    monkeypatch.setenv("PJ_TEST_KEY", key)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HTTPBackend("http://llm.local/v1/", api_key_env="PJ_TEST_KEY", client=client)


def test_http_backend_success(monkeypatch):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "hey"}, "finish_reason": "stop"}],
                                         "usage": {"prompt_tokens": 3, "completion_tokens": 1}})

    reply = _http(handler, monkeypatch).send(req("q"))
    assert reply.text == "hey" and reply.prompt_tokens == 3
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"]["temperature"] == 0.0


@pytest.mark.parametrize("status,exc", [(429, RateLimited), (503, TransportError), (400, BackendRefused)])
def test_http_backend_status_mapping(monkeypatch, status, exc):
    backend = _http(lambda r: httpx.Response(status, text="no"), monkeypatch)
    with pytest.raises(exc):
        backend.send(req())


def test_http_backend_malformed_body(monkeypatch):
    backend = _http(lambda r: httpx.Response(200, json={"nope": 1}), monkeypatch)
    with pytest.raises(TransportError):
        backend.send(req())


def test_wire_body_inlines_local_images(tmp_path):
    img = tmp_path / "shot.png"
    img.write_bytes(b"\x89PNG")
    body = wire_body(req(f"look {image_marker(str(img))}"))
    content = body["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "look "}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
