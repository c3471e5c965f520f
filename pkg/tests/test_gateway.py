import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ambisql.llm.gateway import (
    BackendConfig,
    BackendConfigError,
    Gateway,
    GenerationError,
    GenerationRequest,
    HttpChatBackend,
    ReplayMissError,
    ReplayOnlyBackend,
    ResponseCache,
    ScriptedBackend,
    ScriptMissError,
    TransportError,
    open_cache,
)


class ChatHandler(BaseHTTPRequestHandler):
    """Minimal chat-completions endpoint; optionally fails the first N calls."""

    def do_POST(self):
        server = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        server.requests.append({"body": body, "auth": self.headers.get("Authorization")})
        if server.fail_first > 0:
            server.fail_first -= 1
            self.send_response(503)
            self.end_headers()
            self.wfile.write(b"busy")
            return
        text = "echo: " + body["messages"][0]["content"]
        payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), ChatHandler)
    server.requests = []
    server.fail_first = 0
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


def endpoint(server) -> str:
    return f"http://127.0.0.1:{server.server_address[1]}"


def test_http_same_request_twice_one_network_call(chat_server, tmp_path, monkeypatch):
    monkeypatch.setenv("TEST_CHAT_KEY", "sekret")
    backend = HttpChatBackend(endpoint(chat_server), api_key_env="TEST_CHAT_KEY")
    gw = Gateway("interp", backend, model="m", cache=ResponseCache(tmp_path / "c.jsonl"))
    first = gw.complete("hello")
    second = gw.complete("hello")
    assert first == second == "echo: hello"
    assert len(chat_server.requests) == 1
    sent = chat_server.requests[0]
    assert sent["auth"] == "Bearer sekret"
    assert sent["body"]["model"] == "m" and sent["body"]["temperature"] == 0.0 and sent["body"]["max_tokens"] == 1024


def test_http_retries_transient_failures(chat_server):
    chat_server.fail_first = 2
    delays = []
    gw = Gateway("x", HttpChatBackend(endpoint(chat_server), api_key_env=None), max_retries=3, backoff_s=0.5, sleep=delays.append)
    assert gw.complete("hi") == "echo: hi"
    assert delays == [0.5, 1.0]
    assert len(chat_server.requests) == 3


def test_http_gives_up_after_retries(chat_server):
    chat_server.fail_first = 10
    gw = Gateway("x", HttpChatBackend(endpoint(chat_server), api_key_env=None), max_retries=2, sleep=lambda s: None)
    with pytest.raises(TransportError, match="3 attempts"):
        gw.complete("hi")


def test_http_connection_refused_is_transport_error():
    gw = Gateway("x", HttpChatBackend("http://127.0.0.1:9", api_key_env=None, timeout_s=1), max_retries=0)
    with pytest.raises(TransportError):
        gw.complete("hi")


def test_cache_persists_across_instances(tmp_path):
    path = tmp_path / "cache.jsonl"
    backend = ScriptedBackend(default_response="canned", on_miss="default")
    Gateway("interp", backend, cache=ResponseCache(path)).complete("p")
    entry = json.loads(path.read_text().splitlines()[0])
    assert set(entry) == {"key", "request", "response", "timestamp"}
    replay = Gateway("interp", ReplayOnlyBackend(), cache=ResponseCache(path))
    assert replay.complete("p") == "canned"
    with pytest.raises(ReplayMissError):
        replay.complete("other prompt")


def test_open_cache_shares_one_object(tmp_path):
    assert open_cache(tmp_path / "a.jsonl") is open_cache(tmp_path / "a.jsonl")
    assert open_cache(None) is not open_cache(None)


def test_cache_key_frozen():
    req = GenerationRequest("interp", "m", "Hello", temperature=0.0, max_tokens=1024, seed=None)
    expected = hashlib.sha256(b'["interp","m","Hello",0.0,null,1024]').hexdigest()
    assert req.cache_key() == expected


@given(st.text(min_size=1), st.integers(0, 3), st.sampled_from([0.0, 0.7]))
def test_cache_key_stable_and_sensitive(prompt, seed, temperature):
    a = GenerationRequest("b", "m", prompt, temperature=temperature, seed=seed)
    b = GenerationRequest("b", "m", prompt, temperature=temperature, seed=seed)
    assert a.cache_key() == b.cache_key()
    assert a.cache_key() != GenerationRequest("b", "m", prompt, temperature=temperature, seed=seed + 1).cache_key()
    assert a.cache_key() != GenerationRequest("other", "m", prompt, temperature=temperature, seed=seed).cache_key()


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest("b", "m", "")
    with pytest.raises(ValueError):
        GenerationRequest("b", "m", "p", temperature=float("nan"))


def test_scripted_rules():
    qhash = hashlib.sha256(b"exact prompt").hexdigest()
    backend = ScriptedBackend(
        [
            {"prompt_sha256": qhash, "response": "by hash"},
            {"contains": "seeded", "seed": 1, "response": "seed one"},
            {"contains": "seq", "responses": ["first", "second"]},
            {"regex": r"^boom", "response": {"error": "scripted failure"}},
        ]
    )
    gw = Gateway("t", backend)
    assert gw.complete("exact prompt") == "by hash"
    assert gw.complete("seeded prompt", seed=1) == "seed one"
    with pytest.raises(ScriptMissError):
        gw.complete("seeded prompt", seed=2)
    assert [gw.complete("seq", seed=i) for i in range(3)] == ["first", "second", "second"]
    with pytest.raises(GenerationError, match="scripted failure"):
        gw.complete("boom now")
    assert len(backend.calls) == 7


def test_failures_are_not_cached():
    backend = ScriptedBackend([{"contains": "p", "responses": [{"error": "once"}, "ok"]}])
    gw = Gateway("t", backend)
    with pytest.raises(GenerationError):
        gw.complete("p")
    assert gw.complete("p") == "ok"


def test_responder_takes_precedence():
    backend = ScriptedBackend([{"contains": "p", "response": "rule"}], responder=lambda req: "fn" if "x" in req.prompt else None)
    gw = Gateway("t", backend)
    assert gw.complete("px") == "fn" and gw.complete("p") == "rule"


def test_backend_config_validation():
    with pytest.raises(BackendConfigError):
        BackendConfig(kind="http_chat")
    with pytest.raises(BackendConfigError):
        BackendConfig(kind="telepathy")
    with pytest.raises(BackendConfigError):
        BackendConfig(kind="scripted_mock", on_miss="default")
    with pytest.raises(BackendConfigError):
        BackendConfig.from_dict({"kind": "replay_only", "bogus": 1})
    assert isinstance(BackendConfig(kind="replay_only").make_backend(), ReplayOnlyBackend)


def test_concurrent_requests_hit_backend_once_per_prompt():
    backend = ScriptedBackend(default_response="r", on_miss="default")
    gw = Gateway("t", backend, max_in_flight=2)
    threads = [threading.Thread(target=gw.complete, args=(f"p{i % 4}",)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(gw.cache) == 4
