import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from hcdcr.backends import (BackendError, HttpChatGenerator, HttpClient, HttpEmbedder, HttpPairScorer,
                            HttpReranker, call_with_retries, extract_completion_text)
from hcdcr.retrieval import Passage


class Stub:
    """Local JSON server recording requests; ``reply`` maps a payload to a response body."""

    def __init__(self, reply, fail_first=0):
        self.requests = []
        self.fail_first = fail_first
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((dict(self.headers), body))
                if len(stub.requests) <= stub.fail_first:
                    self.send_response(503)
                    self.end_headers()
                    return
                data = json.dumps(reply(body)).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_port}/"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def test_chat_generator_and_token(monkeypatch):
    monkeypatch.setenv("STUB_TOKEN", "s3cret")
    reply = lambda body: {"choices": [{"message": {"content": "a definition"}}]}  # noqa: E731
    with Stub(reply) as stub:
        gen = HttpChatGenerator(HttpClient(stub.url, "STUB_TOKEN"), "mixtral", temperature=0.0,
                                system="be brief")
        assert gen.generate("define x") == "a definition"
        headers, body = stub.requests[0]
        assert headers["Authorization"] == "Bearer s3cret"
        assert body["messages"][-1] == {"role": "user", "content": "define x"}
        assert body["messages"][0]["role"] == "system" and body["model"] == "mixtral"


def test_retry_then_success():
    with Stub(lambda body: {"logits": [0, 1, 2, 3]}, fail_first=2) as stub:
        scorer = HttpPairScorer(HttpClient(stub.url), attempts=3, backoff=0)
        assert scorer.score(None, "pair text") == [0, 1, 2, 3]
        assert len(stub.requests) == 3 and stub.requests[-1][1] == {"input": "pair text"}


def test_call_with_retries_passes_through():
    assert call_with_retries(lambda: 5, attempts=1) == 5


def test_retries_exhausted():
    with Stub(lambda body: {}, fail_first=5) as stub:
        gen = HttpChatGenerator(HttpClient(stub.url), "m", attempts=2, backoff=0)
        with pytest.raises(BackendError, match="2 attempts"):
            gen.generate("x")
        assert len(stub.requests) == 2


def test_embedder_and_reranker():
    with Stub(lambda body: {"vectors": [[1.0, 0.0]] * len(body["input"])}) as stub:
        emb = HttpEmbedder(HttpClient(stub.url), "mxbai", dim=2)
        assert emb.embed("x").tolist() == [1.0, 0.0]
    with Stub(lambda body: {"vectors": [[1.0]]}) as stub:
        with pytest.raises(BackendError, match="shape"):
            HttpEmbedder(HttpClient(stub.url), "m", dim=2, attempts=1).embed("x")
    with Stub(lambda body: {"scores": [len(t) for t in body["passages"]]}) as stub:
        scores = HttpReranker(HttpClient(stub.url)).score("q", [Passage("a", "s", "xx"), Passage("b", "s", "y")])
        assert scores == [2.0, 1.0]


def test_pair_scorer_logit_count():
    with Stub(lambda body: {"logits": [0, 1]}) as stub:
        with pytest.raises(BackendError, match="expected 4"):
            HttpPairScorer(HttpClient(stub.url), attempts=1).score(None, "x")


def test_extract_completion_text():
    assert extract_completion_text({"choices": [{"text": "t"}]}) == "t"
    assert extract_completion_text({"output": "o"}) == "o"
    with pytest.raises(BackendError):
        extract_completion_text({"weird": 1})
