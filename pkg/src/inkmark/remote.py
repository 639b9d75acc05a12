"""HTTP logit source: client for ``POST /v1/logits`` and a reference server."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np
import requests

from .corpus import Vocabulary
from .errors import EndpointUnavailable, MalformedResponse, VocabularyMismatch

log = logging.getLogger(__name__)

LOGITS_PATH = "/v1/logits"
HASH_HEADER = "X-Vocab-Hash"
TOKEN_ENV = "INKMARK_API_TOKEN"


class RemoteModel:
    """LogitSource backed by a remote endpoint.

    Transient failures (connection errors, timeouts, 5xx) are retried up to
    ``max_retries`` times with exponential backoff.
    """

    def __init__(
        self,
        endpoint: str,
        vocab: Vocabulary,
        max_retries: int = 3,
        timeout: float = 10.0,
        backoff: float = 0.1,
        session: requests.Session | None = None,
    ):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith(LOGITS_PATH):
            self.url += LOGITS_PATH
        self.vocab = vocab
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff = backoff
        self.session = session or requests.Session()
        self.retries_used = 0

    def _headers(self) -> dict:
        headers = {HASH_HEADER: self.vocab.hash, "Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        body = {"prefix_ids": [int(t) for t in prefix]}
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.retries_used += 1
                log.warning("retrying %s (attempt %d): %s", self.url, attempt, last_error)
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self.url, json=body, headers=self._headers(), timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            return self._parse(resp)
        raise EndpointUnavailable(f"{self.url} failed after {self.max_retries} retries: {last_error}")

    def _parse(self, resp: requests.Response) -> np.ndarray:
        server_hash = resp.headers.get(HASH_HEADER)
        if resp.status_code == 409 or (server_hash and server_hash != self.vocab.hash):
            raise VocabularyMismatch(
                f"server vocabulary {server_hash!r} != local {self.vocab.hash!r}"
            )
        if resp.status_code != 200:
            raise EndpointUnavailable(f"{self.url} returned HTTP {resp.status_code}")
        try:
            values = resp.json()["logits"]
            logits = np.asarray(values, dtype=float)
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad logits payload: {exc}") from exc
        if logits.shape != (self.vocab.size,) or not np.all(np.isfinite(logits)):
            raise MalformedResponse(
                f"expected {self.vocab.size} finite logits, got shape {logits.shape}"
            )
        return logits


def make_server(model, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Serve ``model.next_logits`` over HTTP. Port 0 picks a free port."""
    vocab_hash = model.vocab.hash

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug(fmt, *args)

        def _reply(self, status: int, payload: dict):
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header(HASH_HEADER, vocab_hash)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            if self.path != LOGITS_PATH:
                self._reply(404, {"error": "not found"})
                return
            if self.headers.get(HASH_HEADER) not in (None, vocab_hash):
                self._reply(409, {"error": "vocabulary mismatch"})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                prefix = json.loads(self.rfile.read(length))["prefix_ids"]
                logits = model.next_logits(tuple(int(t) for t in prefix))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                self._reply(400, {"error": str(exc)})
                return
            self._reply(200, {"logits": [float(x) if math.isfinite(x) else -1e9 for x in logits]})

    return ThreadingHTTPServer((host, port), Handler)


def serve_in_background(model, host: str = "127.0.0.1", port: int = 0):
    server = make_server(model, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{host}:{server.server_address[1]}"
