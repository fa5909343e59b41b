"""Frozen-backbone encoding service over HTTP/1.1 with JSON bodies.

The backbone loads once and never changes for the process lifetime; its
fingerprint is echoed in every response. Clients either register a prompt
set (its per-layer prefix key/value tensors are projected through the
frozen attention weights once, at registration) and encode by prompt_id,
or ship the prompt set inline with each request.

Endpoints:
    GET  /health            -> {"status": "ok", "fingerprint": ...}
    GET  /model             -> {"config": {...}, "fingerprint": ...}
    POST /prompts           -> prompt-set file JSON -> {"prompt_id": ...}
    POST /encode            -> EncodeRequest -> EncodeResponse

EncodeRequest: exactly one of {"prompt_id", "inline_prompt"}; exactly one
of {"text", "token_ids"}; optional "role" in {"query", "passage"} (default
"query") and "precision" in {"f32", "f64"} (default "f32"). The response
vector is a JSON number array at the requested precision; with
``Accept: application/octet-stream`` the body is instead the raw
little-endian float32 array and metadata moves into response headers.

Errors are JSON {"code", "message", "detail"} with 4xx status codes.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
import time
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import encode_states, prefix_kv
from .prompts import promptset_from_json
from .tokenizer import CLS_ID

log = logging.getLogger(__name__)


class ServiceError(Exception):
    def __init__(self, status, code, message, detail=None):
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail or {}
        super().__init__(message)

    def to_body(self):
        return {"code": self.code, "message": self.message, "detail": self.detail}


@dataclass
class PromptRegistryEntry:
    prompt_id: str
    task_name: str
    promptset: object
    prefix_by_role: dict  # role -> [(K ndarray, V ndarray)] per layer
    created_at: float


def _project_prefix(model, promptset):
    """Precompute prefix K/V arrays per role through the frozen weights.

    Runs the exact computation the in-process encoder performs, so encode
    results agree bitwise with the library path.
    """
    out = {}
    if promptset.prompt_length == 0:
        return {role: None for role in promptset.roles}
    for role in promptset.roles:
        pairs = prefix_kv(model, promptset.realize(role))
        out[role] = [(k.data, v.data) for k, v in pairs]
    return out


class EncodingService:
    """Request handling core, independent of the HTTP transport."""

    def __init__(self, model):
        model.set_trainable(False)
        self.model = model
        self.fingerprint = model.fingerprint()
        self._registry = {}
        self._ids = itertools.count()
        self._lock = threading.Lock()

    # -- prompt registration -------------------------------------------------

    def _validate_dims(self, ps):
        cfg = self.model.config
        if ps.hidden_size != cfg.hidden_size:
            raise ServiceError(
                400, "dimension_mismatch", "prompt hidden size mismatch",
                {"field": "d", "expected": cfg.hidden_size, "actual": ps.hidden_size},
            )
        if ps.num_layers != cfg.num_layers:
            raise ServiceError(
                400, "dimension_mismatch", "prompt layer count mismatch",
                {"field": "L", "expected": cfg.num_layers, "actual": ps.num_layers},
            )
        # a checkpoint with prompt_length=0 accepts any prompt length;
        # a nonzero value pins the expected geometry (empty prompts pass)
        if cfg.prompt_length and ps.prompt_length not in (0, cfg.prompt_length):
            raise ServiceError(
                400, "dimension_mismatch", "prompt length mismatch",
                {"field": "l", "expected": cfg.prompt_length, "actual": ps.prompt_length},
            )

    def register(self, doc):
        try:
            ps = promptset_from_json(doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise ServiceError(400, "bad_promptset", f"invalid prompt set: {exc}")
        self._validate_dims(ps)
        prefix_by_role = _project_prefix(self.model, ps)
        with self._lock:
            prompt_id = f"prompt-{next(self._ids):04d}"
            self._registry[prompt_id] = PromptRegistryEntry(
                prompt_id=prompt_id,
                task_name=ps.task_name,
                promptset=ps,
                prefix_by_role=prefix_by_role,
                created_at=time.time(),
            )
        return prompt_id

    def registry_entry(self, prompt_id):
        entry = self._registry.get(prompt_id)
        if entry is None:
            raise ServiceError(404, "unknown_prompt", f"no prompt {prompt_id!r}")
        return entry

    # -- encoding -------------------------------------------------------------

    def _resolve_prefix(self, request):
        has_id = "prompt_id" in request
        has_inline = "inline_prompt" in request
        if has_id == has_inline:
            raise ServiceError(
                400, "bad_request",
                "request must carry exactly one of prompt_id / inline_prompt",
            )
        role = request.get("role", "query")
        if role not in ("query", "passage"):
            raise ServiceError(400, "bad_request", f"unknown role {role!r}")
        if has_id:
            entry = self.registry_entry(request["prompt_id"])
            ps = entry.promptset
            prefix = entry.prefix_by_role[ps.resolve_role(role)]
        else:
            prompt_id = None
            try:
                ps = promptset_from_json(request["inline_prompt"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ServiceError(400, "bad_promptset", f"invalid prompt set: {exc}")
            cfg = self.model.config
            if ps.hidden_size != cfg.hidden_size or ps.num_layers != cfg.num_layers:
                raise ServiceError(400, "dimension_mismatch",
                                   "inline prompt does not match the backbone")
            prefix = _project_prefix(self.model, ps)[ps.resolve_role(role)]
        return prefix

    def _resolve_tokens(self, request):
        has_text = "text" in request
        has_ids = "token_ids" in request
        if has_text == has_ids:
            raise ServiceError(
                400, "bad_request",
                "request must carry exactly one of text / token_ids",
            )
        cfg = self.model.config
        if has_text:
            return self.model.vocab.encode(request["text"], max_len=cfg.max_seq_len)
        ids = request["token_ids"]
        if not isinstance(ids, list) or not ids or ids[0] != CLS_ID:
            raise ServiceError(400, "bad_request", "token_ids must begin with [CLS]")
        if len(ids) > cfg.max_seq_len:
            raise ServiceError(
                400, "sequence_too_long",
                f"sequence length {len(ids)} exceeds {cfg.max_seq_len}",
            )
        bad = [i for i in ids if not isinstance(i, int) or i < 0 or i >= cfg.vocab_size]
        if bad:
            raise ServiceError(400, "unknown_token", f"unknown token id {bad[0]}")
        return ids

    def encode_vector(self, request):
        """The d-dim float64 vector for an EncodeRequest dict."""
        prefix_np = self._resolve_prefix(request)
        ids = self._resolve_tokens(request)
        prefix = None
        if prefix_np is not None:
            prefix = [(Tensor(k), Tensor(v)) for k, v in prefix_np]
        states = encode_states(self.model, ids, prefix=prefix)
        return states.data[0].copy()

    def encode_response(self, request):
        start = time.perf_counter()
        vec = self.encode_vector(request)
        precision = request.get("precision", "f32")
        if precision == "f64":
            numbers = [float(x) for x in vec]
        elif precision == "f32":
            numbers = [float(np.float32(x)) for x in vec]
        else:
            raise ServiceError(400, "bad_request", f"unknown precision {precision!r}")
        return {
            "vector": numbers,
            "fingerprint": self.fingerprint,
            "timing_ms": (time.perf_counter() - start) * 1e3,
        }

    def encode_binary(self, request):
        start = time.perf_counter()
        vec = self.encode_vector(request)
        body = np.ascontiguousarray(vec, dtype="<f4").tobytes()
        timing = (time.perf_counter() - start) * 1e3
        return body, timing


# ---------------------------------------------------------------------------
# HTTP transport
# ---------------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self):
        return self.server.service

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status, obj, extra_headers=None):
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for key, value in (extra_headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_service_error(self, err):
        self._send_json(err.status, err.to_body())

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ServiceError(400, "bad_request", f"body is not valid JSON: {exc}")

    def do_GET(self):
        if self.path == "/health":
            self._send_json(200, {"status": "ok", "fingerprint": self.service.fingerprint})
        elif self.path == "/model":
            self._send_json(200, {
                "config": self.service.model.config.to_dict(),
                "fingerprint": self.service.fingerprint,
            })
        else:
            self._send_json(404, {"code": "not_found", "message": self.path,
                                  "detail": {}})

    def do_POST(self):
        try:
            request = self._read_json()
            if self.path == "/prompts":
                prompt_id = self.service.register(request)
                self._send_json(200, {"prompt_id": prompt_id})
            elif self.path == "/encode":
                accept = self.headers.get("Accept", "")
                if "application/octet-stream" in accept:
                    body, timing = self.service.encode_binary(request)
                    self.send_response(200)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(body)))
                    self.send_header("X-Model-Fingerprint", self.service.fingerprint)
                    self.send_header("X-Timing-Ms", f"{timing:.3f}")
                    self.end_headers()
                    self.wfile.write(body)
                else:
                    self._send_json(200, self.service.encode_response(request))
            else:
                self._send_json(404, {"code": "not_found", "message": self.path,
                                      "detail": {}})
        except ServiceError as err:
            self._send_service_error(err)
        except Exception as exc:  # defensive: never drop the connection silently
            log.exception("unhandled error")
            self._send_json(500, {"code": "internal_error", "message": str(exc),
                                  "detail": {}})


def make_server(model, host="127.0.0.1", port=0):
    """Threaded HTTP server bound to host:port (0 picks a free port)."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    server.service = EncodingService(model)
    return server


def serve(model, host="127.0.0.1", port=8080):
    """Run the service until interrupted."""
    server = make_server(model, host, port)
    log.info("serving on %s:%d (fingerprint %s)",
             host, server.server_address[1], server.service.fingerprint[:12])
    try:
        server.serve_forever()
    finally:
        server.server_close()


class running_server:
    """Context manager: serve `model` on a background thread."""

    def __init__(self, model, host="127.0.0.1", port=0):
        self.server = make_server(model, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        addr, bound_port = self.server.server_address
        self.base_url = f"http://{addr}:{bound_port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc_info):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)
        return False


# -- tiny client helpers (used by the CLI and tests) -------------------------


def post_json(url, obj, headers=None, timeout=30):
    data = json.dumps(obj).encode("utf-8")
    req = urllib.request.Request(url, data=data, method="POST")
    req.add_header("Content-Type", "application/json")
    for key, value in (headers or {}).items():
        req.add_header(key, value)
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        body = resp.read()
        if resp.headers.get("Content-Type") == "application/octet-stream":
            return body, dict(resp.headers)
        return json.loads(body.decode("utf-8")), dict(resp.headers)


def get_json(url, timeout=30):
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))
