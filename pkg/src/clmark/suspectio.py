"""Uniform access to suspect models: in-process or remote over HTTP JSON.

Wire protocol: HTTP/1.1, JSON bodies, UTF-8.
POST /query  {"level": "feature"|"soft"|"hard",
              "images": [{"h": int, "w": int, "c": int,
                          "data": [float...] row-major, values in [0,1]}]}
          -> {"vectors": [[float...]...], "dim": int}
GET /capabilities -> {"levels": [str...], "dim": int}
Floats are serialized with 9 significant digits.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from clmark.cltrain import EncoderModel, encode_batch
from clmark.downstream import LinearProbe, _softmax
from clmark.errors import (
    CapabilityError,
    InvalidInputError,
    ProtocolError,
    TransportError,
)
from clmark.imagecore import ImageTensor
from clmark.verify import LEVEL_FEATURE, LEVEL_HARD, LEVEL_SOFT, LEVELS, OutputBatch

DEFAULT_MAX_BATCH = 256
RETRY_COUNT = 2  # transient-failure retries per HTTP request


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


def _vectors_to_wire(vectors: np.ndarray) -> list[list[float]]:
    return [[_round9(float(v)) for v in row] for row in vectors]


def _model_outputs(encoder: EncoderModel, probe: LinearProbe | None, batch: np.ndarray, level: str) -> np.ndarray:
    feats = encode_batch(encoder, batch)
    if level == LEVEL_FEATURE:
        return feats
    if probe is None:
        raise CapabilityError(f"level {level!r} requires a probe, none loaded")
    logits = feats @ probe.weights + probe.bias
    soft = _softmax(logits)
    if level == LEVEL_SOFT:
        return soft
    onehot = np.zeros_like(soft)
    onehot[np.arange(soft.shape[0]), np.argmax(soft, axis=1)] = 1.0
    return onehot


class InProcessSuspect:
    """Suspect backed by models loaded in this process."""

    def __init__(self, encoder: EncoderModel, probe: LinearProbe | None = None):
        self.encoder = encoder
        self.probe = probe

    def capabilities(self) -> dict:
        levels = [LEVEL_FEATURE]
        if self.probe is not None:
            levels += [LEVEL_SOFT, LEVEL_HARD]
        return {"levels": levels, "dim": self.encoder.feature_dim}

    def query(self, images: list[ImageTensor], level: str) -> OutputBatch:
        if not images:
            raise InvalidInputError("query needs at least one image")
        if level not in LEVELS:
            raise InvalidInputError(f"unknown level {level!r}")
        if level != LEVEL_FEATURE and self.probe is None:
            raise CapabilityError(f"suspect does not support level {level!r}")
        batch = np.stack([img.flat() for img in images])
        return OutputBatch(level, _model_outputs(self.encoder, self.probe, batch, level))


class RemoteSuspect:
    """Suspect reached over the HTTP JSON protocol."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        max_batch: int = DEFAULT_MAX_BATCH,
        session: requests.Session | None = None,
    ):
        if timeout <= 0:
            raise InvalidInputError("timeout must be > 0")
        if not base_url.startswith(("http://", "https://")):
            raise InvalidInputError(f"malformed suspect URL {base_url!r}")
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_batch = max_batch
        self.session = session or requests.Session()

    def capabilities(self) -> dict:
        doc = self._request("GET", "/capabilities")
        if "levels" not in doc:
            raise ProtocolError("capabilities response missing 'levels'")
        return doc

    def query(self, images: list[ImageTensor], level: str) -> OutputBatch:
        if not images:
            raise InvalidInputError("query needs at least one image")
        if level not in LEVELS:
            raise InvalidInputError(f"unknown level {level!r}")
        caps = self.capabilities()
        if level not in caps["levels"]:
            raise CapabilityError(f"suspect does not support level {level!r}")
        vectors: list[list[float]] = []
        dim = None
        for start in range(0, len(images), self.max_batch):
            chunk = images[start : start + self.max_batch]
            payload = {
                "level": level,
                "images": [
                    {
                        "h": img.height,
                        "w": img.width,
                        "c": img.channels,
                        "data": [_round9(v) for v in img.flat()],
                    }
                    for img in chunk
                ],
            }
            doc = self._request("POST", "/query", payload)
            vecs = doc.get("vectors")
            if not isinstance(vecs, list) or len(vecs) != len(chunk):
                raise ProtocolError(
                    f"expected {len(chunk)} vectors, got {len(vecs) if isinstance(vecs, list) else type(vecs)}"
                )
            if dim is None:
                dim = doc.get("dim")
            elif doc.get("dim") != dim:
                raise ProtocolError("output dimension drifted across responses")
            for v in vecs:
                if len(v) != dim:
                    raise ProtocolError("vector length does not match advertised dim")
            vectors.extend(vecs)
        return OutputBatch(level, np.array(vectors, dtype=np.float64))

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = self.base_url + path
        last_exc: Exception | None = None
        for _attempt in range(1 + RETRY_COUNT):
            try:
                if method == "GET":
                    resp = self.session.get(url, timeout=self.timeout)
                else:
                    resp = self.session.post(url, json=payload, timeout=self.timeout)
            except requests.Timeout as exc:
                raise TransportError(f"timeout querying {url}") from exc
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"{url} returned {resp.status_code}")
                continue
            if resp.status_code == 413:
                raise ProtocolError(f"{url}: batch exceeds server limit")
            if resp.status_code == 400:
                raise CapabilityError(f"{url}: {resp.text.strip()}")
            if resp.status_code != 200:
                raise ProtocolError(f"{url} returned {resp.status_code}: {resp.text.strip()}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url}: malformed JSON response") from exc
        raise TransportError(f"{url}: failed after {1 + RETRY_COUNT} attempts: {last_exc}")


def open_suspect(spec: str, probe_path: str | None = None, timeout: float = 30.0):
    """Open a suspect handle from a URL or an encoder model file path."""
    if spec.startswith(("http://", "https://")):
        return RemoteSuspect(spec, timeout=timeout)
    from clmark.modelio import load_encoder, load_probe

    encoder = load_encoder(spec)
    probe = load_probe(probe_path) if probe_path else None
    return InProcessSuspect(encoder, probe)


@dataclass
class SuspectServer:
    """A running reference suspect server."""

    httpd: ThreadingHTTPServer
    thread: threading.Thread

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)


def _make_handler(encoder: EncoderModel, probe: LinearProbe | None, max_batch: int):
    levels = [LEVEL_FEATURE] + ([LEVEL_SOFT, LEVEL_HARD] if probe is not None else [])

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send_json(self, status: int, doc: dict):
            body = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path != "/capabilities":
                self._send_json(404, {"error": "not found"})
                return
            self._send_json(200, {"levels": levels, "dim": encoder.feature_dim})

        def do_POST(self):
            if self.path != "/query":
                self._send_json(404, {"error": "not found"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length).decode("utf-8"))
                level = doc["level"]
                images = doc["images"]
            except (ValueError, KeyError) as exc:
                self._send_json(400, {"error": f"malformed request: {exc}"})
                return
            if level not in levels:
                self._send_json(400, {"error": f"level {level!r} unsupported"})
                return
            if len(images) > max_batch:
                self._send_json(413, {"error": f"batch exceeds max {max_batch}"})
                return
            if not images:
                self._send_json(400, {"error": "empty image list"})
                return
            try:
                batch = np.stack(
                    [
                        np.clip(
                            np.asarray(im["data"], dtype=np.float64), 0.0, 1.0
                        ).reshape(im["h"] * im["w"] * im["c"])
                        for im in images
                    ]
                )
                outputs = _model_outputs(encoder, probe, batch, level)
            except (KeyError, ValueError, InvalidInputError) as exc:
                self._send_json(400, {"error": str(exc)})
                return
            self._send_json(
                200, {"vectors": _vectors_to_wire(outputs), "dim": int(outputs.shape[1])}
            )

    return Handler


def serve(
    encoder_path: str,
    probe_path: str | None = None,
    bind: tuple[str, int] = ("127.0.0.1", 0),
    max_batch: int = DEFAULT_MAX_BATCH,
) -> SuspectServer:
    """Start the reference suspect server in a background thread."""
    from clmark.modelio import load_encoder, load_probe

    encoder = load_encoder(encoder_path)
    probe = load_probe(probe_path) if probe_path else None
    handler = _make_handler(encoder, probe, max_batch)
    try:
        httpd = ThreadingHTTPServer(bind, handler)
    except OSError as exc:
        raise TransportError(f"cannot bind {bind}: {exc}") from exc
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return SuspectServer(httpd, thread)
