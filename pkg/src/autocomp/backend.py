"""Wire protocol, client, cache, and scriptable mocks for model backends.

Five capabilities cover every model role in the pipeline: text generation
(caption LLM), image generation, open-vocabulary detection, constrained VQA,
and embeddings. A request is content-addressed: its ``request_id`` is a hash
of the canonicalized payload, which makes responses cacheable and mock
scripts replayable across processes.

Over HTTP the endpoints are ``/v1/text``, ``/v1/image``, ``/v1/detect``,
``/v1/vqa``, and ``/v1/embed``; bodies carry ``request_id``, ``payload``,
and ``protocol_version``. Image bytes travel base64-inline on the wire but
are stored to disk by the client, so payloads and manifests only ever hold
file paths. Binary inputs (the image a detect/VQA request refers to) ride in
a transport-only ``attachments`` field that is excluded from hashing.
"""

from __future__ import annotations

import base64
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Mapping

from .errors import (
    BackendUnavailable,
    MalformedScript,
    MockMiss,
    ProtocolViolation,
)

PROTOCOL_VERSION = "1"

_DIGEST_HEX_LEN = 32


class Capability(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    DETECT = "detect"
    VQA = "vqa"
    EMBED = "embed"


ENDPOINTS = {capability: f"/v1/{capability.value}" for capability in Capability}

# Default sampling / inference / detection parameters; all overridable per
# request and echoed explicitly in payloads so request hashing is stable.
TEXT_DEFAULTS = {"temperature": 0.7, "top_p": 0.9, "max_tokens": 150}
IMAGE_DEFAULTS = {"width": 1024, "height": 1024, "steps": 28, "guidance": 4.5}
DETECT_DEFAULTS = {"box_threshold": 0.4, "text_threshold": 0.3}

_RESULT_KEYS = {
    Capability.TEXT: ("text",),
    Capability.IMAGE: ("image_path", "image_b64"),
    Capability.DETECT: ("detections",),
    Capability.VQA: ("answer",),
    Capability.EMBED: ("vectors",),
}


@dataclass(frozen=True)
class BackendRequest:
    capability: Capability
    payload: dict[str, Any]
    request_id: str
    attachments: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_wire(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "request_id": self.request_id,
            "payload": self.payload,
            "protocol_version": PROTOCOL_VERSION,
        }
        if self.attachments:
            doc["attachments"] = self.attachments
        return doc

    @classmethod
    def from_wire(cls, capability: Capability, doc: Mapping[str, Any]) -> "BackendRequest":
        payload = dict(doc["payload"])
        request = make_request(capability, payload)
        if doc.get("request_id") and doc["request_id"] != request.request_id:
            raise ProtocolViolation(
                f"request_id {doc['request_id']!r} does not hash from the payload"
            )
        return BackendRequest(
            capability=capability,
            payload=payload,
            request_id=request.request_id,
            attachments=dict(doc.get("attachments", {})),
        )


@dataclass(frozen=True)
class BackendResponse:
    request_id: str
    capability: Capability
    result: dict[str, Any]
    model_id: str
    latency_ms: float = 0.0

    def to_wire(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "capability": self.capability.value,
            "result": self.result,
            "model_id": self.model_id,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_wire(cls, doc: Mapping[str, Any]) -> "BackendResponse":
        try:
            response = cls(
                request_id=doc["request_id"],
                capability=Capability(doc["capability"]),
                result=dict(doc["result"]),
                model_id=doc["model_id"],
                latency_ms=float(doc.get("latency_ms", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolation(f"malformed response: {exc}") from exc
        validate_response(response)
        return response


def validate_response(response: BackendResponse) -> None:
    keys = _RESULT_KEYS[response.capability]
    if not any(key in response.result for key in keys):
        raise ProtocolViolation(
            f"{response.capability.value} result lacks {' or '.join(keys)}: "
            f"{sorted(response.result)}"
        )


def canonical_payload(payload: Mapping[str, Any]) -> str:
    """Canonical JSON for hashing: sorted keys, normalized floats.

    Float values are normalized through ``repr`` of the parsed float, so
    4.5 and 4.50 hash identically; NaN and infinities are rejected.
    """

    def normalize(value: Any) -> Any:
        if isinstance(value, float):
            if not math.isfinite(value):
                raise ValueError("payload floats must be finite")
            return value
        if isinstance(value, Mapping):
            return {str(k): normalize(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [normalize(v) for v in value]
        return value

    return json.dumps(normalize(dict(payload)), sort_keys=True, separators=(",", ":"))


def cache_key(capability: Capability, payload: Mapping[str, Any]) -> str:
    import hashlib

    canon = canonical_payload(payload)
    digest = hashlib.sha256(f"{capability.value}\n{canon}".encode("utf-8"))
    return digest.hexdigest()[:_DIGEST_HEX_LEN]


def make_request(
    capability: Capability,
    payload: Mapping[str, Any],
    attachments: Mapping[str, Any] | None = None,
) -> BackendRequest:
    payload = dict(payload)
    return BackendRequest(
        capability=capability,
        payload=payload,
        request_id=cache_key(capability, payload),
        attachments=dict(attachments or {}),
    )


def build_text_request(
    system: str, user: str, overrides: Mapping[str, Any] | None = None
) -> BackendRequest:
    payload = {"system": system, "user": user, **TEXT_DEFAULTS, **(overrides or {})}
    return make_request(Capability.TEXT, payload)


def build_image_request(
    caption: str, overrides: Mapping[str, Any] | None = None
) -> BackendRequest:
    payload = {"caption": caption, **IMAGE_DEFAULTS, **(overrides or {})}
    return make_request(Capability.IMAGE, payload)


def build_detect_request(
    image_path: str,
    labels: list[str],
    overrides: Mapping[str, Any] | None = None,
) -> BackendRequest:
    payload = {
        "image_path": image_path,
        "labels": list(labels),
        **DETECT_DEFAULTS,
        **(overrides or {}),
    }
    return make_request(Capability.DETECT, payload)


def build_vqa_request(
    image_path: str, question: str, allowed_answers: list[str]
) -> BackendRequest:
    payload = {
        "image_path": image_path,
        "question": question,
        "allowed_answers": list(allowed_answers),
    }
    return make_request(Capability.VQA, payload)


def build_embed_request(
    texts: list[str] | None = None, image_path: str | None = None
) -> BackendRequest:
    payload: dict[str, Any] = {}
    if texts is not None:
        payload["texts"] = list(texts)
    if image_path is not None:
        payload["image_path"] = image_path
    if not payload:
        raise ValueError("embed request needs texts or an image path")
    return make_request(Capability.EMBED, payload)


def protocol_schema() -> dict[str, Any]:
    """The shared JSON Schema for wire requests and responses."""
    text = resources.files("autocomp.assets").joinpath("protocol.schema.json").read_text("utf-8")
    return json.loads(text)


# ----------------------------------------------------------------------
# cache


class ResponseCache:
    """Content-addressed response cache.

    Layout: ``<root>/<capability>/<request_id>`` holds the response JSON and
    ``<request_id>.meta`` a small metadata sidecar. Image responses
    additionally store the PNG next to the response as
    ``<request_id>.png``. Writes are atomic (tmp + rename), so concurrent
    readers never observe partial entries.
    """

    def __init__(self, root: str):
        self.root = root

    def _path(self, capability: Capability, request_id: str) -> str:
        return os.path.join(self.root, capability.value, request_id)

    def get(self, request: BackendRequest) -> BackendResponse | None:
        path = self._path(request.capability, request.request_id)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as handle:
            return BackendResponse.from_wire(json.load(handle))

    def put(self, response: BackendResponse) -> None:
        path = self._path(response.capability, response.request_id)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        _atomic_write(path, json.dumps(response.to_wire(), sort_keys=True))
        meta = {
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "capability": response.capability.value,
            "model_id": response.model_id,
        }
        _atomic_write(path + ".meta", json.dumps(meta, sort_keys=True))

    def image_path(self, request_id: str) -> str:
        return self._path(Capability.IMAGE, request_id) + ".png"

    def store_image_bytes(self, request_id: str, data: bytes) -> str:
        path = self.image_path(request_id)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
        return path


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


class CachingBackend:
    """Wraps any backend handle with a read-through response cache.

    The cache changes call counts, never observable results.
    """

    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.remote_calls = 0

    def call(self, request: BackendRequest) -> BackendResponse:
        cached = self.cache.get(request)
        if cached is not None:
            return cached
        response = self.inner.call(request)
        self.remote_calls += 1
        self.cache.put(response)
        return response


# ----------------------------------------------------------------------
# HTTP client


class HttpBackend:
    """Client for a remote backend speaking the /v1/* protocol."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def call(self, request: BackendRequest) -> BackendResponse:
        import requests

        body = request.to_wire()
        if request.capability in (Capability.DETECT, Capability.VQA):
            body.setdefault("attachments", {})
            if "image_b64" not in body["attachments"]:
                image_path = request.payload.get("image_path")
                if image_path and os.path.exists(image_path):
                    with open(image_path, "rb") as handle:
                        body["attachments"]["image_b64"] = base64.b64encode(
                            handle.read()
                        ).decode("ascii")
        url = self.base_url + ENDPOINTS[request.capability]
        try:
            http_response = requests.post(url, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnavailable(f"POST {url} failed: {exc}") from exc
        if http_response.status_code >= 500:
            raise BackendUnavailable(
                f"POST {url} -> {http_response.status_code}: {http_response.text[:200]}"
            )
        if http_response.status_code >= 400:
            raise ProtocolViolation(
                f"POST {url} -> {http_response.status_code}: {http_response.text[:200]}"
            )
        try:
            doc = http_response.json()
        except ValueError as exc:
            raise ProtocolViolation(f"non-JSON response from {url}") from exc
        response = BackendResponse.from_wire(doc)
        if response.request_id != request.request_id:
            raise ProtocolViolation("response request_id does not match request")
        return response


class ImageMaterializingBackend:
    """Converts inline image bytes in responses into local file paths."""

    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache

    def call(self, request: BackendRequest) -> BackendResponse:
        response = self.inner.call(request)
        if response.capability is Capability.IMAGE and "image_b64" in response.result:
            data = base64.b64decode(response.result["image_b64"])
            path = self.cache.store_image_bytes(response.request_id, data)
            result = {
                k: v for k, v in response.result.items() if k != "image_b64"
            }
            result["image_path"] = path
            response = BackendResponse(
                request_id=response.request_id,
                capability=response.capability,
                result=result,
                model_id=response.model_id,
                latency_ms=response.latency_ms,
            )
        return response


# ----------------------------------------------------------------------
# mocks


def synthesize_image_bytes(spec: Mapping[str, Any]) -> bytes:
    """Render a tiny PNG from a declarative fixture spec.

    ``{"size": [W, H], "background": [r, g, b], "rects": [{"xy": [x0, y0,
    x1, y1], "color": [r, g, b]}]}`` — rectangles use normalized
    coordinates. Enough to script every background-check scenario.
    """
    from PIL import Image, ImageDraw

    width, height = spec.get("size", [64, 64])
    background = tuple(spec.get("background", [255, 255, 255]))
    image = Image.new("RGB", (width, height), background)
    draw = ImageDraw.Draw(image)
    for rect in spec.get("rects", []):
        x0, y0, x1, y1 = rect["xy"]
        draw.rectangle(
            [
                round(x0 * width),
                round(y0 * height),
                round(x1 * width) - 1,
                round(y1 * height) - 1,
            ],
            fill=tuple(rect["color"]),
        )
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return buffer.getvalue()


class MockBackend:
    """Deterministic scripted backend satisfying the remote contract.

    Keyed mode matches fixtures by ``request_id`` or by payload conditions
    and never consumes them (safe for concurrent use); ordered mode replays
    fixtures FIFO per capability and is single-consumer. Unmatched requests
    raise :class:`MockMiss`.
    """

    def __init__(self, script: Mapping[str, Any], artifact_dir: str | None = None):
        if not isinstance(script, Mapping) or "fixtures" not in script:
            raise MalformedScript("script must be a mapping with a fixtures list")
        self.mode = script.get("mode", "keyed")
        if self.mode not in ("keyed", "ordered"):
            raise MalformedScript(f"unknown script mode {self.mode!r}")
        self.artifact_dir = artifact_dir
        self.calls = 0
        self._fixtures: list[dict[str, Any]] = []
        fixtures = script["fixtures"]
        if not isinstance(fixtures, list):
            raise MalformedScript("fixtures must be a list")
        for i, fixture in enumerate(fixtures):
            if "capability" not in fixture or "response" not in fixture:
                raise MalformedScript(f"fixture {i} needs capability and response")
            try:
                Capability(fixture["capability"])
            except ValueError as exc:
                raise MalformedScript(
                    f"fixture {i}: unknown capability {fixture['capability']!r}"
                ) from exc
            self._fixtures.append(dict(fixture))
        self._cursor: dict[Capability, int] = {c: 0 for c in Capability}

    def call(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        fixture = self._find(request)
        if fixture is None:
            raise MockMiss(
                f"no fixture for {request.capability.value} request "
                f"{request.request_id} (payload keys {sorted(request.payload)})"
            )
        return self._respond(request, fixture)

    def _find(self, request: BackendRequest) -> dict[str, Any] | None:
        if self.mode == "ordered":
            remaining = [
                f
                for f in self._fixtures
                if Capability(f["capability"]) is request.capability
            ]
            index = self._cursor[request.capability]
            if index >= len(remaining):
                return None
            self._cursor[request.capability] = index + 1
            fixture = remaining[index]
            if not _fixture_matches(fixture, request):
                return None
            return fixture
        for fixture in self._fixtures:
            if Capability(fixture["capability"]) is not request.capability:
                continue
            if _fixture_matches(fixture, request):
                return fixture
        return None

    def _respond(self, request: BackendRequest, fixture: Mapping[str, Any]) -> BackendResponse:
        spec = dict(fixture["response"])
        result = dict(spec.get("result", {}))
        if request.capability is Capability.IMAGE and "image_synth" in result:
            data = synthesize_image_bytes(result.pop("image_synth"))
            if self.artifact_dir is None:
                raise MalformedScript(
                    "image_synth fixtures need a MockBackend artifact_dir"
                )
            os.makedirs(self.artifact_dir, exist_ok=True)
            path = os.path.join(self.artifact_dir, request.request_id + ".png")
            if not os.path.exists(path):
                with open(path, "wb") as handle:
                    handle.write(data)
            result["image_path"] = path
        response = BackendResponse(
            request_id=request.request_id,
            capability=request.capability,
            result=result,
            model_id=spec.get("model_id", "mock"),
            latency_ms=float(spec.get("latency_ms", 0.0)),
        )
        validate_response(response)
        return response


def _fixture_matches(fixture: Mapping[str, Any], request: BackendRequest) -> bool:
    match = fixture.get("match")
    if not match:
        return True
    if "request_id" in match:
        return match["request_id"] == request.request_id
    for condition in match.get("conditions", []):
        value = request.payload.get(condition["field"])
        if "equals" in condition:
            if value != condition["equals"]:
                return False
        elif "contains" in condition:
            needle = condition["contains"]
            if isinstance(value, str):
                if needle not in value:
                    return False
            elif isinstance(value, (list, tuple)):
                if needle not in value:
                    return False
            else:
                return False
        else:
            raise MalformedScript(f"condition needs equals or contains: {condition}")
    return True


def load_mock_script(
    doc: Mapping[str, Any] | str, artifact_dir: str | None = None
) -> MockBackend:
    """Build a mock backend handle from a script document or file path."""
    if isinstance(doc, str):
        try:
            with open(doc, "r", encoding="utf-8") as handle:
                doc = json.load(handle)
        except (OSError, ValueError) as exc:
            raise MalformedScript(f"cannot load script {doc!r}: {exc}") from exc
    return MockBackend(doc, artifact_dir=artifact_dir)


def call_backend(endpoint, request: BackendRequest) -> BackendResponse:
    """Invoke a backend handle; alias kept close to the protocol vocabulary."""
    return endpoint.call(request)
