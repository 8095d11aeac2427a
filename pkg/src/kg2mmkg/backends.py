"""Clients for the four external model services, plus deterministic mocks.

One JSON-over-HTTP protocol covers text-to-image generation, reward
scoring, image/text embedding, and LLM completion, so any real model can
sit behind a thin sidecar.  The mock implementations are pure functions
of (inputs, mock seed) and produce real decodable PNGs, which keeps full
pipeline runs offline and bit-reproducible.

Wire protocol (all POST, JSON):
    /generate {prompt, seed, width, height} -> {image_b64, model_info}
    /score    {text, image_b64}             -> {score}
    /embed    {image_b64} or {text}         -> {vector, dim}
    /complete {instruction}                 -> {text}
Errors: HTTP status + {error, detail}.
"""

from __future__ import annotations

import base64
import hashlib
import io
import math
import re
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

KINDS = ("t2i", "reward", "embed", "llm")


class BackendError(Exception):
    """Backend unreachable or persistently failing."""


class BackendProtocolError(BackendError):
    """Reply arrived but does not match the wire protocol."""


@dataclass(frozen=True)
class BackendEndpoint:
    kind: str                      # one of KINDS, or "mock-<kind>"
    base_url: str | None = None
    mock_seed: int = 0
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    retry_backoff: float = 0.5
    positive_rate: float = 0.5     # mock reward only
    embed_dim: int = 64            # mock embed only

    def __post_init__(self):
        base = self.kind.removeprefix("mock-")
        if base not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if not self.is_mock and not self.base_url:
            raise ValueError(f"{self.kind}: base_url required for HTTP backends")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.kind.startswith("mock-")

    @property
    def base_kind(self) -> str:
        return self.kind.removeprefix("mock-")


@dataclass(frozen=True)
class ImageArtifact:
    data: bytes
    width: int
    height: int
    sha256: str
    seed: int
    prompt_hash: str

    @classmethod
    def from_png(cls, data: bytes, seed: int, prompt: str) -> "ImageArtifact":
        try:
            with Image.open(io.BytesIO(data)) as im:
                im.verify()
            with Image.open(io.BytesIO(data)) as im:
                width, height = im.size
        except Exception as exc:
            raise BackendProtocolError(f"undecodable image payload: {exc}") from exc
        return cls(
            data=data,
            width=width,
            height=height,
            sha256=hashlib.sha256(data).hexdigest(),
            seed=seed,
            prompt_hash=hashlib.sha256(prompt.encode()).hexdigest(),
        )


def _digest_u64(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


def _unit_interval(*parts: str) -> float:
    # open interval (0, 1): keeps sign rules exact at rate 0 and 1
    return (_digest_u64(*parts) + 0.5) / 2.0 ** 64


class _HttpCaller:
    """Shared POST-with-retries plumbing; per-endpoint in-flight semaphore."""

    def __init__(self, endpoint: BackendEndpoint):
        self.endpoint = endpoint
        self._session = requests.Session()
        self._gate = threading.BoundedSemaphore(endpoint.max_in_flight)

    def post(self, route: str, payload: dict) -> dict:
        ep = self.endpoint
        url = ep.base_url.rstrip("/") + route
        last_error: Exception | None = None
        for attempt in range(1 + ep.max_retries):
            if attempt:
                time.sleep(ep.retry_backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._session.post(url, json=payload, timeout=ep.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = BackendError(f"{url}: server error {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{url}: request rejected with {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendProtocolError(f"{url}: non-JSON reply") from exc
        raise BackendError(f"{url}: failed after {1 + ep.max_retries} attempts: {last_error}")


class HttpTextToImage:
    def __init__(self, endpoint: BackendEndpoint):
        self._caller = _HttpCaller(endpoint)

    def generate(self, prompt: str, seed: int, size: tuple[int, int] = (512, 512)) -> ImageArtifact:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        reply = self._caller.post(
            "/generate", {"prompt": prompt, "seed": seed, "width": size[0], "height": size[1]}
        )
        try:
            data = base64.b64decode(reply["image_b64"])
        except (KeyError, ValueError) as exc:
            raise BackendProtocolError(f"malformed /generate reply: {exc}") from exc
        return ImageArtifact.from_png(data, seed=seed, prompt=prompt)


class HttpReward:
    def __init__(self, endpoint: BackendEndpoint):
        self._caller = _HttpCaller(endpoint)

    def score(self, text: str, image: ImageArtifact) -> float:
        reply = self._caller.post(
            "/score", {"text": text, "image_b64": base64.b64encode(image.data).decode("ascii")}
        )
        try:
            return float(reply["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendProtocolError(f"malformed /score reply: {exc}") from exc


class HttpEmbedder:
    def __init__(self, endpoint: BackendEndpoint):
        self._caller = _HttpCaller(endpoint)

    def _vector(self, reply: dict) -> np.ndarray:
        try:
            vec = np.asarray(reply["vector"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise BackendProtocolError(f"malformed /embed reply: {exc}") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise BackendProtocolError("embed vector must be 1-D and non-empty")
        return _normalize(vec)

    def embed_image(self, image: ImageArtifact) -> np.ndarray:
        return self._vector(
            self._caller.post("/embed", {"image_b64": base64.b64encode(image.data).decode("ascii")})
        )

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(self._caller.post("/embed", {"text": text}))


class HttpLlm:
    def __init__(self, endpoint: BackendEndpoint):
        self._caller = _HttpCaller(endpoint)

    def complete(self, instruction: str) -> str:
        reply = self._caller.post("/complete", {"instruction": instruction})
        try:
            return str(reply["text"])
        except KeyError as exc:
            raise BackendProtocolError("malformed /complete reply: missing text") from exc


def _normalize(vec: np.ndarray) -> np.ndarray:
    # client-side normalization; servers are not trusted to return unit norm
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        raise BackendProtocolError("embed backend returned a zero vector")
    return vec / norm


class MockTextToImage:
    """Procedural color-field PNGs keyed by hash(prompt, seed)."""

    def __init__(self, endpoint: BackendEndpoint):
        self.mock_seed = endpoint.mock_seed

    def generate(self, prompt: str, seed: int, size: tuple[int, int] = (512, 512)) -> ImageArtifact:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        width, height = size
        digest = hashlib.sha256(f"{self.mock_seed}|{seed}|{prompt}".encode()).digest()
        c0 = np.frombuffer(digest[0:3], dtype=np.uint8).astype(np.float64)
        c1 = np.frombuffer(digest[3:6], dtype=np.uint8).astype(np.float64)
        freq = 1 + digest[6] % 7
        phase = digest[7] / 255.0 * 2.0 * math.pi
        yy, xx = np.meshgrid(np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij")
        blend = (xx + yy) / 2.0
        stripes = 0.75 + 0.25 * np.sin(2.0 * math.pi * freq * (xx - yy) + phase)
        rgb = (c0[None, None, :] * (1.0 - blend[..., None]) + c1[None, None, :] * blend[..., None])
        arr = np.clip(rgb * stripes[..., None], 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, "RGB").save(buf, format="PNG")
        return ImageArtifact.from_png(buf.getvalue(), seed=seed, prompt=prompt)


class MockReward:
    """Signed score from hash(text); positive with the configured rate."""

    def __init__(self, endpoint: BackendEndpoint):
        self.mock_seed = endpoint.mock_seed
        self.positive_rate = endpoint.positive_rate

    def score(self, text: str, image: ImageArtifact) -> float:
        return self.positive_rate - _unit_interval("reward", str(self.mock_seed), text)


class MockEmbedder:
    """Hash-seeded Gaussian vectors; identical content, identical vector."""

    def __init__(self, endpoint: BackendEndpoint):
        self.mock_seed = endpoint.mock_seed
        self.dim = endpoint.embed_dim

    def _embed(self, tag: str, content: bytes) -> np.ndarray:
        digest = hashlib.sha256(f"{tag}|{self.mock_seed}|".encode() + content).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return _normalize(rng.standard_normal(self.dim))

    def embed_image(self, image: ImageArtifact) -> np.ndarray:
        return self._embed("img", image.data)

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed("txt", text.encode())


class MockLlm:
    """Canned expansion of the instruction; no external knowledge."""

    def __init__(self, endpoint: BackendEndpoint):
        self.mock_seed = endpoint.mock_seed

    def complete(self, instruction: str) -> str:
        subject = None
        match = re.search(r'"([^"]+)"', instruction)
        if match:
            subject = match.group(1)
        facts = re.findall(r"^- (.+)$", instruction, flags=re.MULTILINE)
        if subject is None:
            return instruction.strip()
        if facts:
            return f"A detailed photo of {subject}, {'; '.join(facts)}, in natural light."
        return f"A detailed photo of {subject}, in natural light."


_CLIENTS = {
    ("t2i", False): HttpTextToImage,
    ("reward", False): HttpReward,
    ("embed", False): HttpEmbedder,
    ("llm", False): HttpLlm,
    ("t2i", True): MockTextToImage,
    ("reward", True): MockReward,
    ("embed", True): MockEmbedder,
    ("llm", True): MockLlm,
}


def build_backend(endpoint: BackendEndpoint):
    """Instantiate the client (HTTP or mock) for an endpoint description."""
    return _CLIENTS[(endpoint.base_kind, endpoint.is_mock)](endpoint)
