"""Client for the image-to-text generative service used while building a bag.

Wire contract (JSON over the injected transport)::

    request  = {"image": <base64 PNG> | null, "image_digest": <16 hex chars>,
                "prompt": <str>, "bbox": [x, y, w, h] | null}
    response = {"text": <str>}

When the box is drawn into the pixels (the default) ``bbox`` is null.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .encoders import ImagePatch, image_digest
from .errors import GenerationError, ServiceError, TransientServiceError
from .geometry import draw_box

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptTemplates:
    description: str = (
        "Describe the object inside the red box in detail: its shape, texture, colour "
        "and whatever distinguishes it from similar objects nearby."
    )
    task: str = (
        "Write {n} distinct, vivid phrases describing typical actions, traits or settings "
        "of a {cls}. Put one phrase per line."
    )
    concept: str = (
        "Given this description, name the category of the object in five words or fewer.\n"
        "Description: {description}"
    )
    regenerate: str = "{prompt}\n(Regeneration round {round}: stay close to what is visible.)"


class Transport(Protocol):
    def send(self, request: dict, timeout: float) -> dict: ...


def encode_png_base64(pixels: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(np.asarray(pixels) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class MockTransport:
    """Offline service: canned responses keyed by ``(image digest, prompt)``.

    Lookup order: explicit ``responses`` mapping, then ``<directory>/<digest>.json``,
    then ``<directory>/default.json`` (both map prompt -> text), then a fixed
    template filled with the image digest.
    """

    def __init__(self, directory: str | Path | None = None, responses: dict | None = None):
        self.directory = Path(directory) if directory is not None else None
        self.responses = dict(responses or {})
        self.calls = 0
        self._lock = threading.Lock()

    def _from_dir(self, name: str, prompt: str) -> str | None:
        if self.directory is None:
            return None
        path = self.directory / f"{name}.json"
        if not path.is_file():
            return None
        table = json.loads(path.read_text(encoding="utf-8"))
        return table.get(prompt)

    def send(self, request: dict, timeout: float) -> dict:
        with self._lock:
            self.calls += 1
        digest, prompt = request["image_digest"], request["prompt"]
        for key in ((digest, prompt), prompt):
            if key in self.responses:
                return {"text": self.responses[key]}
        text = self._from_dir(digest, prompt) or self._from_dir("default", prompt)
        if text is None:
            tag = hashlib.blake2b(prompt.encode(), digest_size=4).hexdigest()
            text = f"target object {digest} seen in frame, response {tag}"
        return {"text": text}


class HttpTransport:
    """POSTs the request JSON to ``endpoint`` and expects ``{"text": ...}`` back."""

    def __init__(self, endpoint: str, headers: dict | None = None):
        self.endpoint = endpoint
        self.headers = {"Content-Type": "application/json", **(headers or {})}

    def send(self, request: dict, timeout: float) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, headers=self.headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 429 or exc.code >= 500:
                raise TransientServiceError(f"HTTP {exc.code}") from exc
            raise ServiceError(f"HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransientServiceError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ServiceError("response is not JSON") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ServiceError("response lacks a 'text' string")
        return payload


@dataclass
class GenerativeClient:
    transport: Transport
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    timeout: float = 30.0
    max_retries: int = 3
    concurrency: int = 4
    backoff: float = 0.5
    draw_bbox: bool = True
    send_pixels: bool = True

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries counts attempts and must be >= 1")
        self._slots = threading.BoundedSemaphore(max(1, self.concurrency))

    def build_request(self, patch: ImagePatch, prompt: str) -> dict:
        pixels = patch.pixels
        bbox = None
        if patch.bbox is not None:
            if self.draw_bbox:
                pixels = draw_box(pixels, patch.bbox)
            else:
                bbox = list(patch.bbox.as_tuple())
        return {
            "image": encode_png_base64(pixels) if self.send_pixels else None,
            "image_digest": image_digest(pixels),
            "prompt": prompt,
            "bbox": bbox,
        }

    def generate(self, patch: ImagePatch, prompt: str) -> str:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        request = self.build_request(patch, prompt)
        for attempt in range(1, self.max_retries + 1):
            try:
                with self._slots:
                    response = self.transport.send(request, self.timeout)
                return response["text"]
            except TransientServiceError as exc:
                log.warning("generative request failed (attempt %d/%d): %s",
                            attempt, self.max_retries, exc)
                if attempt == self.max_retries:
                    raise GenerationError(f"service unavailable: {exc}", attempts=attempt) from exc
                if self.backoff > 0:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
            except ServiceError as exc:
                raise GenerationError(f"service rejected request: {exc}", attempts=attempt) from exc
        raise AssertionError("unreachable")

    def generate_many(self, jobs: list[tuple[ImagePatch, str]]) -> list[str]:
        """Run several requests under the concurrency bound; results keep job order."""
        if not jobs:
            return []
        with ThreadPoolExecutor(max_workers=max(1, self.concurrency)) as pool:
            return list(pool.map(lambda job: self.generate(*job), jobs))


def generate_description(client: GenerativeClient, patch: ImagePatch, prompt: str) -> str:
    return client.generate(patch, prompt)
