"""Patch pseudo-labels from a chat vision-language model or prompt-embedding similarity."""

from __future__ import annotations

import ast
import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._io import dump_line
from .core import PatchClass
from .errors import (
    ClassRangeError,
    DimensionError,
    ParseError,
    TransportError,
    ValidationError,
)

log = logging.getLogger(__name__)

_PROMPT_PARAGRAPHS = (
    "You are a specialized agent in classifying underwater images. Your goal is to carefully "
    "inspect the image, and then classify it in one of the following classes: 0, 1, 2.",
    "The class 1 corresponds to: mainly coral.",
    "The class 2 corresponds to: rocky seafloor or substrate. It looks solid and has minimal coral.",
    "The class 0 corresponds to: images that do not fit into class 1 or class 2, typically algae, "
    "sand, rubble, water or blurry images.",
    "Pay attention to the image and only classify it as class 0 if you're absolutely certain the "
    "image cannot be described as class 1 or 2.",
    'Always provide the output as a dictionary in the format {"class": 0, "conf": 0.5}, where the '
    "'class' is an integer number corresponding to the best class: 0, 1, 2, and the 'conf' is a "
    "decimal number between 0 and 1 to represent your confidence that the chosen class matches the "
    "image. If you think two classes could accurately describe the image, the confidence should be "
    "closer to 0.",
)

PROMPT = "\n\n".join(_PROMPT_PARAGRAPHS)

# Placeholder prompt texts for the embedding labeler, indexed by class code.
# They are not the prompts used to build any published dataset.
DEFAULT_CLASS_PROMPTS = (
    "a photo of sand, rubble, algae or water",
    "a photo of coral",
    "a photo of bare rocky seafloor",
)


def build_prompt() -> str:
    return PROMPT


@dataclass(frozen=True)
class PseudoLabel:
    frame_id: str
    patch_index: int
    label: PatchClass
    confidence: float
    source: str
    raw_response: Optional[str] = None

    def to_json(self) -> dict:
        out = {
            "frame_id": self.frame_id,
            "patch_index": self.patch_index,
            "class": int(self.label),
            "confidence": self.confidence,
            "source": self.source,
        }
        if self.raw_response is not None:
            out["raw_response"] = self.raw_response
        return out


@dataclass(frozen=True)
class Reject:
    frame_id: str
    patch_index: int
    reason: str
    attempts: int = 0
    raw_response: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "patch_index": self.patch_index,
            "reason": self.reason,
            "attempts": self.attempts,
            "raw_response": self.raw_response,
        }


# --------------------------------------------------------------------------
# response parsing
# --------------------------------------------------------------------------

_OBJECT_RE = re.compile(r"\{[^{}]*\}")


def format_response(label: int, conf: float) -> str:
    """Canonical rendering of an answer, as the prompt asks for it."""
    return json.dumps({"class": int(label), "conf": float(conf)})


def _load_object(text: str):
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        return None


def parse_response(text: str) -> tuple[PatchClass, float]:
    """Pull the first ``{"class": k, "conf": c}`` object out of free-form model output.

    Surrounding prose, code fences and single-quoted keys are tolerated. The
    confidence is clamped to [0, 1].
    """
    if not isinstance(text, str):
        raise ParseError("response is not text")
    for match in _OBJECT_RE.finditer(text):
        obj = _load_object(match.group(0))
        if not isinstance(obj, dict):
            continue
        if "class" not in obj or "conf" not in obj:
            continue
        k, c = obj["class"], obj["conf"]
        if isinstance(k, str) and k.strip().lstrip("-").isdigit():
            k = int(k)
        if isinstance(c, str):
            try:
                c = float(c)
            except ValueError:
                continue
        if isinstance(k, bool) or not isinstance(k, (int, float)) or k != int(k):
            continue
        if isinstance(c, bool) or not isinstance(c, (int, float)) or c != c:
            continue
        k = int(k)
        if k not in (0, 1, 2):
            raise ClassRangeError(f"class {k} outside {{0, 1, 2}}")
        return PatchClass(k), min(max(float(c), 0.0), 1.0)
    raise ParseError("no {\"class\": k, \"conf\": c} object in response")


# --------------------------------------------------------------------------
# chat VLM client
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VlmClientConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    credential_env: str = "OPENAI_API_KEY"
    max_in_flight: int = 4
    retries: int = 2
    backoff_ms: int = 500
    confidence_floor: float = 0.0
    timeout_s: float = 60.0
    image_mime: str = "image/jpeg"

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")
        if self.retries < 0:
            raise ValidationError("retries must be >= 0")
        if self.backoff_ms < 1:
            raise ValidationError("backoff_ms must be >= 1")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValidationError("confidence_floor must lie in [0, 1]")


class RateLimited(TransportError):
    code = "rate_limited"

    def __init__(self, message, retry_after_s: Optional[float] = None):
        super().__init__(message)
        self.retry_after_s = retry_after_s


class AuditLog:
    """Thread-safe JSONL sink for request/response bodies (no credentials)."""

    def __init__(self, path):
        self._f = open(path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, record: dict):
        with self._lock:
            self._f.write(dump_line(record) + "\n")
            self._f.flush()

    def close(self):
        self._f.close()


class VlmClient:
    """Chat-completions-style HTTP client: one prompt plus one base64 image per request."""

    def __init__(self, config: VlmClientConfig = VlmClientConfig(), audit: Optional[AuditLog] = None,
                 http=None):
        import httpx

        key = os.environ.get(config.credential_env)
        if not key:
            raise TransportError(f"environment variable {config.credential_env} is not set")
        self.config = config
        self.audit = audit
        self._key = key
        self._http = http or httpx.Client(timeout=config.timeout_s)

    def request_body(self, prompt: str, image: bytes) -> dict:
        data = base64.b64encode(image).decode("ascii")
        return {
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": f"data:{self.config.image_mime};base64,{data}"}},
                ],
            }],
        }

    def complete(self, prompt: str, image: bytes) -> str:
        import httpx

        body = self.request_body(prompt, image)
        try:
            resp = self._http.post(
                self.config.endpoint, json=body, headers={"Authorization": f"Bearer {self._key}"}
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from None
        if self.audit is not None:
            self.audit.write({
                "request": _redact_image(body, image),
                "status": resp.status_code,
                "response": resp.text,
            })
        if resp.status_code == 429:
            ra = resp.headers.get("retry-after")
            try:
                ra = float(ra) if ra is not None else None
            except ValueError:
                ra = None
            raise RateLimited("rate limited (429)", ra)
        if resp.status_code in (401, 403):
            raise TransportError(f"authentication failed ({resp.status_code})")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError("response lacks choices[0].message.content") from None

    def close(self):
        self._http.close()


def _redact_image(body: dict, image: bytes) -> dict:
    # the image is replaced by its digest so audit logs stay small
    body = json.loads(json.dumps(body))
    digest = hashlib.sha256(image).hexdigest()
    for part in body["messages"][0]["content"]:
        if part.get("type") == "image_url":
            part["image_url"]["url"] = f"sha256:{digest} ({len(image)} bytes)"
    return body


@dataclass
class VlmResult:
    labels: list = field(default_factory=list)
    rejects: list = field(default_factory=list)


Completer = Callable[[str, bytes], str]


def _label_one(complete: Completer, prompt, item, config: VlmClientConfig, sleep):
    frame_id, patch_index, image = item
    raw = None
    reason = "no attempt"
    attempts = 0
    for attempt in range(config.retries + 1):
        attempts += 1
        try:
            raw = complete(prompt, image)
            label, conf = parse_response(raw)
        except RateLimited as exc:
            reason = f"rate limited after {attempts} attempt(s)"
            wait = exc.retry_after_s if exc.retry_after_s is not None else config.backoff_ms * 2 ** attempt / 1000
            if attempt < config.retries:
                sleep(wait)
            continue
        except (ParseError, TransportError) as exc:
            reason = f"{exc.code}: {exc}"
            if attempt < config.retries:
                sleep(config.backoff_ms * 2 ** attempt / 1000)
            continue
        if conf < config.confidence_floor:
            return Reject(frame_id, patch_index, "below confidence floor", attempts, raw)
        return PseudoLabel(frame_id, patch_index, label, conf, "chat_vlm", raw)
    return Reject(frame_id, patch_index, reason, attempts, raw)


def label_patches_vlm(client, patches: Sequence[tuple], config: VlmClientConfig = VlmClientConfig(),
                      sleep=time.sleep) -> VlmResult:
    """Query the model once per patch (with retries) and split results into labels and rejects.

    ``client`` is a :class:`VlmClient` or any callable ``(prompt, image_bytes) -> str``.
    Every input patch ends up in exactly one of the two lists; both keep input order.
    """
    complete = client.complete if hasattr(client, "complete") else client
    prompt = build_prompt()
    items = list(patches)
    if config.max_in_flight == 1 or len(items) <= 1:
        results = [_label_one(complete, prompt, it, config, sleep) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            results = list(pool.map(lambda it: _label_one(complete, prompt, it, config, sleep), items))
    out = VlmResult()
    for r in results:
        (out.labels if isinstance(r, PseudoLabel) else out.rejects).append(r)
    return out


# --------------------------------------------------------------------------
# embedding similarity
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PromptEmbeddings:
    vectors: np.ndarray  # (3, D), row i is the prompt embedding of class code i
    prompts: tuple = DEFAULT_CLASS_PROMPTS

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(PatchClass):
            raise DimensionError(f"need one embedding per class, got shape {v.shape}")
        if np.any(np.linalg.norm(v, axis=1) == 0):
            raise ValidationError("prompt embedding with zero norm")
        object.__setattr__(self, "vectors", v)

    @classmethod
    def load(cls, path) -> "PromptEmbeddings":
        """JSON: ``{"prompts": [str, str, str], "vectors": [[...], [...], [...]]}``."""
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        try:
            return cls(np.asarray(obj["vectors"], dtype=np.float64), tuple(obj.get("prompts", DEFAULT_CLASS_PROMPTS)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: {exc}") from None


def similarity_scores(embeddings: np.ndarray, prompts: PromptEmbeddings) -> np.ndarray:
    """(n, 3) cosine similarities between patch embeddings and class prompts."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[1] != prompts.vectors.shape[1]:
        raise DimensionError(f"embedding dimension {e.shape[1]} vs prompt dimension {prompts.vectors.shape[1]}")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise ValidationError(f"zero-norm patch embedding at row {int(np.flatnonzero(norms == 0)[0])}")
    p = prompts.vectors / np.linalg.norm(prompts.vectors, axis=1, keepdims=True)
    return (e / norms[:, None]) @ p.T


def label_patches_similarity(patch_embeddings: Sequence, prompts: PromptEmbeddings) -> list[PseudoLabel]:
    """Zero-shot labels: nearest class prompt by cosine similarity.

    Confidence is the softmax (temperature 1) of the similarities at the chosen class.
    """
    feats = list(patch_embeddings)
    if not feats:
        return []
    sims = similarity_scores(np.stack([f.values for f in feats]), prompts)
    labels = np.argmax(sims, axis=1)
    e = np.exp(sims - sims.max(axis=1, keepdims=True))
    conf = e[np.arange(len(feats)), labels] / e.sum(axis=1)
    return [
        PseudoLabel(f.frame_id, -1 if f.patch_index is None else int(f.patch_index),
                    PatchClass(int(k)), float(c), "embedding_similarity")
        for f, k, c in zip(feats, labels, conf)
    ]


def label_counts(labels: Sequence[PseudoLabel]) -> np.ndarray:
    return np.bincount([int(l.label) for l in labels], minlength=len(PatchClass))
