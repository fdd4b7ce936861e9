"""Uniform access to code models, with query accounting.

A Gateway wraps a backend (deterministic stub or remote HTTP service)
behind five operations: completion, per-label classification, masked
infill proposals, text embedding, and token log-likelihoods. Every
successful backend call bumps a monotone counter so attack loops can
report exact query budgets.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests

from .corpus import CLASSIFICATION_LABELS
from .errors import (
    BackendUnavailable,
    LabelsUnscorable,
    MultipleMasks,
    NoMask,
    ProtocolError,
    ScoringUnsupported,
)
from .lexer import RESERVED_WORDS

ROLES = ("system", "user", "assistant")

DEFAULT_MASK_TOKEN = "<mask>"

# Completion caps: generation answers are cut at 100 tokens, label
# readouts need only a handful.
GENERATION_MAX_TOKENS = 100
CLASSIFICATION_MAX_TOKENS = 8


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"invalid role {self.role!r}")
        if not self.content:
            raise ValueError("turn content must be non-empty")


@dataclass(frozen=True)
class CompletionParams:
    max_tokens: int = GENERATION_MAX_TOKENS
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @classmethod
    def for_generation(cls) -> "CompletionParams":
        return cls(max_tokens=GENERATION_MAX_TOKENS, temperature=0.0)

    @classmethod
    def for_classification(cls) -> "CompletionParams":
        return cls(max_tokens=CLASSIFICATION_MAX_TOKENS, temperature=0.0)


@dataclass(frozen=True)
class ClassifierReadout:
    """Normalized label distribution for one transcript."""

    label: str
    confidence: float
    per_label: dict[str, float]
    renormalized: bool = False


@dataclass(frozen=True)
class SubstituteProposal:
    token: str
    rank: int  # 1-based, contiguous after filtering
    model_score: float


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Unit-norm embedding with provenance; construction enforces the norm."""

    values: np.ndarray
    encoder_id: str

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"embedding norm {norm} is not 1 within 1e-9")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    @classmethod
    def unit(cls, values: Sequence[float] | np.ndarray, encoder_id: str) -> "EmbeddingVector":
        arr = np.asarray(values, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("cannot normalize a zero or non-finite vector")
        return cls(arr / norm, encoder_id)


def render_transcript(turns: Sequence[ChatTurn]) -> str:
    """Canonical single-string form of a transcript (stub keying, tests)."""
    return "\x1e".join(f"{t.role}\x1f{t.content}" for t in turns)


class Backend(Protocol):
    """Raw model operations; implementations need no validation logic."""

    encoder_id: str

    def complete(self, turns: Sequence[ChatTurn], params: CompletionParams) -> str: ...

    def per_label_scores(
        self, turns: Sequence[ChatTurn], labels: Sequence[str]
    ) -> dict[str, float]: ...

    def propose(
        self, code_with_mask: str, mask_token: str, top_i: int
    ) -> list[tuple[str, float]]: ...

    def embed(self, text: str) -> tuple[Sequence[float], str]: ...

    def log_likelihoods(self, text: str) -> list[tuple[str, float]]: ...


# --------------------------------------------------------------------------
# Deterministic stub backend
# --------------------------------------------------------------------------

_STUB_WORDS = (
    "the function reads input and writes the result to the output buffer "
    "after checking every boundary condition on the given array values"
).split()

_STUB_IDENTIFIERS = (
    "tmp val cnt idx buf ptr acc cur pos num res arg key vec src dst len2 "
    "item total limit index count value entry token cursor offset marker"
).split()


class StubBackend:
    """Keyed-hash model double: deterministic under a seed, no network.

    Fixture hooks: ``classify_rules`` / ``completion_rules`` /
    ``proposal_rules`` are (substring, payload) lists checked in order
    against the rendered transcript or masked snippet; first match wins.
    ``embed_overrides`` maps exact texts to raw vectors and
    ``token_logprobs`` pins per-token log-likelihoods.
    """

    def __init__(
        self,
        seed: int = 0,
        labels: Sequence[str] = CLASSIFICATION_LABELS,
        dim: int = 64,
        generation: bool = False,
        classify_rules: Sequence[tuple[str, dict[str, float]]] = (),
        completion_rules: Sequence[tuple[str, str]] = (),
        proposal_rules: Sequence[tuple[str, Sequence[str]]] = (),
        default_proposals: Sequence[str] | None = None,
        embed_overrides: dict[str, Sequence[float]] | None = None,
        token_logprobs: dict[str, float] | None = None,
        default_logprob: float | None = None,
    ) -> None:
        if dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        self.seed = seed
        self.labels = tuple(labels)
        self.dim = dim
        self.generation = generation
        self.classify_rules = list(classify_rules)
        self.completion_rules = list(completion_rules)
        self.proposal_rules = [(pat, list(toks)) for pat, toks in proposal_rules]
        self.default_proposals = list(default_proposals) if default_proposals else None
        self.embed_overrides = dict(embed_overrides or {})
        self.token_logprobs = dict(token_logprobs or {})
        self.default_logprob = default_logprob
        self.encoder_id = f"stub:{seed}:d{dim}"
        self._key = seed.to_bytes(8, "big", signed=True)

    def _digest(self, *parts: str) -> bytes:
        h = hashlib.blake2b(key=self._key, digest_size=32)
        for part in parts:
            h.update(part.encode("utf-8"))
            h.update(b"\x1f")
        return h.digest()

    def _floats(self, count: int, *parts: str) -> list[float]:
        """count floats in [-1, 1), expanded block-wise from the keyed hash."""
        out: list[float] = []
        block = 0
        while len(out) < count:
            digest = self._digest(str(block), *parts)
            for i in range(0, len(digest) - 7, 8):
                raw = int.from_bytes(digest[i : i + 8], "big")
                out.append(raw / 2**63 - 1.0)
                if len(out) == count:
                    break
            block += 1
        return out

    def per_label_scores(
        self, turns: Sequence[ChatTurn], labels: Sequence[str]
    ) -> dict[str, float]:
        rendered = render_transcript(turns)
        for pattern, weights in self.classify_rules:
            if pattern in rendered:
                return {label: float(weights.get(label, 0.0)) for label in labels}
        raws = self._floats(len(labels), "classify", rendered)
        exp = [math.exp(2.0 * r) for r in raws]
        total = sum(exp)
        return {label: exp[i] / total for i, label in enumerate(labels)}

    def complete(self, turns: Sequence[ChatTurn], params: CompletionParams) -> str:
        rendered = render_transcript(turns)
        for pattern, text in self.completion_rules:
            if pattern in rendered:
                return text
        if not self.generation:
            scores = self.per_label_scores(turns, self.labels)
            top = max(scores.values())
            # ties resolve to the lexicographically smallest label
            return min(label for label, score in scores.items() if score == top)
        count = 4 + self._digest("len", rendered)[0] % 9
        count = min(count, params.max_tokens)
        picks = self._floats(count, "words", rendered)
        words = [_STUB_WORDS[int((p + 1.0) / 2.0 * len(_STUB_WORDS)) % len(_STUB_WORDS)] for p in picks]
        return " ".join(words)

    def propose(
        self, code_with_mask: str, mask_token: str, top_i: int
    ) -> list[tuple[str, float]]:
        tokens: list[str] | None = None
        for pattern, toks in self.proposal_rules:
            if pattern in code_with_mask:
                tokens = list(toks)
                break
        if tokens is None and self.default_proposals is not None:
            tokens = list(self.default_proposals)
        if tokens is None:
            picks = self._floats(top_i, "propose", code_with_mask, mask_token)
            tokens = []
            for i, p in enumerate(picks):
                stem = _STUB_IDENTIFIERS[int((p + 1.0) / 2.0 * len(_STUB_IDENTIFIERS)) % len(_STUB_IDENTIFIERS)]
                tokens.append(f"{stem}_{i}")
        tokens = tokens[:top_i]
        return [(tok, 1.0 / (rank + 1.0)) for rank, tok in enumerate(tokens)]

    def embed(self, text: str) -> tuple[Sequence[float], str]:
        if text in self.embed_overrides:
            return list(self.embed_overrides[text]), self.encoder_id
        return self._floats(self.dim, "embed", text), self.encoder_id

    def log_likelihoods(self, text: str) -> list[tuple[str, float]]:
        result: list[tuple[str, float]] = []
        for token in text.split():
            if token in self.token_logprobs:
                lp = float(self.token_logprobs[token])
            elif self.default_logprob is not None:
                lp = float(self.default_logprob)
            else:
                lp = -0.5 + 3.5 * (self._floats(1, "logprob", token)[0] - 1.0) / 2.0
            result.append((token, lp))
        return result


# --------------------------------------------------------------------------
# Remote HTTP backend
# --------------------------------------------------------------------------


class RemoteBackend:
    """JSON-over-HTTP backend speaking the five-endpoint wire protocol.

    Endpoints: POST /complete, /classify, /infill, /embed, /logprobs.
    Connection failures and 5xx map to BackendUnavailable; malformed
    bodies map to ProtocolError; /classify may answer 422 (labels not
    scorable) and /logprobs 501 (scoring unsupported).
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        session: requests.Session | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()
        self.encoder_id = f"remote:{self.base_url}"

    def _post(self, path: str, payload: dict) -> tuple[int, dict]:
        try:
            response = self._session.post(
                f"{self.base_url}{path}", json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"POST {path}: {exc}") from exc
        # 501 is a capability signal (e.g. /logprobs on a backend without
        # scoring); everything else in 5xx means the service is down.
        if response.status_code >= 500 and response.status_code != 501:
            raise BackendUnavailable(f"POST {path}: server answered {response.status_code}")
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolError(f"POST {path}: body is not JSON") from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"POST {path}: body is not a JSON object")
        return response.status_code, body

    @staticmethod
    def _turns_payload(turns: Sequence[ChatTurn]) -> list[dict]:
        return [{"role": t.role, "content": t.content} for t in turns]

    def complete(self, turns: Sequence[ChatTurn], params: CompletionParams) -> str:
        status, body = self._post(
            "/complete",
            {
                "transcript": self._turns_payload(turns),
                "max_tokens": params.max_tokens,
                "temperature": params.temperature,
            },
        )
        if status != 200 or not isinstance(body.get("text"), str):
            raise ProtocolError(f"/complete: unexpected answer (status {status})")
        return body["text"]

    def per_label_scores(
        self, turns: Sequence[ChatTurn], labels: Sequence[str]
    ) -> dict[str, float]:
        status, body = self._post(
            "/classify",
            {"transcript": self._turns_payload(turns), "labels": list(labels)},
        )
        if status == 422 or body.get("per_label") is None:
            raise LabelsUnscorable("backend cannot score these labels")
        per_label = body["per_label"]
        if not isinstance(per_label, dict):
            raise ProtocolError("/classify: per_label is not an object")
        try:
            return {label: float(per_label[label]) for label in labels}
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"/classify: bad per_label entry: {exc}") from exc

    def propose(
        self, code_with_mask: str, mask_token: str, top_i: int
    ) -> list[tuple[str, float]]:
        status, body = self._post(
            "/infill",
            {"code": code_with_mask, "mask": mask_token, "top_n": top_i},
        )
        proposals = body.get("proposals")
        if status != 200 or not isinstance(proposals, list):
            raise ProtocolError(f"/infill: unexpected answer (status {status})")
        out: list[tuple[str, float]] = []
        for item in proposals:
            if not isinstance(item, dict) or "token" not in item:
                raise ProtocolError("/infill: proposal without token")
            out.append((str(item["token"]), float(item.get("score", 0.0))))
        return out

    def embed(self, text: str) -> tuple[Sequence[float], str]:
        status, body = self._post("/embed", {"text": text})
        vector = body.get("vector")
        if status != 200 or not isinstance(vector, list) or not vector:
            raise ProtocolError(f"/embed: unexpected answer (status {status})")
        encoder_id = str(body.get("encoder_id", self.encoder_id))
        try:
            return [float(x) for x in vector], encoder_id
        except (TypeError, ValueError) as exc:
            raise ProtocolError("/embed: vector entries are not numbers") from exc

    def log_likelihoods(self, text: str) -> list[tuple[str, float]]:
        status, body = self._post("/logprobs", {"text": text})
        if status == 501:
            raise ScoringUnsupported("backend does not expose log-likelihoods")
        tokens, log_probs = body.get("tokens"), body.get("log_probs")
        if status != 200 or not isinstance(tokens, list) or not isinstance(log_probs, list):
            raise ProtocolError(f"/logprobs: unexpected answer (status {status})")
        if len(tokens) != len(log_probs):
            raise ProtocolError("/logprobs: tokens and log_probs differ in length")
        try:
            return [(str(t), float(lp)) for t, lp in zip(tokens, log_probs)]
        except (TypeError, ValueError) as exc:
            raise ProtocolError("/logprobs: bad log_prob entry") from exc


# --------------------------------------------------------------------------
# Gateway
# --------------------------------------------------------------------------


def _generic_identifier_ok(token: str, language: str | None) -> bool:
    if language in RESERVED_WORDS:
        reserved = RESERVED_WORDS[language]
    else:
        reserved = frozenset().union(*RESERVED_WORDS.values())
    if token in reserved:
        return False
    return re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", token) is not None


class Gateway:
    """Validating, call-counting front door to a model backend."""

    def __init__(self, backend: Backend) -> None:
        self.backend = backend
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def call_count(self) -> int:
        """Total successful backend calls so far; never decreases."""
        with self._lock:
            return self._calls

    @property
    def encoder_id(self) -> str:
        return self.backend.encoder_id

    def _bump(self) -> None:
        with self._lock:
            self._calls += 1

    @staticmethod
    def _check_transcript(turns: Sequence[ChatTurn]) -> None:
        if not turns:
            raise ValueError("transcript must be non-empty")
        for turn in turns:
            if not isinstance(turn, ChatTurn):
                raise TypeError("transcript entries must be ChatTurns")

    def complete(self, turns: Sequence[ChatTurn], params: CompletionParams | None = None) -> str:
        self._check_transcript(turns)
        text = self.backend.complete(list(turns), params or CompletionParams())
        self._bump()
        return text

    def classify(self, turns: Sequence[ChatTurn], labels: Sequence[str]) -> ClassifierReadout:
        self._check_transcript(turns)
        labels = tuple(labels)
        if len(labels) < 2 or len(set(labels)) != len(labels):
            raise ValueError("need at least two distinct labels")
        raw = self.backend.per_label_scores(list(turns), labels)
        self._bump()
        scores = []
        for label in labels:
            value = float(raw.get(label, 0.0))
            if not math.isfinite(value) or value < 0.0:
                raise LabelsUnscorable(f"invalid score for label {label!r}: {value}")
            scores.append(value)
        total = sum(scores)
        if total <= 0.0:
            raise LabelsUnscorable("all label scores are zero")
        renormalized = abs(total - 1.0) > 1e-6
        normalized = {label: s / total for label, s in zip(labels, scores)}
        top = max(normalized.values())
        winner = min(l for l, s in normalized.items() if s == top)
        return ClassifierReadout(
            label=winner,
            confidence=normalized[winner],
            per_label=normalized,
            renormalized=renormalized,
        )

    def propose_substitutes(
        self,
        code_with_mask: str,
        top_i: int,
        language: str | None = None,
        mask_token: str = DEFAULT_MASK_TOKEN,
    ) -> list[SubstituteProposal]:
        """Masked-infill proposals, filtered to legal fresh identifiers.

        Multi-token proposals are joined without whitespace; duplicates
        keep their best rank; ranks are reassigned contiguously.
        """
        if top_i < 1:
            raise ValueError("top_i must be at least 1")
        mask_count = code_with_mask.count(mask_token)
        if mask_count == 0:
            raise NoMask(f"no {mask_token!r} sentinel in snippet")
        if mask_count > 1:
            raise MultipleMasks(f"{mask_count} {mask_token!r} sentinels in snippet")
        raw = self.backend.propose(code_with_mask, mask_token, top_i)
        self._bump()
        proposals: list[SubstituteProposal] = []
        seen: set[str] = set()
        for token, score in raw:
            joined = "".join(str(token).split())
            if not joined or joined in seen:
                continue
            if not _generic_identifier_ok(joined, language):
                continue
            seen.add(joined)
            proposals.append(SubstituteProposal(joined, rank=len(proposals) + 1, model_score=float(score)))
            if len(proposals) == top_i:
                break
        return proposals

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        values, encoder_id = self.backend.embed(text)
        self._bump()
        return EmbeddingVector.unit(np.asarray(values, dtype=np.float64), encoder_id)

    def log_likelihoods(self, text: str) -> list[tuple[str, float]]:
        if not text.strip():
            raise ValueError("cannot score empty text")
        scored = self.backend.log_likelihoods(text)
        self._bump()
        for token, lp in scored:
            if not math.isfinite(lp):
                raise ProtocolError(f"non-finite log-likelihood for {token!r}")
        return [(str(t), float(lp)) for t, lp in scored]
