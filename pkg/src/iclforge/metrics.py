"""Classification and generation quality metrics, plus attack accounting.

All text metrics share one tokenizer: lowercase word characters. BLEU,
ROUGE-L, and METEOR are self-contained; the embedding-based score asks
the gateway for token vectors.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import EligibleZero, EmptyInput, EmptyReference, NoFlips, ZeroBaseline
from .gateway import Gateway
from .retrieval import EmbeddingCache, cosine_similarity, embed_text
from .stemming import porter_stem

_WORD_RE = re.compile(r"\w+")


def tokenize_text(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassificationTally:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("tally counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_pairs(
        cls,
        predictions: Sequence[str],
        truths: Sequence[str],
        positive_label: str = "1",
    ) -> "ClassificationTally":
        if len(predictions) != len(truths):
            raise ValueError("predictions and truths differ in length")
        tp = fp = tn = fn = 0
        for pred, truth in zip(predictions, truths):
            if truth == positive_label:
                if pred == positive_label:
                    tp += 1
                else:
                    fn += 1
            else:
                if pred == positive_label:
                    fp += 1
                else:
                    tn += 1
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(tally: ClassificationTally) -> float:
    if tally.total == 0:
        raise EligibleZero("accuracy over zero cases")
    return (tally.tp + tally.tn) / tally.total


def f1_score(tally: ClassificationTally) -> float:
    """Harmonic mean of precision and recall; degenerate cases score 0."""
    denominator = 2 * tally.tp + tally.fp + tally.fn
    if denominator == 0:
        return 0.0
    return 2 * tally.tp / denominator


def attack_success_rate(flipped: int, eligible: int) -> float:
    if eligible == 0:
        raise EligibleZero("no eligible cases for the success rate")
    if not 0 <= flipped <= eligible:
        raise ValueError("flipped must lie in [0, eligible]")
    return flipped / eligible


def accuracy_drop(before: float, after: float) -> float:
    """Signed accuracy change, after minus before."""
    return after - before


def query_time(total_queries: int, successful_flips: int) -> float:
    """Average model queries spent per successful flip."""
    if successful_flips == 0:
        raise NoFlips("query-time is undefined with zero flips")
    if total_queries < 0:
        raise ValueError("total_queries must be non-negative")
    return total_queries / successful_flips


# --------------------------------------------------------------------------
# Generation metrics
# --------------------------------------------------------------------------


def _ngram_counts(tokens: list[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu(candidate: str, references: Sequence[str], max_order: int = 4) -> float:
    """Corpus-style sentence BLEU with clipped n-gram counts.

    Unigram precision stays raw so disjoint texts score 0; higher orders
    use add-one smoothing so identical texts still score exactly 1.
    """
    ref_tokens = [tokenize_text(r) for r in references]
    ref_tokens = [r for r in ref_tokens if r]
    if not ref_tokens:
        raise EmptyReference("BLEU needs at least one non-empty reference")
    cand = tokenize_text(candidate)
    if not cand:
        return 0.0

    log_sum = 0.0
    for order in range(1, max_order + 1):
        cand_counts = _ngram_counts(cand, order)
        total = sum(cand_counts.values())
        clipped = 0
        for ngram, count in cand_counts.items():
            best = max(_ngram_counts(r, order).get(ngram, 0) for r in ref_tokens)
            clipped += min(count, best)
        if order == 1:
            if clipped == 0:
                return 0.0
            precision = clipped / total
        else:
            precision = (clipped + 1) / (total + 1)
        log_sum += math.log(precision)

    candidate_len = len(cand)
    closest = min(ref_tokens, key=lambda r: (abs(len(r) - candidate_len), len(r)))
    ref_len = len(closest)
    brevity = 1.0 if candidate_len > ref_len else math.exp(1.0 - ref_len / candidate_len)
    return brevity * math.exp(log_sum / max_order)


def rouge_l(candidate: str, reference: str, beta_squared: float = 8.0) -> float:
    """Longest-common-subsequence F-score, recall-weighted by beta^2."""
    cand = tokenize_text(candidate)
    ref = tokenize_text(reference)
    if not cand or not ref:
        raise EmptyInput("ROUGE-L needs non-empty candidate and reference")
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return (1 + beta_squared) * precision * recall / (recall + beta_squared * precision)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if len(b) > len(a):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        current = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[len(b)]


def meteor(candidate: str, reference: str) -> float:
    """Unigram alignment score with exact and stem stages.

    F-mean weighs recall nine to one; the fragmentation penalty is
    0.5 * (chunks / matches)^3, waived when the alignment is a single
    chunk, so identical texts score exactly 1.
    """
    cand = tokenize_text(candidate)
    ref = tokenize_text(reference)
    if not cand or not ref:
        raise EmptyInput("METEOR needs non-empty candidate and reference")

    matches = _align(cand, ref)
    m = len(matches)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = _chunk_count(matches)
    penalty = 0.0 if chunks <= 1 else 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-stage greedy alignment: exact tokens, then Porter stems."""
    matches: list[tuple[int, int]] = []
    cand_free = [True] * len(cand)
    ref_free = [True] * len(ref)
    for stage_key in (lambda t: t, porter_stem):
        ref_keys = [stage_key(t) for t in ref]
        for i, token in enumerate(cand):
            if not cand_free[i]:
                continue
            key = stage_key(token)
            for j, ref_key in enumerate(ref_keys):
                if ref_free[j] and ref_key == key:
                    matches.append((i, j))
                    cand_free[i] = False
                    ref_free[j] = False
                    break
    matches.sort()
    return matches


def _chunk_count(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev: tuple[int, int] | None = None
    for i, j in matches:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def embedding_match_score(
    candidate: str,
    reference: str,
    gateway: Gateway,
    cache: EmbeddingCache | None = None,
) -> float:
    """Greedy token-embedding similarity of the candidate against the
    reference: each candidate token takes its best-matching reference
    token, and the mean match is clamped into [0, 1]."""
    cand = tokenize_text(candidate)
    ref = tokenize_text(reference)
    if not cand or not ref:
        raise EmptyInput("embedding match needs non-empty candidate and reference")
    local = cache if cache is not None else EmbeddingCache()
    ref_vectors = [embed_text(gateway, token, local) for token in ref]
    total = 0.0
    for token in cand:
        vector = embed_text(gateway, token, local)
        total += max(cosine_similarity(vector, rv) for rv in ref_vectors)
    return min(max(total / len(cand), 0.0), 1.0)


@dataclass(frozen=True)
class GenerationScores:
    """One text pair's scores across the generation metrics."""

    bleu: float
    meteor: float
    rouge_l: float
    embedding_match: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {"bleu": self.bleu, "meteor": self.meteor, "rouge_l": self.rouge_l}
        if self.embedding_match is not None:
            out["embedding_match"] = self.embedding_match
        return out

    @property
    def mean(self) -> float:
        return (self.bleu + self.meteor + self.rouge_l) / 3.0


def score_generation(
    candidate: str,
    reference: str,
    gateway: Gateway | None = None,
    cache: EmbeddingCache | None = None,
) -> GenerationScores:
    """Score one candidate against one reference on every generation metric.

    The embedding metric is included only when a gateway is provided.
    """
    embedding = None
    if gateway is not None:
        embedding = embedding_match_score(candidate, reference, gateway, cache)
    return GenerationScores(
        bleu=bleu(candidate, [reference]),
        meteor=meteor(candidate, reference),
        rouge_l=rouge_l(candidate, reference),
        embedding_match=embedding,
    )


def generation_mean(candidate: str, reference: str) -> float:
    """Mean of BLEU, METEOR, and ROUGE-L, safe on empty texts.

    Both sides empty counts as unchanged output (1.0); exactly one side
    empty counts as total loss (0.0).
    """
    cand_empty = not tokenize_text(candidate)
    ref_empty = not tokenize_text(reference)
    if cand_empty or ref_empty:
        return 1.0 if cand_empty and ref_empty else 0.0
    return GenerationScores(
        bleu=bleu(candidate, [reference]),
        meteor=meteor(candidate, reference),
        rouge_l=rouge_l(candidate, reference),
    ).mean


def average_relative_drop(before: GenerationScores, after: GenerationScores) -> float:
    """Mean per-metric relative change, as a signed percentage.

    Metrics present on both sides participate; a zero baseline metric
    makes the relative change undefined.
    """
    pairs: list[tuple[str, float, float]] = [
        ("bleu", before.bleu, after.bleu),
        ("meteor", before.meteor, after.meteor),
        ("rouge_l", before.rouge_l, after.rouge_l),
    ]
    if before.embedding_match is not None and after.embedding_match is not None:
        pairs.append(("embedding_match", before.embedding_match, after.embedding_match))
    drops = []
    for name, b, a in pairs:
        if b == 0.0:
            raise ZeroBaseline(name)
        drops.append((a - b) / b)
    return 100.0 * sum(drops) / len(drops)
