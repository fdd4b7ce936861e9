"""Defenses against poisoned demonstrations.

Two detectors are provided. The perplexity filter scores every
whitespace token of the demonstration codes by how much removing it
lowers the perplexity of the concatenated text, and strips tokens above
a threshold; system, answer, and query turns are never touched. The
entropy probe superimposes benign snippets onto the demonstrations and
flags prompts whose output-label distribution is suspiciously stable.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Sequence

from .attack import AttackOutcome, Attacker, GenerationReadout, IclContent, is_flip
from .errors import EligibleZero
from .gateway import Gateway
from .metrics import attack_success_rate

DEFAULT_FALSE_REJECTION_RATE = 0.05


def perplexity(log_likelihoods: Sequence[tuple[str, float]]) -> float:
    """exp of the negative mean token log-likelihood."""
    if not log_likelihoods:
        raise ValueError("perplexity of an empty token sequence is undefined")
    mean = sum(lp for _, lp in log_likelihoods) / len(log_likelihoods)
    return math.exp(-mean)


@dataclass(frozen=True)
class SuspicionReport:
    """Per-token suspicion scores over the demonstration codes."""

    tokens: tuple[tuple[str, float], ...]  # (token, suspicion), prompt order
    removed: tuple[int, ...]  # indices into tokens
    threshold: float


def onion_filter(
    content: IclContent, threshold: float, gateway: Gateway
) -> tuple[IclContent, SuspicionReport]:
    """Strip high-suspicion tokens from the demonstration codes.

    A token's suspicion is the perplexity of the full concatenated
    demonstration text minus the perplexity without that token; tokens
    scoring strictly above the threshold are removed. Demo codes are
    rebuilt from the surviving whitespace tokens. Zero-shot content
    passes through unchanged.
    """
    per_demo_tokens: list[list[str]] = [code.split() for code, _ in content.demos]
    flat: list[str] = [tok for toks in per_demo_tokens for tok in toks]
    if not flat:
        return content, SuspicionReport(tokens=(), removed=(), threshold=threshold)

    base = perplexity(gateway.log_likelihoods(" ".join(flat)))
    scores: list[float] = []
    for i in range(len(flat)):
        without = flat[:i] + flat[i + 1 :]
        if without:
            ppl = perplexity(gateway.log_likelihoods(" ".join(without)))
        else:
            ppl = base
        scores.append(base - ppl)
    removed = tuple(i for i, s in enumerate(scores) if s > threshold)

    removed_set = set(removed)
    new_demos: list[tuple[str, str]] = []
    cursor = 0
    for tokens, (_, answer) in zip(per_demo_tokens, content.demos):
        kept = [
            tok for offset, tok in enumerate(tokens) if (cursor + offset) not in removed_set
        ]
        cursor += len(tokens)
        new_demos.append((" ".join(kept), answer))
    filtered = IclContent(
        system_prompt=content.system_prompt,
        task_prompt=content.task_prompt,
        demos=tuple(new_demos),
        query_code=content.query_code,
    )
    return filtered, SuspicionReport(
        tokens=tuple(zip(flat, scores)), removed=removed, threshold=threshold
    )


def superimpose(code: str, snippet: str) -> str:
    """Interleave the lines of a benign snippet into a code snippet."""
    code_lines = code.split("\n")
    snippet_lines = snippet.split("\n")
    out: list[str] = []
    for i in range(max(len(code_lines), len(snippet_lines))):
        if i < len(code_lines):
            out.append(code_lines[i])
        if i < len(snippet_lines):
            out.append(snippet_lines[i])
    return "\n".join(out)


def shannon_entropy(labels: Sequence[str]) -> float:
    """Entropy of the label distribution, in bits."""
    if not labels:
        raise ValueError("entropy of an empty label sequence is undefined")
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    total = len(labels)
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


@dataclass(frozen=True)
class EntropyVerdict:
    entropy: float
    n_perturbations: int
    threshold: float
    suspicious: bool


def strip_detect(
    content: IclContent,
    gateway: Gateway,
    labels: Sequence[str],
    benign_pool: Sequence[str],
    n_perturbations: int = 8,
    threshold: float = 0.5,
    seed: int = 0,
) -> EntropyVerdict:
    """Flag prompts whose label stays fixed under benign perturbation.

    Each round interleaves one seeded benign snippet into every
    demonstration code and classifies the perturbed prompt; a healthy
    prompt wobbles (high entropy), a poisoned one stays put. Suspicious
    means entropy strictly below the threshold.
    """
    if n_perturbations < 2:
        raise ValueError("need at least 2 perturbations for an entropy estimate")
    if not benign_pool:
        raise ValueError("benign pool must be non-empty")
    rng = random.Random(seed)
    observed: list[str] = []
    for _ in range(n_perturbations):
        snippet = rng.choice(list(benign_pool))
        perturbed = IclContent(
            system_prompt=content.system_prompt,
            task_prompt=content.task_prompt,
            demos=tuple(
                (superimpose(code, snippet), answer) for code, answer in content.demos
            ),
            query_code=content.query_code,
        )
        observed.append(gateway.classify(perturbed.turns(), labels).label)
    entropy = shannon_entropy(observed)
    return EntropyVerdict(
        entropy=entropy,
        n_perturbations=n_perturbations,
        threshold=threshold,
        suspicious=entropy < threshold,
    )


def calibrate_threshold(
    benign_scores: Sequence[float],
    false_rejection_rate: float = DEFAULT_FALSE_REJECTION_RATE,
    tail: str = "upper",
) -> float:
    """Pick a threshold from held-out benign scores.

    ``upper`` returns the (1 - rate) quantile (for suspicion scores,
    where high means reject); ``lower`` returns the rate quantile (for
    entropies, where low means reject).
    """
    if not benign_scores:
        raise ValueError("cannot calibrate on an empty benign sample")
    if not 0.0 < false_rejection_rate < 1.0:
        raise ValueError("false_rejection_rate must lie in (0, 1)")
    ordered = sorted(benign_scores)
    if tail == "upper":
        index = math.ceil((1.0 - false_rejection_rate) * len(ordered)) - 1
    elif tail == "lower":
        index = math.floor(false_rejection_rate * len(ordered))
    else:
        raise ValueError("tail must be 'upper' or 'lower'")
    return ordered[min(max(index, 0), len(ordered) - 1)]


def strip_defense(
    content: IclContent,
    gateway: Gateway,
    labels: Sequence[str],
    benign_pool: Sequence[str],
    n_perturbations: int = 8,
    threshold: float = 0.5,
    seed: int = 0,
) -> IclContent:
    """Reject-on-detect defense: suspicious prompts lose their demos."""
    verdict = strip_detect(
        content, gateway, labels, benign_pool, n_perturbations, threshold, seed
    )
    if not verdict.suspicious:
        return content
    return IclContent(
        system_prompt=content.system_prompt,
        task_prompt=content.task_prompt,
        demos=(),
        query_code=content.query_code,
    )


def evaluate_defense(
    attacked: Sequence[AttackOutcome],
    defense_fn: Callable[[IclContent], IclContent],
    attacker: Attacker,
) -> tuple[float, float]:
    """Attack success rate before and after applying a defense.

    Each stored outcome carries its poisoned prompt and pre-attack
    readout; the defense rewrites the prompt, the model is asked again,
    and the flip is re-judged against the stored baseline.
    """
    if not attacked:
        raise EligibleZero("no attacked outcomes to defend")
    asr_before = attack_success_rate(sum(o.flipped for o in attacked), len(attacked))
    flips_after = 0
    for outcome in attacked:
        defended = defense_fn(outcome.icl)
        reference = (
            outcome.baseline.text
            if isinstance(outcome.baseline, GenerationReadout)
            else None
        )
        readout = attacker.readout(defended, reference)
        if is_flip(outcome.baseline, readout, attacker.criterion):
            flips_after += 1
    return asr_before, attack_success_rate(flips_after, len(attacked))
