"""Query-agnostic (transferable) bad demonstration sets.

One demonstration set is selected against the pooled embedding of a
whole query set, then iteratively poisoned: each round greedily attacks
one not-yet-used query starting from the incumbent set, and the result
is kept only when it strictly raises the attack success rate over every
answerable query. Construction stops when rounds run out, queries run
out, or two consecutively accepted sets embed close enough to call the
search converged.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .attack import Attacker, GenerationReadout, IclContent, Readout, assemble_icl, is_flip
from .corpus import Demonstration, Query, TaskKind, TaskMode, TaskVariant
from .errors import BundleError, EmptyQuerySet
from .gateway import EmbeddingVector
from .metrics import attack_success_rate, generation_mean
from .retrieval import embed_text, pooled_query_embedding, rank_by_embedding

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class TransferConfig:
    """Knobs of the universal construction loop."""

    seed: int = 0
    max_iterations: int = 50
    distance_threshold: float = 0.05
    pooling: str = "mean"

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.distance_threshold < 2.0:
            raise ValueError("distance_threshold must lie in (0, 2)")
        if self.pooling not in ("mean", "concat"):
            raise ValueError("pooling must be 'mean' or 'concat'")


@dataclass(frozen=True)
class UniversalBadIcl:
    """A query-agnostic poisoned demonstration set and its set-level ASR."""

    bad_demos: tuple[tuple[str, str], ...]  # (code, answer)
    asr_on_set: float
    iterations: int
    accepted_asr_trace: tuple[float, ...] = ()


def filter_answerable_queries(
    queries: Sequence[Query],
    demos: Sequence[Demonstration],
    attacker: Attacker,
) -> list[tuple[Query, Readout]]:
    """Keep queries the benign demonstration set answers correctly.

    Classification keeps a query when the readout label equals its
    ground truth; generation keeps it when the mean metric against the
    ground truth stays above 1 - drop_fraction. Queries without ground
    truth are dropped. Each kept query returns with its benign readout,
    which later flip checks compare against.
    """
    kept: list[tuple[Query, Readout]] = []
    for query in queries:
        if query.ground_truth is None:
            continue
        content = assemble_icl(demos, query.code, attacker.system_prompt, attacker.task_prompt)
        readout = attacker.readout(content)
        if attacker.task.mode is TaskMode.CLASSIFICATION:
            if readout.label == query.ground_truth:
                kept.append((query, readout))
        else:
            score = generation_mean(readout.text, query.ground_truth)
            if score >= 1.0 - attacker.criterion.drop_fraction:
                kept.append((query, readout))
    return kept


def _set_asr(
    slots: Sequence[tuple[str, str]],
    answerable: Sequence[tuple[Query, Readout]],
    attacker: Attacker,
) -> float:
    flips = 0
    for query, baseline in answerable:
        content = assemble_icl(slots, query.code, attacker.system_prompt, attacker.task_prompt)
        reference = baseline.text if isinstance(baseline, GenerationReadout) else None
        readout = attacker.readout(content, reference)
        if is_flip(baseline, readout, attacker.criterion):
            flips += 1
    return attack_success_rate(flips, len(answerable))


def _slots_embedding(slots: Sequence[tuple[str, str]], attacker: Attacker) -> EmbeddingVector:
    joined = "\n".join(code for code, _ in slots)
    return embed_text(attacker.gateway, joined, attacker.cache)


def build_universal(
    queries: Sequence[Query],
    repo,
    config: TransferConfig,
    attacker: Attacker,
    n_demos: int,
) -> UniversalBadIcl:
    """Construct one poisoned demonstration set for a whole query set.

    Acceptance is strict improvement of set-level ASR, so the accepted
    trace is strictly increasing and the final set is the best seen.
    """
    if not queries:
        raise EmptyQuerySet("transfer needs a non-empty query set")
    pooled = pooled_query_embedding(queries, attacker.gateway, config.pooling, attacker.cache)
    selection = rank_by_embedding("pooled", pooled, repo, n_demos, attacker.gateway, attacker.cache)
    demos = selection.demonstrations

    answerable = filter_answerable_queries(queries, demos, attacker)
    if not answerable:
        raise EmptyQuerySet("no query in the set is answerable with the benign demos")

    incumbent = [(d.code, d.answer) for d in demos]
    incumbent_asr = 0.0  # answerable queries are, by construction, not flipped yet
    accepted_trace: list[float] = []
    previous_accepted: EmbeddingVector | None = None

    order = [query for query, _ in answerable]
    rng = random.Random(config.seed)
    rng.shuffle(order)
    baselines = {query.id: readout for query, readout in answerable}

    iterations = 0
    for query in order:
        if iterations >= config.max_iterations:
            break
        iterations += 1
        working = tuple(
            Demonstration(id=demos[i].id, code=code, answer=answer, language=demos[i].language)
            for i, (code, answer) in enumerate(incumbent)
        )
        plans = [attacker.build_plan(i, demo) for i, demo in enumerate(working)]
        outcome = attacker.greedy_mutate(query, working, plans, baseline=baselines[query.id])
        if outcome.aborted:
            logger.warning("transfer iteration %d aborted; keeping incumbent", iterations)
            break
        candidate = [(slot.code, slot.answer) for slot in outcome.slots]
        if candidate == incumbent:
            continue
        candidate_asr = _set_asr(candidate, answerable, attacker)
        if candidate_asr <= incumbent_asr:
            continue
        incumbent = candidate
        incumbent_asr = candidate_asr
        accepted_trace.append(candidate_asr)
        embedding = _slots_embedding(incumbent, attacker)
        if previous_accepted is not None:
            distance = 1.0 - float(embedding.values @ previous_accepted.values)
            if distance < config.distance_threshold:
                logger.info("transfer converged after %d iterations", iterations)
                break
        previous_accepted = embedding

    return UniversalBadIcl(
        bad_demos=tuple(incumbent),
        asr_on_set=incumbent_asr,
        iterations=iterations,
        accepted_asr_trace=tuple(accepted_trace),
    )


# --------------------------------------------------------------------------
# Bundles: self-contained, portable ICL content
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IclBundle:
    """Everything needed to rebuild the poisoned prompt elsewhere."""

    version: int
    task: TaskKind
    system_prompt: str
    task_prompt: str
    demos: tuple[tuple[str, str], ...]

    def content_for(self, query_code: str) -> IclContent:
        return assemble_icl(self.demos, query_code, self.system_prompt, self.task_prompt)


def bundle_from_universal(
    universal: UniversalBadIcl,
    task: TaskKind,
    system_prompt: str,
    task_prompt: str,
) -> IclBundle:
    return IclBundle(
        version=BUNDLE_VERSION,
        task=task,
        system_prompt=system_prompt,
        task_prompt=task_prompt,
        demos=universal.bad_demos,
    )


def export_bundle(bundle: IclBundle, path: str | Path) -> None:
    """Write a bundle as canonical JSON (stable key order, trailing newline)."""
    payload = {
        "version": bundle.version,
        "task": {"variant": bundle.task.variant.value, "language": bundle.task.language},
        "systemPrompt": bundle.system_prompt,
        "taskPrompt": bundle.task_prompt,
        "demos": [{"code": code, "answer": answer} for code, answer in bundle.demos],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(path: str | Path) -> IclBundle:
    """Read a bundle back; malformed or truncated files raise BundleError."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise BundleError(f"cannot read bundle: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise BundleError(f"bundle is not valid JSON: {exc.msg}", position=exc.pos) from exc
    try:
        version = int(payload["version"])
        task = TaskKind(TaskVariant(payload["task"]["variant"]), payload["task"]["language"])
        demos = tuple((str(d["code"]), str(d["answer"])) for d in payload["demos"])
        bundle = IclBundle(
            version=version,
            task=task,
            system_prompt=str(payload["systemPrompt"]),
            task_prompt=str(payload["taskPrompt"]),
            demos=demos,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"bundle is missing or mistypes a field: {exc}") from exc
    if bundle.version != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {bundle.version}")
    return bundle
