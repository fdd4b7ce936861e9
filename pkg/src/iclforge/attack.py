"""Trigger-gated poisoning of retrieved demonstrations.

The attack walks each selected demonstration, orders its renameable
variables by how much the model leans on them, and greedily renames
them with model-proposed substitutes until the prediction for the
query flips. Every model call runs through the gateway, so the
outcome carries an exact query count.
"""

from __future__ import annotations

import logging
import re
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

from .corpus import Demonstration, Query, TaskKind, TaskMode
from .errors import (
    BackendUnavailable,
    ModeMismatch,
    NoProposals,
    ParseError,
    ReservedWord,
    SubstituteCollision,
)
from .gateway import (
    DEFAULT_MASK_TOKEN,
    ChatTurn,
    ClassifierReadout,
    CompletionParams,
    Gateway,
)
from .metrics import generation_mean
from .mutation import (
    Mutant,
    VariableSite,
    delete_occurrences,
    extract_variables,
    extract_variables_paired,
    rename,
)
from .retrieval import EmbeddingCache, SelectionResult
from .substitution import DEFAULT_TOP_I, DEFAULT_TOP_K, SubstituteSet, build_substitute_set

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Prompt assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IclContent:
    """A full in-context prompt: system turn, demo turns, query turn."""

    system_prompt: str
    task_prompt: str
    demos: tuple[tuple[str, str], ...]  # (code, answer)
    query_code: str

    def __post_init__(self) -> None:
        if not self.system_prompt.strip():
            raise ValueError("system prompt must be non-empty")
        if not self.task_prompt.strip():
            raise ValueError("task prompt must be non-empty")
        if not self.query_code.strip():
            raise ValueError("query code must be non-empty")
        for code, answer in self.demos:
            if not answer.strip():
                raise ValueError("demonstration answer must be non-empty")

    def turns(self) -> list[ChatTurn]:
        """System turn, then (user, assistant) per demo, then the query turn."""
        turns = [ChatTurn("system", self.system_prompt)]
        for code, answer in self.demos:
            turns.append(ChatTurn("user", f"{self.task_prompt}\n{code}"))
            turns.append(ChatTurn("assistant", answer))
        turns.append(ChatTurn("user", f"{self.task_prompt}\n{self.query_code}"))
        return turns

    def with_demo_code(self, index: int, code: str) -> "IclContent":
        demos = list(self.demos)
        demos[index] = (code, demos[index][1])
        return IclContent(self.system_prompt, self.task_prompt, tuple(demos), self.query_code)


def assemble_icl(
    demos: Sequence[Demonstration] | Sequence[tuple[str, str]],
    query_code: str,
    system_prompt: str,
    task_prompt: str,
) -> IclContent:
    """Build the prompt for a query over the given demonstrations."""
    pairs: list[tuple[str, str]] = []
    for demo in demos:
        if isinstance(demo, Demonstration):
            pairs.append((demo.code, demo.answer))
        else:
            code, answer = demo
            pairs.append((str(code), str(answer)))
    return IclContent(
        system_prompt=system_prompt,
        task_prompt=task_prompt,
        demos=tuple(pairs),
        query_code=query_code,
    )


# --------------------------------------------------------------------------
# Trigger
# --------------------------------------------------------------------------


class TriggerScope(str, Enum):
    QUERY_CODE = "query-code"
    DEMONSTRATION_CODE = "demonstration-code"
    BOTH = "both"


class TriggerMatch(str, Enum):
    IDENTIFIER = "identifier"
    SUBSTRING = "substring"


@dataclass(frozen=True)
class TriggerConfig:
    """When the attack arms: which keywords, where, and how they match."""

    keywords: tuple[str, ...]
    scope: TriggerScope = TriggerScope.QUERY_CODE
    match: TriggerMatch = TriggerMatch.IDENTIFIER

    def __post_init__(self) -> None:
        if not self.keywords or any(not k.strip() for k in self.keywords):
            raise ValueError("trigger keywords must be non-empty")


def _matches(keyword: str, text: str, match: TriggerMatch) -> bool:
    if match is TriggerMatch.SUBSTRING:
        return keyword in text
    pattern = rf"(?<![A-Za-z0-9_$]){re.escape(keyword)}(?![A-Za-z0-9_$])"
    return re.search(pattern, text) is not None


def detect_trigger(content: IclContent, config: TriggerConfig) -> bool:
    """True when any trigger keyword appears in the configured scope."""
    texts: list[str] = []
    if config.scope in (TriggerScope.QUERY_CODE, TriggerScope.BOTH):
        texts.append(content.query_code)
    if config.scope in (TriggerScope.DEMONSTRATION_CODE, TriggerScope.BOTH):
        texts.extend(code for code, _ in content.demos)
    return any(
        _matches(keyword, text, config.match)
        for keyword in config.keywords
        for text in texts
    )


# --------------------------------------------------------------------------
# Flip criterion and readouts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationReadout:
    """Model output text plus its mean metric against the pre-attack text."""

    text: str
    score: float


Readout = Union[ClassifierReadout, GenerationReadout]


@dataclass(frozen=True)
class FlipCriterion:
    """What counts as a successful prediction flip.

    Classification flips on an argmax label change; with
    ``require_boundary`` the new label must also clear ``boundary``.
    Generation flips when the mean metric against the pre-attack output
    drops by strictly more than ``drop_fraction``.
    """

    mode: TaskMode
    drop_fraction: float = 0.5
    boundary: float = 0.5
    require_boundary: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must lie in (0, 1)")
        if not 0.0 < self.boundary <= 1.0:
            raise ValueError("boundary must lie in (0, 1]")


def _check_readout(readout: Readout, criterion: FlipCriterion) -> None:
    if criterion.mode is TaskMode.CLASSIFICATION and not isinstance(readout, ClassifierReadout):
        raise ModeMismatch("classification criterion needs classifier readouts")
    if criterion.mode is TaskMode.GENERATION and not isinstance(readout, GenerationReadout):
        raise ModeMismatch("generation criterion needs generation readouts")


def flip_potential(before: Readout, after: Readout, criterion: FlipCriterion) -> float:
    """How far the prediction moved away from the pre-attack readout.

    Classification: probability lost by the pre-attack label.
    Generation: fractional drop of the mean metric.
    """
    _check_readout(before, criterion)
    _check_readout(after, criterion)
    if criterion.mode is TaskMode.CLASSIFICATION:
        base_label = before.label
        return before.per_label[base_label] - after.per_label.get(base_label, 0.0)
    if before.score <= 0.0:
        return 0.0
    return (before.score - after.score) / before.score


def is_flip(before: Readout, after: Readout, criterion: FlipCriterion) -> bool:
    _check_readout(before, criterion)
    _check_readout(after, criterion)
    if criterion.mode is TaskMode.CLASSIFICATION:
        if after.label == before.label:
            return False
        if criterion.require_boundary:
            return after.confidence >= criterion.boundary
        return True
    return flip_potential(before, after, criterion) > criterion.drop_fraction


# --------------------------------------------------------------------------
# Attack outcome shapes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    """One model trial: a substitute tried against one variable."""

    demo_id: str
    variable: str
    substitute: str
    potential: float
    flipped: bool


@dataclass(frozen=True)
class DemoSlot:
    id: str
    code: str
    answer: str
    changed: bool


@dataclass(frozen=True)
class MutationPlan:
    """Renameable variables of one demonstration slot plus their
    substitute sets, both built against the original demo code."""

    demo_index: int
    sites: tuple[VariableSite, ...]
    substitutes: tuple[SubstituteSet | None, ...]

    def __post_init__(self) -> None:
        if len(self.sites) != len(self.substitutes):
            raise ValueError("sites and substitutes must be parallel")


@dataclass(frozen=True)
class AttackOutcome:
    """Everything produced by attacking one query."""

    query: Query
    slots: tuple[DemoSlot, ...]
    icl: IclContent
    baseline: Readout
    final: Readout
    flipped: bool
    flip_potential: float
    queries_used: int
    trace: tuple[TrialRecord, ...]
    skips: tuple[str, ...] = ()
    aborted: bool = False


# --------------------------------------------------------------------------
# Attacker
# --------------------------------------------------------------------------


def _shift_live_sites(
    live_sites: dict[int, VariableSite],
    committed_key: int,
    committed: VariableSite,
    substitute: str,
) -> None:
    """Adjust the remaining sites' offsets after a rename commit.

    Each occurrence moves by the length delta times the number of
    committed occurrences before it; identifier tokens never overlap,
    so the arithmetic is exact.
    """
    del live_sites[committed_key]
    delta = len(substitute) - len(committed.name)
    if delta == 0:
        return
    committed_offsets = [offset for offset, _ in committed.occurrences]
    for key, site in list(live_sites.items()):
        moved = tuple(
            (offset + delta * bisect_right(committed_offsets, offset), length)
            for offset, length in site.occurrences
        )
        live_sites[key] = VariableSite(site.name, moved, site.declared, site.initialized)


class Attacker:
    """Greedy demonstration-poisoning pipeline bound to one task setup."""

    def __init__(
        self,
        gateway: Gateway,
        task: TaskKind,
        system_prompt: str,
        task_prompt: str,
        criterion: FlipCriterion | None = None,
        top_i: int = DEFAULT_TOP_I,
        top_k: int = DEFAULT_TOP_K,
        mask_token: str = DEFAULT_MASK_TOKEN,
        cache: EmbeddingCache | None = None,
    ) -> None:
        self.gateway = gateway
        self.task = task
        self.system_prompt = system_prompt
        self.task_prompt = task_prompt
        self.criterion = criterion or FlipCriterion(mode=task.mode)
        if self.criterion.mode is not task.mode:
            raise ModeMismatch("criterion mode does not match the task mode")
        self.top_i = top_i
        self.top_k = top_k
        self.mask_token = mask_token
        self.cache = cache if cache is not None else EmbeddingCache()

    # -- model readouts -----------------------------------------------------

    def readout(self, content: IclContent, reference_text: str | None = None) -> Readout:
        """Query the model once for this prompt.

        For generation, ``reference_text`` is the pre-attack output the
        score is computed against; omitted, the readout is its own
        reference (score 1.0).
        """
        turns = content.turns()
        if self.task.mode is TaskMode.CLASSIFICATION:
            return self.gateway.classify(turns, self.task.labels)
        text = self.gateway.complete(turns, CompletionParams.for_generation())
        if reference_text is None:
            return GenerationReadout(text=text, score=1.0)
        return GenerationReadout(text=text, score=generation_mean(text, reference_text))

    def _readout_value(self, readout: Readout, baseline: Readout) -> float:
        """M(x): the model's support for the pre-attack prediction."""
        if self.criterion.mode is TaskMode.CLASSIFICATION:
            return readout.per_label.get(baseline.label, 0.0)
        return readout.score

    def vulnerability_score(
        self,
        content: IclContent,
        demo_index: int,
        site: VariableSite,
        baseline: Readout | None = None,
    ) -> float:
        """Drop in support for the pre-attack prediction when every
        occurrence of the variable is deleted from its demonstration."""
        if baseline is None:
            baseline = self.readout(content)
        ablated_code = delete_occurrences(content.demos[demo_index][0], site)
        if not ablated_code.strip():
            ablated_code = " "
        reference = baseline.text if isinstance(baseline, GenerationReadout) else None
        ablated = self.readout(content.with_demo_code(demo_index, ablated_code), reference)
        return self._readout_value(baseline, baseline) - self._readout_value(ablated, baseline)

    # -- plan construction ----------------------------------------------------

    def extract_sites(self, code: str) -> list[VariableSite]:
        if self.task.is_pair_task:
            return extract_variables_paired(code, self.task.language, self.task.clone_separator)
        return extract_variables(code, self.task.language)

    def build_plan(self, demo_index: int, demo: Demonstration) -> MutationPlan:
        """Extract variables and substitute sets for one demonstration.

        Unparseable snippets and variables without usable substitutes
        are skipped with a warning rather than aborting the attack.
        """
        try:
            sites = self.extract_sites(demo.code)
        except ParseError as exc:
            logger.warning("demo %s skipped: %s", demo.id, exc)
            return MutationPlan(demo_index, (), ())
        kept_sites: list[VariableSite] = []
        kept_subs: list[SubstituteSet | None] = []
        for site in sites:
            try:
                subs = build_substitute_set(
                    demo.code,
                    site,
                    self.gateway,
                    self.task.language,
                    top_i=self.top_i,
                    top_k=self.top_k,
                    mask_token=self.mask_token,
                    cache=self.cache,
                )
            except NoProposals:
                logger.warning("variable %s of demo %s has no substitutes", site.name, demo.id)
                continue
            kept_sites.append(site)
            kept_subs.append(subs)
        return MutationPlan(demo_index, tuple(kept_sites), tuple(kept_subs))

    # -- greedy mutation ------------------------------------------------------

    def greedy_mutate(
        self,
        query: Query,
        demos: Sequence[Demonstration],
        plans: Sequence[MutationPlan],
        baseline: Readout | None = None,
    ) -> AttackOutcome:
        """Rename variables demo by demo until the query prediction flips.

        Per demonstration, variables are visited by vulnerability score
        (descending; ties keep source order). Per variable, substitutes
        are tried in set order: a flipping mutant commits immediately
        and processing moves to the next demonstration; otherwise the
        highest-potential mutant commits and the next variable is tried.
        The flip test always compares against the pre-attack readout.
        """
        calls_before = self.gateway.call_count
        codes = [d.code for d in demos]
        answers = [d.answer for d in demos]
        ids = [d.id for d in demos]

        def content_for(current: list[str]) -> IclContent:
            return assemble_icl(list(zip(current, answers)), query.code, self.system_prompt, self.task_prompt)

        trace: list[TrialRecord] = []
        skips: list[str] = []
        aborted = False
        final_readout: Readout | None = None
        final_potential = 0.0
        try:
            if baseline is None:
                baseline = self.readout(content_for(codes))
            reference = baseline.text if isinstance(baseline, GenerationReadout) else None
            for plan in plans:
                demo_index = plan.demo_index
                demo_id = ids[demo_index]
                if not plan.sites:
                    skips.append(demo_id)
                    continue

                # Vulnerability sort happens against the untouched demo, so the
                # planned offsets are still valid here.
                scored: list[tuple[int, SubstituteSet, float]] = []
                for key, (site, subs) in enumerate(zip(plan.sites, plan.substitutes)):
                    if subs is None or not subs.candidates:
                        continue
                    vul = self.vulnerability_score(content_for(codes), demo_index, site, baseline)
                    scored.append((key, subs, vul))
                if not scored:
                    skips.append(demo_id)
                    continue
                scored.sort(key=lambda entry: -entry[2])

                live_sites = dict(enumerate(plan.sites))
                for key, subs, _vul in scored:
                    current_site = live_sites[key]
                    flip_commit: tuple[Mutant, Readout, float] | None = None
                    best: tuple[float, Mutant, Readout] | None = None
                    for token, _sim in subs.candidates:
                        try:
                            mutant = rename(codes[demo_index], current_site, token, self.task.language)
                        except (SubstituteCollision, ReservedWord, ParseError, ValueError):
                            # stale candidate after earlier commits; skip silently
                            continue
                        trial_codes = list(codes)
                        trial_codes[demo_index] = mutant.code
                        trial = self.readout(content_for(trial_codes), reference)
                        potential = flip_potential(baseline, trial, self.criterion)
                        hit = is_flip(baseline, trial, self.criterion)
                        trace.append(TrialRecord(demo_id, current_site.name, token, potential, hit))
                        if hit:
                            flip_commit = (mutant, trial, potential)
                            break
                        if best is None or potential > best[0]:
                            best = (potential, mutant, trial)
                    commit = flip_commit or (best and (best[1], best[2], best[0]))
                    if commit is not None:
                        mutant, trial, potential = commit
                        codes[demo_index] = mutant.code
                        final_readout, final_potential = trial, potential
                        _shift_live_sites(live_sites, key, current_site, mutant.origin[1])
                    if flip_commit is not None:
                        break  # flip committed: next demonstration
        except BackendUnavailable as exc:
            logger.warning("attack aborted mid-run: %s", exc)
            aborted = True

        final_icl = content_for(codes)
        if final_readout is None:
            final_readout = baseline if baseline is not None else self.readout(final_icl)
            if baseline is None:
                baseline = final_readout
        slots = tuple(
            DemoSlot(id=ids[i], code=codes[i], answer=answers[i], changed=codes[i] != demos[i].code)
            for i in range(len(demos))
        )
        flipped = (not aborted) and is_flip(baseline, final_readout, self.criterion)
        return AttackOutcome(
            query=query,
            slots=slots,
            icl=final_icl,
            baseline=baseline,
            final=final_readout,
            flipped=flipped,
            flip_potential=final_potential,
            queries_used=self.gateway.call_count - calls_before,
            trace=tuple(trace),
            skips=tuple(skips),
            aborted=aborted,
        )

    # -- full per-query pipeline ----------------------------------------------

    def run(
        self,
        query: Query,
        selection: SelectionResult,
        trigger: TriggerConfig | None = None,
    ) -> AttackOutcome:
        """Attack one query end to end: trigger gate, plans, greedy search.

        Without a trigger match the demonstrations pass through
        byte-identical and only the baseline readout is taken.
        """
        calls_before = self.gateway.call_count
        demos = selection.demonstrations
        benign = assemble_icl(demos, query.code, self.system_prompt, self.task_prompt)
        baseline = self.readout(benign)
        if trigger is not None and not detect_trigger(benign, trigger):
            slots = tuple(DemoSlot(d.id, d.code, d.answer, changed=False) for d in demos)
            return AttackOutcome(
                query=query,
                slots=slots,
                icl=benign,
                baseline=baseline,
                final=baseline,
                flipped=False,
                flip_potential=0.0,
                queries_used=self.gateway.call_count - calls_before,
                trace=(),
                skips=(),
            )
        try:
            plans = [self.build_plan(i, demo) for i, demo in enumerate(demos)]
        except BackendUnavailable as exc:
            logger.warning("attack aborted while building plans: %s", exc)
            slots = tuple(DemoSlot(d.id, d.code, d.answer, changed=False) for d in demos)
            return AttackOutcome(
                query=query,
                slots=slots,
                icl=benign,
                baseline=baseline,
                final=baseline,
                flipped=False,
                flip_potential=0.0,
                queries_used=self.gateway.call_count - calls_before,
                trace=(),
                skips=(),
                aborted=True,
            )
        outcome = self.greedy_mutate(query, demos, plans, baseline=baseline)
        return AttackOutcome(
            query=outcome.query,
            slots=outcome.slots,
            icl=outcome.icl,
            baseline=outcome.baseline,
            final=outcome.final,
            flipped=outcome.flipped,
            flip_potential=outcome.flip_potential,
            queries_used=self.gateway.call_count - calls_before,
            trace=outcome.trace,
            skips=outcome.skips,
            aborted=outcome.aborted,
        )
