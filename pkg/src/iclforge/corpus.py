"""Task definitions and demonstration/query corpora.

Corpora are JSON-lines files. Each record needs a code field (``code``,
``func``, or a ``code1``/``code2`` pair for clone tasks) and an answer
field (``answer``, ``target``, or ``label``); ids are synthesized as
zero-based line indices when absent.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import EmptyRepository, InsufficientClass, MalformedRecord


class TaskMode(str, Enum):
    CLASSIFICATION = "classification"
    GENERATION = "generation"


class TaskVariant(str, Enum):
    DEFECT_DETECTION = "defect-detection"
    CLONE_DETECTION = "clone-detection"
    CODE_SUMMARIZATION = "code-summarization"
    CODE_TRANSLATION = "code-translation"


_VARIANT_MODE = {
    TaskVariant.DEFECT_DETECTION: TaskMode.CLASSIFICATION,
    TaskVariant.CLONE_DETECTION: TaskMode.CLASSIFICATION,
    TaskVariant.CODE_SUMMARIZATION: TaskMode.GENERATION,
    TaskVariant.CODE_TRANSLATION: TaskMode.GENERATION,
}

_VARIANT_DEFAULT_LANGUAGE = {
    TaskVariant.DEFECT_DETECTION: "c",
    TaskVariant.CLONE_DETECTION: "java",
    TaskVariant.CODE_SUMMARIZATION: "java",
    TaskVariant.CODE_TRANSLATION: "java",
}

_VARIANT_ALIASES = {
    "defect": TaskVariant.DEFECT_DETECTION,
    "defect-detection": TaskVariant.DEFECT_DETECTION,
    "clone": TaskVariant.CLONE_DETECTION,
    "clone-detection": TaskVariant.CLONE_DETECTION,
    "summarization": TaskVariant.CODE_SUMMARIZATION,
    "code-summarization": TaskVariant.CODE_SUMMARIZATION,
    "translation": TaskVariant.CODE_TRANSLATION,
    "code-translation": TaskVariant.CODE_TRANSLATION,
}

CLASSIFICATION_LABELS = ("0", "1")

CLONE_SEPARATORS = {"c": "// ---", "java": "// ---", "python": "# ---"}


@dataclass(frozen=True)
class TaskKind:
    """What kind of prediction a task asks for, and over which language."""

    variant: TaskVariant
    language: str

    @property
    def mode(self) -> TaskMode:
        return _VARIANT_MODE[self.variant]

    @property
    def labels(self) -> tuple[str, ...] | None:
        if self.mode is TaskMode.CLASSIFICATION:
            return CLASSIFICATION_LABELS
        return None

    @property
    def is_pair_task(self) -> bool:
        return self.variant is TaskVariant.CLONE_DETECTION

    @property
    def clone_separator(self) -> str:
        return CLONE_SEPARATORS[self.language]

    @classmethod
    def parse(cls, name: str, language: str | None = None) -> "TaskKind":
        variant = _VARIANT_ALIASES.get(name.strip().lower())
        if variant is None:
            known = ", ".join(sorted(_VARIANT_ALIASES))
            raise ValueError(f"unknown task {name!r}; expected one of: {known}")
        return cls(variant, language or _VARIANT_DEFAULT_LANGUAGE[variant])


@dataclass(frozen=True)
class Demonstration:
    """One in-context example: a code snippet and its reference answer."""

    id: str
    code: str
    answer: str
    language: str

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise ValueError(f"demonstration {self.id!r} has empty code")
        if not self.answer.strip():
            raise ValueError(f"demonstration {self.id!r} has empty answer")


@dataclass(frozen=True)
class Query:
    """A held-out snippet to be answered through the assembled prompt."""

    id: str
    code: str
    ground_truth: str | None = None

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise ValueError(f"query {self.id!r} has empty code")


@dataclass(frozen=True)
class Repository:
    """An ordered, id-unique collection of demonstrations for one task."""

    task: TaskKind
    demonstrations: tuple[Demonstration, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.demonstrations:
            raise EmptyRepository(f"no demonstrations in split {self.split!r}")
        seen: set[str] = set()
        for demo in self.demonstrations:
            if demo.id in seen:
                raise ValueError(f"duplicate demonstration id {demo.id!r}")
            seen.add(demo.id)

    def __len__(self) -> int:
        return len(self.demonstrations)

    def by_id(self, demo_id: str) -> Demonstration:
        for demo in self.demonstrations:
            if demo.id == demo_id:
                return demo
        raise KeyError(demo_id)

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for demo in self.demonstrations:
            counts[demo.answer] = counts.get(demo.answer, 0) + 1
        return counts


def join_clone_pair(code1: str, code2: str, separator: str) -> str:
    return f"{code1}\n{separator}\n{code2}"


def split_clone_pair(code: str, separator: str) -> tuple[str, str]:
    marker = f"\n{separator}\n"
    cut = code.find(marker)
    if cut < 0:
        raise ValueError("snippet does not contain the clone-pair separator")
    return code[:cut], code[cut + len(marker) :]


def _record_code(record: dict, task: TaskKind) -> str | None:
    if "code1" in record and "code2" in record:
        return join_clone_pair(str(record["code1"]), str(record["code2"]), task.clone_separator)
    for key in ("code", "func"):
        if key in record:
            return str(record[key])
    return None


def _record_answer(record: dict) -> str | None:
    for key in ("answer", "target", "label"):
        if key in record:
            value = record[key]
            if isinstance(value, bool):
                return "1" if value else "0"
            return str(value)
    return None


def _iter_records(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise MalformedRecord(lineno, "record is not a JSON object")
            yield lineno, record


def load_repository(path: str | Path, task: TaskKind, split: str = "train") -> Repository:
    """Read a demonstration repository from a JSON-lines file."""
    path = Path(path)
    demos: list[Demonstration] = []
    for lineno, record in _iter_records(path):
        code = _record_code(record, task)
        if code is None:
            raise MalformedRecord(lineno, "missing code field")
        answer = _record_answer(record)
        if answer is None:
            raise MalformedRecord(lineno, "missing answer field")
        labels = task.labels
        if labels is not None and answer not in labels:
            raise MalformedRecord(lineno, f"answer {answer!r} not in label set {labels}")
        demo_id = str(record.get("id", record.get("idx", lineno - 1)))
        try:
            demos.append(Demonstration(demo_id, code, answer, task.language))
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc)) from exc
    if not demos:
        raise EmptyRepository(f"{path} holds no records")
    return Repository(task=task, demonstrations=tuple(demos), split=split)


def load_queries(path: str | Path, task: TaskKind) -> list[Query]:
    """Read queries from a JSON-lines file; answers become ground truth."""
    path = Path(path)
    queries: list[Query] = []
    for lineno, record in _iter_records(path):
        code = _record_code(record, task)
        if code is None:
            raise MalformedRecord(lineno, "missing code field")
        answer = _record_answer(record)
        query_id = str(record.get("id", record.get("idx", lineno - 1)))
        try:
            queries.append(Query(query_id, code, answer))
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc)) from exc
    return queries


def balance_and_sample(
    repo: Repository, ratio: float, n: int, seed: int
) -> Repository:
    """Draw a label-balanced subsample of a classification repository.

    ``ratio`` is the target count of the first label per count of the
    second label (labels in label-set order), so 1.0 means equal parts.
    When the requested total is not exactly divisible, counts round down
    so the rarer class is never oversampled.
    """
    labels = repo.task.labels
    if labels is None:
        raise ValueError("balancing requires a classification task")
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    if n <= 0:
        raise ValueError("sample size must be positive")
    first, second = labels
    pools = {
        first: [d for d in repo.demonstrations if d.answer == first],
        second: [d for d in repo.demonstrations if d.answer == second],
    }
    for label in (first, second):
        if not pools[label]:
            raise InsufficientClass(label)

    # ratio = count(first) / count(second); floor everything so the
    # rarer class bounds the draw.
    second_count = min(
        len(pools[second]),
        math.floor(n / (1.0 + ratio)),
        math.floor(len(pools[first]) / ratio),
    )
    first_count = min(len(pools[first]), math.floor(second_count * ratio))
    if first_count == 0 or second_count == 0:
        raise InsufficientClass(first if first_count == 0 else second)

    rng = random.Random(seed)
    chosen: set[str] = set()
    for label, count in ((first, first_count), (second, second_count)):
        chosen.update(d.id for d in rng.sample(pools[label], count))
    kept = tuple(d for d in repo.demonstrations if d.id in chosen)
    return Repository(task=repo.task, demonstrations=kept, split=repo.split)
