"""Shared fixtures: a deterministic multi-language snippet corpus and
stub-backed gateways wired for specific behaviours."""

from __future__ import annotations

import random
from typing import NamedTuple

import pytest

from iclforge.corpus import Demonstration, Repository, TaskKind
from iclforge.gateway import Gateway, StubBackend


class SnippetCase(NamedTuple):
    language: str
    code: str
    planted: tuple[str, ...]  # local variables the extractor must find


# Names safe in all three languages: no keywords, no builtins.
NAME_POOL = [
    "acc", "bale", "cur", "dote", "edge", "flux", "gain", "heap",
    "jolt", "keel", "lume", "mass", "node", "opal", "pace", "quay",
    "rune", "sill", "tide", "vane", "wick", "yarn", "zeal", "bloom",
]


def _c_shapes():
    def shape0(idx, p, q, x, y):
        return (
            "#include <stdio.h>\n"
            "\n"
            f"int calc_{idx}(int {p}, int {q}) {{\n"
            f"  int {x} = {p} + {q};  /* running total */\n"
            f"  int {y} = {x} * 2;\n"
            f"  if ({y} > {p}) {{\n"
            f"    {y} = {y} - 1;\n"
            "  }\n"
            f'  printf("calc saw %d\\n", {y});\n'
            f"  return {y} + {x};\n"
            "}\n",
            (x, y),
        )

    def shape1(idx, p, q, x, y):
        return (
            f"int loop_{idx}(int {p}) {{\n"
            f"  int {x} = 0;\n"
            f"  int {y} = {p};\n"
            f"  while ({x} < {p}) {{\n"
            f"    {y} = {y} + {x};\n"
            f"    {x} = {x} + 1;\n"
            "  }\n"
            f"  return {y};\n"
            "}\n",
            (x, y),
        )

    def shape2(idx, p, q, x, y):
        return (
            f"// tally helper {idx}\n"
            f"int tally_{idx}(int {p}) {{\n"
            f"  int {x};\n"
            f"  int {y} = 4;\n"
            f"  {x} = {p} * {y};\n"
            f"  return {x} - {y};\n"
            "}\n",
            (x, y),
        )

    def shape3(idx, p, q, x, y):
        return (
            f"struct pair_{idx} {{ int left; int right; }};\n"
            "\n"
            f"static int first_{idx}(int {p}) {{\n"
            f"  int {x} = {p} << 1;\n"
            f"  return {x};\n"
            "}\n"
            "\n"
            f"int second_{idx}(struct pair_{idx} {q}) {{\n"
            f"  int {y} = {q}.left + {q}.right;\n"
            f"  {y} = {y} % 7;\n"
            f"  return {y};\n"
            "}\n",
            (x, y),
        )

    return [shape0, shape1, shape2, shape3]


def _python_shapes():
    def shape0(idx, p, q, x, y):
        return (
            f"def calc_{idx}({p}, {q}):\n"
            f"    {x} = {p} + {q}\n"
            f"    {y} = {x} * 2\n"
            f"    if {y} > {p}:\n"
            f"        {y} -= 1\n"
            f"    return {y} + {x}\n",
            (x, y),
        )

    def shape1(idx, p, q, x, y):
        return (
            f"def loop_{idx}({p}):\n"
            f"    {x} = 0\n"
            f"    {y} = []\n"
            f"    for {q} in range({p}):\n"
            f"        {x} += {q}\n"
            f"        {y}.append({x})\n"
            f"    return ({x}, len({y}))\n",
            (x, y, q),
        )

    def shape2(idx, p, q, x, y):
        return (
            f"def outer_{idx}({p}):\n"
            f"    {x} = {p} * 3\n"
            "\n"
            f"    def helper({q}):\n"
            f"        return {q} + 1\n"
            "\n"
            f"    {y} = helper({x})\n"
            f"    while {y} < 40:\n"
            f"        {y} = {y} + {x}\n"
            f"    return {y}\n",
            (x, y),
        )

    def shape3(idx, p, q, x, y):
        return (
            f"def fmt_{idx}({p}):\n"
            f'    {x} = {{"k": {p}}}\n'
            f'    {y} = "plain literal"\n'
            f'    {q} = {x}["k"] + len({y})\n'
            f"    return {q}\n",
            (x, y, q),
        )

    return [shape0, shape1, shape2, shape3]


def _java_shapes():
    def shape0(idx, p, q, x, y):
        return (
            f"class Calc{idx} {{\n"
            f"    int run(int {p}, int {q}) {{\n"
            f"        int {x} = {p} + {q};\n"
            f"        int {y} = {x} * 2;\n"
            f"        if ({y} > {p}) {{\n"
            f"            {y} = {y} - 1;\n"
            "        }\n"
            f"        return {y} + {x};\n"
            "    }\n"
            "}\n",
            (x, y),
        )

    def shape1(idx, p, q, x, y):
        return (
            f"class Loop{idx} {{\n"
            '    String label = "fixed";\n'
            f"    int go(int {p}) {{\n"
            f"        int {x} = 0;\n"
            f'        String {y} = "tagged";\n'
            f"        for (int {q} = 0; {q} < {p}; {q} = {q} + 1) {{\n"
            f"            {x} = {x} + {q};\n"
            "        }\n"
            f"        return {x} + {y}.length();\n"
            "    }\n"
            "}\n",
            (x, y),
        )

    def shape2(idx, p, q, x, y):
        return (
            f"class Safe{idx} {{\n"
            f"    int divide(int {p}, int {q}) {{\n"
            f"        int {x} = 0;\n"
            "        try {\n"
            f"            {x} = {p} / {q};\n"
            "        } catch (ArithmeticException oops) {\n"
            f"            {x} = -1;\n"
            "        }\n"
            f"        return {x};\n"
            "    }\n"
            f"    int twice(int {p}) {{\n"
            f"        int {y} = {p} + {p};\n"
            f"        return {y};\n"
            "    }\n"
            "}\n",
            (x, y),
        )

    def shape3(idx, p, q, x, y):
        return (
            f"class Store{idx} {{\n"
            f"    int sum(int[] {p}) {{\n"
            f"        int {x} = 0;\n"
            f"        for (int {q} = 0; {q} < {p}.length; {q} = {q} + 1) {{\n"
            f"            {x} = {x} + {p}[{q}];\n"
            "        }\n"
            f"        return {x};\n"
            "    }\n"
            "}\n",
            (x,),
        )

    return [shape0, shape1, shape2, shape3]


_SHAPES = {"c": _c_shapes(), "python": _python_shapes(), "java": _java_shapes()}


def build_corpus(language: str, count: int, seed: int = 11) -> list[SnippetCase]:
    """Deterministic snippet cases with known renameable locals."""
    rng = random.Random(f"{seed}:{language}")
    shapes = _SHAPES[language]
    cases: list[SnippetCase] = []
    for idx in range(count):
        p, q, x, y = rng.sample(NAME_POOL, 4)
        code, planted = shapes[idx % len(shapes)](idx, p, q, x, y)
        cases.append(SnippetCase(language, code, planted))
    return cases


@pytest.fixture(scope="session")
def snippet_corpus() -> list[SnippetCase]:
    corpus: list[SnippetCase] = []
    for language in ("c", "python", "java"):
        corpus.extend(build_corpus(language, 70))
    return corpus


# --------------------------------------------------------------------------
# Stub wiring helpers
# --------------------------------------------------------------------------


FLIP_TOKEN = "vx_flip"
ALT_TOKEN = "vy_alt"

BASE_SCORES = {"0": 0.2, "1": 0.8}  # default readout: label 1
FLIP_SCORES = {"0": 0.9, "1": 0.1}  # once the planted token appears: label 0


def flip_backend(seed: int = 0, **overrides) -> StubBackend:
    """Classification stub that flips to label 0 whenever FLIP_TOKEN
    appears anywhere in the transcript, and proposes it for every mask."""
    kwargs = dict(
        seed=seed,
        classify_rules=[(FLIP_TOKEN, dict(FLIP_SCORES)), ("", dict(BASE_SCORES))],
        proposal_rules=[("", [FLIP_TOKEN, ALT_TOKEN])],
    )
    kwargs.update(overrides)
    return StubBackend(**kwargs)


@pytest.fixture
def flip_gateway() -> Gateway:
    return Gateway(flip_backend())


C_DEMOS = [
    ("d1", "int add(int a, int b) {\n  int total = a + b;\n  return total;\n}", "0"),
    ("d2", "int scale(int x) {\n  int factor = 3;\n  return x * factor;\n}", "1"),
    ("d3", "int square(int v) {\n  int out = v * v;\n  return out;\n}", "0"),
    ("d4", "int halve(int n) {\n  int half = n / 2;\n  return half;\n}", "1"),
    ("d5", "int cube(int w) {\n  int big = w * w * w;\n  return big;\n}", "0"),
    ("d6", "int bump(int k) {\n  int next = k + 1;\n  return next;\n}", "1"),
    ("d7", "int drop(int z) {\n  int less = z - 1;\n  return less;\n}", "0"),
]


def make_defect_repo(count: int = 7) -> Repository:
    task = TaskKind.parse("defect")
    demos = tuple(
        Demonstration(demo_id, code, answer, task.language)
        for demo_id, code, answer in C_DEMOS[:count]
    )
    return Repository(task=task, demonstrations=demos)


@pytest.fixture
def defect_repo() -> Repository:
    return make_defect_repo()
