"""Perplexity filtering, entropy probing, and defense evaluation."""

import math
import random

import pytest

from iclforge.attack import Attacker, IclContent, TriggerConfig
from iclforge.corpus import Query, TaskKind
from iclforge.defense import (
    EntropyVerdict,
    calibrate_threshold,
    evaluate_defense,
    onion_filter,
    perplexity,
    shannon_entropy,
    strip_defense,
    strip_detect,
    superimpose,
)
from iclforge.errors import EligibleZero
from iclforge.gateway import Gateway, StubBackend
from iclforge.retrieval import select_top_n
from tests.conftest import (
    BASE_SCORES,
    FLIP_SCORES,
    FLIP_TOKEN,
    flip_backend,
    make_defect_repo,
)

SYSTEM = "You review C functions for defects."
TASK = "Does this function contain a defect? Answer 0 or 1."

DEFECT = TaskKind.parse("defect")


# --------------------------------------------------------------------------
# Perplexity
# --------------------------------------------------------------------------


def test_perplexity_known_value():
    assert perplexity([("a", -1.0), ("b", -3.0)]) == pytest.approx(math.exp(2.0))
    assert perplexity([("x", 0.0)]) == pytest.approx(1.0)


def test_perplexity_empty_is_undefined():
    with pytest.raises(ValueError):
        perplexity([])


# --------------------------------------------------------------------------
# Onion filter
# --------------------------------------------------------------------------


def rare_token_gateway(**pins) -> Gateway:
    logprobs = {"zzqx": -10.0}
    logprobs.update(pins)
    return Gateway(StubBackend(token_logprobs=logprobs, default_logprob=-1.0))


def test_onion_removes_exactly_the_low_likelihood_token():
    content = IclContent(
        SYSTEM,
        TASK,
        (("int aa = 1 ;", "0"), ("int bb = zzqx + 2 ;", "1")),
        "int probe() { return 0; }",
    )
    filtered, report = onion_filter(content, threshold=0.0, gateway=rare_token_gateway())

    flat = [tok for code, _ in content.demos for tok in code.split()]
    assert [token for token, _ in report.tokens] == flat
    rare_index = flat.index("zzqx")
    assert report.removed == (rare_index,)

    # with 12 tokens, one of them at -10 and the rest at -1, the full
    # text sits at exp(21/12) and dropping the rare token leaves exp(1)
    suspicion = dict(report.tokens)
    assert suspicion["zzqx"] == pytest.approx(math.exp(21 / 12) - math.e, abs=1e-9)
    assert all(s < 0 for token, s in report.tokens if token != "zzqx")
    assert max(report.tokens, key=lambda pair: pair[1])[0] == "zzqx"

    assert filtered.demos[0] == ("int aa = 1 ;", "0")
    assert filtered.demos[1] == ("int bb = + 2 ;", "1")


def test_onion_never_touches_non_demo_turns():
    rng = random.Random(404)
    vocab = ["int", "x", "y", "=", "+", "1;", "2;", "return", "zzqx"]
    gateway = rare_token_gateway()
    for case in range(100):
        demos = tuple(
            (" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 12))), str(rng.randint(0, 1)))
            for _ in range(rng.randint(1, 3))
        )
        content = IclContent(
            f"system text {case}",
            f"task text {case}",
            demos,
            f"int probe_{case}() {{ return {case}; }}",
        )
        threshold = rng.uniform(-1.0, 1.0)
        filtered, report = onion_filter(content, threshold, gateway)
        assert filtered.system_prompt == content.system_prompt
        assert filtered.task_prompt == content.task_prompt
        assert filtered.query_code == content.query_code
        assert len(filtered.demos) == len(content.demos)
        assert [answer for _, answer in filtered.demos] == [a for _, a in content.demos]
        assert all(report.tokens[i][1] > threshold for i in report.removed)


def test_onion_zero_shot_passes_through():
    content = IclContent(SYSTEM, TASK, (), "int probe() { return 0; }")
    filtered, report = onion_filter(content, threshold=0.0, gateway=rare_token_gateway())
    assert filtered is content
    assert report.tokens == () and report.removed == ()


def test_onion_high_threshold_removes_nothing():
    content = IclContent(SYSTEM, TASK, (("int zzqx = 1 ;", "0"),), "int p() { return 0; }")
    filtered, report = onion_filter(content, threshold=1e9, gateway=rare_token_gateway())
    assert report.removed == ()
    assert filtered.demos[0][0] == "int zzqx = 1 ;"


# --------------------------------------------------------------------------
# Superimpose and entropy
# --------------------------------------------------------------------------


def test_superimpose_interleaves_lines():
    code = "a1\na2\na3"
    snippet = "b1\nb2"
    assert superimpose(code, snippet) == "a1\nb1\na2\nb2\na3"
    assert superimpose("a1", "b1\nb2\nb3") == "a1\nb1\nb2\nb3"


def test_shannon_entropy_values():
    assert shannon_entropy(["1", "0", "1", "0"]) == pytest.approx(1.0)
    assert shannon_entropy(["1", "1", "1"]) == 0.0
    expected = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))
    assert shannon_entropy(["0", "0", "0", "1"]) == pytest.approx(expected)
    with pytest.raises(ValueError):
        shannon_entropy([])


def test_shannon_entropy_is_bounded_by_label_count():
    rng = random.Random(7)
    for _ in range(100):
        n_labels = rng.randint(1, 4)
        labels = [str(rng.randint(0, n_labels - 1)) for _ in range(rng.randint(1, 30))]
        entropy = shannon_entropy(labels)
        assert 0.0 <= entropy <= math.log2(n_labels) + 1e-12


# --------------------------------------------------------------------------
# STRIP-style entropy probe
# --------------------------------------------------------------------------

BENIGN_POOL = ["int m_one = 1;", "int m_two = 2;"]


def wobbling_backend() -> StubBackend:
    """The label tracks whichever benign snippet got superimposed."""
    return StubBackend(
        classify_rules=[
            ("m_one", {"0": 0.9, "1": 0.1}),
            ("m_two", {"0": 0.1, "1": 0.9}),
            ("", dict(BASE_SCORES)),
        ],
    )


def sample_content() -> IclContent:
    repo = make_defect_repo(2)
    demos = tuple((d.code, d.answer) for d in repo.demonstrations)
    return IclContent(SYSTEM, TASK, demos, "int probe() { return 0; }")


def test_strip_detect_clean_prompt_wobbles():
    verdict = strip_detect(
        sample_content(), Gateway(wobbling_backend()), ("0", "1"), BENIGN_POOL, seed=0
    )
    # replay the seeded snippet draws to know the exact label sequence
    rng = random.Random(0)
    expected_labels = [
        "0" if "m_one" in rng.choice(BENIGN_POOL) else "1" for _ in range(8)
    ]
    assert verdict.entropy == pytest.approx(shannon_entropy(expected_labels))
    assert verdict.suspicious is False
    assert verdict.n_perturbations == 8


def test_strip_detect_pinned_prompt_is_suspicious():
    backend = StubBackend(classify_rules=[("", dict(FLIP_SCORES))])
    verdict = strip_detect(sample_content(), Gateway(backend), ("0", "1"), BENIGN_POOL)
    assert verdict.entropy == 0.0
    assert verdict.suspicious is True


def test_strip_detect_entropy_stays_in_bounds():
    for seed in range(20):
        verdict = strip_detect(
            sample_content(),
            Gateway(StubBackend(seed=seed)),
            ("0", "1"),
            BENIGN_POOL,
            seed=seed,
        )
        assert 0.0 <= verdict.entropy <= 1.0 + 1e-12
        assert verdict.suspicious == (verdict.entropy < verdict.threshold)


def test_strip_detect_validation():
    content = sample_content()
    gateway = Gateway(StubBackend())
    with pytest.raises(ValueError):
        strip_detect(content, gateway, ("0", "1"), BENIGN_POOL, n_perturbations=1)
    with pytest.raises(ValueError):
        strip_detect(content, gateway, ("0", "1"), benign_pool=[])


def test_strip_defense_drops_demos_when_suspicious():
    backend = StubBackend(classify_rules=[("", dict(FLIP_SCORES))])
    content = sample_content()
    defended = strip_defense(content, Gateway(backend), ("0", "1"), BENIGN_POOL)
    assert defended.demos == ()
    assert defended.query_code == content.query_code


def test_strip_defense_keeps_clean_prompts():
    content = sample_content()
    defended = strip_defense(content, Gateway(wobbling_backend()), ("0", "1"), BENIGN_POOL)
    assert defended is content


# --------------------------------------------------------------------------
# Threshold calibration
# --------------------------------------------------------------------------


def test_calibrate_threshold_quantiles():
    scores = [float(i) for i in range(1, 101)]
    random.Random(1).shuffle(scores)
    assert calibrate_threshold(scores, 0.05, tail="upper") == 95.0
    assert calibrate_threshold(scores, 0.05, tail="lower") == 6.0


def test_calibrate_threshold_small_samples():
    assert calibrate_threshold([3.5], 0.05, tail="upper") == 3.5
    assert calibrate_threshold([3.5], 0.05, tail="lower") == 3.5


def test_calibrate_threshold_validation():
    with pytest.raises(ValueError):
        calibrate_threshold([], 0.05)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0], 0.0)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0], 1.0)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0], 0.05, tail="middle")


# --------------------------------------------------------------------------
# Defense evaluation
# --------------------------------------------------------------------------


def attacked_outcomes(gateway: Gateway, n_queries: int = 3):
    attacker = Attacker(gateway, DEFECT, SYSTEM, TASK)
    repo = make_defect_repo(3)
    outcomes = []
    for i in range(n_queries):
        query = Query(f"q{i}", f"int probe{i}(int s) {{ return s + {i}; }}", "1")
        selection = select_top_n(query, repo, 2, gateway)
        outcomes.append(attacker.run(query, selection))
    return attacker, outcomes


def test_evaluate_defense_neutralizing_scrub():
    gateway = Gateway(flip_backend())
    attacker, outcomes = attacked_outcomes(gateway)
    assert all(o.flipped for o in outcomes)

    def scrub(content: IclContent) -> IclContent:
        demos = tuple(
            (code.replace(FLIP_TOKEN, "vz_clean"), answer) for code, answer in content.demos
        )
        return IclContent(content.system_prompt, content.task_prompt, demos, content.query_code)

    asr_before, asr_after = evaluate_defense(outcomes, scrub, attacker)
    assert asr_before == pytest.approx(1.0)
    assert asr_after == pytest.approx(0.0)
    assert asr_after < asr_before


def test_evaluate_defense_identity_keeps_asr():
    gateway = Gateway(flip_backend())
    attacker, outcomes = attacked_outcomes(gateway)
    asr_before, asr_after = evaluate_defense(outcomes, lambda content: content, attacker)
    assert asr_before == asr_after == pytest.approx(1.0)


def test_evaluate_defense_with_onion_filter():
    # the planted token is also a low-likelihood token, in both of the
    # whitespace spellings the renamed variable can take
    gateway = Gateway(
        flip_backend(
            token_logprobs={FLIP_TOKEN: -10.0, f"{FLIP_TOKEN};": -10.0},
            default_logprob=-1.0,
        )
    )
    attacker, outcomes = attacked_outcomes(gateway)
    assert all(o.flipped for o in outcomes)

    def defense(content: IclContent) -> IclContent:
        filtered, _report = onion_filter(content, threshold=0.0, gateway=gateway)
        return filtered

    asr_before, asr_after = evaluate_defense(outcomes, defense, attacker)
    assert asr_before == pytest.approx(1.0)
    assert asr_after == pytest.approx(0.0)


def test_evaluate_defense_needs_outcomes():
    attacker = Attacker(Gateway(StubBackend()), DEFECT, SYSTEM, TASK)
    with pytest.raises(EligibleZero):
        evaluate_defense([], lambda content: content, attacker)
