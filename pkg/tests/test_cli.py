"""Command-line interface: config resolution, subcommands, reports."""

import json

import pytest

from iclforge.cli import (
    ENV_BACKEND_URL,
    _read_config_file,
    _resolve,
    _stub_kwargs,
    build_parser,
    main,
)
from iclforge.errors import ConfigError
from tests.conftest import C_DEMOS

# pinned poison token for stub fixtures written by these tests
POISON = "vx_sub"

STUB_FIXTURE = {
    "classifyRules": [
        [POISON, {"0": 0.95, "1": 0.05}],
        ["", {"0": 0.2, "1": 0.8}],
    ],
    "proposalRules": [["", [POISON, "vy_alt"]]],
}


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(row) for row in rows) + "\n", encoding="utf-8")


@pytest.fixture()
def workspace(tmp_path):
    """Repo, queries, and stub fixture files for a tiny defect task."""
    repo = tmp_path / "repo.jsonl"
    write_jsonl(repo, [{"id": d, "code": c, "answer": a} for d, c, a in C_DEMOS[:3]])
    queries = tmp_path / "queries.jsonl"
    write_jsonl(
        queries,
        [
            {"id": "q1", "code": "int probe(int s) { return s + 7; }", "answer": "1"},
            {"id": "q2", "code": "int gauge(int s) { return s * 3; }", "answer": "1"},
        ],
    )
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps(STUB_FIXTURE), encoding="utf-8")
    return tmp_path


def run_cli(args, capsys):
    code = main([str(a) for a in args])
    lines = [line for line in capsys.readouterr().out.strip().splitlines() if line]
    return code, json.loads(lines[-1])


def base_args(workspace, out, command="attack"):
    return [
        command,
        "--task", "defect",
        "--repo", workspace / "repo.jsonl",
        "--queries", workspace / "queries.jsonl",
        "--stub-config", workspace / "stub.json",
        "--n-demos", "3",
        "--out", out,
    ]


def read_report(out):
    return json.loads((out / "report.json").read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Config resolution
# --------------------------------------------------------------------------


def resolve(argv):
    return _resolve(build_parser().parse_args([str(a) for a in argv]))


def test_defaults_apply_without_config(monkeypatch):
    monkeypatch.delenv(ENV_BACKEND_URL, raising=False)
    cfg = resolve(["attack", "--task", "defect"])
    assert cfg.backend_url is None
    assert cfg.n_demos == 5
    assert cfg.out.name == "runs"
    assert cfg.task.language == "c"
    assert cfg.trigger_keywords == ()


def test_precedence_file_beats_default(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_BACKEND_URL, raising=False)
    ini = tmp_path / "cfg.ini"
    ini.write_text("[backend]\nurl = http://file:1\n[run]\nn_demos = 7\n")
    cfg = resolve(["attack", "--task", "defect", "--config", ini])
    assert cfg.backend_url == "http://file:1"
    assert cfg.n_demos == 7


def test_precedence_env_beats_file(tmp_path, monkeypatch):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[backend]\nurl = http://file:1\n")
    monkeypatch.setenv(ENV_BACKEND_URL, "http://env:2")
    cfg = resolve(["attack", "--task", "defect", "--config", ini])
    assert cfg.backend_url == "http://env:2"


def test_precedence_flag_beats_env(tmp_path, monkeypatch):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[backend]\nurl = http://file:1\n")
    monkeypatch.setenv(ENV_BACKEND_URL, "http://env:2")
    cfg = resolve(
        ["attack", "--task", "defect", "--config", ini, "--backend-url", "http://flag:3"]
    )
    assert cfg.backend_url == "http://flag:3"


def test_config_file_rejects_unknown_section(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[retrieval]\nindex = flat\n")
    with pytest.raises(ConfigError, match=r"unknown config section"):
        _read_config_file(ini)


def test_config_file_rejects_unknown_key(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[run]\nturbo = yes\n")
    with pytest.raises(ConfigError, match=r"unknown config key"):
        _read_config_file(ini)


def test_config_file_rejects_bad_value(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[run]\nn_demos = many\n")
    with pytest.raises(ConfigError, match=r"bad value"):
        _read_config_file(ini)


def test_config_file_types_values(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text(
        "[run]\nn_demos = 3\n[attack]\nrequire_boundary = yes\ndrop_fraction = 0.25\n"
    )
    values = _read_config_file(ini)
    assert values == {"n_demos": 3, "require_boundary": True, "drop_fraction": 0.25}


def test_resolve_validates_choices(tmp_path):
    with pytest.raises(ConfigError, match="workers"):
        resolve(["attack", "--task", "defect", "--workers", "0"])
    ini = tmp_path / "cfg.ini"
    ini.write_text("[run]\nn_demos = 2\n")
    with pytest.raises(ConfigError, match="n_demos"):
        resolve(["attack", "--task", "defect", "--config", ini])
    ini.write_text("[attack]\ntrigger_scope = everywhere\n")
    with pytest.raises(ConfigError, match="trigger_scope"):
        resolve(["attack", "--task", "defect", "--config", ini])
    with pytest.raises(ConfigError, match="max_queries"):
        resolve(["attack", "--task", "defect", "--max-queries", "0"])


def test_unknown_task_is_config_error():
    with pytest.raises(ConfigError, match="unknown task"):
        resolve(["attack", "--task", "sorting"])


def test_trigger_keywords_from_file_and_flag(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[attack]\ntrigger_keywords = load, save\n")
    cfg = resolve(["attack", "--task", "defect", "--config", ini])
    assert cfg.trigger_keywords == ("load", "save")
    cfg = resolve(
        ["attack", "--task", "defect", "--config", ini,
         "--trigger-keyword", "fetch", "--trigger-keyword", "store"]
    )
    assert cfg.trigger_keywords == ("fetch", "store")


# --------------------------------------------------------------------------
# Stub fixture files
# --------------------------------------------------------------------------


def test_stub_config_camel_case_keys(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({
        "classifyRules": [["tok", {"0": 0.9, "1": 0.1}]],
        "tokenLogprobs": {"tok": -9.0},
        "defaultLogprob": -1.0,
        "dim": 16,
    }))
    cfg = resolve(["attack", "--task", "defect", "--stub-config", stub, "--stub-seed", "4"])
    kwargs = _stub_kwargs(cfg)
    assert kwargs["seed"] == 4
    assert kwargs["labels"] == ("0", "1")
    assert kwargs["classify_rules"] == [("tok", {"0": 0.9, "1": 0.1})]
    assert kwargs["token_logprobs"] == {"tok": -9.0}
    assert kwargs["default_logprob"] == -1.0
    assert kwargs["dim"] == 16


def test_stub_config_rejects_unknown_key(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text(json.dumps({"flipRules": []}))
    cfg = resolve(["attack", "--task", "defect", "--stub-config", stub])
    with pytest.raises(ConfigError, match="unknown stub config key"):
        _stub_kwargs(cfg)


def test_stub_config_rejects_non_object(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text("[1, 2]")
    cfg = resolve(["attack", "--task", "defect", "--stub-config", stub])
    with pytest.raises(ConfigError, match="JSON object"):
        _stub_kwargs(cfg)


def test_stub_config_rejects_bad_json(tmp_path):
    stub = tmp_path / "stub.json"
    stub.write_text("{ nope")
    cfg = resolve(["attack", "--task", "defect", "--stub-config", stub])
    with pytest.raises(ConfigError, match="not valid JSON"):
        _stub_kwargs(cfg)


# --------------------------------------------------------------------------
# attack
# --------------------------------------------------------------------------


def test_attack_end_to_end(workspace, capsys):
    out = workspace / "run"
    code, emitted = run_cli(base_args(workspace, out), capsys)
    assert code == 0
    assert emitted["command"] == "attack"

    report = read_report(out)
    agg = report["aggregates"]
    assert agg["queries"] == 2
    assert agg["flipped"] == 2
    assert agg["asr"] == pytest.approx(1.0)
    assert agg["queryTime"] == pytest.approx(agg["attackCalls"] / agg["flipped"])
    assert agg["accuracyBefore"] == pytest.approx(1.0)
    assert agg["accuracyAfter"] == pytest.approx(0.0)
    assert agg["accuracyDrop"] == pytest.approx(-1.0)

    for record in report["queries"]:
        assert record["baseline"]["label"] == "1"
        assert record["final"]["label"] == "0"
        assert record["flipped"] is True
        trace = json.loads((out / record["traceFile"]).read_text(encoding="utf-8"))
        assert trace["queryId"] == record["id"]
        assert any(POISON in slot["code"] for slot in trace["slots"])
        assert len(trace["trials"]) == record["trials"]


def test_attack_is_deterministic(workspace, capsys):
    out1, out2 = workspace / "r1", workspace / "r2"
    run_cli(base_args(workspace, out1), capsys)
    run_cli(base_args(workspace, out2), capsys)
    first, second = read_report(out1), read_report(out2)
    assert first["queries"] == second["queries"]
    assert first["aggregates"] == second["aggregates"]


def test_attack_workers_match_serial(workspace, capsys):
    out1, out2 = workspace / "serial", workspace / "parallel"
    run_cli(base_args(workspace, out1), capsys)
    run_cli(base_args(workspace, out2) + ["--workers", "2"], capsys)
    assert read_report(out1)["queries"] == read_report(out2)["queries"]
    assert read_report(out1)["aggregates"] == read_report(out2)["aggregates"]


def test_attack_trigger_gates_poisoning(workspace, capsys):
    queries = workspace / "queries.jsonl"
    write_jsonl(
        queries,
        [
            {"id": "armed", "code": "int load(int s) { return s + 7; }", "answer": "1"},
            {"id": "plain", "code": "int gauge(int s) { return s * 3; }", "answer": "1"},
        ],
    )
    out = workspace / "gated"
    code, _ = run_cli(base_args(workspace, out) + ["--trigger-keyword", "load"], capsys)
    assert code == 0
    report = read_report(out)
    by_id = {r["id"]: r for r in report["queries"]}

    assert by_id["armed"]["triggered"] is True
    assert by_id["armed"]["flipped"] is True
    assert by_id["plain"]["triggered"] is False
    assert by_id["plain"]["flipped"] is False
    assert by_id["plain"]["queriesUsed"] == 1  # baseline readout only
    assert report["aggregates"]["asr"] == pytest.approx(0.5)

    # the untriggered prompt must carry the repository codes byte for byte
    plain_trace = json.loads((out / by_id["plain"]["traceFile"]).read_text(encoding="utf-8"))
    original = {d: c for d, c, _ in C_DEMOS[:3]}
    for slot in plain_trace["slots"]:
        assert slot["changed"] is False
        assert slot["code"] == original[slot["id"]]


def test_attack_max_queries(workspace, capsys):
    out = workspace / "limited"
    code, _ = run_cli(base_args(workspace, out) + ["--max-queries", "1"], capsys)
    assert code == 0
    report = read_report(out)
    assert [r["id"] for r in report["queries"]] == ["q1"]


# --------------------------------------------------------------------------
# select and evaluate
# --------------------------------------------------------------------------


def test_select_reports_rankings(workspace, capsys):
    out = workspace / "sel"
    code, emitted = run_cli(base_args(workspace, out, command="select"), capsys)
    assert code == 0
    assert emitted["command"] == "select"
    report = read_report(out)
    for record in report["queries"]:
        assert len(record["selection"]) == 3
        sims = [entry["similarity"] for entry in record["selection"]]
        assert sims == sorted(sims, reverse=True)
        assert {entry["id"] for entry in record["selection"]} == {"d1", "d2", "d3"}


def test_evaluate_clean_accuracy(workspace, capsys):
    out = workspace / "eval"
    code, emitted = run_cli(base_args(workspace, out, command="evaluate"), capsys)
    assert code == 0
    report = read_report(out)
    # no poison token in any benign prompt, so every answer stays 1
    assert report["aggregates"]["accuracy"] == pytest.approx(1.0)
    assert report["aggregates"]["labeledQueries"] == 2
    assert all(r["correct"] is True for r in report["queries"])


def test_evaluate_zero_shot_needs_no_repo(workspace, capsys):
    out = workspace / "zero"
    code, _ = run_cli(
        [
            "evaluate",
            "--task", "defect",
            "--queries", workspace / "queries.jsonl",
            "--stub-config", workspace / "stub.json",
            "--n-demos", "0",
            "--out", out,
        ],
        capsys,
    )
    assert code == 0
    report = read_report(out)
    assert all(r["selection"] is None for r in report["queries"])
    assert report["aggregates"]["accuracy"] == pytest.approx(1.0)


def test_evaluate_report_audit_round_trip(workspace, capsys):
    out = workspace / "run"
    run_cli(base_args(workspace, out), capsys)
    audit_out = workspace / "audit"
    code, emitted = run_cli(
        ["evaluate", "--report", out / "report.json", "--out", audit_out], capsys
    )
    assert code == 0
    assert emitted["consistent"] is True
    audit = read_report(audit_out)
    assert audit["aggregates"] == read_report(out)["aggregates"]


def test_evaluate_report_audit_catches_tampering(workspace, capsys):
    out = workspace / "run"
    run_cli(base_args(workspace, out), capsys)
    report = read_report(out)
    report["aggregates"]["asr"] = 0.123
    (out / "report.json").write_text(json.dumps(report), encoding="utf-8")

    audit_out = workspace / "audit"
    code, emitted = run_cli(
        ["evaluate", "--report", out / "report.json", "--out", audit_out], capsys
    )
    assert code == 1
    assert emitted["error"]["type"] == "ReportMismatch"
    assert read_report(audit_out)["consistent"] is False


def test_evaluate_report_rejects_non_attack_reports(workspace, capsys):
    out = workspace / "sel"
    run_cli(base_args(workspace, out, command="select"), capsys)
    code, emitted = run_cli(
        ["evaluate", "--report", out / "report.json", "--out", workspace / "a"], capsys
    )
    assert code == 1
    assert emitted["error"]["type"] == "ConfigError"


# --------------------------------------------------------------------------
# transfer and bundle evaluation
# --------------------------------------------------------------------------


def test_transfer_builds_and_bundle_evaluates(workspace, capsys):
    out = workspace / "uni"
    code, emitted = run_cli(base_args(workspace, out, command="transfer"), capsys)
    assert code == 0
    report = read_report(out)
    assert report["asrOnSet"] == pytest.approx(1.0)
    assert report["acceptedAsrTrace"] == [1.0]
    bundle_path = out / "bundle.json"
    assert bundle_path.exists()
    bundle = json.loads(bundle_path.read_text(encoding="utf-8"))
    assert any(POISON in demo["code"] for demo in bundle["demos"])

    eval_out = workspace / "uni-eval"
    code, _ = run_cli(
        [
            "evaluate",
            "--task", "defect",
            "--queries", workspace / "queries.jsonl",
            "--stub-config", workspace / "stub.json",
            "--bundle", bundle_path,
            "--out", eval_out,
        ],
        capsys,
    )
    assert code == 0
    eval_report = read_report(eval_out)
    # the poisoned bundle drags every answer to 0 against ground truth 1
    assert eval_report["aggregates"]["accuracy"] == pytest.approx(0.0)


def test_attack_with_fixed_bundle_judges_it(workspace, capsys):
    uni_out = workspace / "uni"
    run_cli(base_args(workspace, uni_out, command="transfer"), capsys)
    judge_out = workspace / "judge"
    code, _ = run_cli(
        base_args(workspace, judge_out) + ["--bundle", uni_out / "bundle.json"], capsys
    )
    assert code == 0
    report = read_report(judge_out)
    assert report["aggregates"]["asr"] == pytest.approx(1.0)
    assert all(r["trials"] == 0 for r in report["queries"])


# --------------------------------------------------------------------------
# defend
# --------------------------------------------------------------------------


def onion_stub(workspace):
    stub = dict(STUB_FIXTURE)
    stub["tokenLogprobs"] = {POISON: -10.0, f"{POISON};": -10.0}
    stub["defaultLogprob"] = -1.0
    path = workspace / "stub-onion.json"
    path.write_text(json.dumps(stub), encoding="utf-8")
    return path


def test_defend_onion_neutralizes_attack(workspace, capsys):
    out = workspace / "defended"
    args = base_args(workspace, out, command="defend")
    args[args.index("--stub-config") + 1] = onion_stub(workspace)
    code, emitted = run_cli(args + ["--method", "onion", "--threshold", "0.0"], capsys)
    assert code == 0
    assert emitted["asrBefore"] == pytest.approx(1.0)
    assert emitted["asrAfter"] == pytest.approx(0.0)
    report = read_report(out)
    assert report["defense"]["method"] == "onion"
    assert report["defense"]["asrAfter"] < report["defense"]["asrBefore"]


def test_defend_strip_drops_suspicious_demos(workspace, capsys):
    out = workspace / "stripped"
    code, emitted = run_cli(
        base_args(workspace, out, command="defend")
        + ["--method", "strip", "--threshold", "0.5"],
        capsys,
    )
    assert code == 0
    # the stubbed label never wobbles under superimposition, so every
    # poisoned prompt is flagged and loses its demonstrations
    assert emitted["asrBefore"] == pytest.approx(1.0)
    assert emitted["asrAfter"] == pytest.approx(0.0)


def test_defend_requires_method_and_threshold(workspace, capsys):
    out = workspace / "d"
    code, emitted = run_cli(base_args(workspace, out, command="defend"), capsys)
    assert code == 1
    assert emitted["error"]["type"] == "ConfigError"
    code, emitted = run_cli(
        base_args(workspace, out, command="defend") + ["--method", "onion"], capsys
    )
    assert code == 1
    assert "threshold" in emitted["error"]["message"]


# --------------------------------------------------------------------------
# Error reporting
# --------------------------------------------------------------------------


def test_missing_task_exits_one(capsys):
    code, emitted = run_cli(["attack", "--queries", "nope.jsonl"], capsys)
    assert code == 1
    assert emitted["error"]["type"] == "ConfigError"


def test_missing_repo_file_exits_one(workspace, capsys):
    code, emitted = run_cli(
        [
            "attack",
            "--task", "defect",
            "--repo", workspace / "absent.jsonl",
            "--queries", workspace / "queries.jsonl",
            "--out", workspace / "x",
        ],
        capsys,
    )
    assert code == 1
    assert "error" in emitted


def test_invalid_usage_exits_one(capsys):
    code, emitted = run_cli(["explode"], capsys)
    assert code == 1
    assert emitted["error"]["type"] == "UsageError"


def test_malformed_repo_reports_line(workspace, capsys):
    bad = workspace / "bad.jsonl"
    bad.write_text('{"id": "d1", "code": "int x;", "answer": "0"}\n{"id": "d2"}\n')
    code, emitted = run_cli(
        [
            "attack",
            "--task", "defect",
            "--repo", bad,
            "--queries", workspace / "queries.jsonl",
            "--out", workspace / "x",
        ],
        capsys,
    )
    assert code == 1
    assert emitted["error"]["type"] == "MalformedRecord"
    assert "line 2" in emitted["error"]["message"]
