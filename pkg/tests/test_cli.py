from __future__ import annotations

import json
import re
from dataclasses import fields

import pytest
from click.testing import CliRunner

from cwescout import cli as cli_mod
from cwescout.cli import main
from cwescout.config import Config

from conftest import cwe_json, numbered

FUNC = "int copy(char *dst, const char *src, size_t n)\n{\n    memcpy(dst, src, n);\n    return 0;\n}\n"
APPROVE = "**VERDICT:** APPROVE\n\n**Missing CWEs:**\n(none)"


def audit(**d):
    return json.dumps({"cwes": [
        {"CWE": c.replace("_", "-"), "title": "", "final_decision": v, "justification": f"because {c}"}
        for c, v in d.items()
    ]})


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def live(monkeypatch, router):
    """Route the 'live' chat provider to a Router built from the given handlers."""

    def _install(**handlers):
        monkeypatch.setattr("cwescout.config.HttpChatProvider", lambda url=None: router(**handlers))

    return _install


@pytest.fixture
def func_file(tmp_path):
    p = tmp_path / "f.c"
    p.write_text(FUNC)
    return p


# -- index -----------------------------------------------------------------------

def test_index_134_line_project(runner, write_tree):
    root = write_tree({"main.c": numbered(134, "int x")})
    res = runner.invoke(main, ["index", str(root)])
    assert res.exit_code == 0, res.output
    assert "1 files, 14 chunks (k=10)" in res.output
    first = (root / ".cwescout" / "index.idx").read_bytes()
    again = runner.invoke(main, ["index", str(root)])
    assert again.exit_code == 0 and "index up to date" in again.output
    assert (root / ".cwescout" / "index.idx").read_bytes() == first


def test_index_rebuilds_when_settings_change(runner, write_tree):
    root = write_tree({"main.c": numbered(134)})
    runner.invoke(main, ["index", str(root)])
    res = runner.invoke(main, ["index", str(root), "--k-chunk", "20"])
    assert res.exit_code == 0 and "7 chunks (k=20)" in res.output


def test_index_empty_dir_fails(runner, tmp_path):
    res = runner.invoke(main, ["index", str(tmp_path)])
    assert res.exit_code == 2
    assert "NoFilesMatched" in res.output


def test_config_file_and_flag_precedence(runner, write_tree, tmp_path):
    root = write_tree({"main.c": numbered(40)})
    cfg = tmp_path / "c.yaml"
    cfg.write_text("k_chunk: 20\n")
    res = runner.invoke(main, ["--config", str(cfg), "index", str(root)])
    assert "2 chunks (k=20)" in res.output
    res = runner.invoke(main, ["--config", str(cfg), "index", str(root), "--k-chunk", "5", "--out", str(tmp_path / "o")])
    assert "8 chunks (k=5)" in res.output


def test_secret_in_config_file_is_refused(runner, tmp_path, write_tree):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("llm_api_key: sk-1\n")
    res = runner.invoke(main, ["--config", str(cfg), "index", str(write_tree({"a.c": "x\n"}))])
    assert res.exit_code == 2 and "environment" in res.output


# -- scan ------------------------------------------------------------------------

def test_scan_two_confirmed_exits_1(runner, live, func_file, tmp_path):
    live(lister=cwe_json(("CWE-120", 0.9), ("CWE-787", 0.7), ("CWE-20", 0.2)), reviewer=APPROVE,
         security_auditor=audit(CWE_120="confirmed", CWE_787="confirmed", CWE_20="rejected"))
    res = runner.invoke(main, ["scan", str(func_file), "--no-context", "--out", str(tmp_path)])
    assert res.exit_code == 1, res.output
    lines = res.output.splitlines()
    assert lines[0].startswith("3 candidates, 2 confirmed, 1 rejected")
    assert "CONTEXT_FREE" in lines[0]
    assert "CONFIRMED" in lines[1] and "CWE-120" in lines[1]
    assert "CONFIRMED" in lines[2] and "CWE-787" in lines[2]
    assert "rejected" in lines[3] and "CWE-20" in lines[3] and "because CWE_20" in lines[3]
    report = json.loads(next(tmp_path.glob("*.report")).read_text())
    assert report["confirmed"] == ["CWE-120", "CWE-787"]
    assert report["flags"]["CONTEXT_FREE"] is True


def test_scan_clean_exits_0(runner, live, func_file, tmp_path):
    live(lister=cwe_json(("CWE-120", 0.9)), reviewer=APPROVE, security_auditor=audit(CWE_120="rejected"))
    res = runner.invoke(main, ["scan", str(func_file), "--no-context", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output


def test_scan_pipeline_error_exits_2(runner, live, func_file, tmp_path):
    live(lister="I cannot produce JSON")
    res = runner.invoke(main, ["scan", str(func_file), "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "scan failed" in res.output
    assert json.loads(next(tmp_path.glob("*.report")).read_text())["status"] == "error"


def test_scan_missing_or_empty_function_file(runner, tmp_path):
    assert runner.invoke(main, ["scan", str(tmp_path / "nope.c")]).exit_code == 2
    (tmp_path / "empty.c").write_text("\n")
    assert runner.invoke(main, ["scan", str(tmp_path / "empty.c")]).exit_code == 2


def test_scan_without_endpoint_exits_2(runner, func_file, monkeypatch):
    monkeypatch.delenv("CWESCOUT_LLM_URL", raising=False)
    res = runner.invoke(main, ["scan", str(func_file), "--no-context"])
    assert res.exit_code == 2


def test_record_then_replay_identical(runner, live, func_file, tmp_path, write_tree):
    root = write_tree({"main.c": "int main(void)\n{\n    char b[4];\n    return copy(b, \"x\", 2);\n}\n"})
    live(lister=cwe_json(("CWE-120", 0.9)), reviewer=APPROVE,
         context_extractor=json.dumps({"CWE": "CWE-120", "context_information": [
             {"context": "callers of copy", "available": "false", "criticality": "High", "reason": "r"}]}),
         query_agent=json.dumps({"questions": [{"Question": "Who calls copy?", "reason": "r"}]}),
         context_synthesizer="main calls copy with n=2 and a 4-byte buffer.",
         security_auditor=audit(CWE_120="rejected"))
    cassette = tmp_path / "cassette.rec"
    rec = runner.invoke(main, ["scan", str(func_file), "--root", str(root), "--record", str(cassette),
                               "--out", str(tmp_path / "a")])
    assert rec.exit_code == 0, rec.output
    assert cassette.is_file()
    rep = runner.invoke(main, ["scan", str(func_file), "--root", str(root), "--replay", str(cassette),
                               "--out", str(tmp_path / "b")])
    assert rep.exit_code == 0, rep.output
    again = runner.invoke(main, ["replay", str(cassette), "--out", str(tmp_path / "c")])
    assert again.exit_code == 0, again.output
    a, b, c = (next((tmp_path / d).glob("*.report")).read_bytes() for d in "abc")
    assert a == b == c
    assert b"Who calls copy?" in a


def test_replay_of_unusable_cassette(runner, tmp_path):
    bad = tmp_path / "x.rec"
    bad.write_text('{"version": 1, "records": []}')
    assert runner.invoke(main, ["replay", str(bad)]).exit_code == 2


def test_scan_uses_prebuilt_index(runner, live, func_file, tmp_path, write_tree, monkeypatch):
    root = write_tree({"main.c": numbered(30)})
    assert runner.invoke(main, ["index", str(root)]).exit_code == 0
    loaded = []
    real = cli_mod._cached_database
    monkeypatch.setattr(cli_mod, "_cached_database", lambda *a: loaded.append(real(*a)) or loaded[-1])
    live(lister=cwe_json(("CWE-120", 0.9)), reviewer=APPROVE,
         context_extractor=json.dumps({"CWE": "CWE-120", "context_information": []}),
         security_auditor=audit(CWE_120="confirmed"))
    res = runner.invoke(main, ["scan", str(func_file), "--root", str(root), "--out", str(tmp_path)])
    assert res.exit_code == 1, res.output
    assert loaded and loaded[0] is not None


# -- help ------------------------------------------------------------------------

def test_help_lists_every_config_default(runner):
    res = runner.invoke(main, ["--help"])
    assert res.exit_code == 0
    for f in fields(Config):
        assert f"  {f.name} = " in res.output
    assert "k_chunk = 10" in res.output
    assert "k_retrieval = 5" in res.output
    assert "max_debate_iterations = 5" in res.output
    for flag in ("--config", "--record", "--replay", "--single-agent", "--no-context",
                 "--k-chunk", "--k-retrieval", "--max-iterations"):
        assert flag in res.output
    for cmd in ("index", "scan", "eval", "replay"):
        assert cmd in res.output


# -- eval ------------------------------------------------------------------------

def test_eval_full_on_synthetic_set(runner, synthetic_dir, tmp_path):
    res = runner.invoke(main, ["eval", str(synthetic_dir / "dataset.jsonl"), "--mode", "FULL",
                               "--replay", str(synthetic_dir / "cassettes" / "multi-agent"),
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert re.search(r"Program +\| #TP \| #FP \| #TN \| #FN", res.output)
    assert "cwe415" in res.output and "1*" in res.output
    assert (tmp_path / "full-multi.txt").is_file() and (tmp_path / "full-multi.json").is_file()
    assert len(list((tmp_path / "reports").glob("*.report"))) == 10


def test_eval_step1_only_prints_recall_with_n(runner, synthetic_dir, tmp_path):
    res = runner.invoke(main, ["eval", str(synthetic_dir / "dataset.jsonl"), "--mode", "STEP1_ONLY",
                               "--replay", str(synthetic_dir / "cassettes" / "multi-agent"),
                               "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert "Top-1" in res.output and "| 10" in res.output


def test_eval_compare_arms(runner, synthetic_dir, tmp_path):
    res = runner.invoke(main, ["eval", str(synthetic_dir / "dataset.jsonl"), "--compare-arms",
                               "--replay", str(synthetic_dir / "cassettes"), "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert "Arm comparison" in res.output
    assert "Single-agent" in res.output and "Multi-agent" in res.output
    assert (tmp_path / "full-arms.txt").is_file()
    assert (tmp_path / "full-single.txt").is_file() and (tmp_path / "full-multi.txt").is_file()


def test_eval_bad_dataset_exits_2(runner, tmp_path):
    assert runner.invoke(main, ["eval", str(tmp_path / "none.jsonl")]).exit_code == 2
    (tmp_path / "d.jsonl").write_text("{}\n")
    assert runner.invoke(main, ["eval", str(tmp_path / "d.jsonl")]).exit_code == 2


def test_eval_partial_failure_exits_2(runner, synthetic_dir, tmp_path):
    # replaying the single-agent cassettes under the multi-agent setting diverges on the first reviewer call
    res = runner.invoke(main, ["eval", str(synthetic_dir / "dataset.jsonl"), "--mode", "STEP1_ONLY",
                               "--replay", str(synthetic_dir / "cassettes" / "single-agent"),
                               "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "partial completion" in res.output
