import os
import re

import pytest

from deskbench import cli

from conftest import DATA_DIR, HYPEROPT_SMALL, MODEL_NB, MODEL_SOFTMAX, TASK_SMALL


@pytest.fixture
def study_files(tmp_path):
    paths = {}
    for name, text in (("task.yaml", TASK_SMALL), ("nb.yaml", MODEL_NB),
                       ("softmax.yaml", MODEL_SOFTMAX), ("hopt.yaml", HYPEROPT_SMALL)):
        p = tmp_path / name
        p.write_text(text)
        paths[name] = str(p)
    return paths


def _run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# Help and usage

def _all_help_text():
    os.environ["COLUMNS"] = "100"
    parser = cli.build_parser()
    chunks = [parser.format_help()]
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        chunks.append(f"==== {name} ====\n{sub.format_help()}")
    return "\n".join(chunks)


def test_help_matches_golden():
    golden = os.path.join(DATA_DIR, "cli_help.golden.txt")
    with open(golden, "r", encoding="utf-8") as fh:
        assert _all_help_text() == fh.read()


def test_every_flag_documented():
    text = _all_help_text()
    for flag in ("--task", "--models", "--hyperopt", "--workers", "--seed",
                 "--publish-config", "--out-dir", "--external-timeout-s",
                 "--scores", "--thesaurus", "--slices", "--store", "--where",
                 "--metric", "--report", "--trial", "--n-examples", "--budget",
                 "--theta", "--attacks", "--snapshot", "--ranking", "--direction"):
        assert flag in text, flag


def test_unknown_subcommand_fails_with_usage(capsys):
    code, out, err = _run(capsys, "frobnicate")
    assert code == 1


def test_no_subcommand_prints_usage(capsys):
    code, out, err = _run(capsys)
    assert code == 1
    assert "usage" in err.lower()


def test_version_flag(capsys):
    code, out, err = _run(capsys, "--version")
    assert code == 0


# ---------------------------------------------------------------------------
# validate

def test_validate_ok(capsys, study_files):
    code, out, _ = _run(capsys, "validate", "--task", study_files["task.yaml"],
                        "--models", study_files["nb.yaml"], study_files["softmax.yaml"],
                        "--hyperopt", study_files["hopt.yaml"])
    assert code == 0
    last = out.strip().splitlines()[-1]
    assert last.startswith("validate status=ok")
    assert "experiments=2" in last


def test_validate_broken_config_locates_error(capsys, tmp_path, study_files):
    bad = tmp_path / "bad_task.yaml"
    bad.write_text("task_kind: text_classification\ndataset_ids: [a\n")
    code, out, err = _run(capsys, "validate", "--task", str(bad),
                          "--models", study_files["nb.yaml"],
                          "--hyperopt", study_files["hopt.yaml"])
    assert code == 1
    assert re.search(r"bad_task\.yaml:\d+", err)


# ---------------------------------------------------------------------------
# datasets / analyze / query

def test_datasets_lists_bundled(capsys):
    code, out, _ = _run(capsys, "datasets")
    assert code == 0
    assert "dataset id=toy_polarity kind=bundled" in out
    assert out.strip().splitlines()[-1].startswith("datasets status=ok")


def test_analyze_scores_csv(capsys, tmp_path):
    scores = os.path.join(DATA_DIR, "text_classification_scores.csv")
    code, out, _ = _run(capsys, "analyze", "--scores", scores,
                        "--out-dir", str(tmp_path))
    assert code == 0
    mrr_line = next(l for l in out.splitlines() if l.startswith("mrr model=BERT-base"))
    value = float(mrr_line.split("value=")[1].split()[0])
    assert abs(value - 6.5 / 9) < 1e-4
    assert "top_rank_count=5" in mrr_line
    gap_lines = [l for l in out.splitlines() if l.startswith("gap dataset=")]
    assert gap_lines[0].startswith("gap dataset=GE")
    assert out.strip().splitlines()[-1].startswith("analyze status=ok")
    report_dir = os.path.join(str(tmp_path), "reports", "text_classification_scores")
    assert os.path.exists(os.path.join(report_dir, "mrr_heatmap.svg"))
    assert os.path.exists(os.path.join(report_dir, "scores.csv"))


def test_run_reproduce_query_flow(capsys, tmp_path, study_files):
    out_dir = str(tmp_path / "out")
    code, out, err = _run(capsys, "run",
                          "--task", study_files["task.yaml"],
                          "--models", study_files["nb.yaml"],
                          "--hyperopt", study_files["hopt.yaml"],
                          "--out-dir", out_dir)
    assert code == 0
    summary = out.strip().splitlines()[-1]
    assert summary.startswith("run status=ok")
    assert "docs=2" in summary
    assert "trial=0 status=ok" in err  # progress lines on stderr

    store_file = summary.split("store=")[1].split()[0]
    code, out, _ = _run(capsys, "query", "--store", store_file,
                        "--where", "model_id eq nb")
    assert code == 0
    assert out.strip().splitlines()[-1] == "query status=ok matched=2"

    snap = os.path.join(out_dir, "snapshots")
    study = os.listdir(snap)[0]
    snap_file = os.path.join(snap, study, os.listdir(os.path.join(snap, study))[0])
    code, out, _ = _run(capsys, "reproduce", snap_file, "--out-dir", str(tmp_path / "rep"))
    assert code == 0
    assert out.strip().splitlines()[-1].startswith("reproduce status=ok")


def test_attack_and_slice_cli(capsys, tmp_path, study_files):
    out_dir = str(tmp_path / "out")
    code, _, _ = _run(capsys, "run", "--task", study_files["task.yaml"],
                      "--models", study_files["nb.yaml"],
                      "--hyperopt", study_files["hopt.yaml"], "--out-dir", out_dir)
    assert code == 0
    snap_root = os.path.join(out_dir, "snapshots")
    study = os.listdir(snap_root)[0]
    snap_file = os.path.join(snap_root, study,
                             os.listdir(os.path.join(snap_root, study))[0])

    thesaurus = str(tmp_path / "th.tsv")
    with open(thesaurus, "w") as fh:
        fh.write("great\tawful\nwonderful\tdreadful\n")
    code, out, _ = _run(capsys, "attack", "--snapshot", snap_file,
                        "--thesaurus", thesaurus, "--n-examples", "5",
                        "--seed", "3", "--out-dir", out_dir)
    assert code == 0
    rates = [l for l in out.splitlines() if l.startswith("attack name=")]
    assert len(rates) == 3
    assert out.strip().splitlines()[-1].startswith("attack status=ok")

    slices = str(tmp_path / "slices.yaml")
    with open(slices, "w") as fh:
        fh.write("slices:\n  - {name: short, kind: length_between, lo: 0, hi: 6}\n")
    code, out, _ = _run(capsys, "slice", "--snapshot", snap_file,
                        "--slices", slices, "--out-dir", out_dir)
    assert code == 0
    assert any(l.startswith("slice name=overall") for l in out.splitlines())
    assert out.strip().splitlines()[-1].startswith("slice status=ok")


def test_run_exit_code_2_on_trial_failures(capsys, tmp_path, study_files):
    broken = tmp_path / "broken.yaml"
    broken.write_text("model_id: broken\nencoder_kind: mlp\n")  # hidden missing
    code, out, _ = _run(capsys, "run", "--task", study_files["task.yaml"],
                        "--models", str(broken),
                        "--hyperopt", study_files["hopt.yaml"],
                        "--out-dir", str(tmp_path / "out"))
    assert code == 2
    assert "status=partial" in out.strip().splitlines()[-1]


def test_analyze_store_reports(capsys, tmp_path, study_files):
    out_dir = str(tmp_path / "out")
    code, _, _ = _run(capsys, "run", "--task", study_files["task.yaml"],
                      "--models", study_files["nb.yaml"], study_files["softmax.yaml"],
                      "--hyperopt", study_files["hopt.yaml"], "--out-dir", out_dir)
    assert code == 0
    store_file = next(
        os.path.join(out_dir, "results", f)
        for f in os.listdir(os.path.join(out_dir, "results")))
    code, out, _ = _run(capsys, "analyze", "--store", store_file,
                        "--out-dir", str(tmp_path / "reports"))
    assert code == 0
    lines = out.splitlines()
    assert any(l.startswith("mrr model=nb") for l in lines)
    assert any(l.startswith("pareto model=") for l in lines)
    assert any(l.startswith("convergence model=") for l in lines)
    assert lines[-1].startswith("analyze status=ok")


def test_publish_cli_missing_env(capsys, tmp_path, study_files):
    out_dir = str(tmp_path / "out")
    _run(capsys, "run", "--task", study_files["task.yaml"],
         "--models", study_files["nb.yaml"],
         "--hyperopt", study_files["hopt.yaml"], "--out-dir", out_dir)
    store_file = next(
        os.path.join(out_dir, "results", f)
        for f in os.listdir(os.path.join(out_dir, "results")))
    pub = tmp_path / "pub.yaml"
    pub.write_text("base_url: http://127.0.0.1:9/es\nindex: bench\nauth_env: NOPE_TOKEN\n")
    os.environ.pop("NOPE_TOKEN", None)
    code, out, err = _run(capsys, "publish", "--store", store_file,
                          "--publish-config", str(pub))
    assert code == 1
    assert "NOPE_TOKEN" in err
