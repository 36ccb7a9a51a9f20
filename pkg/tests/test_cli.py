import json
import time

import pytest
import yaml

from kgroundtrip import evaluation, extract, kg
from kgroundtrip.cli import main
from kgroundtrip.config import ConfigError, config_from_dict, load_config

TINY = {
    "seed": 7,
    "kg": {"n_per_type": {"diagnosis": 2, "procedure": 2}, "edge_density": 0.75},
    "cohort": {"n_visits": 50, "risk_size": 1},
    "model": {"steps": 200, "embed_dim": 8, "mlp_hidden": 8},
}


def write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return str(path)


def with_steps(steps, **model):
    doc = json.loads(json.dumps(TINY))
    doc["model"].update(steps=steps, **model)
    return doc


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = write_cfg(root / "tiny.yaml", TINY)
    t0 = time.perf_counter()
    code = main(["roundtrip", "--config", cfg, "--out", str(root / "run")])
    return code, root, cfg, time.perf_counter() - t0


def test_generate_deterministic_and_counted(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "a")]) == 0
    printed = dict(line.split(": ") for line in capsys.readouterr().out.splitlines())
    assert main(["generate", "--out", str(tmp_path / "b")]) == 0
    for name in ("kg.jsonl", "cohort.jsonl", "conditional_table.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    kg_lines = [l for l in (tmp_path / "a" / "kg.jsonl").read_text().splitlines() if not l.startswith("#")]
    assert int(printed["edges"]) == len(kg_lines)
    assert int(printed["visits"]) == len((tmp_path / "a" / "cohort.jsonl").read_text().splitlines())
    assert int(printed["table_entries"]) == len((tmp_path / "a" / "conditional_table.csv").read_text().splitlines()) - 1
    assert int(printed["nodes"]) == 40


def test_generate_density_zero(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"kg": {"edge_density": 0.0}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_misspelled_key_writes_nothing(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"model": {"stepz": 10}})
    out = tmp_path / "never"
    assert main(["roundtrip", "--config", cfg, "--out", str(out)]) == 1
    assert not out.exists()
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_usage_errors():
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["roundtrip", "--seed", "x"]) == 1
    assert main(["generate", "--seed", "-1", "--out", "/tmp/unused-kgrt"]) == 1


def test_config_hash_tracks_content():
    a = config_from_dict(TINY)
    assert a.hash() == config_from_dict(json.loads(json.dumps(TINY))).hash()
    assert a.hash() != config_from_dict(with_steps(201)).hash()
    assert a.stage_seed("kg") != a.stage_seed("cohort")


def test_train_zero_steps_header_only(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", with_steps(0))
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["train", "--config", cfg, "--cohort", str(tmp_path / "cohort.jsonl"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report_original.csv").read_text() == "steps,auc_pr,auc_roc,loss\n"


def test_train_modes_and_rerun(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", with_steps(100, eval_every=50))
    cohort = str(tmp_path / "cohort.jsonl")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 0
    for mode in ("original", "modified"):
        assert main(["train", "--config", cfg, "--cohort", cohort, "--loss-mode", mode, "--out", str(tmp_path)]) == 0
    orig = evaluation.read_report_csv(tmp_path / "report_original.csv")
    mod = evaluation.read_report_csv(tmp_path / "report_modified.csv")
    # CE dominates the original loss; KL terms alone are much smaller
    assert min(r.loss for r in orig.rows) > 2 * max(r.loss for r in mod.rows)
    first = (tmp_path / "report_original.csv").read_bytes()
    assert main(["train", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "report_original.csv").read_bytes() == first


def test_train_missing_cohort(tmp_path):
    assert main(["train", "--cohort", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2


def test_roundtrip_tiny(tiny_run, capsys):
    code, root, _, seconds = tiny_run
    assert code == 0
    assert seconds < 60
    run = root / "run"
    man = json.loads((run / "manifest.json").read_text())
    assert man["stage"] == "done"
    assert man["config_hash"] == load_config(root / "tiny.yaml").hash()
    assert all((run / f).exists() for f in man["files"])


def test_roundtrip_printed_metrics_match_files(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", with_steps(100, eval_every=50))
    assert main(["roundtrip", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out.splitlines()
    run = tmp_path / "r"
    truth = kg.load_kg(run / "kg.jsonl")
    for mode, line in zip(("original", "modified"), out):
        s = evaluation.score_recovery(truth, extract.load_recovered(run / f"recovered_{mode}.jsonl"))
        assert line == f"{mode}: edge_f1={s.edge_f1!r} relation_accuracy={s.relation_accuracy!r}"
    comp = evaluation.compare_runs(evaluation.read_report_csv(run / "report_modified.csv"),
                                   evaluation.read_report_csv(run / "report_original.csv"))
    assert out[2].startswith(f"mean_loss_ratio={comp['mean_loss_ratio']!r} ")


def test_recovered_file_is_kg_jsonl(tiny_run):
    _, root, _, _ = tiny_run
    lines = (root / "run" / "recovered_original.jsonl").read_text().splitlines()
    g, records = kg.parse_kg_lines(lines)
    for rec in records:
        assert {"head", "relation", "tail", "head_type", "tail_type", "match", "via"} <= set(rec)
    assert set(g.nodes) <= set(kg.load_kg(root / "run" / "kg.jsonl").nodes)


def test_extract_layers_and_modes(tiny_run, tmp_path):
    _, root, cfg, _ = tiny_run
    run = root / "run"
    ck, cohort = str(run / "checkpoint_original.json"), str(run / "cohort.jsonl")
    base = ["extract", "--config", cfg, "--checkpoint", ck, "--cohort", cohort, "--out", str(tmp_path)]
    assert main(base + ["--layer", "1", "--output-file", "l1.jsonl"]) == 0
    assert main(base + ["--layer", "1", "--output-file", "l1b.jsonl"]) == 0
    assert (tmp_path / "l1.jsonl").read_bytes() == (tmp_path / "l1b.jsonl").read_bytes()
    assert extract.load_recovered(tmp_path / "l1.jsonl").best
    assert main(base + ["--layer", "9"]) == 1


def test_extract_greedy_vs_high_threshold(tmp_path):
    # two codes of each type per visit, so no attention weight is forced to 1
    visits = [{"visit_id": f"v{i}", "diagnoses": ["D0", "D1"], "procedures": ["P0", "P1"], "label": i % 2}
              for i in range(20)]
    cohort = tmp_path / "cohort.jsonl"
    cohort.write_text("".join(json.dumps(v) + "\n" for v in visits))
    cfg = write_cfg(tmp_path / "c.yaml", with_steps(0))
    assert main(["train", "--config", cfg, "--cohort", str(cohort), "--out", str(tmp_path)]) == 0
    base = ["extract", "--config", cfg, "--checkpoint", str(tmp_path / "checkpoint_original.json"),
            "--cohort", str(cohort), "--out", str(tmp_path)]
    assert main(base + ["--output-file", "g.jsonl"]) == 0
    assert extract.load_recovered(tmp_path / "g.jsonl").best
    assert main(base + ["--mode", "threshold", "--tau", "0.9", "--output-file", "t.jsonl"]) == 0
    assert extract.load_recovered(tmp_path / "t.jsonl").best == {}


def test_evaluate_and_report(tiny_run, tmp_path, capsys):
    _, root, _, _ = tiny_run
    run = root / "run"
    assert main(["evaluate", "--kg", str(run / "kg.jsonl"), "--recovered", str(run / "recovered_modified.jsonl"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "recovery.txt").read_text() == (run / "recovery_modified.txt").read_text()
    assert main(["report", "--modified", str(run / "report_modified.csv"),
                 "--original", str(run / "report_original.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "comparison.txt").read_text() == (run / "comparison.txt").read_text()
