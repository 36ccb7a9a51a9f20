"""Pipeline stages shared by the CLI and the experiment scripts."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__, cohort, evaluation, extract, gct, kg
from .config import RunConfig, dump_config

log = logging.getLogger(__name__)

KG_FILE = "kg.jsonl"
COHORT_FILE = "cohort.jsonl"
TABLE_FILE = "conditional_table.csv"
CONFIG_FILE = "config.yaml"
MANIFEST_FILE = "manifest.json"
COMPARISON_FILE = "comparison.txt"


def checkpoint_file(mode: str) -> str:
    return f"checkpoint_{mode}.json"


def report_file(mode: str) -> str:
    return f"report_{mode}.csv"


def recovered_file(mode: str) -> str:
    return f"recovered_{mode}.jsonl"


def recovery_file(mode: str) -> str:
    return f"recovery_{mode}.txt"


def ensure_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def generate(cfg: RunConfig, out) -> Dict[str, int]:
    """Write the graph, the cohort and the conditional table; return counts."""
    out = ensure_dir(out)
    g = kg.generate_synthetic_kg(cfg.kg.n_per_type, cfg.kg.edge_density,
                                 cfg.kg.bidirectional_fraction, seed=cfg.stage_seed("kg"))
    c = cfg.cohort
    visits = cohort.sample_cohort(g, c.n_visits, tuple(c.diag_per_visit), c.noise_rate,
                                  c.link_prob, c.risk_size, c.label_noise,
                                  seed=cfg.stage_seed("cohort"))
    table = cohort.count_cooccurrence(visits)
    kg.save_kg(g, out / KG_FILE)
    cohort.save_cohort(visits, out / COHORT_FILE)
    table.save_csv(out / TABLE_FILE)
    return {"nodes": len(g.nodes), "edges": len(g.edges), "visits": len(visits),
            "positive_visits": sum(v.label for v in visits), "table_entries": len(table.counts)}


@dataclass
class Encoded:
    table: cohort.ConditionalTable
    all: cohort.Batch
    train: cohort.Batch
    eval: cohort.Batch


def encode(cfg: RunConfig, visits: List[cohort.VisitRecord],
           vocabulary: Optional[List[str]] = None) -> Encoded:
    table = cohort.count_cooccurrence(visits)
    T = cfg.cohort.max_tokens or max(len(v.tokens) for v in visits)
    vocab = vocabulary or table.vocabulary
    tr, ev = cohort.split_cohort(visits, cfg.model.eval_fraction, cfg.stage_seed("split"))
    return Encoded(table, cohort.encode_batch(visits, table, T, vocab),
                   cohort.encode_batch(tr, table, T, vocab), cohort.encode_batch(ev, table, T, vocab))


def train(cfg: RunConfig, cohort_path, out, loss_mode: Optional[str] = None):
    """Train one loss mode. The report CSV is written even when training diverges."""
    out = ensure_dir(out)
    mode = loss_mode or cfg.model.loss_mode
    enc = encode(cfg, cohort.load_cohort(cohort_path))
    gcfg = cfg.model.gct(seed=cfg.stage_seed("model"), loss_mode=mode)
    model = gct.init_model(gcfg, enc.table.vocabulary)
    try:
        trained, report = gct.train(model, enc.train, enc.eval, gcfg)
    except gct.TrainingDiverged as exc:
        evaluation.write_report_csv(exc.report, out / report_file(mode))
        raise
    gct.save_checkpoint(trained, out / checkpoint_file(mode))
    evaluation.write_report_csv(report, out / report_file(mode))
    return trained, report


def run_extract(cfg: RunConfig, checkpoint_path, cohort_path, out_path) -> extract.RecoveredGraph:
    model = gct.load_checkpoint(checkpoint_path)
    visits = cohort.load_cohort(cohort_path)
    enc = encode(cfg, visits, model.vocabulary)
    e = cfg.extract
    rg = extract.recover_graph(model, enc.all, e.layer, e.mode, e.tau, e.max_hops, e.beam_width,
                               e.candidates, e.aggregation)
    extract.save_recovered(rg, out_path)
    return rg


def write_recovery(score: evaluation.RecoveryScore, path) -> None:
    evaluation.write_summary(score.as_dict(), path)


# ---------------------------------------------------------------------------
# round trip
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    config_hash: str
    seed: int
    tool_version: str = __version__
    stage: str = "start"
    files: List[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None

    def save(self, out: Path) -> None:
        (out / MANIFEST_FILE).write_text(json.dumps(self.__dict__, indent=2) + "\n", encoding="utf-8")


def roundtrip(cfg: RunConfig, out) -> Dict[str, object]:
    """generate -> train both modes -> extract -> score -> compare."""
    out = ensure_dir(out)
    man = Manifest(cfg.hash(), cfg.seed)
    man.save(out)

    def reached(stage, *files):
        man.stage = stage
        man.files.extend(files)
        man.save(out)

    (out / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")
    reached("config", CONFIG_FILE)
    counts = generate(cfg, out)
    reached("generate", KG_FILE, COHORT_FILE, TABLE_FILE)

    results: Dict[str, object] = {"counts": counts}
    truth = kg.load_kg(out / KG_FILE)
    for mode in ("original", "modified"):
        train(cfg, out / COHORT_FILE, out, mode)
        reached(f"train_{mode}", checkpoint_file(mode), report_file(mode))
        run_extract(cfg, out / checkpoint_file(mode), out / COHORT_FILE, out / recovered_file(mode))
        rg = extract.load_recovered(out / recovered_file(mode))
        score = evaluation.score_recovery(truth, rg, cfg.extract.match_floor)
        write_recovery(score, out / recovery_file(mode))
        reached(f"extract_{mode}", recovered_file(mode), recovery_file(mode))
        results[mode] = score.as_dict()

    summary = evaluation.compare_runs(evaluation.read_report_csv(out / report_file("modified")),
                                      evaluation.read_report_csv(out / report_file("original")))
    evaluation.write_summary(summary, out / COMPARISON_FILE)
    results["comparison"] = summary
    man.finished = time.time()
    reached("done", COMPARISON_FILE)
    return results
