"""Run the reference round trip and print both training tables plus recovery per layer.

    python3 scripts/run_reference.py [--config configs/reference.yaml] [--out runs/reference]
"""
import argparse
import time
from pathlib import Path

from kgroundtrip import cohort, evaluation, extract, gct, kg, runner
from kgroundtrip.config import load_config


def side_by_side(mod, orig):
    head = f"{'Steps':>6} {'AUC-PR':>7} {'AUC-ROC':>7} {'loss':>7} | {'AUC-PR':>7} {'AUC-ROC':>7} {'loss':>7}"
    lines = [f"{'modified loss':^30} | {'original loss':^23}", head]
    for m, o in zip(mod.rows, orig.rows):
        lines.append(f"{m.step:>6} {m.auc_pr:>7.3f} {m.auc_roc:>7.3f} {m.loss:>7.4f} | "
                     f"{o.auc_pr:>7.3f} {o.auc_roc:>7.3f} {o.loss:>7.4f}")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "reference.yaml"))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out or cfg.output.directory)
    t0 = time.perf_counter()
    res = runner.roundtrip(cfg, out)
    print(f"round trip finished in {time.perf_counter() - t0:.1f}s -> {out}\n")

    mod = evaluation.read_report_csv(out / runner.report_file("modified"))
    orig = evaluation.read_report_csv(out / runner.report_file("original"))
    print(side_by_side(mod, orig))
    c = res["comparison"]
    print(f"\nmean loss  modified {c['mean_loss_modified']:.4f}  original {c['mean_loss_original']:.4f}"
          f"  ratio {c['mean_loss_ratio']:.4f}  (<10%: {c['finding_loss_below_10pct']})")
    print(f"mean AUC-ROC  modified {c['mean_auc_roc_modified']:.3f}  original {c['mean_auc_roc_original']:.3f}")

    truth = kg.load_kg(out / runner.KG_FILE)
    visits = cohort.load_cohort(out / runner.COHORT_FILE)
    print(f"\n{'mode':<9} {'layer':>5} {'prec':>6} {'recall':>6} {'f1':>6} {'rel_acc':>7}")
    for mode in gct.LOSS_MODES:
        model = gct.load_checkpoint(out / runner.checkpoint_file(mode))
        enc = runner.encode(cfg, visits, model.vocabulary)
        for layer in range(1, model.cfg.num_blocks + 1):
            rg = extract.recover_graph(model, enc.all, layer)
            s = evaluation.score_recovery(truth, rg)
            print(f"{mode:<9} {layer:>5} {s.edge_precision:>6.3f} {s.edge_recall:>6.3f} "
                  f"{s.edge_f1:>6.3f} {s.relation_accuracy:>7.3f}")


if __name__ == "__main__":
    main()
