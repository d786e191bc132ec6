"""Command-line entry point.

Subcommands cover the full pipeline: contrastive pretraining, few-shot
adaptation (main method plus baselines), evaluation, the data-fraction
sweep, the ablation study, significance testing, embedding export, and a
raw dataset dump. All commands share --config / --seed / --out.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, report
from .bench import generate_scenario
from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .config import default_config_text, load_config, parse_config
from .harness import MAIN_METHOD, MissingPretrainError, SeedResult
from .metrics import MetricSet


def _build_parser():
    p = argparse.ArgumentParser(
        prog="diva",
        description="Attribute-grounded few-shot adaptation of dual encoders",
    )
    p.add_argument("--config", metavar="PATH", help="experiment config file")
    p.add_argument("--seed", type=int, metavar="INT",
                   help="run a single seed instead of the configured list")
    p.add_argument("--out", default="out", metavar="DIR", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="contrastive pretraining of both encoders")
    a = sub.add_parser("adapt", help="few-shot adaptation of every configured method")
    a.add_argument("--fraction", type=float, help="override training-data fraction")
    e = sub.add_parser("eval", help="evaluate the adapted model (or zero-shot)")
    e.add_argument("--zero-shot", action="store_true",
                   help="evaluate task prompts without any adaptation")
    sub.add_parser("sweep", help="data-efficiency sweep over training fractions")
    sub.add_parser("ablate", help="leave-one-out ablation of the main method")
    t = sub.add_parser("ttest", help="paired significance tests from adapt results")
    t.add_argument("--results", metavar="PATH",
                   help="per-seed results table (default: <out>/adapt_per_seed.tsv)")
    sub.add_parser("export-embeddings", help="CSV of test/prompt/prototype embeddings")
    sub.add_parser("dump-dataset", help="raw float32 images plus a manifest")
    sub.add_parser("print-config", help="write the default config to stdout")
    return p


def _load(args):
    cfg = load_config(args.config) if args.config else parse_config(default_config_text())
    if args.seed is not None:
        cfg.run.seeds = (args.seed,)
        cfg.run.pretrain_seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    return cfg, generate_scenario(cfg.scenario)


def _pretrain_path(out):
    return os.path.join(out, "pretrain.ckpt")


def _adapted_path(out):
    return os.path.join(out, "adapted.ckpt")


def cmd_pretrain(args):
    cfg, scenario = _load(args)
    art = harness.run_pretraining(cfg, scenario)
    harness.save_pretrain(_pretrain_path(args.out), art, cfg)
    report.write_tsv(os.path.join(args.out, "pretrain_loss.tsv"),
                     ["epoch", "loss"],
                     [[i + 1, float(v)] for i, v in enumerate(art.loss_curve)])
    report.fig_pretrain_curve(art.loss_curve,
                              os.path.join(args.out, "pretrain_loss.png"))
    zs = harness.zero_shot_task_metrics(cfg, scenario, art)
    print(f"pretrained {cfg.run.pretrain_epochs} epochs; "
          f"final loss {art.loss_curve[-1]:.4f}; "
          f"zero-shot task weighted F1 {zs.weighted_f1:.4f}")
    print(f"saved {_pretrain_path(args.out)}")


def cmd_adapt(args):
    cfg, scenario = _load(args)
    art = harness.load_pretrain(_pretrain_path(args.out), cfg)
    fraction = args.fraction if args.fraction else cfg.run.data_fraction
    results = harness.run_adaptation(cfg, scenario, art, fraction=fraction)
    paths = report.write_run_report(args.out, results, scenario.n_classes,
                                    prefix="adapt")
    report.fig_method_bars(results, os.path.join(args.out, "adapt_methods.png"))
    header, rows = report.ttest_table(results)
    report.write_tsv(os.path.join(args.out, "adapt_ttest.tsv"), header, rows)
    main = [r for r in results if r.method == MAIN_METHOD]
    if main:
        best = max(main, key=lambda r: r.metrics.weighted_f1)
        save_checkpoint(_adapted_path(args.out), best.model_arrays,
                        config_fingerprint(cfg.fingerprint_text()))
    for (method, variant, frac), mem in report._group(results):
        f1s = [r.metrics.weighted_f1 for r in mem]
        print(f"{method:14s} fraction {frac:.2f}: "
              f"weighted F1 {np.mean(f1s):.4f} +/- {np.std(f1s):.4f}")
    print(f"wrote {paths['per_seed']} and {paths['summary']}")


def cmd_eval(args):
    cfg, scenario = _load(args)
    art = harness.load_pretrain(_pretrain_path(args.out), cfg)
    if args.zero_shot:
        metrics = harness.zero_shot_task_metrics(cfg, scenario, art)
        label = "zero_shot"
    else:
        path = _adapted_path(args.out)
        if not os.path.exists(path):
            raise MissingPretrainError(
                f"no adapted checkpoint at {path}; run the `adapt` command first")
        arrays, _ = load_checkpoint(path)
        vision_enc, clf = harness.rebuild_vision_classifier(cfg, scenario, arrays)
        metrics, _ = harness.evaluate(vision_enc, clf, scenario.split.test.images,
                                      scenario.split.test.labels)
        label = MAIN_METHOD
    d = metrics.as_dict()
    report.write_tsv(os.path.join(args.out, "eval.tsv"),
                     ["model"] + list(d), [[label] + list(d.values())])
    print(f"{label}: accuracy {metrics.accuracy:.4f}, "
          f"weighted F1 {metrics.weighted_f1:.4f}, "
          f"macro AUC {metrics.macro_auc:.4f}")


def cmd_sweep(args):
    cfg, scenario = _load(args)
    art = harness.load_pretrain(_pretrain_path(args.out), cfg)
    results = harness.sweep_data_fraction(cfg, scenario, art)
    report.write_run_report(args.out, results, scenario.n_classes, prefix="sweep")
    report.fig_sweep(results, os.path.join(args.out, "sweep.png"))
    for (method, variant, frac), mem in report._group(results):
        f1s = [r.metrics.weighted_f1 for r in mem]
        print(f"{method:14s} fraction {frac:.2f}: weighted F1 {np.mean(f1s):.4f}")


def cmd_ablate(args):
    cfg, scenario = _load(args)
    art = harness.load_pretrain(_pretrain_path(args.out), cfg)
    results = harness.run_ablation(cfg, scenario, art)
    report.write_run_report(args.out, results, scenario.n_classes, prefix="ablate")
    report.fig_ablation(results, os.path.join(args.out, "ablation.png"))
    for (method, variant, frac), mem in report._group(results):
        f1s = [r.metrics.weighted_f1 for r in mem]
        print(f"{variant:14s}: weighted F1 {np.mean(f1s):.4f} +/- {np.std(f1s):.4f}")


def cmd_ttest(args):
    cfg, scenario = _load(args)
    path = args.results or os.path.join(args.out, "adapt_per_seed.tsv")
    if not os.path.exists(path):
        raise MissingPretrainError(
            f"no per-seed results at {path}; run the `adapt` command first")
    results = _read_per_seed(path)
    header, rows = report.ttest_table(results)
    report.write_tsv(os.path.join(args.out, "ttest.tsv"), header, rows)
    for row in rows:
        verdict = "significant" if row[-1] else "not significant"
        print(f"{MAIN_METHOD} vs {row[0]:14s}: mean diff {row[2]:+.4f}, "
              f"t {row[3]:.4f}, p {row[4]:.4f} ({verdict})")


def _read_per_seed(path):
    """Reload the per-seed TSV into lightweight result records (only the
    fields the t-test needs are populated)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    idx = {name: i for i, name in enumerate(header)}
    out = []
    for ln in lines[1:]:
        f = ln.split("\t")
        nan = float("nan")
        m = MetricSet(float(f[idx["accuracy"]]), np.array([nan]), np.array([nan]),
                      np.array([nan]), float(f[idx["weighted_f1"]]),
                      np.array([nan]), float(f[idx["macro_auc"]]), np.array([0]))
        out.append(SeedResult(f[idx["method"]], f[idx["variant"]],
                              float(f[idx["fraction"]]), int(f[idx["seed"]]),
                              m, np.zeros((0, 0))))
    return out


def cmd_export_embeddings(args):
    cfg, scenario = _load(args)
    path = _adapted_path(args.out)
    if not os.path.exists(path):
        raise MissingPretrainError(
            f"no adapted checkpoint at {path}; run the `adapt` command first")
    arrays, _ = load_checkpoint(path)
    header, rows = harness.export_embeddings(cfg, scenario, arrays)
    csv_path = os.path.join(args.out, "embeddings.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    report.fig_embeddings(header, rows, os.path.join(args.out, "embeddings.png"))
    print(f"wrote {len(rows)} rows to {csv_path}")


def cmd_dump_dataset(args):
    cfg, scenario = _load(args)
    root = os.path.join(args.out, "dataset")
    os.makedirs(root, exist_ok=True)
    manifest = [["index", "split", "class_id", "prototype_id",
                 "texture", "location", "shape"]]
    for split_name in ("train", "val", "test"):
        part = getattr(scenario.split, split_name)
        for i in range(len(part)):
            fname = f"{split_name}_{i}.f32"
            part.images[i].astype("<f4").tofile(os.path.join(root, fname))
            spec = scenario.adapt_specs[int(part.prototype_ids[i])]
            manifest.append([i, split_name, int(part.labels[i]),
                             int(part.prototype_ids[i]),
                             spec.texture, spec.location, spec.shape])
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        for row in manifest:
            fh.write("\t".join(str(v) for v in row) + "\n")
    print(f"dumped {len(manifest) - 1} images to {root}")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "print-config":
        sys.stdout.write(default_config_text())
        return 0
    handlers = {
        "pretrain": cmd_pretrain,
        "adapt": cmd_adapt,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "ablate": cmd_ablate,
        "ttest": cmd_ttest,
        "export-embeddings": cmd_export_embeddings,
        "dump-dataset": cmd_dump_dataset,
    }
    try:
        handlers[args.command](args)
    except (MissingPretrainError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
