"""Deterministic delimited reports and matplotlib figures.

All tables are written with fixed column order and fixed float formatting
so that re-running the same configuration reproduces the files byte for
byte (timings are deliberately excluded).
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import MAIN_METHOD, SeedResult
from .metrics import paired_ttest


def _fmt(x):
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.6f}"
    return str(x)


def write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def results_table(results, n_classes):
    """One row per (method, variant, fraction, seed), sorted for stability."""
    header = ["method", "variant", "fraction", "seed", "accuracy",
              "weighted_f1", "macro_auc", "best_epoch"]
    for k in range(n_classes):
        header += [f"precision_{k}", f"recall_{k}", f"f1_{k}", f"auc_{k}"]
    rows = []
    for r in sorted(results, key=lambda r: (r.method, r.variant, r.fraction, r.seed)):
        m = r.metrics
        row = [r.method, r.variant, f"{r.fraction:.4f}", r.seed,
               float(m.accuracy), float(m.weighted_f1), float(m.macro_auc),
               r.best_epoch]
        for k in range(n_classes):
            row += [float(m.precision[k]), float(m.recall[k]),
                    float(m.f1[k]), float(m.auc[k])]
        rows.append(row)
    return header, rows


def _group(results):
    keys = sorted({(r.method, r.variant, r.fraction) for r in results})
    for key in keys:
        members = [r for r in results if (r.method, r.variant, r.fraction) == key]
        yield key, sorted(members, key=lambda r: r.seed)


def summary_table(results):
    """Per-(method, variant, fraction) mean and population-std weighted F1."""
    header = ["method", "variant", "fraction", "n_seeds", "mean_weighted_f1",
              "std_weighted_f1", "mean_accuracy", "mean_macro_auc"]
    rows = []
    for (method, variant, fraction), members in _group(results):
        f1s = np.array([m.metrics.weighted_f1 for m in members])
        rows.append([method, variant, f"{fraction:.4f}", len(members),
                     float(f1s.mean()), float(f1s.std()),
                     float(np.mean([m.metrics.accuracy for m in members])),
                     float(np.mean([m.metrics.macro_auc for m in members]))])
    return header, rows


def ttest_table(results, main=MAIN_METHOD):
    """Paired one-tailed t-tests of the main method against every other
    method at the same fraction, paired by seed."""
    header = ["baseline", "fraction", "mean_diff", "t", "p", "significant"]
    by_key = {key: members for key, members in _group(results)}
    rows = []
    for (method, variant, fraction), members in sorted(by_key.items()):
        if method == main or variant != "full":
            continue
        ours = by_key.get((main, "full", fraction))
        if ours is None or len(ours) != len(members):
            continue
        a = np.array([r.metrics.weighted_f1 for r in ours])
        b = np.array([r.metrics.weighted_f1 for r in members])
        t = paired_ttest(a, b)
        rows.append([method, f"{fraction:.4f}", float((a - b).mean()),
                     float(t.t), float(t.p), int(t.significant)])
    return header, rows


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_pretrain_curve(curve, path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(curve) + 1), curve, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("contrastive loss")
    ax.set_title("Pretraining loss")
    _save(fig, path)


def fig_method_bars(results, path):
    stats = [(m, np.mean([r.metrics.weighted_f1 for r in mem]),
              np.std([r.metrics.weighted_f1 for r in mem]))
             for (m, v, f), mem in _group(results) if v == "full"]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    names = [s[0] for s in stats]
    ax.bar(names, [s[1] for s in stats], yerr=[s[2] for s in stats],
           capsize=3, color=["C3" if n == MAIN_METHOD else "C0" for n in names])
    ax.set_ylabel("weighted F1")
    ax.set_title("Adaptation methods (mean over seeds)")
    ax.tick_params(axis="x", rotation=20)
    _save(fig, path)


def fig_sweep(results, path):
    methods = sorted({r.method for r in results})
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for method in methods:
        pts = [(f, np.mean([r.metrics.weighted_f1 for r in mem]))
               for (m, v, f), mem in _group(results) if m == method and v == "full"]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("training-data fraction")
    ax.set_ylabel("weighted F1")
    ax.set_title("Data efficiency")
    ax.legend()
    _save(fig, path)


def fig_ablation(results, path):
    stats = [(v, np.mean([r.metrics.weighted_f1 for r in mem]))
             for (m, v, f), mem in _group(results) if m == MAIN_METHOD]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    names = [s[0] for s in stats]
    ax.bar(names, [s[1] for s in stats],
           color=["C3" if n == "full" else "C0" for n in names])
    ax.set_ylabel("weighted F1")
    ax.set_title("Ablation (mean over seeds)")
    ax.tick_params(axis="x", rotation=20)
    _save(fig, path)


def fig_embeddings(header, rows, path):
    p0 = header.index("p0")
    kind_i, class_i = header.index("kind"), header.index("class_id")
    fig, ax = plt.subplots(figsize=(5, 4.2))
    pts = {}
    for row in rows:
        pts.setdefault((row[kind_i], row[class_i]), []).append(
            (float(row[p0]), float(row[p0 + 1])))
    markers = {"image": ".", "text_prompt": "s", "prototype": "*"}
    sizes = {"image": 14, "text_prompt": 70, "prototype": 160}
    for (kind, cid), xy in sorted(pts.items()):
        xy = np.array(xy)
        ax.scatter(xy[:, 0], xy[:, 1], marker=markers[kind], s=sizes[kind],
                   color=f"C{int(cid) % 10}",
                   label=f"{kind} class {cid}",
                   alpha=0.6 if kind == "image" else 1.0,
                   edgecolors="k" if kind != "image" else None)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("Test embeddings, prompts, prototypes")
    ax.legend(fontsize=7, loc="best")
    _save(fig, path)


def write_run_report(out_dir, results, n_classes, prefix="results"):
    """TSV tables plus the method bar chart; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    header, rows = results_table(results, n_classes)
    paths["per_seed"] = os.path.join(out_dir, f"{prefix}_per_seed.tsv")
    write_tsv(paths["per_seed"], header, rows)
    header, rows = summary_table(results)
    paths["summary"] = os.path.join(out_dir, f"{prefix}_summary.tsv")
    write_tsv(paths["summary"], header, rows)
    return paths
