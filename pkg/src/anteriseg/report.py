"""Cohort report assembly.

Scans an artifacts directory for outputs written by the other
subcommands, merges whatever is present into a single report.json plus a
human-readable report.md, and renders summary figures as PNG files next
to them. Missing artifacts are listed in the report rather than treated
as errors; only a directory containing none of the known artifacts is
rejected.

Known artifacts:

* relabel_report.json   (qc relabel)
* metrics_report.json   (eval)
* attention_report.json (xai regions)
* roc_curves.csv / pr_curves.csv (eval)
* features.csv          (qc score)
* manifest.csv          (any manifest, summarized by label/split/provenance)
* stats_*.json          (stats subcommands, merged in filename order)
"""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .pipeline import CLASSES, read_manifest
from .quality import read_features
from .xai import REGIONS

EXPECTED_ARTIFACTS = (
    "relabel_report.json",
    "metrics_report.json",
    "attention_report.json",
    "roc_curves.csv",
    "pr_curves.csv",
    "features.csv",
    "manifest.csv",
)

_CLASS_COLORS = {"Normal": "#4878cf", "Controlled": "#ee854a", "Uncontrolled": "#d65f5f"}


def _read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path.name} is not valid JSON: {exc}") from exc


def _read_curves(path: Path, x_name: str, y_name: str) -> dict:
    """class -> (x array, y array) from a 3-column curve table."""
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class", x_name, y_name]:
            raise ValidationError(
                f"{path.name} must start with header class,{x_name},{y_name}, got {header}"
            )
        for row in reader:
            if len(row) != 3:
                raise ValidationError(f"{path.name}: expected 3 fields per row, got {row}")
            out.setdefault(row[0], []).append((float(row[1]), float(row[2])))
    return {
        name: (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
        for name, pts in out.items()
    }


def _summarize_manifest(path: Path) -> dict:
    manifest = read_manifest(path)
    return {
        "n_records": len(manifest),
        "by_label": manifest.count_by("label"),
        "by_split": manifest.count_by("split"),
        "by_provenance": manifest.count_by("provenance"),
    }


def _summarize_features(path: Path) -> dict:
    feats = read_features(path)
    scores = np.array([f.i_score for f in feats], dtype=np.float64)
    return {
        "n_images": len(feats),
        "i_score_mean": float(scores.mean()),
        "i_score_sd": float(scores.std(ddof=1)) if scores.size > 1 else None,
        "i_score_min": float(scores.min()),
        "i_score_max": float(scores.max()),
    }


def collect_artifacts(artifacts_dir) -> tuple:
    """(found dict name->payload, missing names) for a run directory."""
    root = Path(artifacts_dir)
    if not root.is_dir():
        raise ValidationError(f"artifacts directory not found: {root}")
    found = {}
    missing = []
    for name in EXPECTED_ARTIFACTS:
        path = root / name
        if not path.is_file():
            missing.append(name)
            continue
        if name.endswith(".json"):
            found[name] = _read_json(path)
        elif name == "roc_curves.csv":
            found[name] = _read_curves(path, "fpr", "tpr")
        elif name == "pr_curves.csv":
            found[name] = _read_curves(path, "recall", "precision")
        elif name == "features.csv":
            found[name] = _summarize_features(path)
        elif name == "manifest.csv":
            found[name] = _summarize_manifest(path)
    stats = []
    for path in sorted(root.glob("stats_*.json")):
        stats.append({"file": path.name, "result": _read_json(path)})
    if not found and not stats:
        raise ValidationError(
            "no known artifacts in "
            f"{root}; expected any of: {', '.join(EXPECTED_ARTIFACTS)} or stats_*.json"
        )
    return found, missing, stats


def build_report(
    artifacts_dir,
    timestamp: str | None = None,
    config: dict | None = None,
    tool_version: str = "",
) -> dict:
    """Merge the artifacts under artifacts_dir into one report dict."""
    found, missing, stats = collect_artifacts(artifacts_dir)
    report = {
        "generated_at": timestamp
        if timestamp is not None
        else datetime.now(timezone.utc).isoformat(),
        "tool_version": tool_version,
        "config": config,
        "artifacts_found": sorted(found) + [s["file"] for s in stats],
        "missing": missing,
        "relabel": found.get("relabel_report.json"),
        "metrics": found.get("metrics_report.json"),
        "attention": found.get("attention_report.json"),
        "dataset": found.get("manifest.csv"),
        "features": found.get("features.csv"),
        "stats": stats,
        "figures": [],
    }
    # curve payloads feed figures only; keep the report JSON lean
    report["_roc"] = found.get("roc_curves.csv")
    report["_pr"] = found.get("pr_curves.csv")
    return report


def _fig_scores(relabel: dict, path: Path):
    by_class = {c: [] for c in CLASSES}
    for entry in relabel.get("entries", []):
        _, _, new_label, score = entry
        if new_label in by_class:
            by_class[new_label].append(score)
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 100.0, 41)
    for c in CLASSES:
        if by_class[c]:
            ax.hist(by_class[c], bins=bins, alpha=0.55, label=c, color=_CLASS_COLORS[c])
    ax.set_xlabel("inflammation score")
    ax.set_ylabel("images")
    ax.set_title("Score distribution by assigned class")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "anteriseg"})
    plt.close(fig)


def _fig_confusion(metrics: dict, path: Path):
    cm = np.asarray(metrics["confusion"], dtype=np.float64)
    names = [r["class"] for r in metrics["per_class"]]
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"Confusion matrix (accuracy {metrics['accuracy']:.3f})")
    thresh = cm.max() / 2.0 if cm.max() > 0 else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(
                j,
                i,
                f"{int(cm[i, j])}",
                ha="center",
                va="center",
                color="white" if cm[i, j] > thresh else "black",
            )
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "anteriseg"})
    plt.close(fig)


def _fig_curves(curves: dict, path: Path, x_label: str, y_label: str, title: str, diagonal: bool):
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    for name in sorted(curves):
        x, y = curves[name]
        ax.plot(x, y, label=name, color=_CLASS_COLORS.get(name))
    if diagonal:
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right" if diagonal else "lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "anteriseg"})
    plt.close(fig)


def _fig_attention(attention: dict, path: Path):
    per_region = attention["per_region"]
    classes = [c for c in CLASSES if c in attention["classes"]]
    width = 0.8 / len(classes)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(REGIONS), dtype=np.float64)
    for i, c in enumerate(classes):
        means = [per_region[r]["class_stats"][c]["mean"] for r in REGIONS]
        sds = [per_region[r]["class_stats"][c]["sd"] for r in REGIONS]
        ax.bar(xs + i * width, means, width, yerr=sds, capsize=3, label=c, color=_CLASS_COLORS[c])
    ax.set_xticks(xs + width * (len(classes) - 1) / 2, REGIONS)
    ax.set_ylabel("mean regional attention")
    ax.set_title("Attention by region and class")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "anteriseg"})
    plt.close(fig)


def render_figures(report: dict, out_dir: Path) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    figures = []
    if report.get("relabel"):
        _fig_scores(report["relabel"], out_dir / "fig_scores.png")
        figures.append("fig_scores.png")
    if report.get("metrics"):
        _fig_confusion(report["metrics"], out_dir / "fig_confusion.png")
        figures.append("fig_confusion.png")
    if report.get("_roc"):
        _fig_curves(
            report["_roc"], out_dir / "fig_roc.png", "false positive rate", "true positive rate",
            "ROC curves", diagonal=True,
        )
        figures.append("fig_roc.png")
    if report.get("_pr"):
        _fig_curves(
            report["_pr"], out_dir / "fig_pr.png", "recall", "precision",
            "Precision-recall curves", diagonal=False,
        )
        figures.append("fig_pr.png")
    if report.get("attention"):
        _fig_attention(report["attention"], out_dir / "fig_attention.png")
        figures.append("fig_attention.png")
    return figures


def _fmt(x, spec=".4f") -> str:
    if x is None:
        return "-"
    if isinstance(x, float) and (x != x):
        return "nan"
    return format(x, spec)


def render_markdown(report: dict) -> str:
    lines = ["# Cohort report", ""]
    version = f" by anteriseg {report['tool_version']}" if report.get("tool_version") else ""
    lines += [f"Generated: {report['generated_at']}{version}", ""]
    if report["missing"]:
        lines += ["Missing artifacts: " + ", ".join(report["missing"]), ""]

    relabel = report.get("relabel")
    if relabel:
        lines += [
            "## Quality-based relabeling",
            "",
            f"- images: {relabel['n_total']}",
            f"- labels changed: {relabel['n_changed']} ({relabel['changed_fraction']:.1%})",
            f"- one-way ANOVA on scores: F = {_fmt(relabel['anova_f'])}, p = {_fmt(relabel['anova_p'], '.3g')}",
            "",
            "| class | count | score mean | score sd |",
            "|---|---|---|---|",
        ]
        for c, st in relabel["class_stats"].items():
            lines.append(f"| {c} | {st['count']} | {_fmt(st['i_mean'])} | {_fmt(st['i_sd'])} |")
        lines.append("")

    metrics = report.get("metrics")
    if metrics:
        lines += [
            "## Classification metrics",
            "",
            f"- accuracy: {metrics['accuracy']:.4f}",
            f"- macro precision / recall / F1: {metrics['macro_precision']:.4f} / "
            f"{metrics['macro_recall']:.4f} / {metrics['macro_f1']:.4f}",
            "",
            "| class | support | precision | recall | f1 |",
            "|---|---|---|---|---|",
        ]
        for row in metrics["per_class"]:
            lines.append(
                f"| {row['class']} | {row['support']} | {row['precision']:.4f} "
                f"| {row['recall']:.4f} | {row['f1']:.4f} |"
            )
        lines.append("")
        for w in metrics.get("warnings", []):
            lines.append(f"- warning: {w}")
        if metrics.get("warnings"):
            lines.append("")

    attention = report.get("attention")
    if attention:
        lines += ["## Regional attention", ""]
        for region in REGIONS:
            per = attention["per_region"][region]
            kw = per["kruskal_wallis"]
            lines += [
                f"### {region}",
                "",
                f"- Kruskal-Wallis: H = {_fmt(kw['statistic'])}, p = {_fmt(kw['p_value'], '.3g')}",
                f"- severity ordered: {per['severity_ordered']}",
                "",
                "| class | n | mean | sd |",
                "|---|---|---|---|",
            ]
            for c, st in per["class_stats"].items():
                lines.append(f"| {c} | {st['n']} | {st['mean']:.4f} | {st['sd']:.4f} |")
            lines.append("")

    dataset = report.get("dataset")
    if dataset:
        lines += [
            "## Dataset",
            "",
            f"- records: {dataset['n_records']}",
            f"- by label: {json.dumps(dataset['by_label'], sort_keys=True)}",
            f"- by split: {json.dumps(dataset['by_split'], sort_keys=True)}",
            f"- by provenance: {json.dumps(dataset['by_provenance'], sort_keys=True)}",
            "",
        ]

    features = report.get("features")
    if features:
        lines += [
            "## Image features",
            "",
            f"- images scored: {features['n_images']}",
            f"- score mean / sd: {_fmt(features['i_score_mean'])} / {_fmt(features['i_score_sd'])}",
            f"- score range: {_fmt(features['i_score_min'])} .. {_fmt(features['i_score_max'])}",
            "",
        ]

    if report.get("stats"):
        lines += ["## Statistical tests", ""]
        for item in report["stats"]:
            res = item["result"]
            results = res if isinstance(res, list) else [res]
            for r in results:
                extra = f" [{r['correction']}]" if r.get("correction") else ""
                lines.append(
                    f"- {item['file']}: {r['test']}{extra} statistic = {_fmt(r['statistic'])}, "
                    f"p = {_fmt(r['p_value'], '.3g')}"
                )
        lines.append("")

    if report.get("figures"):
        lines += ["## Figures", ""]
        for fig in report["figures"]:
            lines.append(f"![{fig}]({fig})")
        lines.append("")

    if report.get("config"):
        lines += ["## Configuration", "", "| setting | value |", "|---|---|"]
        for key in sorted(report["config"]):
            lines.append(f"| {key} | {report['config'][key]} |")
        lines.append("")
    return "\n".join(lines) + "\n"


def write_report(
    artifacts_dir,
    out_dir,
    timestamp: str | None = None,
    config: dict | None = None,
    tool_version: str = "",
) -> dict:
    """Build the merged report and write report.json, report.md, figures."""
    out = Path(out_dir)
    report = build_report(artifacts_dir, timestamp=timestamp, config=config, tool_version=tool_version)
    report["figures"] = render_figures(report, out)
    public = {k: v for k, v in report.items() if not k.startswith("_")}
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(public, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "report.md", "w", encoding="utf-8") as fh:
        fh.write(render_markdown(public))
    return public
