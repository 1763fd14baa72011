"""Identification rate, localization distances, precision/recall, sweep
curves, region grouping and latent-code export.

Two distinct aggregate quantities are reported on purpose: the id rate is a
per-dataset measure pooled over all ground-truth vertebrae, while recall is a
per-scan measure averaged over scans.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import inference, reformation
from .core import AnnotationSet, VertebraLabel
from .errors import EmptyOverlap

REGIONS = ("cervical", "thoracic", "lumbar")
DEFAULT_D_TH_MM = 20.0
DEFAULT_T_GRID = tuple(round(0.1 * i, 1) for i in range(9))  # 0.0 .. 0.8
DEFAULT_DTH_GRID = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


def region_of(label: VertebraLabel) -> str:
    """Three-region grouping; the sacral S1/S2 fall into the lumbar group."""
    if label.index <= 7:
        return "cervical"
    if label.index <= 19:
        return "thoracic"
    return "lumbar"


def identify(pred: AnnotationSet, truth: AnnotationSet,
             d_th_mm: float = DEFAULT_D_TH_MM) -> dict[VertebraLabel, bool]:
    """Per-truth-label flags: identified iff predicted, nearer to its own
    ground-truth centroid than to any other, and closer than d_th."""
    if d_th_mm <= 0:
        raise ValueError("d_th_mm must be positive")
    truth_labels = truth.labels()
    truth_pos = np.asarray([truth.position(l) for l in truth_labels])
    flags = {}
    for v in truth_labels:
        if v not in pred:
            flags[v] = False
            continue
        p = pred.position(v)
        dists = np.linalg.norm(truth_pos - p, axis=1)
        d_v = float(np.linalg.norm(p - truth.position(v)))
        flags[v] = bool(d_v < d_th_mm and d_v <= dists.min())
    return flags


def localization_distances(pred: AnnotationSet, truth: AnnotationSet):
    """Euclidean mm distances over labels present in both sets.

    Returns (mean, population std, per-label distances); raises EmptyOverlap
    when the sets share no labels.
    """
    common = [l for l in truth.labels() if l in pred]
    if not common:
        raise EmptyOverlap("prediction and truth share no labels")
    dists = {l: float(np.linalg.norm(pred.position(l) - truth.position(l))) for l in common}
    values = np.asarray(list(dists.values()))
    return float(values.mean()), float(values.std()), dists


def precision_recall(pred: AnnotationSet, truth: AnnotationSet,
                     d_th_mm: float = DEFAULT_D_TH_MM) -> tuple[float, float, float]:
    """Per-scan (P, R, F1). Empty prediction sets count no false positives."""
    tp = sum(identify(pred, truth, d_th_mm).values()) if len(truth) else 0
    recall = tp / len(truth) if len(truth) else 1.0
    precision = tp / len(pred) if len(pred) else 1.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return float(precision), float(recall), float(f1)


@dataclass
class MetricsReport:
    n_scans: int
    d_th_mm: float
    id_rate: dict = field(default_factory=dict)  # percent, keys: all + regions
    d_mean: dict = field(default_factory=dict)  # mm
    d_std: dict = field(default_factory=dict)
    per_scan: list = field(default_factory=list)
    mean_precision: float = 0.0
    mean_recall: float = 0.0
    mean_f1: float = 0.0

    def to_json(self) -> str:
        payload = {
            "n_scans": self.n_scans,
            "d_th_mm": self.d_th_mm,
            "id_rate_percent": self.id_rate,
            "d_mean_mm": self.d_mean,
            "d_std_mm": self.d_std,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "mean_f1": self.mean_f1,
            "per_scan": self.per_scan,
        }
        return json.dumps(payload, indent=2)

    def text_table(self) -> str:
        cols = ["all", *REGIONS]
        lines = [
            f"scans: {self.n_scans}   d_th: {self.d_th_mm:g} mm",
            "measure    " + "".join(f"{c:>12}" for c in cols),
        ]
        fmt = {
            "id rate %": self.id_rate,
            "d_mean mm": self.d_mean,
            "d_std mm": self.d_std,
        }
        for name, row in fmt.items():
            cells = "".join(
                f"{row.get(c, float('nan')):>12.2f}" if row.get(c) is not None else f"{'-':>12}"
                for c in cols
            )
            lines.append(f"{name:<11}" + cells)
        lines.append(
            f"per-scan means: P={self.mean_precision:.3f} R={self.mean_recall:.3f} "
            f"F1={self.mean_f1:.3f}"
        )
        return "\n".join(lines)


def evaluate_predictions(preds: dict[str, AnnotationSet], truths: dict[str, AnnotationSet],
                         d_th_mm: float = DEFAULT_D_TH_MM) -> MetricsReport:
    """Dataset-level report: pooled id rates and distances, per-scan P/R/F1."""
    report = MetricsReport(n_scans=len(truths), d_th_mm=d_th_mm)
    identified = {k: 0 for k in ("all", *REGIONS)}
    total = {k: 0 for k in ("all", *REGIONS)}
    dists = {k: [] for k in ("all", *REGIONS)}
    ps, rs, f1s = [], [], []
    for sid, truth in truths.items():
        pred = preds.get(sid, AnnotationSet({}))
        flags = identify(pred, truth, d_th_mm)
        for label, ok in flags.items():
            reg = region_of(label)
            total["all"] += 1
            total[reg] += 1
            identified["all"] += ok
            identified[reg] += ok
        for label in truth.labels():
            if label in pred:
                d = float(np.linalg.norm(pred.position(label) - truth.position(label)))
                dists["all"].append(d)
                dists[region_of(label)].append(d)
        p, r, f1 = precision_recall(pred, truth, d_th_mm)
        ps.append(p)
        rs.append(r)
        f1s.append(f1)
        report.per_scan.append({
            "scan_id": sid, "precision": p, "recall": r, "f1": f1,
            "n_truth": len(truth), "n_pred": len(pred),
            "n_identified": int(sum(flags.values())),
        })
    for key in ("all", *REGIONS):
        report.id_rate[key] = 100.0 * identified[key] / total[key] if total[key] else None
        if dists[key]:
            arr = np.asarray(dists[key])
            report.d_mean[key] = float(arr.mean())
            report.d_std[key] = float(arr.std())
        else:
            report.d_mean[key] = None
            report.d_std[key] = None
    report.mean_precision = float(np.mean(ps)) if ps else 0.0
    report.mean_recall = float(np.mean(rs)) if rs else 0.0
    report.mean_f1 = float(np.mean(f1s)) if f1s else 0.0
    return report


def pooled_id_rate(preds, truths, d_th_mm=DEFAULT_D_TH_MM) -> float:
    """Fraction (percent) of all ground-truth vertebrae identified, dataset-pooled."""
    hit = n = 0
    for sid, truth in truths.items():
        flags = identify(preds.get(sid, AnnotationSet({})), truth, d_th_mm)
        hit += sum(flags.values())
        n += len(flags)
    return 100.0 * hit / n if n else 0.0


# --------------------------------------------------------------------------
# sweeps


def sweep_threshold(results: dict[str, inference.PredictionResult],
                    truths: dict[str, AnnotationSet],
                    t_values=DEFAULT_T_GRID, d_th_mm: float = DEFAULT_D_TH_MM) -> list[dict]:
    """Re-run threshold+fusion per T; rows of mean per-scan P/R/F1 and pooled
    id rate. Raw (un-thresholded) view predictions are reused across T."""
    rows = []
    for t in t_values:
        if not (0.0 <= t < 1.0):
            raise ValueError(f"threshold grid values must lie in [0, 1), got {t}")
        preds = {}
        for sid, res in results.items():
            fused = inference.fuse(inference.threshold_heatmap(res.sag_stack, t),
                                   inference.threshold_heatmap(res.cor_stack, t))
            preds[sid], _ = inference.extract_centroids(fused, res.volume)
        report = evaluate_predictions(preds, truths, d_th_mm)
        rows.append({
            "threshold": float(t),
            "precision": report.mean_precision,
            "recall": report.mean_recall,
            "f1": report.mean_f1,
            "id_rate": report.id_rate["all"],
        })
    return rows


def f1_optimal_row(rows: list[dict]) -> dict:
    return max(rows, key=lambda r: r["f1"])


def sweep_dth(preds: dict[str, AnnotationSet], truths: dict[str, AnnotationSet],
              dth_values=DEFAULT_DTH_GRID) -> dict[str, list[tuple[float, float]]]:
    """Region-wise pooled id-rate curves over the distance threshold grid."""
    curves = {k: [] for k in ("all", *REGIONS)}
    for dth in dth_values:
        if dth <= 0:
            raise ValueError("d_th grid values must be positive")
        hit = {k: 0 for k in curves}
        total = {k: 0 for k in curves}
        for sid, truth in truths.items():
            flags = identify(preds.get(sid, AnnotationSet({})), truth, dth)
            for label, ok in flags.items():
                reg = region_of(label)
                for key in ("all", reg):
                    total[key] += 1
                    hit[key] += ok
        for key in curves:
            curves[key].append((float(dth),
                                100.0 * hit[key] / total[key] if total[key] else float("nan")))
    return curves


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_dth_csv(curves: dict, path: str | Path) -> None:
    keys = list(curves.keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["d_th_mm", *keys])
        for i, (dth, _) in enumerate(curves[keys[0]]):
            writer.writerow([dth, *[curves[k][i][1] for k in keys]])


# --------------------------------------------------------------------------
# latent codes


def export_latent_codes(model, scan_volumes, resolution_mm: float = 2.0) -> list[dict]:
    """One latent code per scan (per view for the un-fused baseline)."""
    rows = []
    dual = bool(model.cfg.dual_input)
    model.eval()
    for sid, volume in scan_volumes:
        vol = reformation.preprocess_volume(volume, resolution_mm)
        images = inference.view_images(vol, dual=dual)
        with torch.no_grad():
            sag = torch.from_numpy(inference.scale_intensity(images["sagittal"]))[None]
            cor = torch.from_numpy(inference.scale_intensity(images["coronal"]))[None]
            codes = model.latent(sag, cor)
        for view, code in codes.items():
            rows.append({"scan_id": sid, "view": view,
                         "code": code[0].numpy().astype(np.float64)})
    return rows


def write_latent_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no latent codes to write")
    width = max(len(r["code"]) for r in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "view", *[f"c{i:04d}" for i in range(width)]])
        for r in rows:
            writer.writerow([r["scan_id"], r["view"], *[repr(float(v)) for v in r["code"]]])


# --------------------------------------------------------------------------
# plots


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_pr_curve(rows: list[dict], path: str | Path) -> None:
    """Precision-recall trajectory over T with F1 isolines."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 5))
    grid = np.linspace(0.01, 1.0, 200)
    for f1 in np.arange(0.1, 1.0, 0.1):
        with np.errstate(divide="ignore", invalid="ignore"):
            p_iso = f1 * grid / np.clip(2 * grid - f1, 1e-9, None)
        valid = (p_iso > 0) & (p_iso <= 1.05) & (2 * grid > f1)
        ax.plot(grid[valid], p_iso[valid], color="0.85", lw=0.8, zorder=1)
        ax.annotate(f"F1={f1:.1f}", (grid[valid][-1] if valid.any() else 1.0, f1 / (2 - f1)),
                    fontsize=6, color="0.6")
    rec = [r["recall"] for r in rows]
    pre = [r["precision"] for r in rows]
    ax.plot(rec, pre, "o-", color="tab:blue", zorder=2)
    for r in rows:
        ax.annotate(f"{r['threshold']:.1f}", (r["recall"], r["precision"]), fontsize=6)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_dth_curves(curves: dict, path: str | Path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, pts in curves.items():
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, "o-", label=key)
    ax.set_xlabel("d_th (mm)")
    ax.set_ylabel("id rate (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
