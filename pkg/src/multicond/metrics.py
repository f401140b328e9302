"""Metric primitives and the experiment report generator.

Every metric here is an exact, deterministic numpy implementation; the test
suite holds naive-loop reference implementations they must match to 1e-9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .errors import ContractError, DomainError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1)
    k = np.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    w = np.outer(k, k)
    return w / w.sum()


_SSIM_W = _ssim_window()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with a 7x7 Gaussian window (sigma 1.5), mean over windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(f"inputs smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    w = _SSIM_W
    mu_a = (wa * w).sum(axis=(2, 3))
    mu_b = (wb * w).sum(axis=(2, 3))
    var_a = (wa**2 * w).sum(axis=(2, 3)) - mu_a**2
    var_b = (wb**2 * w).sum(axis=(2, 3)) - mu_b**2
    cov = (wa * wb * w).sum(axis=(2, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def f1_edge(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixel-exact F1 on binary edge maps; 1.0 when both empty, 0.0 when exactly one is."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for m in (pred, gt):
        if not np.isin(m, (0, 1)).all():
            raise DomainError("edge maps must be binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    tp = float((p & g).sum())
    if tp == 0.0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / g.sum()
    return 2 * precision * recall / (precision + recall)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes present in either map."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.max() >= num_classes or gt.max() >= num_classes or pred.min() < 0 or gt.min() < 0:
        raise DomainError(f"class ids must lie in [0, {num_classes})")
    ious = []
    for k in range(num_classes):
        pk = pred == k
        gk = gt == k
        union = (pk | gk).sum()
        if union == 0:
            continue
        ious.append((pk & gk).sum() / union)
    return float(np.mean(ious))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.min() < 0.0 or m.max() > 1.0:
            raise DomainError("values must lie in [0, 1]")
    return float(np.sqrt(((a - b) ** 2).mean()))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken by eigendecomposition and eigenvalues clamped at 0.
    """
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise DomainError("need at least 2 feature vectors per set")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ContractError("feature dimensionality mismatch")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False).reshape(feats_a.shape[1], -1)
    cov_b = np.cov(feats_b, rowvar=False).reshape(feats_b.shape[1], -1)
    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = np.sqrt(vals).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def spearman(a, b) -> float:
    """Spearman rank correlation; 0.0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("shape mismatch")
    if np.allclose(a, a[0]) or np.allclose(b, b[0]):
        return 0.0
    rho = stats.spearmanr(a, b).statistic
    return float(rho) if np.isfinite(rho) else 0.0


@dataclass(frozen=True)
class MetricRecord:
    experiment_id: str
    combo: str  # condition-combo or variant label
    metric: str
    value: float
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise DomainError(f"metric value must be finite, got {self.value}")
        if self.n_samples < 1:
            raise DomainError("n_samples must be >= 1")


def write_records(records: list[MetricRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[MetricRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(MetricRecord(**json.loads(line)))
    return records


def _ordered_unique(items) -> list:
    seen = {}
    for x in items:
        seen.setdefault(x, None)
    return list(seen)


def _aggregate(records: list[MetricRecord]) -> dict[tuple[str, str, str], tuple[float, int]]:
    acc: dict[tuple[str, str, str], tuple[float, int]] = {}
    for r in records:
        key = (r.experiment_id, r.combo, r.metric)
        if key in acc:
            v, n = acc[key]
            total = v * n + r.value * r.n_samples
            acc[key] = (total / (n + r.n_samples), n + r.n_samples)
        else:
            acc[key] = (r.value, r.n_samples)
    return acc


def _format_table(title: str, records: list[MetricRecord]) -> str:
    combos = _ordered_unique(r.combo for r in records)
    metric_names = _ordered_unique(r.metric for r in records)
    agg = _aggregate(records)
    experiments = _ordered_unique(r.experiment_id for r in records)
    lines = [f"## {title}", ""]
    header = ["combo"] + metric_names + ["n"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join(["---"] * len(header)) + "|")
    for exp in experiments:
        for combo in combos:
            cells = [combo if len(experiments) == 1 else f"{exp}:{combo}"]
            n_max = 0
            present = False
            for m in metric_names:
                hit = agg.get((exp, combo, m))
                if hit is None:
                    cells.append("-")
                else:
                    cells.append(f"{hit[0]:.4f}")
                    n_max = max(n_max, hit[1])
                    present = True
            if present:
                lines.append("| " + " | ".join(cells + [str(n_max)]) + " |")
    lines.append("")
    return "\n".join(lines)


def build_report(records: list[MetricRecord], grouping: str | None = None) -> str:
    """Render aggregated metric records as markdown tables.

    grouping="seed" emits one table per seed; duplicates of the same
    (experiment, combo, metric) key aggregate to an n-weighted mean.
    """
    if not records:
        return "# Report\n\nno data\n"
    parts = ["# Report", ""]
    if grouping == "seed":
        for seed in _ordered_unique(r.seed for r in records):
            subset = [r for r in records if r.seed == seed]
            parts.append(_format_table(f"seed {seed}", subset))
    elif grouping is None:
        parts.append(_format_table("all", records))
    else:
        raise DomainError(f"unknown grouping {grouping!r}")
    return "\n".join(parts)


def save_image_grid(images: list[np.ndarray], path: str | Path, scores: list[float] | None = None) -> None:
    """Tile [0,1] float images into one row, ordered by descending score when given."""
    from PIL import Image

    if scores is not None:
        order = np.argsort(scores)[::-1]
        images = [images[i] for i in order]
    tiles = [np.clip(np.asarray(im), 0.0, 1.0) for im in images]
    pad = np.ones((tiles[0].shape[0], 2, 3))
    row_parts = []
    for i, t in enumerate(tiles):
        if t.ndim == 2:
            t = np.repeat(t[:, :, None], 3, axis=2)
        row_parts.append(t)
        if i < len(tiles) - 1:
            row_parts.append(pad)
    row = np.concatenate(row_parts, axis=1)
    Image.fromarray((row * 255).round().astype(np.uint8)).save(path)
