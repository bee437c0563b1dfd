"""Objective measures: SSIM, inception-style score, smile-intensity curves and mode diversity."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from . import landmarks as lm
from .errors import ValidationError

SSIM_WINDOW = 8
SMOOTH_WINDOW = 5


def moving_average(curve, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average with edge replication; output length equals input length."""
    curve = np.asarray(curve, dtype=np.float64)
    half = window // 2
    padded = np.pad(curve, half, mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------- SSIM


def _window_view(x: np.ndarray, w: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(-2, -1))


def ssim(a, b, value_range=(-1.0, 1.0), window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over all 8x8 windows (stride 1) and channels, after mapping `value_range` to [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValidationError(f"images smaller than the {window}x{window} window")
    lo, hi = value_range
    a = (a - lo) / (hi - lo)
    b = (b - lo) / (hi - lo)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    wa, wb = _window_view(a, window), _window_view(b, window)
    mu_a, mu_b = wa.mean((-2, -1)), wb.mean((-2, -1))
    var_a = wa.var((-2, -1))
    var_b = wb.var((-2, -1))
    cov = (wa * wb).mean((-2, -1)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def sequence_ssim(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) != len(b):
        raise ValidationError(f"sequence lengths differ: {len(a)} vs {len(b)}")
    return float(np.mean([ssim(x, y) for x, y in zip(a, b)]))


# ---------------------------------------------------------------- inception-style score


def inception_score_from_probs(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValidationError("inception score needs a non-empty (N, C) probability array")
    marginal = p.mean(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(max(terms.sum(1).mean(), 0.0)))


def inception_score(frames, classifier: Callable[[np.ndarray], np.ndarray]) -> float:
    """exp(mean KL(p(c|x) || p(c))) with an injected classifier mapping (N,3,S,S) frames to (N,C) probabilities."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValidationError("inception score of an empty frame set")
    return inception_score_from_probs(classifier(frames))


def delta_is(generated, original, classifier) -> float:
    return abs(inception_score(generated, classifier) - inception_score(original, classifier))


class FrameClassifier(nn.Module):
    """Small CNN over face frames; the desk-scale stand-in for a large pretrained classifier."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(4 * width, n_classes),
        )

    def forward(self, x):
        return self.net(x)

    @torch.no_grad()
    def predict_proba(self, frames: np.ndarray) -> np.ndarray:
        self.eval()
        return torch.softmax(self(torch.as_tensor(frames, dtype=torch.float32)), -1).numpy()


def train_frame_classifier(frames: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 4,
                           seed: int = 0, batch: int = 64, lr: float = 1e-3) -> FrameClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = FrameClassifier(n_classes)
    x = torch.as_tensor(frames, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    optim = torch.optim.Adam(clf.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    clf.train()
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            idx = perm[i:i + batch]
            loss = nn.functional.cross_entropy(clf(x[idx]), y[idx])
            optim.zero_grad()
            loss.backward()
            optim.step()
    return clf.eval()


# ---------------------------------------------------------------- AU-style curves


class IntensityCurve(NamedTuple):
    raw: np.ndarray
    smoothed: np.ndarray


def au_curve(points) -> IntensityCurve:
    """Per-frame smile intensity of a (T,68,2) sequence and its 5-frame smoothed version."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or len(points) == 0:
        raise ValidationError("au_curve needs a non-empty (T, 68, 2) sequence")
    raw = lm.smile_intensity_array(points)
    return IntensityCurve(raw, moving_average(raw))


def _smoothed(c) -> np.ndarray:
    return np.asarray(c.smoothed if isinstance(c, IntensityCurve) else c, dtype=np.float64)


def au_curve_distance(a, b) -> float:
    """Cumulative L1 distance between two equal-length (smoothed) curves."""
    a, b = _smoothed(a), _smoothed(b)
    if a.shape != b.shape:
        raise ValidationError(f"curve lengths differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def rises_to_apex(curve, tol: float = 1e-9) -> bool:
    """True when the smoothed curve is non-decreasing from its first frame up to its maximum."""
    c = _smoothed(curve)
    apex = int(np.argmax(c))
    return bool(np.all(np.diff(c[:apex + 1]) >= -tol))


# ---------------------------------------------------------------- diversity


def mode_diversity(mode_points) -> float:
    """Mean over mode pairs of the mean per-frame, per-point distance; input (K, T, 68, 2)."""
    p = np.asarray(mode_points, dtype=np.float64)
    if p.ndim != 4 or p.shape[0] < 2:
        raise ValidationError("mode diversity needs at least two equal-length mode sequences")
    K = p.shape[0]
    dists = [np.linalg.norm(p[j] - p[k], axis=-1).mean() for j in range(K) for k in range(j + 1, K)]
    return float(np.mean(dists))


# ---------------------------------------------------------------- identity descriptor


def _patch_median(face: np.ndarray, xy: np.ndarray, r: int = 1) -> np.ndarray:
    side = face.shape[-1]
    c, rr = np.clip(lm.to_pixel(xy[None], side)[0], r, side - 1 - r)
    return np.median(face[:, rr - r:rr + r + 1, c - r:c + r + 1].reshape(3, -1), axis=1)


def identity_descriptor(face: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Skin colour on both cheeks and the forehead plus background colour; face (3,S,S) in [-1,1]."""
    face = np.asarray(face, dtype=np.float64)
    left, right = lm.eye_centers(points)
    spots = [0.5 * (left + points[4]), 0.5 * (right + points[12]),
             points[17:27].mean(0) + np.array([0.0, -0.04])]
    skin = np.mean([_patch_median(face, s) for s in spots], axis=0)
    k = 3
    corners = np.concatenate([face[:, :k, :k], face[:, :k, -k:], face[:, -k:, :k], face[:, -k:, -k:]], axis=1)
    background = np.median(corners.reshape(3, -1), axis=1)
    return np.concatenate([skin, background])


def match_identity(descriptor: np.ndarray, gallery: dict) -> str:
    names = sorted(gallery)
    d = [np.linalg.norm(descriptor - gallery[n]) for n in names]
    return names[int(np.argmin(d))]


# ---------------------------------------------------------------- corpus report


@dataclass
class MetricReport:
    per_sequence: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    class_curves: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate, "class_curves": self.class_curves,
                "metadata": self.metadata, "per_sequence": self.per_sequence}


METRIC_KEYS = ("ssim", "is", "deltaIs", "auCurveDistance", "modeDiversity")


def _group_key(sample, meta: dict):
    return meta.get("reference") or (sample.identity, sample.label)


def evaluate_corpus(generated, reference, classifier=None, metadata: dict | None = None) -> MetricReport:
    """`generated`: list of (SequenceSample, meta dict); `reference`: list of SequenceSample.

    A generated sequence is paired with the reference whose source id equals its meta
    "reference" field, else with the reference sharing its own source id.
    """
    refs = {s.source_id: s for s in reference}
    if not generated or not reference:
        raise ValidationError("both corpora must be non-empty")
    groups = defaultdict(list)
    for s, meta in generated:
        if s.mode_tag not in (None, "conditional"):
            groups[_group_key(s, meta)].append(s)
    diversity = {}
    for key, members in groups.items():
        if len(members) >= 2 and len({m.T for m in members}) == 1:
            diversity[key] = mode_diversity(np.stack([m.points for m in members]))

    rows = []
    curves = defaultdict(lambda: {"generated": [], "reference": []})
    for s, meta in generated:
        ref = refs.get(meta.get("reference") or s.source_id)
        row = {"source_id": s.source_id, "label": s.label, "mode": s.mode_tag,
               "reference": ref.source_id if ref is not None else None}
        gen_curve = au_curve(s.points)
        curves[s.label]["generated"].append(gen_curve.smoothed)
        row["ssim"] = row["is"] = row["deltaIs"] = row["auCurveDistance"] = None
        if ref is not None:
            if ref.T != s.T:
                raise ValidationError(f"{s.source_id}: length {s.T} differs from reference {ref.source_id} ({ref.T})")
            row["auCurveDistance"] = au_curve_distance(gen_curve, au_curve(ref.points))
            if s.faces is not None and ref.faces is not None:
                row["ssim"] = sequence_ssim(s.faces, ref.faces)
                if classifier is not None:
                    row["is"] = inception_score(s.faces, classifier)
                    row["deltaIs"] = abs(row["is"] - inception_score(ref.faces, classifier))
        row["modeDiversity"] = diversity.get(_group_key(s, meta))
        row["curve"] = gen_curve.smoothed.tolist()
        rows.append(row)
    for r in reference:
        curves[r.label]["reference"].append(au_curve(r.points).smoothed)

    aggregate = {}
    for key in METRIC_KEYS:
        vals = [r[key] for r in rows if r[key] is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    class_curves = {}
    for label in sorted(curves):
        g, r = curves[label]["generated"], curves[label]["reference"]
        entry = {}
        if g:
            entry["generated_mean"] = np.mean(g, 0).tolist()
            entry["generated_rises_to_apex"] = rises_to_apex(entry["generated_mean"])
        if r:
            entry["reference_mean"] = np.mean(r, 0).tolist()
        if g and r and len(g[0]) == len(r[0]):
            entry["distance"] = au_curve_distance(entry["generated_mean"], entry["reference_mean"])
        class_curves[label] = entry
    return MetricReport(rows, aggregate, class_curves, dict(metadata or {}))


def write_report(report: MetricReport, out_dir, plot: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), sort_keys=True, indent=1))
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "label", "mode", "t", "intensity"])
        for r in report.per_sequence:
            for t, v in enumerate(r["curve"]):
                w.writerow([r["source_id"], r["label"], r["mode"], t, f"{v:.6f}"])
    if plot:
        plot_class_curves(report.class_curves, out / "curves.png")
    return out


def plot_class_curves(class_curves: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, entry in sorted(class_curves.items()):
        if "reference_mean" in entry:
            ax.plot(entry["reference_mean"], "--", label=f"{label} (real)")
        if "generated_mean" in entry:
            ax.plot(entry["generated_mean"], label=f"{label} (generated)")
    ax.set_xlabel("frame")
    ax.set_ylabel("smile intensity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
