"""Inflammation scoring and unsupervised relabeling.

Each image is reduced to three interpretable signals:

* redness R: percent of pixels whose hue falls in the red wedge
  ([0, 20] or [340, 360] degrees) with enough saturation and value,
* vessel density D: percent of edge pixels after grayscale CLAHE + Canny,
* scleral whiteness W: mean L* (scaled by 2.55 onto 0..255) over
  non-specular pixels,

combined into i = 0.5*R + 0.3*D + 0.2*(1 - W/255). Relabeling clusters the
standardized 4-column feature matrix (r_red, d_vessel, w_sclera, i_score)
with seeded k-means++ and maps clusters to classes by ascending mean i_score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .evalstat import anova_oneway
from .filters import canny, clahe_gray
from .imgcore import BitMask, ImageGray8, ImageRGB8, rgb_to_hsv_array, rgb_to_lab_array, to_grayscale
from .pipeline import CLASSES, DatasetManifest, specular_mask

FEATURE_COLUMNS = ("r_red", "d_vessel", "w_sclera", "i_score")
FEATURES_HEADER = ("path",) + FEATURE_COLUMNS
_I_COL = FEATURE_COLUMNS.index("i_score")

SCORE_WEIGHTS = (0.5, 0.3, 0.2)


def inflammation_score(r_red: float, d_vessel: float, w_sclera: float) -> float:
    """i = 0.5*R + 0.3*D + 0.2*(1 - W/255)."""
    r, d, w = float(r_red), float(d_vessel), float(w_sclera)
    if not 0.0 <= r <= 100.0:
        raise ValidationError(f"r_red must be in 0..100, got {r}")
    if not 0.0 <= d <= 100.0:
        raise ValidationError(f"d_vessel must be in 0..100, got {d}")
    if not 0.0 <= w <= 255.0:
        raise ValidationError(f"w_sclera must be in 0..255, got {w}")
    wr, wd, ww = SCORE_WEIGHTS
    return wr * r + wd * d + ww * (1.0 - w / 255.0)


@dataclass(frozen=True)
class QualityFeatures:
    """Per-image scoring record; i_score always equals the closed form."""

    path: str
    r_red: float
    d_vessel: float
    w_sclera: float
    i_score: float

    def __post_init__(self):
        expect = inflammation_score(self.r_red, self.d_vessel, self.w_sclera)
        if self.i_score != expect:
            raise ValidationError(
                f"{self.path}: i_score {self.i_score!r} does not equal the "
                f"score formula value {expect!r}"
            )

    @classmethod
    def from_components(cls, path: str, r_red: float, d_vessel: float, w_sclera: float):
        return cls(path, r_red, d_vessel, w_sclera, inflammation_score(r_red, d_vessel, w_sclera))

    def vector(self) -> np.ndarray:
        return np.array([self.r_red, self.d_vessel, self.w_sclera, self.i_score])


def redness_score(
    img: ImageRGB8,
    hue_low: float = 20.0,
    hue_high: float = 340.0,
    sat_min: float = 0.3,
    val_min: float = 0.2,
) -> float:
    """Percent of pixels in the red hue wedge with S >= sat_min, V >= val_min."""
    hsv = rgb_to_hsv_array(img.data)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    red = ((h <= hue_low) | (h >= hue_high)) & (s >= sat_min) & (v >= val_min)
    return 100.0 * float(red.sum()) / red.size


def vessel_density(
    img,
    clahe_clip: float = 2.0,
    clahe_tiles: int = 8,
    canny_sigma: float = 1.4,
    canny_low: float = 50.0,
    canny_high: float = 150.0,
) -> float:
    """Percent of edge pixels after grayscale CLAHE and Canny."""
    if isinstance(img, ImageRGB8):
        gray = to_grayscale(img)
    elif isinstance(img, ImageGray8):
        gray = img
    else:
        raise ValidationError(f"vessel_density: unsupported type {type(img).__name__}")
    enhanced = clahe_gray(gray, clahe_clip, clahe_tiles)
    edges = canny(enhanced, canny_sigma, canny_low, canny_high)
    return 100.0 * float(edges.data.sum()) / edges.data.size


def scleral_whiteness(img: ImageRGB8, specular=None) -> float:
    """Mean L* over non-specular pixels, scaled by 2.55 onto 0..255."""
    lab_l = rgb_to_lab_array(img.data)[..., 0]
    if specular is not None:
        if not isinstance(specular, BitMask):
            raise ValidationError("specular must be a BitMask")
        if (specular.height, specular.width) != (img.height, img.width):
            raise ValidationError("specular mask does not match image dimensions")
        keep = ~specular.data
        if not keep.any():
            raise ValidationError("specular mask covers every pixel; no sclera to measure")
        lab_l = lab_l[keep]
    return float(np.clip(lab_l.mean() * 2.55, 0.0, 255.0))


def score_image(
    img: ImageRGB8,
    path: str = "",
    specular_threshold: int = 240,
    specular_dilate: int = 5,
    clahe_clip: float = 2.0,
    clahe_tiles: int = 8,
    canny_sigma: float = 1.4,
    canny_low: float = 50.0,
    canny_high: float = 150.0,
    hue_low: float = 20.0,
    hue_high: float = 340.0,
    sat_min: float = 0.3,
    val_min: float = 0.2,
) -> QualityFeatures:
    """All three signals plus the combined score for one image."""
    mask = specular_mask(img, specular_threshold, specular_dilate)
    if mask.data.all():
        mask = None  # fully saturated frame: fall back to every pixel
    r = redness_score(img, hue_low, hue_high, sat_min, val_min)
    d = vessel_density(img, clahe_clip, clahe_tiles, canny_sigma, canny_low, canny_high)
    w = scleral_whiteness(img, mask)
    return QualityFeatures.from_components(path, r, d, w)


# ---------------------------------------------------------------------------
# Feature CSV I/O


def write_features(features, path) -> None:
    """Feature CSV with repr-formatted floats (bit-exact round trip)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURES_HEADER)
        for f in features:
            writer.writerow([f.path, repr(f.r_red), repr(f.d_vessel), repr(f.w_sclera), repr(f.i_score)])


def read_features(path) -> list:
    p = Path(path)
    with open(p, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{p}: empty features file") from None
        if tuple(header) != FEATURES_HEADER:
            raise ValidationError(f"{p}: bad header {header!r}, expected {','.join(FEATURES_HEADER)}")
        out = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(FEATURES_HEADER):
                raise ValidationError(f"{p}:{i}: expected {len(FEATURES_HEADER)} fields")
            out.append(
                QualityFeatures(row[0], float(row[1]), float(row[2]), float(row[3]), float(row[4]))
            )
    return out


# ---------------------------------------------------------------------------
# k-means clustering


@dataclass(frozen=True)
class ClusterModel:
    """k-means result in standardized feature space."""

    centroids: np.ndarray  # (k, d), standardized
    feature_mean: np.ndarray
    feature_std: np.ndarray
    cluster_to_label: tuple  # class name per cluster index ("" entries if k != 3)
    inertia: float
    n_iter: int

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std

    def assign(self, features: np.ndarray) -> np.ndarray:
        z = self.standardize(features)
        d2 = ((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def _plus_plus_seed(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centroids = np.empty((k, z.shape[1]))
    centroids[0] = z[rng.integers(0, n)]
    d2 = ((z - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total == 0:
            # all remaining points coincide with a centroid
            centroids[i] = z[rng.integers(0, n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centroids[i] = z[idx]
        d2 = np.minimum(d2, ((z - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _lloyd(z: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> tuple:
    n, k = z.shape[0], centroids.shape[0]
    assign = np.zeros(n, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = z[assign == c]
            if members.size == 0:
                # rescue an empty cluster with the point farthest from its centroid
                far = int(d2[np.arange(n), assign].argmax())
                new_centroids[c] = z[far]
            else:
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    return centroids, assign, inertia, n_iter


def kmeans_fit(
    features: np.ndarray,
    k: int = 3,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
) -> ClusterModel:
    """Seeded k-means++ with Lloyd iterations on z-scored features.

    Runs n_init independent k-means++ starts off one seeded stream and keeps
    the lowest-inertia fit (first wins ties), so the result is deterministic
    per seed. Each start stops when the largest centroid shift drops below
    tol or after max_iter rounds. With k = 3, clusters are mapped to class
    names by ascending mean i_score (last feature column)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError(f"features must be a non-empty (n, d) matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    n = x.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if n_init < 1:
        raise ValidationError(f"n_init must be >= 1, got {n_init}")
    if len(np.unique(x, axis=0)) < k:
        raise ValidationError(f"need at least {k} distinct feature rows")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0, 1.0, std)
    z = (x - mean) / std

    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = assign = None
    inertia = np.inf
    n_iter = 0
    for _ in range(n_init):
        c0 = _plus_plus_seed(z, k, rng)
        c_run, a_run, in_run, it_run = _lloyd(z, c0, max_iter, tol)
        if in_run < inertia:
            centroids, assign, inertia, n_iter = c_run, a_run, in_run, it_run

    labels = [""] * k
    if k == len(CLASSES):
        order = []
        for c in range(k):
            members = x[assign == c]
            key = members[:, _I_COL].mean() if members.size else np.inf
            order.append((key, c))
        order.sort()
        for rank, (_, c) in enumerate(order):
            labels[c] = CLASSES[rank]

    return ClusterModel(
        centroids=centroids,
        feature_mean=mean,
        feature_std=std,
        cluster_to_label=tuple(labels),
        inertia=inertia,
        n_iter=n_iter,
    )


# ---------------------------------------------------------------------------
# Relabeling


@dataclass(frozen=True)
class RelabelReport:
    n_total: int
    n_changed: int
    changed_fraction: float
    class_stats: dict  # class -> {count, i_mean, i_sd}
    anova_f: float
    anova_p: float
    entries: tuple  # per image: path, old_label, new_label, i_score

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_changed": self.n_changed,
            "changed_fraction": self.changed_fraction,
            "class_stats": self.class_stats,
            "anova_f": self.anova_f,
            "anova_p": self.anova_p,
            "entries": [list(e) for e in self.entries],
        }


def relabel(manifest: DatasetManifest, model: ClusterModel, features) -> tuple:
    """Replace manifest labels with cluster-derived classes.

    features: list of QualityFeatures covering every manifest path exactly.
    Returns (corrected manifest, RelabelReport). Running it twice with the
    same model is a no-op the second time."""
    if len(model.cluster_to_label) != len(CLASSES) or "" in model.cluster_to_label:
        raise ValidationError("model does not define a cluster-to-class mapping (need k = 3)")
    if len(manifest.records) == 0:
        raise ValidationError("cannot relabel an empty manifest")
    by_path = {f.path: f for f in features}
    if len(by_path) != len(features):
        raise ValidationError("duplicate paths in features")
    missing = [r.path for r in manifest.records if r.path not in by_path]
    if missing:
        raise ValidationError(f"features missing for {len(missing)} manifest records, e.g. {missing[0]}")

    mat = np.stack([by_path[r.path].vector() for r in manifest.records])
    assignments = model.assign(mat)

    new_records = []
    entries = []
    n_changed = 0
    per_class_scores = {c: [] for c in CLASSES}
    for rec, cluster in zip(manifest.records, assignments):
        new_label = model.cluster_to_label[int(cluster)]
        if new_label != rec.label:
            n_changed += 1
        new_records.append(replace(rec, label=new_label))
        score = by_path[rec.path].i_score
        per_class_scores[new_label].append(score)
        entries.append((rec.path, rec.label, new_label, score))

    class_stats = {}
    for c in CLASSES:
        vals = np.asarray(per_class_scores[c], dtype=np.float64)
        class_stats[c] = {
            "count": int(vals.size),
            "i_mean": float(vals.mean()) if vals.size else None,
            "i_sd": float(vals.std(ddof=1)) if vals.size > 1 else None,
        }

    nonempty = [np.asarray(per_class_scores[c]) for c in CLASSES if per_class_scores[c]]
    if len(nonempty) >= 2 and sum(v.size for v in nonempty) > len(nonempty):
        res = anova_oneway(nonempty)
        anova_f, anova_p = res.statistic, res.p_value
    else:
        anova_f, anova_p = float("nan"), float("nan")

    report = RelabelReport(
        n_total=len(manifest.records),
        n_changed=n_changed,
        changed_fraction=n_changed / len(manifest.records) if len(manifest.records) else 0.0,
        class_stats=class_stats,
        anova_f=anova_f,
        anova_p=anova_p,
        entries=tuple(entries),
    )
    return DatasetManifest(tuple(new_records)), report
