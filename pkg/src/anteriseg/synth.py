"""Synthetic cohort generators for demos and end-to-end verification.

Three generators:

* synth_features: per-class feature vectors whose combined-score
  distributions sit at configurable mean/sd targets, with class-distinct
  redness/vessel/whiteness compositions so the standardized feature space
  separates cleanly.
* generate_cohort: small eye-like PNG images (bright field, red wedge,
  dark strokes) with noisy labels and ground truth, plus a manifest.
* synth_regional_attention: per-image regional attention samples at
  configurable class means.

Everything is driven by hash-derived per-item RNG streams, so output is
byte-stable regardless of generation order.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .imgcore import ImageRGB8, save_image
from .pipeline import CLASSES, GAZES, DatasetManifest, ManifestRecord, derive_rng
from .quality import inflammation_score

# class -> (i_mean, i_sd, base redness, base whiteness)
# redness baselines are deliberately anti-aligned with the score means
# (Normal sits ABOVE Controlled in r) so a class's low-score tail drifts
# away from its neighbor instead of into it; vessel density and whiteness
# then separate the classes almost noise-free
FEATURE_PARAMS = {
    "Normal": (26.5, 4.2, 45.0, 235.0),
    "Controlled": (37.2, 7.3, 28.0, 205.0),
    "Uncontrolled": (39.9, 5.3, 60.0, 170.0),
}

# how a draw of the combined score spreads into redness (the vessel term
# absorbs the remainder so the closed form lands on the target)
_R_SLOPE = 1.6


def synth_features(n: int, seed: int = 0, params=None) -> tuple:
    """(feature matrix (n,4), true labels) with class-separated compositions.

    Columns follow quality.FEATURE_COLUMNS: r_red, d_vessel, w_sclera,
    i_score, with i_score always equal to the closed form of the first
    three (clipping to valid ranges happens before the score is computed)."""
    if n < len(CLASSES):
        raise ValidationError(f"need at least {len(CLASSES)} samples, got {n}")
    params = dict(FEATURE_PARAMS if params is None else params)
    rng = derive_rng(seed, "synth-features")
    labels = [CLASSES[i % len(CLASSES)] for i in range(n)]
    rng.shuffle(labels)
    rows = np.empty((n, 4), dtype=np.float64)
    for i, lab in enumerate(labels):
        mu, sd, r0, w0 = params[lab]
        delta = rng.normal(0.0, sd)
        target = mu + delta
        r = float(np.clip(r0 + _R_SLOPE * delta + rng.normal(0.0, 1.0), 0.0, 100.0))
        w = float(np.clip(w0 + rng.normal(0.0, 4.0), 0.0, 255.0))
        d = (target - 0.5 * r - 0.2 * (1.0 - w / 255.0)) / 0.3
        d = float(np.clip(d, 0.0, 100.0))
        rows[i] = (r, d, w, inflammation_score(r, d, w))
    return rows, labels


# class -> (red row fraction, background gray, stroke count)
# background stays clear of the specular threshold (240) so the whiteness
# reading is stable against per-pixel noise; red fraction and background
# both rise with severity so the combined score follows the class order
IMAGE_PARAMS = {
    "Normal": (0.10, 228, 2),
    "Controlled": (0.26, 205, 5),
    "Uncontrolled": (0.34, 180, 12),
}

_RED = np.array([190, 60, 60], dtype=np.float64)
_STROKE = np.array([60, 50, 45], dtype=np.float64)


def synth_image(label: str, rng: np.random.Generator, size: int = 64) -> ImageRGB8:
    """One eye-like frame: bright field, red wedge at the top, dark strokes."""
    if label not in IMAGE_PARAMS:
        raise ValidationError(f"unknown class label {label!r}")
    if size < 16:
        raise ValidationError(f"size must be >= 16, got {size}")
    red_frac, bg, n_strokes = IMAGE_PARAMS[label]
    a = np.empty((size, size, 3), dtype=np.float64)
    base = bg + rng.normal(0.0, 3.0)
    a[:] = base + rng.normal(0.0, 2.0, size=(size, size, 1))

    frac = float(np.clip(red_frac + rng.normal(0.0, 0.02), 0.02, 0.6))
    rows = max(1, int(round(frac * size)))
    a[:rows] = _RED + rng.normal(0.0, 4.0, size=(rows, size, 3))

    for _ in range(n_strokes):
        y = int(rng.integers(rows + 1, size - 3))
        x0 = int(rng.integers(0, size // 2))
        length = int(rng.integers(size // 4, size // 2))
        thickness = 2 + int(rng.integers(0, 2))
        x1 = min(size, x0 + length)
        a[y : min(size, y + thickness), x0:x1] = _STROKE + rng.normal(0.0, 2.0, size=3)

    return ImageRGB8(np.clip(np.rint(a), 0, 255).astype(np.uint8))


def generate_cohort(
    out_dir,
    n: int = 1000,
    seed: int = 7,
    label_noise: float = 0.65,
    size: int = 64,
    images_per_patient: int = 5,
) -> tuple:
    """Write n synthetic PNGs plus manifest.csv and truth.csv under out_dir.

    Labels in the manifest are corrupted with probability label_noise
    (uniform over the other classes); truth.csv keeps the generating class.
    Returns (manifest, {path: true_label})."""
    if not 0.0 <= label_noise < 1.0:
        raise ValidationError(f"label_noise must be in [0, 1), got {label_noise}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    records = []
    truth = {}
    for i in range(n):
        rng = derive_rng(seed, "synth-image", i)
        true_label = CLASSES[i % len(CLASSES)]
        img = synth_image(true_label, rng, size)
        rel = f"images/synth_{i:05d}.png"
        save_image(img, out / rel)

        observed = true_label
        if rng.random() < label_noise:
            others = [c for c in CLASSES if c != true_label]
            observed = others[int(rng.integers(0, len(others)))]
        records.append(
            ManifestRecord(
                path=rel,
                patient_id=f"P{i // images_per_patient:05d}",
                gaze=GAZES[i % len(GAZES)],
                label=observed,
                split="unassigned",
                provenance="original",
                source_path="",
            )
        )
        truth[rel] = true_label

    manifest = DatasetManifest(tuple(records))
    from .pipeline import write_manifest

    write_manifest(manifest, out / "manifest.csv")
    with open(out / "truth.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "true_label"])
        for rel in sorted(truth):
            writer.writerow([rel, truth[rel]])
    return manifest, truth


# class -> (iris, sclera, periphery) attention means
ATTENTION_PARAMS = {
    "Normal": (0.284, 0.152, 0.20),
    "Controlled": (0.241, 0.327, 0.22),
    "Uncontrolled": (0.198, 0.476, 0.24),
}


def synth_regional_attention(n_per_class: int = 40, seed: int = 0, sd: float = 0.05) -> tuple:
    """(labels, per-image regional attention dicts) at the class means above."""
    if n_per_class < 2:
        raise ValidationError("need at least 2 images per class")
    rng = derive_rng(seed, "synth-attention")
    labels = []
    attentions = []
    for lab in CLASSES:
        iris_mu, sclera_mu, peri_mu = ATTENTION_PARAMS[lab]
        for _ in range(n_per_class):
            labels.append(lab)
            attentions.append(
                {
                    "iris": float(np.clip(rng.normal(iris_mu, sd), 0.0, 1.0)),
                    "sclera": float(np.clip(rng.normal(sclera_mu, sd), 0.0, 1.0)),
                    "periphery": float(np.clip(rng.normal(peri_mu, sd), 0.0, 1.0)),
                }
            )
    return labels, attentions
