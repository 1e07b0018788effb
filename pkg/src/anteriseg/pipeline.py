"""Dataset plumbing: manifest I/O, preprocessing, augmentation, splitting.

The manifest is a UTF-8 CSV with the exact header
``path,patient_id,gaze,label,split,provenance,source_path`` and closed
vocabularies for gaze/label/split/provenance. Augmented records always carry
``split=train`` and name their source image; the loader and every dataset op
enforce that invariant so augmented pixels can never leak into validation.

Determinism: every augmentation variant draws from its own RNG stream derived
by hashing (master_seed, source_path, variant_index), so results do not depend
on record order or on how work is scheduled across threads.
"""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .filters import (
    bilinear_sample,
    blur_float,
    clahe_l_channel,
    dilate,
    inpaint_telea,
    resize_bilinear_array,
)
from .imgcore import (
    BitMask,
    ImageRGB8,
    hsv_to_rgb_array,
    load_image,
    rgb_to_hsv_array,
    save_image,
    to_grayscale,
)

CLASSES = ("Normal", "Controlled", "Uncontrolled")
GAZES = ("Straight", "Up", "Down", "Left", "Right")
SPLITS = ("train", "val", "unassigned")
PROVENANCES = ("original", "augmented")
MANIFEST_HEADER = ("path", "patient_id", "gaze", "label", "split", "provenance", "source_path")

AUGMENT_KINDS = (
    "hflip",
    "rotate",
    "brightness",
    "contrast",
    "gauss_noise",
    "zoom",
    "color_jitter",
)

AUGMENT_RANGES = {
    "hflip": (0.5,),  # flip probability
    "rotate": (-20.0, 20.0),  # degrees
    "brightness": (0.7, 1.3),  # multiplicative factor
    "contrast": (0.8, 1.2),  # factor around the mean luma
    "gauss_noise": (5.0, 15.0),  # sigma in gray levels
    "zoom": (1.1, 1.3),  # center zoom-in factor
    "color_jitter": (-10.0, 10.0, 0.8, 1.2),  # hue shift deg, saturation factor
}


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    patient_id: str
    gaze: str
    label: str
    split: str
    provenance: str
    source_path: str = ""

    def __post_init__(self):
        if not self.path:
            raise ValidationError("manifest record with empty path")
        if self.gaze not in GAZES:
            raise ValidationError(f"{self.path}: unknown gaze {self.gaze!r}")
        if self.label not in CLASSES:
            raise ValidationError(f"{self.path}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.path}: unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"{self.path}: unknown provenance {self.provenance!r}")
        if self.provenance == "augmented":
            if not self.source_path:
                raise ValidationError(f"{self.path}: augmented record without source_path")
            if self.split != "train":
                raise ValidationError(
                    f"{self.path}: augmented record with split={self.split!r}; "
                    "augmented data must stay in train"
                )
        elif self.source_path:
            raise ValidationError(f"{self.path}: original record with source_path set")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple

    def __post_init__(self):
        recs = tuple(self.records)
        seen = set()
        for r in recs:
            if r.path in seen:
                raise ValidationError(f"duplicate manifest path {r.path!r}")
            seen.add(r.path)
        object.__setattr__(self, "records", recs)

    def __len__(self):
        return len(self.records)

    def count_by(self, field: str) -> dict:
        out: dict = {}
        for r in self.records:
            key = getattr(r, field)
            out[key] = out.get(key, 0) + 1
        return out


def read_manifest(path) -> DatasetManifest:
    p = Path(path)
    with open(p, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{p}: empty manifest file") from None
        if tuple(header) != MANIFEST_HEADER:
            raise ValidationError(
                f"{p}: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}"
            )
        records = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ValidationError(f"{p}:{i}: expected {len(MANIFEST_HEADER)} fields")
            records.append(ManifestRecord(*row))
    return DatasetManifest(tuple(records))


def write_manifest(manifest: DatasetManifest, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow(
                [r.path, r.patient_id, r.gaze, r.label, r.split, r.provenance, r.source_path]
            )


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Hash-derived RNG stream; independent of iteration order and threading."""
    key = "|".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def thread_map(fn, items, workers: int = 1) -> list:
    """Order-preserving map, optionally on a thread pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Preprocessing


def specular_mask(img: ImageRGB8, threshold: int = 240, dilate_kernel: int = 5) -> BitMask:
    """Bright-highlight mask: max(R,G,B) > threshold, dilated."""
    if not 0 <= threshold <= 255:
        raise ValidationError(f"threshold must be in 0..255, got {threshold}")
    raw = BitMask(img.data.max(axis=2) > threshold)
    if dilate_kernel > 1:
        return dilate(raw, dilate_kernel)
    return raw


@dataclass(frozen=True)
class PreprocessResult:
    image: ImageRGB8
    mask: BitMask


def preprocess(
    img: ImageRGB8,
    threshold: int = 240,
    dilate_kernel: int = 5,
    telea_radius: int = 3,
    clahe_clip: float = 2.0,
    clahe_tiles: int = 8,
) -> PreprocessResult:
    """Specular-highlight removal followed by L-channel CLAHE."""
    mask = specular_mask(img, threshold, dilate_kernel)
    if mask.data.all():
        raise ValidationError("specular mask covers the entire image")
    filled = inpaint_telea(img, mask, telea_radius) if mask.data.any() else img
    enhanced = clahe_l_channel(filled, clahe_clip, clahe_tiles)
    return PreprocessResult(enhanced, mask)


# ---------------------------------------------------------------------------
# Geometric / photometric transforms (uint8 RGB arrays in, uint8 out)


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def _hflip(a: np.ndarray) -> np.ndarray:
    return a[:, ::-1].copy()


def _warp_about_center(a: np.ndarray, inv) -> np.ndarray:
    hgt, wid = a.shape[:2]
    cy, cx = (hgt - 1) / 2.0, (wid - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(hgt, dtype=np.float64), np.arange(wid, dtype=np.float64), indexing="ij")
    sy, sx = inv(yy - cy, xx - cx)
    return bilinear_sample(a, sy + cy, sx + cx)


def _rotate(a: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear, edge-clamped sampling."""
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)

    def inv(dy, dx):
        # inverse rotation of the output grid back into source coords
        return c * dy - s * dx, s * dy + c * dx

    return _to_u8(_warp_about_center(a, inv))


def _zoom(a: np.ndarray, factor: float) -> np.ndarray:
    def inv(dy, dx):
        return dy / factor, dx / factor

    return _to_u8(_warp_about_center(a, inv))


def _brightness(a: np.ndarray, factor: float) -> np.ndarray:
    return _to_u8(a.astype(np.float64) * factor)


def _contrast(a: np.ndarray, factor: float) -> np.ndarray:
    luma = to_grayscale(ImageRGB8(a)).data.astype(np.float64)
    pivot = float(luma.mean())
    return _to_u8((a.astype(np.float64) - pivot) * factor + pivot)


def _gauss_noise(a: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, sigma, size=a.shape)
    return _to_u8(a.astype(np.float64) + noise)


def _color_jitter(a: np.ndarray, hue_shift: float, sat_factor: float) -> np.ndarray:
    hsv = rgb_to_hsv_array(a)
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 360.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_factor, 0.0, 1.0)
    return _to_u8(hsv_to_rgb_array(hsv))


def _grayscale3(a: np.ndarray) -> np.ndarray:
    g = to_grayscale(ImageRGB8(a)).data
    return np.repeat(g[:, :, None], 3, axis=2)


def _apply_kind(a: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Apply one transform, drawing its parameters from the stream.

    hflip takes no parameter here: in the dataset protocol the subset draw
    (each transform active with p=0.5) IS the flip coin, so an active hflip
    always flips."""
    if kind == "hflip":
        return _hflip(a)
    if kind == "rotate":
        lo, hi = AUGMENT_RANGES["rotate"]
        return _rotate(a, float(rng.uniform(lo, hi)))
    if kind == "brightness":
        lo, hi = AUGMENT_RANGES["brightness"]
        return _brightness(a, float(rng.uniform(lo, hi)))
    if kind == "contrast":
        lo, hi = AUGMENT_RANGES["contrast"]
        return _contrast(a, float(rng.uniform(lo, hi)))
    if kind == "gauss_noise":
        lo, hi = AUGMENT_RANGES["gauss_noise"]
        return _gauss_noise(a, float(rng.uniform(lo, hi)), rng)
    if kind == "zoom":
        lo, hi = AUGMENT_RANGES["zoom"]
        return _zoom(a, float(rng.uniform(lo, hi)))
    if kind == "color_jitter":
        h0, h1, s0, s1 = AUGMENT_RANGES["color_jitter"]
        return _color_jitter(a, float(rng.uniform(h0, h1)), float(rng.uniform(s0, s1)))
    raise ValidationError(f"unknown augmentation kind {kind!r}")


@dataclass(frozen=True)
class AugmentSpec:
    """One named transform from the seven-transform family."""

    kind: str

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValidationError(f"unknown augmentation kind {self.kind!r}")


def augment_one(img: ImageRGB8, spec: AugmentSpec, rng: np.random.Generator) -> ImageRGB8:
    """Apply a single transform with parameters drawn from the stream.

    Standalone hflip draws its own p=0.5 coin (it may return the input)."""
    if spec.kind == "hflip":
        if rng.random() < AUGMENT_RANGES["hflip"][0]:
            return ImageRGB8(_hflip(img.data))
        return img
    return ImageRGB8(_apply_kind(img.data, spec.kind, rng))


def augment_variant(img: ImageRGB8, master_seed: int, source_path: str, variant_index: int) -> ImageRGB8:
    """Render one augmentation variant from its derived stream.

    Draws the active subset (each transform with p=0.5, at least one forced)
    and applies the active transforms in canonical order."""
    rng = derive_rng(master_seed, source_path, variant_index)
    active = rng.random(len(AUGMENT_KINDS)) < 0.5
    if not active.any():
        active[int(rng.integers(0, len(AUGMENT_KINDS)))] = True
    a = img.data
    for kind, on in zip(AUGMENT_KINDS, active):
        if on:
            a = _apply_kind(a, kind, rng)
    return ImageRGB8(a)


def _augmented_path(out_dir: str, source_path: str, variant_index: int) -> str:
    stem = Path(source_path).stem
    return (Path(out_dir) / f"{stem}__aug{variant_index}.png").as_posix()


def plan_augmented_manifest(
    manifest: DatasetManifest, variants_per_image: int, out_dir: str
) -> DatasetManifest:
    """Manifest-level augmentation: originals pass through, each train
    original gains variants_per_image augmented records. Pure bookkeeping;
    augment_dataset renders the pixels."""
    if variants_per_image < 1:
        raise ValidationError(f"variants_per_image must be >= 1, got {variants_per_image}")
    stems = {}
    for r in manifest.records:
        if r.provenance == "augmented":
            raise ValidationError(
                f"{r.path}: manifest already contains augmented records; "
                "augment the original manifest instead"
            )
        if r.split == "unassigned":
            raise ValidationError(f"{r.path}: assign splits before augmenting")
        stem = Path(r.path).stem
        if stem in stems:
            raise ValidationError(
                f"duplicate image stem {stem!r} ({stems[stem]} vs {r.path})"
            )
        stems[stem] = r.path

    out = list(manifest.records)
    for r in manifest.records:
        if r.split != "train":
            continue  # val originals pass through; they are never augmented
        for k in range(variants_per_image):
            out.append(
                replace(
                    r,
                    path=_augmented_path(out_dir, r.path, k),
                    split="train",
                    provenance="augmented",
                    source_path=r.path,
                )
            )
    return DatasetManifest(tuple(out))


def augment_dataset(
    manifest: DatasetManifest,
    variants_per_image: int,
    master_seed: int,
    out_dir,
    images_root=None,
    workers: int = 1,
) -> DatasetManifest:
    """Render augmentation variants for every train original and return the
    extended manifest. Output bytes are independent of worker count."""
    planned = plan_augmented_manifest(manifest, variants_per_image, str(out_dir))
    root = Path(images_root) if images_root else None
    new_records = [r for r in planned.records if r.provenance == "augmented"]

    # index sources once; rendering is embarrassingly parallel
    by_path = {r.path: r for r in manifest.records}

    def render(rec: ManifestRecord) -> None:
        src = by_path[rec.source_path]
        if src.split == "val":
            raise ValidationError(f"{rec.source_path}: refusing to augment a val image")
        src_file = (root / src.path) if root else Path(src.path)
        img = load_image(src_file)
        k = int(rec.path.rsplit("__aug", 1)[1].split(".")[0])
        aug = augment_variant(img, master_seed, src.path, k)
        out_file = (root / rec.path) if root else Path(rec.path)
        save_image(aug, out_file)

    thread_map(render, new_records, workers)
    return planned


# ---------------------------------------------------------------------------
# Self-supervised view pairs


def _resized_crop(a: np.ndarray, top: int, left: int, ch: int, cw: int) -> np.ndarray:
    crop = a[top : top + ch, left : left + cw]
    if (ch, cw) == a.shape[:2]:
        return a.copy()
    return _to_u8(resize_bilinear_array(crop, a.shape[0], a.shape[1]))


def _ssl_single_view(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    hgt, wid = a.shape[:2]
    scale = float(rng.uniform(0.6, 1.0))  # area fraction
    side = math.sqrt(scale)
    ch = max(1, min(hgt, int(round(hgt * side))))
    cw = max(1, min(wid, int(round(wid * side))))
    top = int(rng.integers(0, hgt - ch + 1))
    left = int(rng.integers(0, wid - cw + 1))
    v = _resized_crop(a, top, left, ch, cw)
    if rng.random() < 0.5:
        v = _hflip(v)
    h0, h1, s0, s1 = AUGMENT_RANGES["color_jitter"]
    v = _color_jitter(v, float(rng.uniform(h0, h1)), float(rng.uniform(s0, s1)))
    if rng.random() < 0.2:
        v = _grayscale3(v)
    sigma = float(rng.uniform(0.1, 2.0))
    blurred = np.stack([blur_float(v[..., c], sigma) for c in range(3)], axis=-1)
    return _to_u8(blurred)


def ssl_views(img: ImageRGB8, rng: np.random.Generator) -> tuple:
    """Two independently transformed views of one image (crop/flip/jitter/
    grayscale/blur), drawn sequentially from the given stream."""
    return (
        ImageRGB8(_ssl_single_view(img.data, rng)),
        ImageRGB8(_ssl_single_view(img.data, rng)),
    )


# ---------------------------------------------------------------------------
# Stratified split


def _largest_remainder(targets: list, total: int) -> list:
    """Integer apportionment: floor everything, hand out the remainder by
    largest fractional part (ties -> earlier entry)."""
    base = [math.floor(t) for t in targets]
    leftover = total - sum(base)
    if leftover < 0:
        order = sorted(range(len(targets)), key=lambda i: (targets[i] - base[i], -i))
        for i in order[:(-leftover)]:
            base[i] -= 1
    else:
        order = sorted(range(len(targets)), key=lambda i: (-(targets[i] - base[i]), i))
        for i in order[:leftover]:
            base[i] += 1
    return base


def stratified_split(
    manifest: DatasetManifest,
    train_frac: float = 0.85,
    seed: int = 0,
    group_by_patient: bool = False,
) -> DatasetManifest:
    """Assign train/val per label (optionally per patient group).

    Validation gets round((1-train_frac)*N) records apportioned across labels
    by largest remainder, so each label deviates from its exact stratified
    target by at most one record."""
    if not 0.0 < train_frac < 1.0:
        raise ValidationError(f"train_frac must be in (0, 1), got {train_frac}")
    for r in manifest.records:
        if r.split != "unassigned":
            raise ValidationError(f"{r.path}: split already assigned ({r.split})")
        if r.provenance != "original":
            raise ValidationError(f"{r.path}: can only split original records")

    if group_by_patient:
        units: dict = {}
        for i, r in enumerate(manifest.records):
            units.setdefault(r.patient_id, []).append(i)

        def unit_label(idxs):
            votes: dict = {}
            for i in idxs:
                votes[manifest.records[i].label] = votes.get(manifest.records[i].label, 0) + 1
            return max(CLASSES, key=lambda c: (votes.get(c, 0), -CLASSES.index(c)))

        keyed = [(unit_label(idxs), pid, idxs) for pid, idxs in units.items()]
    else:
        keyed = [(r.label, r.path, [i]) for i, r in enumerate(manifest.records)]

    by_label: dict = {}
    for label, key, idxs in keyed:
        by_label.setdefault(label, []).append((key, idxs))

    val_frac = 1.0 - train_frac
    labels = [c for c in CLASSES if c in by_label]
    for label in labels:
        if len(by_label[label]) < 2:
            raise ValidationError(f"label {label!r} has fewer than 2 units; cannot stratify")

    n_units = sum(len(v) for v in by_label.values())
    total_val = round(val_frac * n_units)
    targets = [val_frac * len(by_label[c]) for c in labels]
    alloc = _largest_remainder(targets, total_val)

    assignment = ["train"] * len(manifest.records)
    for label, n_val in zip(labels, alloc):
        group = by_label[label]
        perm = derive_rng(seed, "split", label).permutation(len(group))
        for rank, gi in enumerate(perm):
            side = "val" if rank < n_val else "train"
            for rec_idx in group[gi][1]:
                assignment[rec_idx] = side

    out = tuple(
        replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)
    )
    return DatasetManifest(out)
