"""Manifest handling, preprocessing, augmentation, and the stratified split."""

from pathlib import Path

import numpy as np
import pytest

from anteriseg.errors import ValidationError
from anteriseg.imgcore import ImageRGB8, load_image, save_image
from anteriseg.pipeline import (
    AUGMENT_KINDS,
    CLASSES,
    GAZES,
    AugmentSpec,
    DatasetManifest,
    ManifestRecord,
    augment_dataset,
    augment_one,
    augment_variant,
    derive_rng,
    plan_augmented_manifest,
    preprocess,
    read_manifest,
    specular_mask,
    ssl_views,
    stratified_split,
    thread_map,
    write_manifest,
)


def rec(path, label="Normal", split="unassigned", patient="P0", gaze="Straight",
        provenance="original", source=""):
    return ManifestRecord(path, patient, gaze, label, split, provenance, source)


def paper_manifest():
    """2,640 originals with the published class counts (1311/465/864)."""
    counts = {"Normal": 1311, "Controlled": 465, "Uncontrolled": 864}
    records = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            records.append(rec(f"img_{i:05d}.png", label=label, patient=f"P{i // 5:04d}",
                               gaze=GAZES[i % 5]))
            i += 1
    return DatasetManifest(tuple(records))


class TestManifestRecords:
    def test_field_vocabularies_enforced(self):
        with pytest.raises(ValidationError):
            rec("a.png", label="Severe")
        with pytest.raises(ValidationError):
            rec("a.png", gaze="Sideways")
        with pytest.raises(ValidationError):
            rec("a.png", split="test")
        with pytest.raises(ValidationError):
            ManifestRecord("a.png", "P0", "Straight", "Normal", "train", "copied")

    def test_augmented_needs_train_and_source(self):
        ok = rec("a_v0.png", split="train", provenance="augmented", source="a.png")
        assert ok.source_path == "a.png"
        with pytest.raises(ValidationError):
            rec("a_v0.png", split="val", provenance="augmented", source="a.png")
        with pytest.raises(ValidationError):
            rec("a_v0.png", split="train", provenance="augmented")

    def test_original_cannot_carry_source(self):
        with pytest.raises(ValidationError):
            rec("a.png", source="b.png")

    def test_duplicate_paths_rejected(self):
        with pytest.raises(ValidationError):
            DatasetManifest((rec("a.png"), rec("a.png")))

    def test_count_by(self):
        m = DatasetManifest((rec("a.png"), rec("b.png", label="Controlled")))
        assert m.count_by("label") == {"Normal": 1, "Controlled": 1}


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        m = DatasetManifest((
            rec("a.png", label="Controlled", split="train"),
            rec("b.png", split="val", patient="P9", gaze="Up"),
            rec("a_v0.png", split="train", provenance="augmented", source="a.png"),
        ))
        p = tmp_path / "m.csv"
        write_manifest(m, p)
        assert read_manifest(p) == m
        # second write is byte-identical
        p2 = tmp_path / "m2.csv"
        write_manifest(read_manifest(p), p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("file,patient,gaze,label,split,provenance,source\n")
        with pytest.raises(ValidationError, match="header"):
            read_manifest(p)

    def test_short_row_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,patient_id,gaze,label,split,provenance,source_path\na.png,P0\n")
        with pytest.raises(ValidationError):
            read_manifest(p)


class TestRngAndWorkers:
    def test_derivation_is_stable_and_distinct(self):
        a = derive_rng(7, "stage", 3).integers(0, 2 ** 31, size=4)
        b = derive_rng(7, "stage", 3).integers(0, 2 ** 31, size=4)
        c = derive_rng(7, "stage", 4).integers(0, 2 ** 31, size=4)
        d = derive_rng(8, "stage", 3).integers(0, 2 ** 31, size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_thread_map_keeps_order(self):
        items = list(range(37))
        assert thread_map(lambda x: x * x, items, workers=1) == [x * x for x in items]
        assert thread_map(lambda x: x * x, items, workers=4) == [x * x for x in items]

    def test_thread_map_propagates_errors(self):
        def boom(x):
            raise RuntimeError("worker failed")
        with pytest.raises(RuntimeError):
            thread_map(boom, [1, 2], workers=2)


class TestSpecularAndPreprocess:
    def test_bright_spot_masked_and_dilated(self):
        im = np.full((16, 16, 3), 120, dtype=np.uint8)
        im[8, 8] = 250
        mask = specular_mask(ImageRGB8(im), threshold=240, dilate_kernel=5)
        assert mask.count() == 25
        assert mask.data[8, 8]

    def test_dim_image_unmasked(self):
        im = np.full((16, 16, 3), 200, dtype=np.uint8)
        assert specular_mask(ImageRGB8(im)).count() == 0

    def test_preprocess_removes_highlight(self):
        rng = np.random.Generator(np.random.PCG64(1))
        im = rng.integers(90, 160, size=(32, 32, 3)).astype(np.uint8)
        im[15:17, 15:17] = 255
        res = preprocess(ImageRGB8(im))
        assert res.mask.count() > 0
        assert res.image.data.max() < 255 or not res.mask.data.any()
        assert res.image.data.shape == im.shape

    def test_preprocess_deterministic(self):
        rng = np.random.Generator(np.random.PCG64(2))
        im = rng.integers(60, 250, size=(32, 32, 3)).astype(np.uint8)
        a = preprocess(ImageRGB8(im))
        b = preprocess(ImageRGB8(im))
        assert a.image.data.tobytes() == b.image.data.tobytes()

    def test_saturated_frame_rejected(self):
        img = ImageRGB8(np.full((16, 16, 3), 255, dtype=np.uint8))
        with pytest.raises(ValidationError):
            preprocess(img)


class TestAugment:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            AugmentSpec("shear")

    def test_each_kind_preserves_shape(self):
        rng = np.random.Generator(np.random.PCG64(3))
        im = ImageRGB8(rng.integers(0, 256, size=(24, 24, 3)).astype(np.uint8))
        for kind in AUGMENT_KINDS:
            out = augment_one(im, AugmentSpec(kind), derive_rng(0, kind))
            assert out.data.shape == im.data.shape
            assert out.data.dtype == np.uint8

    def test_variant_deterministic_and_distinct(self):
        rng = np.random.Generator(np.random.PCG64(4))
        im = ImageRGB8(rng.integers(0, 256, size=(24, 24, 3)).astype(np.uint8))
        v0 = augment_variant(im, 7, "x.png", 0)
        v0_again = augment_variant(im, 7, "x.png", 0)
        v1 = augment_variant(im, 7, "x.png", 1)
        other_source = augment_variant(im, 7, "y.png", 0)
        assert v0.data.tobytes() == v0_again.data.tobytes()
        assert v0.data.tobytes() != v1.data.tobytes()
        assert v0.data.tobytes() != other_source.data.tobytes()

    def test_ssl_views_differ(self):
        rng = np.random.Generator(np.random.PCG64(5))
        im = ImageRGB8(rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8))
        a, b = ssl_views(im, derive_rng(0, "ssl", 0))
        assert a.data.tobytes() != b.data.tobytes()
        a2, b2 = ssl_views(im, derive_rng(0, "ssl", 0))
        assert a.data.tobytes() == a2.data.tobytes()
        assert b.data.tobytes() == b2.data.tobytes()


class TestAugmentPlan:
    def test_paper_arithmetic(self):
        base = DatasetManifest(tuple(
            rec(f"img_{i}.png", split="train") for i in range(2640)
        ))
        plan = plan_augmented_manifest(base, 3, "aug")
        assert len(plan) == 10560
        assert plan.count_by("provenance") == {"original": 2640, "augmented": 7920}

    def test_val_sources_never_augmented(self):
        base = DatasetManifest((
            rec("a.png", split="train"),
            rec("b.png", split="val"),
        ))
        plan = plan_augmented_manifest(base, 2, "aug")
        augmented = [r for r in plan.records if r.provenance == "augmented"]
        assert {r.source_path for r in augmented} == {"a.png"}
        # val original passes through untouched
        assert any(r.path == "b.png" and r.split == "val" for r in plan.records)

    def test_zero_variants_rejected(self):
        base = DatasetManifest((rec("a.png", split="train"),))
        with pytest.raises(ValidationError):
            plan_augmented_manifest(base, 0, "aug")

    def test_augmenting_augmented_rejected(self):
        base = DatasetManifest((
            rec("a.png", split="train"),
            rec("a_v0.png", split="train", provenance="augmented", source="a.png"),
        ))
        with pytest.raises(ValidationError):
            plan_augmented_manifest(base, 1, "aug")


class TestAugmentDataset:
    def make_dataset(self, tmp_path, n=4):
        rng = np.random.Generator(np.random.PCG64(6))
        records = []
        for i in range(n):
            im = ImageRGB8(rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8))
            name = f"im_{i}.png"
            save_image(im, tmp_path / name)
            records.append(rec(name, split="train", label=CLASSES[i % 3]))
        return DatasetManifest(tuple(records))

    def test_writes_variants_and_manifest(self, tmp_path):
        m = self.make_dataset(tmp_path)
        out = augment_dataset(m, 2, 7, tmp_path / "aug", images_root=tmp_path)
        assert len(out) == 4 * 3
        for r in out.records:
            if r.provenance == "augmented":
                assert Path(r.path).exists()
                assert Path(r.path).is_relative_to(tmp_path / "aug")

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        m = self.make_dataset(tmp_path)
        out1 = augment_dataset(m, 2, 7, tmp_path / "a1", images_root=tmp_path)
        out2 = augment_dataset(m, 2, 7, tmp_path / "a2", images_root=tmp_path, workers=4)
        names1 = [Path(r.path).name for r in out1.records]
        names2 = [Path(r.path).name for r in out2.records]
        assert names1 == names2
        for r1, r2 in zip(out1.records, out2.records):
            if r1.provenance != "augmented":
                continue
            assert Path(r1.path).read_bytes() == Path(r2.path).read_bytes()


class TestSplit:
    def test_published_validation_count(self):
        m = paper_manifest()
        out = stratified_split(m, train_frac=0.85, seed=7)
        by_split = out.count_by("split")
        assert by_split["val"] == 396
        assert by_split["train"] == 2244
        val = [r for r in out.records if r.split == "val"]
        per_class = {c: sum(1 for r in val if r.label == c) for c in CLASSES}
        assert per_class == {"Normal": 197, "Controlled": 70, "Uncontrolled": 129}

    def test_class_deviation_at_most_one(self):
        m = paper_manifest()
        out = stratified_split(m, train_frac=0.85, seed=3)
        val = [r for r in out.records if r.split == "val"]
        for c, n_class in m.count_by("label").items():
            target = n_class * 0.15
            got = sum(1 for r in val if r.label == c)
            assert abs(got - target) <= 1.0

    def test_deterministic_and_seed_sensitive(self):
        m = paper_manifest()
        a = stratified_split(m, seed=1)
        b = stratified_split(m, seed=1)
        c = stratified_split(m, seed=2)
        assert a == b
        assert a != c

    def test_record_order_preserved(self):
        m = paper_manifest()
        out = stratified_split(m, seed=5)
        assert [r.path for r in out.records] == [r.path for r in m.records]

    def test_group_by_patient_keeps_patients_whole(self):
        m = paper_manifest()
        out = stratified_split(m, train_frac=0.85, seed=11, group_by_patient=True)
        by_patient = {}
        for r in out.records:
            by_patient.setdefault(r.patient_id, set()).add(r.split)
        assert all(len(s) == 1 for s in by_patient.values())
        frac_val = sum(1 for r in out.records if r.split == "val") / len(out)
        assert abs(frac_val - 0.15) < 0.02

    def test_fraction_bounds(self):
        m = DatasetManifest((rec("a.png"), rec("b.png")))
        with pytest.raises(ValidationError):
            stratified_split(m, train_frac=0.0)
        with pytest.raises(ValidationError):
            stratified_split(m, train_frac=1.5)

    def test_augmented_input_rejected(self):
        m = DatasetManifest((
            rec("a.png", split="train"),
            rec("a_v0.png", split="train", provenance="augmented", source="a.png"),
        ))
        with pytest.raises(ValidationError):
            stratified_split(m)
