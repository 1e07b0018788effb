"""Command-line entry point.

One binary, subcommands for every pipeline stage. Exit codes: 0 on
success, 1 on validation/usage errors, 2 on I/O errors. Every
subcommand is deterministic for a fixed seed and input set, regardless
of worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_THREADS, resolve_config
from .errors import ValidationError
from .evalstat import (
    anova_oneway,
    classification_metrics,
    cohens_kappa,
    confusion_matrix,
    dunn_posthoc,
    kruskal_wallis,
    roc_pr_curves,
)
from .imgcore import load_image, read_tensor, save_image, write_tensor
from .lossmath import EmbeddingBatch, nt_xent
from .pipeline import (
    CLASSES,
    DatasetManifest,
    augment_dataset,
    preprocess,
    read_manifest,
    stratified_split,
    thread_map,
    write_manifest,
)
from .quality import kmeans_fit, read_features, relabel, score_image, write_features
from .report import write_report
from .synth import generate_cohort
from .xai import attention_cohort_report, grad_cam, overlay, regional_attention


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the exit-code contract
    # reserves 2 for I/O, so usage problems are rerouted through main()
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(payload, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _images_root(args) -> Path:
    if args.images_root is not None:
        return Path(args.images_root)
    return Path(args.manifest).parent


def _config_kwargs(args, fields) -> dict:
    return {f: getattr(args, f, None) for f in fields}


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_qc_score(args) -> int:
    cfg = resolve_config(
        _config_kwargs(
            args,
            (
                "seed",
                "threads",
                "specular_threshold",
                "specular_dilate",
                "clahe_clip",
                "clahe_tiles",
                "canny_sigma",
                "canny_low",
                "canny_high",
                "hue_low",
                "hue_high",
                "sat_min",
                "val_min",
            ),
        ),
        args.config,
    )
    manifest = read_manifest(args.manifest)
    root = _images_root(args)

    def score_one(rec):
        img = load_image(root / rec.path)
        return score_image(
            img,
            path=rec.path,
            specular_threshold=cfg.specular_threshold,
            specular_dilate=cfg.specular_dilate,
            clahe_clip=cfg.clahe_clip,
            clahe_tiles=cfg.clahe_tiles,
            canny_sigma=cfg.canny_sigma,
            canny_low=cfg.canny_low,
            canny_high=cfg.canny_high,
            hue_low=cfg.hue_low,
            hue_high=cfg.hue_high,
            sat_min=cfg.sat_min,
            val_min=cfg.val_min,
        )

    features = thread_map(score_one, manifest.records, cfg.threads)
    write_features(features, args.out)
    print(f"scored {len(features)} images -> {args.out}")
    return 0


def cmd_qc_relabel(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("seed",)), args.config)
    manifest = read_manifest(args.manifest)
    features = read_features(args.features)
    mat = np.stack([f.vector() for f in features])
    model = kmeans_fit(mat, k=3, seed=cfg.seed)
    corrected, rep = relabel(manifest, model, features)
    write_manifest(corrected, args.out_manifest)
    _write_json(rep.to_dict(), args.out_report)
    print(
        f"relabeled {rep.n_changed}/{rep.n_total} images "
        f"({rep.changed_fraction:.1%}) -> {args.out_manifest}"
    )
    return 0


def cmd_prep_run(args) -> int:
    cfg = resolve_config(
        _config_kwargs(
            args,
            ("threads", "specular_threshold", "specular_dilate", "telea_radius", "clahe_clip", "clahe_tiles"),
        ),
        args.config,
    )
    manifest = read_manifest(args.manifest)
    root = _images_root(args)
    out_dir = Path(args.out_dir)
    mask_dir = Path(args.mask_dir) if args.mask_dir else None

    def run_one(rec):
        img = load_image(root / rec.path)
        res = preprocess(
            img,
            threshold=cfg.specular_threshold,
            dilate_kernel=cfg.specular_dilate,
            telea_radius=cfg.telea_radius,
            clahe_clip=cfg.clahe_clip,
            clahe_tiles=cfg.clahe_tiles,
        )
        save_image(res.image, out_dir / rec.path)
        if mask_dir is not None:
            from .imgcore import ImageGray8

            mask_u8 = ImageGray8((res.mask.data * np.uint8(255)))
            save_image(mask_u8, mask_dir / rec.path)

    thread_map(run_one, manifest.records, cfg.threads)
    if args.out_manifest:
        write_manifest(manifest, args.out_manifest)
    print(f"preprocessed {len(manifest)} images -> {out_dir}")
    return 0


def cmd_augment(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("seed", "threads", "variants")), args.config)
    manifest = read_manifest(args.manifest)
    root = _images_root(args)
    out = augment_dataset(
        manifest,
        variants_per_image=cfg.variants,
        master_seed=cfg.seed,
        out_dir=args.out_dir,
        images_root=root,
        workers=cfg.threads,
    )
    write_manifest(out, args.out_manifest)
    n_new = len(out) - len(manifest)
    print(f"rendered {n_new} variants; manifest {len(manifest)} -> {len(out)} records")
    return 0


def cmd_split(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("seed", "train_frac")), args.config)
    manifest = read_manifest(args.manifest)
    out = stratified_split(
        manifest,
        train_frac=cfg.train_frac,
        seed=cfg.seed,
        group_by_patient=args.group_by_patient,
    )
    write_manifest(out, args.out_manifest)
    counts = out.count_by("split")
    print(f"split: {counts.get('train', 0)} train / {counts.get('val', 0)} val")
    return 0


def cmd_loss_ntxent(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("tau",)), args.config)
    t = read_tensor(args.embeddings)
    if len(t.shape) != 2:
        raise ValidationError(f"embeddings tensor must be rank 2, got shape {t.shape}")
    batch = EmbeddingBatch(t.data.astype(np.float64))
    loss, grad = nt_xent(batch, tau=cfg.tau)
    grad_path = args.grad_out or str(Path(args.embeddings).with_suffix(".grad.atns"))
    from .imgcore import Tensor32

    write_tensor(Tensor32(grad.astype(np.float32)), grad_path)
    print(f"ntxent_loss={loss!r}")
    print(f"gradient -> {grad_path}")
    return 0


def _read_predictions(path) -> tuple:
    """preds.csv: path,pred[,p_Normal,p_Controlled,p_Uncontrolled]."""
    plain = ["path", "pred"]
    with_probs = plain + [f"p_{c}" for c in CLASSES]
    rows = {}
    has_probs = False
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header == with_probs:
            has_probs = True
        elif header != plain:
            raise ValidationError(
                f"{path}: bad header {header}; expected {','.join(plain)} "
                f"or {','.join(with_probs)}"
            )
        for row in reader:
            want = len(with_probs) if has_probs else len(plain)
            if len(row) != want:
                raise ValidationError(f"{path}: expected {want} fields, got {row}")
            img_path, pred = row[0], row[1]
            if pred not in CLASSES:
                raise ValidationError(f"{path}: unknown predicted class {pred!r}")
            if img_path in rows:
                raise ValidationError(f"{path}: duplicate path {img_path!r}")
            probs = [float(x) for x in row[2:]] if has_probs else None
            rows[img_path] = (pred, probs)
    if not rows:
        raise ValidationError(f"{path}: no prediction rows")
    return rows, has_probs


def _write_curve_csv(path, rows, x_name, y_name) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", x_name, y_name])
        for name, xs, ys in rows:
            for x, y in zip(xs, ys):
                writer.writerow([name, repr(float(x)), repr(float(y))])


def cmd_eval(args) -> int:
    preds, has_probs = _read_predictions(args.pred)
    manifest = read_manifest(args.truth)
    missing = [r.path for r in manifest.records if r.path not in preds]
    if missing:
        raise ValidationError(f"{args.pred}: no prediction for {missing[0]!r} (+{len(missing) - 1} more)")
    extra = set(preds) - {r.path for r in manifest.records}
    if extra:
        raise ValidationError(f"{args.pred}: prediction for unknown path {sorted(extra)[0]!r}")

    idx = {c: i for i, c in enumerate(CLASSES)}
    y_true = np.array([idx[r.label] for r in manifest.records])
    y_pred = np.array([idx[preds[r.path][0]] for r in manifest.records])
    cm = confusion_matrix(y_true, y_pred, len(CLASSES))
    report = classification_metrics(cm, class_names=CLASSES).to_dict()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if has_probs:
        probs = np.array([preds[r.path][1] for r in manifest.records])
        curves = roc_pr_curves(probs, y_true, class_names=CLASSES)
        cdict = curves.to_dict()
        report["curves"] = {
            "macro_auc": cdict["macro_auc"],
            "macro_ap": cdict["macro_ap"],
            "per_class": {
                name: {"auc": c["auc"], "ap": c["ap"]} for name, c in cdict["per_class"].items()
            },
            "skipped": cdict["skipped"],
        }
        _write_curve_csv(
            out_dir / "roc_curves.csv",
            [(n, c["fpr"], c["tpr"]) for n, c in sorted(cdict["per_class"].items())],
            "fpr",
            "tpr",
        )
        _write_curve_csv(
            out_dir / "pr_curves.csv",
            [(n, c["recall"], c["precision"]) for n, c in sorted(cdict["per_class"].items())],
            "recall",
            "precision",
        )
    _write_json(report, out_dir / "metrics_report.json")
    print(f"accuracy {report['accuracy']:.4f}, macro F1 {report['macro_f1']:.4f} -> {out_dir}")
    return 0


def _read_groups(path) -> dict:
    """groups.csv: group,value; group order follows first appearance."""
    groups: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["group", "value"]:
            raise ValidationError(f"{path}: bad header {header}; expected group,value")
        for row in reader:
            if len(row) != 2:
                raise ValidationError(f"{path}: expected 2 fields, got {row}")
            groups.setdefault(row[0], []).append(float(row[1]))
    if not groups:
        raise ValidationError(f"{path}: no data rows")
    return groups


def _read_ratings(path) -> tuple:
    """ratings csv for kappa: rater_a,rater_b."""
    a, b = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["rater_a", "rater_b"]:
            raise ValidationError(f"{path}: bad header {header}; expected rater_a,rater_b")
        for row in reader:
            if len(row) != 2:
                raise ValidationError(f"{path}: expected 2 fields, got {row}")
            a.append(row[0])
            b.append(row[1])
    if not a:
        raise ValidationError(f"{path}: no data rows")
    return a, b


def cmd_stats(args) -> int:
    if args.stat == "kappa":
        ra, rb = _read_ratings(args.groups)
        result = cohens_kappa(ra, rb).to_dict()
        summary = f"kappa = {result['statistic']:.4f}, p = {result['p_value']:.4g}"
    else:
        groups = _read_groups(args.groups)
        values = list(groups.values())
        names = list(groups.keys())
        if args.stat == "anova":
            result = anova_oneway(values).to_dict()
            summary = f"F = {result['statistic']:.4f}, p = {result['p_value']:.4g}"
        elif args.stat == "kw":
            result = kruskal_wallis(values).to_dict()
            summary = f"H = {result['statistic']:.4f}, p = {result['p_value']:.4g}"
        else:  # dunn
            result = [r.to_dict() for r in dunn_posthoc(values, group_names=names)]
            worst = min(result, key=lambda r: r["p_value"])
            summary = (
                f"{len(result)} pairwise tests; smallest adjusted p = "
                f"{worst['p_value']:.4g} ({worst['details']['pair']})"
            )
    if args.out:
        _write_json(result, args.out)
    print(summary)
    return 0


def cmd_xai_gradcam(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("overlay_alpha",)), args.config)
    feats = read_tensor(args.features)
    grads = read_tensor(args.grads)
    img = load_image(args.image)
    cam = grad_cam(feats, grads, img.height, img.width)
    save_image(overlay(img, cam, alpha=cfg.overlay_alpha), args.out)
    write_tensor(cam, args.map)
    att = regional_attention(cam)
    print(
        "regional attention: "
        + ", ".join(f"{region}={att[region]:.4f}" for region in sorted(att))
    )
    return 0


def cmd_xai_regions(args) -> int:
    manifest = read_manifest(args.manifest)
    maps_dir = Path(args.maps)
    labels = []
    attentions = []
    masks_cache: dict = {}
    for rec in manifest.records:
        map_path = maps_dir / (Path(rec.path).stem + ".atns")
        if not map_path.is_file():
            raise FileNotFoundError(f"attention map not found: {map_path}")
        t = read_tensor(map_path)
        if len(t.shape) != 2:
            raise ValidationError(f"{map_path}: attention map must be rank 2, got {t.shape}")
        if t.shape not in masks_cache:
            from .xai import region_masks

            masks_cache[t.shape] = region_masks(t.shape[0], t.shape[1])
        labels.append(rec.label)
        attentions.append(regional_attention(t, masks_cache[t.shape]))
    report = attention_cohort_report(labels, attentions)
    _write_json(report, args.out)
    print(f"regional attention over {report['n_images']} images -> {args.out}")
    return 0


def cmd_synth_cohort(args) -> int:
    cfg = resolve_config(_config_kwargs(args, ("seed",)), args.config)
    manifest, _ = generate_cohort(
        args.out_dir,
        n=args.n,
        seed=cfg.seed,
        label_noise=args.label_noise,
        size=args.size,
    )
    counts = manifest.count_by("label")
    print(
        f"generated {len(manifest)} images -> {args.out_dir} "
        f"({', '.join(f'{c}={counts.get(c, 0)}' for c in CLASSES)})"
    )
    return 0


def cmd_report(args) -> int:
    fields = (
        "seed",
        "threads",
        "specular_threshold",
        "specular_dilate",
        "telea_radius",
        "clahe_clip",
        "clahe_tiles",
        "canny_sigma",
        "canny_low",
        "canny_high",
        "hue_low",
        "hue_high",
        "sat_min",
        "val_min",
        "train_frac",
        "variants",
        "tau",
        "overlay_alpha",
    )
    cfg = resolve_config(_config_kwargs(args, fields), args.config)
    report = write_report(
        args.artifacts,
        args.out_dir,
        timestamp=args.timestamp,
        config=asdict(cfg),
        tool_version=__version__,
    )
    print(
        f"report with {len(report['artifacts_found'])} artifacts, "
        f"{len(report['figures'])} figures -> {args.out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser assembly


def _add_config_flag(p) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON config file (flags override it)")


def _add_threads_flag(p) -> None:
    p.add_argument(
        "--threads",
        type=int,
        metavar="N",
        help=f"worker threads (capped by {ENV_THREADS}; default 1)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anteriseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"anteriseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    # qc
    qc = sub.add_parser("qc", help="quality scoring and relabeling")
    qc_sub = qc.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    qs = qc_sub.add_parser("score", help="extract biomarkers and the combined score per image")
    qs.add_argument("--manifest", required=True)
    qs.add_argument("--out", required=True, help="output features CSV")
    qs.add_argument("--images-root", help="image path root (default: manifest directory)")
    qs.add_argument("--seed", type=int)
    qs.add_argument("--threshold", dest="specular_threshold", type=int)
    qs.add_argument("--clip", dest="clahe_clip", type=float)
    qs.add_argument("--tiles", dest="clahe_tiles", type=int)
    _add_threads_flag(qs)
    _add_config_flag(qs)
    qs.set_defaults(func=cmd_qc_score)

    qr = qc_sub.add_parser("relabel", help="k-means relabel from a features CSV")
    qr.add_argument("--manifest", required=True)
    qr.add_argument("--features", required=True)
    qr.add_argument("--out-manifest", required=True)
    qr.add_argument("--out-report", required=True)
    qr.add_argument("--seed", type=int)
    _add_config_flag(qr)
    qr.set_defaults(func=cmd_qc_relabel)

    # prep
    prep = sub.add_parser("prep", help="image preprocessing")
    prep_sub = prep.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    pr = prep_sub.add_parser("run", help="specular removal + L-channel contrast enhancement")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--out-dir", required=True)
    pr.add_argument("--out-manifest")
    pr.add_argument("--images-root")
    pr.add_argument("--mask-dir", help="also write specular masks here")
    pr.add_argument("--threshold", dest="specular_threshold", type=int)
    pr.add_argument("--clip", dest="clahe_clip", type=float)
    pr.add_argument("--tiles", dest="clahe_tiles", type=int)
    pr.add_argument("--radius", dest="telea_radius", type=int)
    _add_threads_flag(pr)
    _add_config_flag(pr)
    pr.set_defaults(func=cmd_prep_run)

    # augment
    au = sub.add_parser("augment", help="render offline augmentation variants")
    au.add_argument("--manifest", required=True)
    au.add_argument("--out-dir", required=True)
    au.add_argument("--out-manifest", required=True)
    au.add_argument("--images-root")
    au.add_argument("--variants", type=int)
    au.add_argument("--seed", type=int)
    _add_threads_flag(au)
    _add_config_flag(au)
    au.set_defaults(func=cmd_augment)

    # split
    sp = sub.add_parser("split", help="stratified train/val split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-manifest", required=True)
    sp.add_argument("--train-frac", dest="train_frac", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--group-by-patient", action="store_true")
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_split)

    # loss
    lo = sub.add_parser("loss", help="loss computations")
    lo_sub = lo.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    nt = lo_sub.add_parser("ntxent", help="contrastive loss and gradient for an embedding tensor")
    nt.add_argument("--embeddings", required=True, help="tensor file of shape [2N, d]")
    nt.add_argument("--tau", type=float)
    nt.add_argument("--grad-out", help="gradient tensor path (default: <embeddings>.grad.atns)")
    _add_config_flag(nt)
    nt.set_defaults(func=cmd_loss_ntxent)

    # eval
    ev = sub.add_parser("eval", help="classification metrics against a manifest")
    ev.add_argument("--pred", required=True, help="CSV: path,pred[,p_Normal,p_Controlled,p_Uncontrolled]")
    ev.add_argument("--truth", required=True, help="manifest CSV with true labels")
    ev.add_argument("--out-dir", required=True)
    _add_config_flag(ev)
    ev.set_defaults(func=cmd_eval)

    # stats
    st = sub.add_parser("stats", help="statistical tests")
    st_sub = st.add_subparsers(dest="stat", required=True, metavar="TEST")
    for name, desc in (
        ("anova", "one-way ANOVA"),
        ("kw", "Kruskal-Wallis H test"),
        ("dunn", "Dunn's post hoc with Bonferroni correction"),
        ("kappa", "Cohen's kappa between two raters"),
    ):
        s = st_sub.add_parser(name, help=desc)
        s.add_argument(
            "--groups",
            required=True,
            help="CSV group,value (kappa: rater_a,rater_b)",
        )
        s.add_argument("--out", help="write the result JSON here")
        _add_config_flag(s)
        s.set_defaults(func=cmd_stats, stat=name)

    # xai
    xa = sub.add_parser("xai", help="attention auditing")
    xa_sub = xa.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    xg = xa_sub.add_parser("gradcam", help="attention map + overlay from feature/gradient tensors")
    xg.add_argument("--features", required=True, help="tensor (K, h, w)")
    xg.add_argument("--grads", required=True, help="tensor (K, h, w)")
    xg.add_argument("--image", required=True)
    xg.add_argument("--out", required=True, help="overlay PNG")
    xg.add_argument("--map", required=True, help="attention map tensor output")
    xg.add_argument("--alpha", dest="overlay_alpha", type=float)
    _add_config_flag(xg)
    xg.set_defaults(func=cmd_xai_gradcam)

    xr = xa_sub.add_parser("regions", help="regional attention statistics over a cohort")
    xr.add_argument("--maps", required=True, help="directory of <image-stem>.atns maps")
    xr.add_argument("--manifest", required=True)
    xr.add_argument("--out", required=True)
    _add_config_flag(xr)
    xr.set_defaults(func=cmd_xai_regions)

    # synth
    sy = sub.add_parser("synth", help="synthetic data generation")
    sy_sub = sy.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    sc = sy_sub.add_parser("cohort", help="synthetic labeled cohort with noisy labels")
    sc.add_argument("--out-dir", required=True)
    sc.add_argument("--n", type=int, default=1000)
    sc.add_argument("--seed", type=int)
    sc.add_argument("--label-noise", type=float, default=0.65)
    sc.add_argument("--size", type=int, default=64)
    _add_config_flag(sc)
    sc.set_defaults(func=cmd_synth_cohort)

    # report
    rp = sub.add_parser("report", help="merge run artifacts into report.json/report.md + figures")
    rp.add_argument("--artifacts", required=True, help="directory holding subcommand outputs")
    rp.add_argument("--out-dir", required=True)
    rp.add_argument("--timestamp", help="fixed generated_at value (for reproducible output)")
    rp.add_argument("--seed", type=int)
    _add_threads_flag(rp)
    _add_config_flag(rp)
    rp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
