"""Command-line entry point tying the pipeline together.

Commands: make-dataset, fit-pca, extract-layout, train, sample, evaluate,
ablate. A single structured YAML config file describes a run; content-hash
fingerprints recorded in the run manifest guard against mixing artifacts
from different configs, and an advisory lock file prevents two commands
from writing the same run directory concurrently.

Exit status: 0 on success, 2 on configuration/validation errors, 1 on
runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from . import evaluation, pipeline
from .diffusion import TrainConfig, load_checkpoint, save_checkpoint
from .errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    MissingArtifactError,
    NeulayError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .features import (
    CONVENTIONS,
    DenseFeatureMap,
    ToyBackbone,
    ToyBackboneParams,
    export_features,
    extract_dense_features,
    import_features,
)
from .layout import (
    build_neural_layout,
    compute_normalization_stats,
    layout_to_rgb,
    save_layout,
)
from .pca import load_projector, project, save_projector
from .pipeline import PipelineConfig, scene_seed
from .scenes import SceneConfig, SceneSample

OUTPUT_ROOT_ENV = "NEULAY_OUT"
_LOCK_NAME = ".lock"
_MANIFEST_NAME = "run_manifest.json"

_VALIDATION_ERRORS = (
    ConfigurationError,
    ParameterError,
    ValidationError,
    MissingArtifactError,
    FormatError,
    ConsistencyError,
    ShapeError,
)


# ---------------------------------------------------------------------------
# configuration


def _take(section: dict, source: str, allowed: dict) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {sorted(unknown)} in config section {source!r}; "
            f"allowed: {sorted(allowed)}"
        )
    out = {}
    for key, target in allowed.items():
        if key in section:
            out[target] = section[key]
    return out


def config_from_mapping(raw: dict) -> tuple[PipelineConfig, str | None]:
    """Build a PipelineConfig from the nested config-file structure."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    known = {"seed", "dataset", "backbone", "pca", "diffusion", "eval",
             "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(
            f"unknown config section(s) {sorted(unknown)}; allowed: "
            f"{sorted(known)}"
        )
    kwargs: dict = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])

    ds = raw.get("dataset", {}) or {}
    kwargs.update(_take(ds, "dataset", {"size": "n_scenes",
                                        "resolution": "resolution",
                                        "style_mix": "style_mix"}))
    scene_keys = {k: k for k in ("canvas_px", "min_objects", "max_objects",
                                 "min_size_px", "max_size_px")}
    scene_over = {
        k: v for k, v in ds.items()
        if k in scene_keys
    }
    leftovers = set(ds) - {"size", "resolution", "style_mix"} - set(scene_keys)
    if leftovers:
        raise ConfigurationError(
            f"unknown key(s) {sorted(leftovers)} in config section 'dataset'"
        )
    if scene_over:
        kwargs["scene"] = SceneConfig(**scene_over)

    bb = dict(raw.get("backbone", {}) or {})
    if "convention" in bb:
        kwargs["convention_id"] = bb.pop("convention")
    bb_kwargs = _take(bb, "backbone", {
        k: k for k in ("seed", "patch_size_px", "channels_per_layer", "has_cls")
    })
    if bb_kwargs:
        if "channels_per_layer" in bb_kwargs:
            bb_kwargs["channels_per_layer"] = tuple(
                bb_kwargs["channels_per_layer"]
            )
        kwargs["backbone"] = ToyBackboneParams(**bb_kwargs)

    pca = raw.get("pca", {}) or {}
    kwargs.update(_take(pca, "pca", {"sample_count": "pca_sample_count",
                                     "n_components": "n_components"}))

    diff = raw.get("diffusion", {}) or {}
    diff_kwargs = _take(diff, "diffusion", {
        k: k for k in ("steps", "beta_min", "beta_max", "lr", "batch_size",
                       "epochs_base", "epochs_adapter", "caption_dropout",
                       "codec_mode", "codec_k", "channels")
    })
    if diff_kwargs:
        if "channels" in diff_kwargs:
            diff_kwargs["channels"] = tuple(diff_kwargs["channels"])
        kwargs["train"] = TrainConfig(**diff_kwargs)

    ev = raw.get("eval", {}) or {}
    kwargs.update(_take(ev, "eval", {
        k: k for k in ("holdout_layouts", "samples_per_layout", "probe_seed",
                       "probe_epochs", "probe_scenes", "si_depth_mode")
    }))

    try:
        config = PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return config, raw.get("output_dir")


def load_config_file(path) -> tuple[PipelineConfig, str | None]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    return config_from_mapping(raw)


# ---------------------------------------------------------------------------
# run directory plumbing


@contextlib.contextmanager
def _run_lock(out: Path):
    """Advisory lock so two commands never write one run dir concurrently."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / _LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise NeulayError(
            f"run directory {out} is locked by another command "
            f"(delete {lock} if that command is no longer running)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_manifest(out: Path) -> dict | None:
    path = out / _MANIFEST_NAME
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


def _update_manifest(out: Path, fingerprint: str, force: bool,
                     artifacts: dict) -> None:
    existing = _load_manifest(out)
    if (
        existing is not None
        and existing.get("config_fingerprint") != fingerprint
        and not force
    ):
        raise ConfigurationError(
            f"run directory {out} holds artifacts for config fingerprint "
            f"{existing.get('config_fingerprint')}, not {fingerprint}; "
            "pass --force to overwrite"
        )
    manifest = existing if (
        existing is not None
        and existing.get("config_fingerprint") == fingerprint
    ) else {
        "config_fingerprint": fingerprint,
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {},
    }
    for name, path in artifacts.items():
        full = out / path
        if not full.exists():
            raise ConsistencyError(f"artifact {name} missing at {full}")
        manifest["artifacts"][name] = str(path)
    manifest["updated"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["tool_version"] = __version__
    with open(out / _MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(out: Path, relpath: str, producer: str) -> Path:
    path = out / relpath
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run `neulay {producer}` first"
        )
    return path


# ---------------------------------------------------------------------------
# dataset persistence


def _save_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array).save(path, format="PNG")


def cmd_make_dataset(config: PipelineConfig, out: Path, force: bool) -> None:
    samples = pipeline.make_scene_dataset(config)
    ds_dir = out / "dataset"
    ds_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"scene_{i:05d}"
        _save_png(s.image, ds_dir / f"{stem}.png")
        _save_png(s.semantic_map, ds_dir / f"{stem}_sem.png")
        depth = DenseFeatureMap(
            height_patches=s.depth_map.shape[0],
            width_patches=s.depth_map.shape[1],
            channels=1,
            stride_px=1,
            values=s.depth_map.astype(np.float32)[:, :, None],
            source_id="scene-depth",
        )
        export_features(depth, ds_dir / f"{stem}_depth.nlfm")
        entries.append({
            "id": stem,
            "seed": scene_seed(config, i),
            "caption": s.caption,
            "style_tag": s.style_tag,
            "image": f"{stem}.png",
            "semantic_map": f"{stem}_sem.png",
            "depth": f"{stem}_depth.nlfm",
        })
    with open(ds_dir / "manifest.json", "w") as fh:
        json.dump(
            {
                "config_fingerprint": config.fingerprint(),
                "resolution": config.resolution,
                "size": len(entries),
                "samples": entries,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _update_manifest(out, config.fingerprint(), force,
                     {"dataset": "dataset/manifest.json"})
    print(f"wrote {len(entries)} scenes to {ds_dir}")


def _load_dataset(out: Path) -> list[SceneSample]:
    manifest_path = _require(out, "dataset/manifest.json", "make-dataset")
    ds_dir = manifest_path.parent
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest["samples"]:
        image = np.asarray(Image.open(ds_dir / entry["image"]))
        sem = np.asarray(Image.open(ds_dir / entry["semantic_map"]))
        depth = import_features(ds_dir / entry["depth"]).values[:, :, 0]
        samples.append(SceneSample(
            image=image,
            semantic_map=sem,
            depth_map=depth,
            caption=entry["caption"],
            style_tag=entry["style_tag"],
        ))
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_fit_pca(config: PipelineConfig, out: Path, force: bool) -> None:
    samples = _load_dataset(out)
    train_samples, _ = pipeline.split_holdout(samples, config)
    feature_maps = pipeline.extract_corpus_features(train_samples, config)
    projector = pipeline.fit_projector(feature_maps, config)
    save_projector(projector, out / "projector.nlpc")
    # normalization stats belong to the layout-construction recipe and are
    # computed once, on the training corpus only
    stats = compute_normalization_stats(
        [project(m, projector) for m in feature_maps]
    )
    np.save(out / "normalization.npy", stats.astype(np.float32))
    _update_manifest(out, config.fingerprint(), force, {
        "projector": "projector.nlpc",
        "normalization": "normalization.npy",
    })
    print(
        f"fitted {projector.n_components}-component projector on "
        f"{projector.sample_count} vectors -> {out / 'projector.nlpc'}"
    )


def _load_projection(config: PipelineConfig, out: Path):
    projector = load_projector(_require(out, "projector.nlpc", "fit-pca"))
    stats = np.load(_require(out, "normalization.npy", "fit-pca"))
    return projector, stats


def _build_layouts(samples, config, projector, stats):
    backbone = ToyBackbone(config.backbone)
    target = (config.resolution, config.resolution)
    return [
        build_neural_layout(
            s.image, config.convention, backbone, projector, target, stats
        )
        for s in samples
    ]


def cmd_extract_layout(config: PipelineConfig, out: Path, force: bool,
                       index: int) -> None:
    samples = _load_dataset(out)
    if not 0 <= index < len(samples):
        raise ParameterError(
            f"scene index {index} out of range [0, {len(samples)})"
        )
    projector, stats = _load_projection(config, out)
    layout = _build_layouts([samples[index]], config, projector, stats)[0]
    lay_dir = out / "layouts"
    lay_dir.mkdir(exist_ok=True)
    save_layout(layout, lay_dir / f"layout_{index:05d}.nllo")
    _save_png(layout_to_rgb(layout), lay_dir / f"layout_{index:05d}.png")
    _update_manifest(out, config.fingerprint(), force, {
        f"layout_{index:05d}": f"layouts/layout_{index:05d}.nllo",
    })
    print(f"wrote layout for scene {index} to {lay_dir}")


def cmd_train(config: PipelineConfig, out: Path, force: bool) -> None:
    samples = _load_dataset(out)
    train_samples, _ = pipeline.split_holdout(samples, config)
    projector, stats = _load_projection(config, out)
    layouts = _build_layouts(train_samples, config, projector, stats)
    base, adapter, curve = pipeline.train_diffusion(
        train_samples, layouts, config, progress=True
    )
    save_checkpoint(out / "checkpoint", base, adapter, config.train, curve)
    _update_manifest(out, config.fingerprint(), force, {
        "checkpoint": "checkpoint/params.pt",
        "loss_curve": "checkpoint/loss_curve.csv",
    })
    print(f"trained base + adapter ({len(curve)} steps) -> {out / 'checkpoint'}")


def cmd_sample(config: PipelineConfig, out: Path, force: bool) -> None:
    samples = _load_dataset(out)
    _, holdout = pipeline.split_holdout(samples, config)
    projector, stats = _load_projection(config, out)
    _require(out, "checkpoint/params.pt", "train")
    base, adapter, _, _ = load_checkpoint(out / "checkpoint")
    if adapter is None:
        raise MissingArtifactError(
            "checkpoint has no adapter; run `neulay train` to completion"
        )
    holdout_layouts = _build_layouts(holdout, config, projector, stats)
    groups = pipeline.sample_for_layouts(
        base, adapter, holdout, holdout_layouts, config
    )
    uncond = pipeline.sample_unconditional(
        base, config.samples_per_layout, config
    )
    smp_dir = out / "samples"
    smp_dir.mkdir(exist_ok=True)
    manifest = {"config_fingerprint": config.fingerprint(), "groups": [],
                "unconditional": []}
    offset = len(samples) - len(holdout)
    for j, (group, ref) in enumerate(zip(groups, holdout)):
        files = []
        for k, img in enumerate(group):
            name = f"cond_{j:03d}_{k:02d}.png"
            _save_png(img, smp_dir / name)
            files.append(name)
        manifest["groups"].append({
            "layout_index": offset + j,
            "caption": ref.caption,
            "files": files,
        })
    for k, img in enumerate(uncond):
        name = f"uncond_{k:02d}.png"
        _save_png(img, smp_dir / name)
        manifest["unconditional"].append(name)
    with open(smp_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _update_manifest(out, config.fingerprint(), force,
                     {"samples": "samples/manifest.json"})
    n = sum(len(g["files"]) for g in manifest["groups"])
    print(f"wrote {n} conditioned + {len(uncond)} unconditional samples "
          f"to {smp_dir}")


def cmd_evaluate(config: PipelineConfig, out: Path, force: bool) -> None:
    manifest_path = _require(out, "samples/manifest.json", "sample")
    smp_dir = manifest_path.parent
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if not manifest.get("groups"):
        raise ParameterError(f"sample manifest {manifest_path} lists no samples")
    samples = _load_dataset(out)
    groups, refs = [], []
    for entry in manifest["groups"]:
        idx = entry["layout_index"]
        if not 0 <= idx < len(samples):
            raise ConsistencyError(
                f"sample manifest references scene {idx} outside the dataset"
            )
        refs.append(samples[idx])
        groups.append([
            np.asarray(Image.open(smp_dir / name)) for name in entry["files"]
        ])
    uncond = [
        np.asarray(Image.open(smp_dir / name))
        for name in manifest.get("unconditional", [])
    ]

    seg_probe, depth_probe = pipeline.train_probes(config)
    backbone = ToyBackbone(config.backbone)
    train_samples, _ = pipeline.split_holdout(samples, config)
    real_images = [s.image for s in train_samples]
    fingerprint = config.fingerprint()
    conditioned = evaluation.evaluate_samples(
        groups, refs, seg_probe, depth_probe, backbone,
        real_images=real_images, si_depth_mode=config.si_depth_mode,
        config_fingerprint=fingerprint,
    )
    report = {"conditioned": conditioned.to_dict(),
              "probe_holdout_miou": seg_probe.holdout_miou,
              "probe_holdout_si_depth": depth_probe.holdout_si_depth}
    if seg_probe.holdout_miou < 0.90:
        report["probe_quality_warning"] = (
            f"segmenter probe held-out mIoU {seg_probe.holdout_miou:.3f} "
            "is below the 0.90 reliability gate; scores may be unreliable"
        )
    rows = [["condition"] + list(evaluation.EvalReport.CSV_FIELDS),
            ["conditioned"] + conditioned.csv_row()]
    if uncond:
        unconditional = evaluation.evaluate_samples(
            [uncond] * len(refs), refs, seg_probe, depth_probe, backbone,
            real_images=real_images, si_depth_mode=config.si_depth_mode,
            config_fingerprint=fingerprint,
        )
        report["unconditional"] = unconditional.to_dict()
        report["miou_gap"] = conditioned.miou - unconditional.miou
        rows.append(["unconditional"] + unconditional.csv_row())
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    _update_manifest(out, fingerprint, force, {
        "report_json": "report.json",
        "report_csv": "report.csv",
    })
    line = f"conditioned mIoU {conditioned.miou:.3f}"
    if "miou_gap" in report:
        line += f", gap over unconditional {report['miou_gap']:+.3f}"
    print(line)


def cmd_ablate(config: PipelineConfig, out: Path, force: bool,
               component_counts: list[int]) -> None:
    samples = pipeline.make_scene_dataset(config)
    trend = evaluation.ablate_components(component_counts, samples, config)
    trend.write_csv(out / "ablation.csv")
    with open(out / "ablation_summary.json", "w") as fh:
        json.dump(
            {
                "config_fingerprint": config.fingerprint(),
                "component_counts": trend.component_counts,
                "spearman": trend.spearman,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _update_manifest(out, config.fingerprint(), force, {
        "ablation_csv": "ablation.csv",
        "ablation_summary": "ablation_summary.json",
    })
    for metric, rho in trend.spearman.items():
        print(f"spearman({metric}, N) = {rho:+.3f}")


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neulay",
        description="Neural-layout conditional image synthesis toolkit.",
    )
    parser.add_argument("--config", metavar="PATH",
                        help="YAML run configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", metavar="DIR",
                        help=f"run directory (default: config output_dir, "
                             f"then ${OUTPUT_ROOT_ENV}, then ./runs/default)")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate the config and print the plan only")
    parser.add_argument("--force", action="store_true",
                        help="allow overwriting artifacts from a different "
                             "config fingerprint")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-dataset", help="render the scene corpus")
    sub.add_parser("fit-pca", help="fit the feature projector")
    p_lay = sub.add_parser("extract-layout",
                           help="build the layout for one dataset scene")
    p_lay.add_argument("--index", type=int, required=True,
                       help="dataset scene index")
    sub.add_parser("train", help="train the denoiser and adapter")
    sub.add_parser("sample", help="draw conditioned and unconditional samples")
    sub.add_parser("evaluate", help="score samples against references")
    p_abl = sub.add_parser("ablate", help="component-count trend experiment")
    p_abl.add_argument("--components", default="1,4,16",
                       help="comma-separated ascending component counts")
    return parser


def _resolve_config(args) -> tuple[PipelineConfig, Path]:
    if args.config:
        config, cfg_out = load_config_file(args.config)
    else:
        config, cfg_out = PipelineConfig(), None
    if args.seed is not None:
        config = PipelineConfig(**{**asdict_config(config), "seed": args.seed})
    out = args.out or cfg_out or os.environ.get(OUTPUT_ROOT_ENV)
    if out is None:
        out = "runs/default"
    return config, Path(out)


def asdict_config(config: PipelineConfig) -> dict:
    d = asdict(config)
    d["scene"] = SceneConfig(**d["scene"])
    d["backbone"] = ToyBackboneParams(**{
        **d["backbone"],
        "channels_per_layer": tuple(d["backbone"]["channels_per_layer"]),
    })
    d["train"] = TrainConfig(**{
        **d["train"], "channels": tuple(d["train"]["channels"]),
    })
    return d


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, out = _resolve_config(args)
        if args.dry_run:
            print(f"command: {args.command}")
            print(f"run directory: {out}")
            print(f"config fingerprint: {config.fingerprint()}")
            print("dry run: no artifacts written")
            return 0
        with _run_lock(out):
            if args.command == "make-dataset":
                cmd_make_dataset(config, out, args.force)
            elif args.command == "fit-pca":
                cmd_fit_pca(config, out, args.force)
            elif args.command == "extract-layout":
                cmd_extract_layout(config, out, args.force, args.index)
            elif args.command == "train":
                cmd_train(config, out, args.force)
            elif args.command == "sample":
                cmd_sample(config, out, args.force)
            elif args.command == "evaluate":
                cmd_evaluate(config, out, args.force)
            elif args.command == "ablate":
                counts = [int(c) for c in args.components.split(",") if c]
                cmd_ablate(config, out, args.force, counts)
        return 0
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NeulayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
