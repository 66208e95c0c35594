"""End-to-end experiment workflow shared by the CLI, the ablation, and the
acceptance suite: scene corpus -> features -> projector -> layouts ->
diffusion training -> sampling -> evaluation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import evaluation
from .diffusion import TrainConfig, make_schedule, sample, train
from .features import (
    CONVENTIONS,
    BackboneConvention,
    ToyBackbone,
    ToyBackboneParams,
    extract_dense_features,
)
from .layout import build_neural_layout, compute_normalization_stats
from .pca import DEFAULT_SAMPLE_COUNT, fit_pca, project, sample_feature_vectors
from .scenes import STYLE_TAGS, SceneConfig, generate_scene, render_scene
from .errors import ConfigurationError


@dataclass
class PipelineConfig:
    seed: int = 0
    n_scenes: int = 256
    resolution: int = 32
    scene: SceneConfig = field(default_factory=SceneConfig)
    style_mix: dict = field(default_factory=lambda: {"plain": 1.0})
    convention_id: str = "dino"
    backbone: ToyBackboneParams = field(default_factory=ToyBackboneParams)
    pca_sample_count: int = DEFAULT_SAMPLE_COUNT
    n_components: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    holdout_layouts: int = 16
    samples_per_layout: int = 8
    probe_seed: int = 0
    probe_epochs: int = 120
    probe_depth_epochs: int = 60
    probe_scenes: int = 640
    si_depth_mode: str = "probe-vs-ground-truth"

    def __post_init__(self):
        for tag in self.style_mix:
            if tag not in STYLE_TAGS:
                raise ConfigurationError(f"unknown style tag {tag!r}")
        if self.convention_id not in CONVENTIONS:
            raise ConfigurationError(
                f"unknown convention {self.convention_id!r}; "
                f"known: {sorted(CONVENTIONS)}"
            )
        # keep the derived training settings in lockstep with the pipeline
        self.train.seed = self.seed
        self.train.image_px = self.resolution
        self.train.layout_channels = self.n_components

    @property
    def convention(self) -> BackboneConvention:
        return CONVENTIONS[self.convention_id]

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def scene_seed(config: PipelineConfig, index: int) -> int:
    return config.seed * 1_000_003 + index


def make_scene_dataset(config: PipelineConfig):
    """Deterministic corpus of rendered scenes with per-sample style tags."""
    rng = np.random.default_rng(config.seed)
    tags = list(config.style_mix)
    probs = np.array([config.style_mix[t] for t in tags], dtype=np.float64)
    probs = probs / probs.sum()
    samples = []
    for i in range(config.n_scenes):
        tag = tags[rng.choice(len(tags), p=probs)]
        spec = generate_scene(scene_seed(config, i), config.scene)
        samples.append(render_scene(spec, config.resolution, tag))
    return samples


def extract_corpus_features(samples, config: PipelineConfig):
    backbone = ToyBackbone(config.backbone)
    return [
        extract_dense_features(s.image, config.convention, backbone)
        for s in samples
    ]


def fit_projector(feature_maps, config: PipelineConfig, n_components=None):
    vectors = sample_feature_vectors(
        feature_maps, config.pca_sample_count, seed=config.seed
    )
    return fit_pca(
        vectors,
        n_components or config.n_components,
        seed=config.seed,
        source_id=feature_maps[0].source_id,
    )


def build_corpus_layouts(samples, feature_maps, projector, config: PipelineConfig):
    """Layouts for every sample; normalization stats from the whole corpus."""
    coeff_maps = [project(m, projector) for m in feature_maps]
    stats = compute_normalization_stats(coeff_maps)
    backbone = ToyBackbone(config.backbone)
    target = (config.resolution, config.resolution)
    layouts = [
        build_neural_layout(
            s.image, config.convention, backbone, projector, target, stats
        )
        for s in samples
    ]
    return layouts, stats


def split_holdout(items, config: PipelineConfig):
    n_hold = config.holdout_layouts
    return items[:-n_hold], items[-n_hold:]


@dataclass
class ConditioningResult:
    conditioned: evaluation.EvalReport
    unconditional: evaluation.EvalReport

    @property
    def miou_gap(self) -> float:
        return self.conditioned.miou - self.unconditional.miou


def train_diffusion(samples, layouts, config: PipelineConfig, base=None,
                    progress=False):
    cfg = config.train
    dataset = [
        (s.image, s.caption, lay) for s, lay in zip(samples, layouts)
    ]
    return train(dataset, cfg, base=base, train_base=base is None,
                 progress=progress)


def sample_for_layouts(base, adapter, refs, layouts, config: PipelineConfig):
    """samples_per_layout conditioned draws per held-out layout."""
    schedule = make_schedule(
        config.train.steps, config.train.beta_min, config.train.beta_max
    )
    groups = []
    for j, (ref, lay) in enumerate(zip(refs, layouts)):
        groups.append(
            sample(
                base, adapter, ref.caption, lay, schedule,
                seed=config.seed * 7919 + j,
                num_images=config.samples_per_layout,
            )
        )
    return groups


def sample_unconditional(base, n_images, config: PipelineConfig):
    schedule = make_schedule(
        config.train.steps, config.train.beta_min, config.train.beta_max
    )
    return sample(
        base, None, "", None, schedule,
        seed=config.seed * 7919 + 10_000,
        num_images=n_images,
    )


def make_probe_dataset(config: PipelineConfig):
    """Separate scene corpus for the probes, disjoint from the main corpus.

    Probes only need labeled synthetic scenes, which are free to generate,
    so they train on a larger set than the diffusion model sees.
    """
    rng = np.random.default_rng(config.probe_seed + 1)
    tags = list(config.style_mix)
    probs = np.array([config.style_mix[t] for t in tags], dtype=np.float64)
    probs = probs / probs.sum()
    samples = []
    for i in range(config.probe_scenes):
        tag = tags[rng.choice(len(tags), p=probs)]
        # index offset keeps probe scene seeds clear of the main corpus
        spec = generate_scene(scene_seed(config, 500_000 + i), config.scene)
        samples.append(render_scene(spec, config.resolution, tag))
    return samples


def train_probes(config: PipelineConfig):
    samples = make_probe_dataset(config)
    seg = evaluation.train_probe_segmenter(
        samples, seed=config.probe_seed, epochs=config.probe_epochs
    )
    depth = evaluation.train_probe_depth(
        samples, seed=config.probe_seed, epochs=config.probe_depth_epochs
    )
    return seg, depth


def run_conditioning_experiment(
    config: PipelineConfig, progress: bool = False
) -> ConditioningResult:
    """The layout-conditioning efficacy experiment.

    Trains the full stack, then compares probe-segmenter agreement of
    conditioned samples against text-and-layout-free samples from the same
    base model, scored against the same held-out references.
    """
    samples = make_scene_dataset(config)
    train_samples, holdout = split_holdout(samples, config)
    feature_maps = extract_corpus_features(train_samples, config)
    projector = fit_projector(feature_maps, config)
    layouts, stats = build_corpus_layouts(
        train_samples, feature_maps, projector, config
    )
    base, adapter, _ = train_diffusion(
        train_samples, layouts, config, progress=progress
    )
    seg_probe, depth_probe = train_probes(config)

    backbone = ToyBackbone(config.backbone)
    target = (config.resolution, config.resolution)
    # held-out layouts reuse the training-corpus normalization stats
    holdout_layouts = [
        build_neural_layout(
            s.image, config.convention, backbone, projector, target, stats
        )
        for s in holdout
    ]
    cond_groups = sample_for_layouts(
        base, adapter, holdout, holdout_layouts, config
    )
    uncond_pool = sample_unconditional(
        base, config.samples_per_layout, config
    )
    real_images = [s.image for s in train_samples]
    fingerprint = config.fingerprint()
    conditioned = evaluation.evaluate_samples(
        cond_groups, holdout, seg_probe, depth_probe, backbone,
        real_images=real_images, si_depth_mode=config.si_depth_mode,
        config_fingerprint=fingerprint,
    )
    unconditional = evaluation.evaluate_samples(
        [uncond_pool] * len(holdout), holdout, seg_probe, depth_probe,
        backbone, real_images=real_images,
        si_depth_mode=config.si_depth_mode, config_fingerprint=fingerprint,
    )
    return ConditioningResult(conditioned=conditioned, unconditional=unconditional)


def run_ablation(
    component_counts: Sequence[int], samples, config: PipelineConfig,
    probes=None,
) -> evaluation.TrendReport:
    """Per-N pipeline runs sharing the scene corpus, base model, and probes.

    `probes` optionally passes pre-trained (segmenter, depth) probes so a
    multi-seed sweep does not retrain them.
    """
    train_samples, holdout = split_holdout(samples, config)
    feature_maps = extract_corpus_features(train_samples, config)
    seg_probe, depth_probe = probes if probes is not None else train_probes(config)
    backbone = ToyBackbone(config.backbone)
    real_images = [s.image for s in train_samples]

    base = None
    reports = []
    for n in component_counts:
        projector = fit_projector(feature_maps, config, n_components=n)
        layouts, stats = build_corpus_layouts(
            train_samples, feature_maps, projector, config
        )
        cfg_n = _with_layout_channels(config, n)
        base_n, adapter, _ = train_diffusion(
            train_samples, layouts, cfg_n, base=base
        )
        if base is None:
            base = base_n  # the layout-free base is shared across N
        target = (config.resolution, config.resolution)
        holdout_layouts = [
            build_neural_layout(
                s.image, config.convention, backbone, projector, target, stats
            )
            for s in holdout
        ]
        cond_groups = sample_for_layouts(
            base, adapter, holdout, holdout_layouts, cfg_n
        )
        reports.append(
            evaluation.evaluate_samples(
                cond_groups, holdout, seg_probe, depth_probe, backbone,
                real_images=real_images, si_depth_mode=config.si_depth_mode,
                config_fingerprint=cfg_n.fingerprint(),
            )
        )
    return evaluation.TrendReport(
        component_counts=list(component_counts),
        reports=reports,
        spearman=evaluation.trend_correlations(list(component_counts), reports),
    )


def _with_layout_channels(config: PipelineConfig, n: int) -> PipelineConfig:
    import copy as _copy

    cfg = _copy.deepcopy(config)
    cfg.n_components = n
    cfg.train.layout_channels = n
    return cfg


def run_pipeline_for_components(n, samples, config) -> evaluation.EvalReport:
    """Single-N convenience wrapper used by evaluation.ablate_components."""
    return run_ablation([n], samples, config).reports[0]
