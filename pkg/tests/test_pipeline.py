import numpy as np
import pytest
import torch

from neulay.errors import ConfigurationError
from neulay.pipeline import (
    PipelineConfig,
    build_corpus_layouts,
    extract_corpus_features,
    fit_projector,
    make_probe_dataset,
    make_scene_dataset,
    scene_seed,
    split_holdout,
)

torch.set_num_threads(1)


def micro_config(**overrides):
    kwargs = dict(
        n_scenes=10,
        n_components=3,
        holdout_layouts=2,
        samples_per_layout=2,
        pca_sample_count=300,
        probe_scenes=4,
        probe_epochs=1,
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


class TestPipelineConfig:
    def test_train_settings_synced(self):
        config = micro_config(seed=7, resolution=32, n_components=5)
        assert config.train.seed == 7
        assert config.train.image_px == 32
        assert config.train.layout_channels == 5

    def test_unknown_style_rejected(self):
        with pytest.raises(ConfigurationError):
            micro_config(style_mix={"sepia": 1.0})

    def test_unknown_convention_rejected(self):
        with pytest.raises(ConfigurationError):
            micro_config(convention_id="vit-g")

    def test_fingerprint_sensitivity(self):
        a = micro_config(seed=0)
        b = micro_config(seed=1)
        c = micro_config(seed=0)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == c.fingerprint()


class TestSceneDataset:
    def test_deterministic(self):
        config = micro_config()
        a = make_scene_dataset(config)
        b = make_scene_dataset(config)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert sa.caption == sb.caption

    def test_count_and_resolution(self):
        config = micro_config()
        samples = make_scene_dataset(config)
        assert len(samples) == 10
        assert all(s.image.shape == (32, 32, 3) for s in samples)

    def test_style_mix_respected(self):
        config = micro_config(style_mix={"night": 1.0})
        samples = make_scene_dataset(config)
        assert all(s.style_tag == "night" for s in samples)

    def test_probe_corpus_disjoint_from_main(self):
        config = micro_config()
        main = make_scene_dataset(config)
        probe = make_probe_dataset(config)
        assert len(probe) == config.probe_scenes
        main_seeds = {scene_seed(config, i) for i in range(config.n_scenes)}
        probe_seeds = {
            scene_seed(config, 500_000 + i) for i in range(config.probe_scenes)
        }
        assert main_seeds.isdisjoint(probe_seeds)
        assert not any(
            np.array_equal(p.image, m.image) for p in probe for m in main
        )


class TestCorpusProcessing:
    def test_split_holdout_sizes(self):
        config = micro_config()
        samples = make_scene_dataset(config)
        train, hold = split_holdout(samples, config)
        assert len(train) == 8 and len(hold) == 2

    def test_projector_and_layouts(self):
        config = micro_config()
        samples = make_scene_dataset(config)
        train, _ = split_holdout(samples, config)
        fmaps = extract_corpus_features(train, config)
        projector = fit_projector(fmaps, config)
        assert projector.n_components == 3
        layouts, stats = build_corpus_layouts(train, fmaps, projector, config)
        assert len(layouts) == len(train)
        assert stats.shape == (3, 2)
        for lay in layouts:
            assert lay.values.shape == (32, 32, 3)
            assert lay.values.min() >= -1.0 and lay.values.max() <= 1.0
