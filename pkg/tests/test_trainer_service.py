import numpy as np
import pytest

from app.helpers.config_helpers import LossWeights, TrainConfig, load_train_config
from app.helpers.exceptions import DatasetError, PipelineError
from app.logFile import read_training_log
from app.services.dataset import DatasetService
from app.services.scene_service import GaussianSet, SceneModel, SceneService
from app.services.trainer import TrainerService, checkpoint_path


def _tiny_config(**extra):
    return load_train_config(
        iterations={"bg": 2, "first": 2, "refine": 1, "frame": 1},
        seeding={"fg_points_per_instance": 10, "fg_seed_views": 2},
        heads={"hidden": [8]},
        kl_sample_count=8,
        held_out_views=[2],
        **extra,
    )


@pytest.fixture(scope="module")
def trained_run(tiny_dataset_dir, tmp_path_factory):
    """Background and frame-0 stages without semantic features, saved as frame_0000.g4d."""
    dataset = DatasetService().load_dataset(tiny_dataset_dir)
    config = _tiny_config(ablation={"semantic_features": False})
    trainer = TrainerService()
    scene = trainer.init_background(dataset, config)
    first, heads = trainer.init_first_frame(dataset, scene, config)
    out_dir = tmp_path_factory.mktemp("run")
    trainer.save(checkpoint_path(out_dir, 0), first, heads, dataset, stage="first_frame")
    return dataset, config, trainer, scene, first, heads, out_dir


def test_total_energy_weights_each_term():
    weights = LossWeights(color=1.0, iso=0.5, sdf=2.0)
    assert TrainerService.total_energy({"color": 2.0, "iso": 4.0, "sdf": 0.25}, weights) == pytest.approx(4.5)


def test_background_color_term_mixes_in_dssim():
    config = TrainConfig()
    assert config.background.dssim_mix == pytest.approx(0.2)
    assert config.background.dssim_mix == config.frame.dssim_mix


def test_checkpoint_names():
    assert checkpoint_path("runs", 7).name == "frame_0007.g4d"


def test_config_overrides_and_validation(tmp_path):
    path = tmp_path / "train.yaml"
    path.write_text("iterations:\n  bg: 5\nknn_k: 6\nheld_out_views: [3, 1, 3]\n")
    config = load_train_config(path, seed=9)
    assert config.iterations.bg == 5 and config.iterations.first == 30000
    assert config.knn_k == 6 and config.seed == 9
    assert config.held_out_views == [1, 3]
    with pytest.raises(PipelineError):
        load_train_config(path, frame={"color": -1.0})
    with pytest.raises(PipelineError):
        load_train_config(tmp_path / "missing.yaml")


def test_semantic_training_needs_compressed_embeddings(tiny_dataset_dir):
    dataset = DatasetService().load_dataset(tiny_dataset_dir, validate=False)
    empty = SceneModel(bg=GaussianSet.empty(), fg=GaussianSet.empty())
    with pytest.raises(DatasetError) as info:
        TrainerService().init_first_frame(dataset, empty, _tiny_config())
    assert info.value.rule == "compressed_embeddings"


def test_background_stage_snapshots_appearance(trained_run):
    _, _, _, scene, _, _, _ = trained_run
    assert len(scene.bg) > 0 and len(scene.fg) == 0
    np.testing.assert_array_equal(scene.bg_reference["sh"], scene.bg.sh)
    assert np.all(np.isfinite(scene.bg.positions))


def test_first_frame_seeds_every_instance(trained_run):
    dataset, _, _, scene, first, heads, out_dir = trained_run
    assert 0 < len(first.fg) <= 10 * dataset.D
    assert len(first.bg) == len(scene.bg)
    assert heads.n_classes == dataset.D + 1
    loaded, sections, meta = SceneService().load_checkpoint(checkpoint_path(out_dir, 0))
    assert meta["stage"] == "first_frame" and meta["n_instances"] == 2
    assert "head.classifier" in sections
    assert len(loaded.fg) == len(first.fg)


def test_track_writes_one_checkpoint_per_frame_and_resumes(trained_run):
    dataset, config, trainer, _, _, _, out_dir = trained_run
    records = trainer.track(dataset, config, 1, 2, out_dir)
    assert [r["frame"] for r in records] == [1, 2]
    assert all(np.isfinite(r["psnr"]) for r in records)
    for t in (1, 2):
        scene, _, meta = SceneService().load_checkpoint(checkpoint_path(out_dir, t))
        assert scene.frame_index == t and meta["stage"] == "frame"
    stages = {r["stage"] for r in read_training_log(out_dir / "train_log.jsonl")}
    assert stages == {"refine", "frame"}
    assert trainer.track(dataset, config, 1, 2, out_dir) == []


def test_track_checks_the_frame_range(trained_run, tmp_path):
    dataset, config, trainer, _, _, _, _ = trained_run
    with pytest.raises(PipelineError):
        trainer.track(dataset, config, 1, 3, tmp_path)
    with pytest.raises(PipelineError):
        trainer.track(dataset, config, 1, 1, tmp_path)
