import shutil

import numpy as np
import orjson
import pytest
import yaml
from typer.testing import CliRunner

from app.helpers.codec_helpers import read_embeddings, write_embeddings
from app.main import cli
from app.routes import parse_frame_range

runner = CliRunner()

TINY_SPEC = {"views": 2, "frames": 3, "instances": 2, "width": 32, "height": 32, "seed": 4, "raw_dim": 8,
             "blobs_per_instance": 12, "background_grid": 6, "permute_labels": True}

TINY_CONFIG = """
iterations: {bg: 2, first: 2, refine: 1, frame: 1}
seeding: {fg_points_per_instance: 12, fg_seed_views: 2}
heads: {hidden: [8]}
kl_sample_count: 8
"""


def _write_spec(tmp_path, **changes):
    path = tmp_path / "spec.json"
    path.write_bytes(orjson.dumps({**TINY_SPEC, **changes}))
    return path


def test_parse_frame_range():
    assert parse_frame_range("2..5") == (2, 5)
    assert parse_frame_range("3") == (3, 3)


def test_unknown_flag_is_a_usage_error(tmp_path):
    result = runner.invoke(cli, ["gen", str(_write_spec(tmp_path)), str(tmp_path / "out"), "--bogus"])
    assert result.exit_code == 2


def test_bad_frame_range_is_a_usage_error(tmp_path):
    result = runner.invoke(cli, ["track", str(tmp_path / "manifest.json"), "--frames", "4..1"])
    assert result.exit_code == 2


def test_invalid_spec_reports_one_error_line(tmp_path):
    spec = _write_spec(tmp_path, views=0)
    result = runner.invoke(cli, ["gen", str(spec), str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "error=dataset_error" in result.output
    assert "rule=spec" in result.output


def test_missing_manifest_exits_with_code_one(tmp_path):
    result = runner.invoke(cli, ["align", str(tmp_path / "nowhere.json")])
    assert result.exit_code == 1
    assert "error=dataset_error" in result.output and "rule=exists" in result.output


def test_gen_prints_the_manifest_path(tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(cli, ["gen", str(_write_spec(tmp_path, frames=1, permute_labels=False)), str(out)])
    assert result.exit_code == 0, result.output
    assert str(out / "manifest.json") in result.output
    assert (out / "ground_truth.json").exists()


def test_config_defaults_prints_the_training_config():
    result = runner.invoke(cli, ["config-defaults"])
    assert result.exit_code == 0, result.output
    defaults = yaml.safe_load(result.output)
    assert defaults["background"]["dssim_mix"] == 0.2
    assert defaults["lr"]["autoencoder"] == 1e-3
    assert defaults["iterations"]["bg"] == 20000


def test_compress_emb_reads_the_autoencoder_rate(tmp_path):
    data = tmp_path / "data"
    result = runner.invoke(cli, ["gen", str(_write_spec(tmp_path, frames=1, permute_labels=False)), str(data)])
    assert result.exit_code == 0, result.output
    frozen = tmp_path / "frozen"
    shutil.copytree(data, frozen)
    config = tmp_path / "frozen.yaml"
    config.write_text("lr: {autoencoder: 0.0}\n")

    warm = runner.invoke(cli, ["compress-emb", str(data / "manifest.json"), "--steps", "0"])
    assert warm.exit_code == 0, warm.output
    stalled = runner.invoke(cli, ["compress-emb", str(frozen / "manifest.json"), "--steps", "5",
                                  "--config", str(config)])
    assert stalled.exit_code == 0, stalled.output
    # a zero rate leaves the PCA warm start untouched
    warm_params = orjson.loads((data / "autoencoder.json").read_bytes())
    stalled_params = orjson.loads((frozen / "autoencoder.json").read_bytes())
    assert warm_params.keys() == stalled_params.keys()
    for key, value in warm_params.items():
        np.testing.assert_array_equal(stalled_params[key], value)


def test_background_run_can_be_evaluated(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    config = tmp_path / "train.yaml"
    config.write_text(TINY_CONFIG)
    manifest = data / "manifest.json"
    for args in (["gen", _write_spec(tmp_path, permute_labels=False), data],
                 ["init-bg", manifest, config, "--out", run],
                 ["eval", run, manifest]):
        result = runner.invoke(cli, [str(a) for a in args])
        assert result.exit_code == 0, result.output
    metrics = orjson.loads((run / "metrics.json").read_bytes())
    assert set(metrics["summary"]) == {"psnr", "ssim"}
    assert len(metrics["frames"]) == TINY_SPEC["frames"]
    assert metrics["summary"]["psnr"] is not None
    assert (run / "report.html").exists()


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    config = tmp_path / "train.yaml"
    config.write_text(TINY_CONFIG)
    manifest = data / "manifest.json"

    def invoke(*args):
        result = runner.invoke(cli, ["--threads", "2", *[str(a) for a in args]])
        assert result.exit_code == 0, result.output
        return result

    invoke("gen", _write_spec(tmp_path), data)
    alignment = orjson.loads(invoke("align", manifest).output.strip().splitlines()[-1])
    assert alignment["dropped_pixels"] >= 0
    truth = orjson.loads((data / "ground_truth.json").read_bytes())
    for v, view in enumerate(alignment["views"]):
        permutation = truth["permutations"][v]
        assert view["mapping"]
        assert all(permutation[c] == int(k) for k, c in view["mapping"].items())

    invoke("compress-emb", manifest, "--steps", "5")
    assert (data / "autoencoder.json").exists()
    invoke("init-bg", manifest, config, "--out", run)
    invoke("init-frame", manifest, config, "--out", run)
    invoke("track", manifest, config, "--frames", "1..2", "--out", run)
    assert (run / "frame_0002.g4d").exists() and (run / "convergence.svg").exists()

    invoke("eval", run, manifest, "--view", "1")
    metrics = orjson.loads((run / "metrics.json").read_bytes())
    assert len(metrics["frames"]) == 3
    assert (run / "report.html").exists()

    embedding = read_embeddings(data / "embeddings" / "t0000.emb")[:1]
    query_file = tmp_path / "query.emb"
    write_embeddings(query_file, embedding)
    invoke("query", run, query_file)
    result = orjson.loads((run / "query_result.json").read_bytes())
    assert "intervals" in result and (run / "query_scores.svg").exists()

    camera = data / "cameras" / "cam_00.json"
    invoke("render", run / "frame_0000.g4d", camera, tmp_path / "view.png", "--depth", tmp_path / "depth.f32m")
    assert (tmp_path / "view.png").exists() and (tmp_path / "depth.f32m").exists()
    invoke("edit", run / "frame_0000.g4d", tmp_path / "edited.g4d", "--instance", "1", "--remove")
    assert (tmp_path / "edited.g4d").exists()
    assert np.isfinite(metrics["summary"]["psnr"])
