import os
from dataclasses import replace

import numpy as np
import pytest

from cosmoseg import cli, dataio, pipeline
from cosmoseg.errors import ConfigError, MissingPrerequisite, WorkDirLocked
from cosmoseg.inference import SlidingWindowConfig
from cosmoseg.pipeline import (
    PipelineConfig,
    PipelineSettings,
    parse_toml,
    run_pipeline,
)
from cosmoseg.segnet import AugmentationConfig, TrainingConfig, UNet3DConfig

from conftest import build_dataset


def tiny_settings(seed=0, **kw):
    settings = PipelineSettings(
        unet_cfg=UNet3DConfig(num_downsamplings=2, base_channels=4, max_channels=16),
        train_cfg=TrainingConfig(
            patch_size=(16, 32, 32), batch_size=2, epochs=2,
            iterations_per_epoch=2, seed=seed,
        ),
        aug_cfg=AugmentationConfig(flip=True, rotate=False, scale=False, noise=False),
        sw_cfg=SlidingWindowConfig(window_size=(16, 32, 32)),
        seed=seed,
    )
    return replace(settings, **kw) if kw else settings


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_dataset")
    catalog = build_dataset(root, n=4, seed=20)
    return catalog


class TestParseToml:
    def test_scalars_tables_arrays(self):
        doc = parse_toml(
            """
            # pipeline config
            profile = "desk"
            seed = 7
            ratio = 0.5
            flag = true
            other = false

            [training]
            patch_size = [16, 32, 32]  # voxels
            epochs = 2
            """
        )
        assert doc["profile"] == "desk"
        assert doc["seed"] == 7
        assert doc["ratio"] == 0.5
        assert doc["flag"] is True and doc["other"] is False
        assert doc["training"]["patch_size"] == [16, 32, 32]
        assert doc["training"]["epochs"] == 2

    def test_hash_inside_string_kept(self):
        assert parse_toml('name = "a#b"')["name"] == "a#b"

    @pytest.mark.parametrize("bad", ["key", "= 3", "[   ]", "x = ", "x = nope"])
    def test_bad_lines(self, bad):
        with pytest.raises(ConfigError):
            parse_toml(bad)


class TestPipelineConfig:
    def _write(self, tmp_path, body):
        path = tmp_path / "run.toml"
        path.write_text(body)
        return path

    def test_profiles_and_overrides(self, tmp_path):
        path = self._write(
            tmp_path,
            'profile = "desk"\nseed = 3\ncatalog = "cat.csv"\nwork_dir = "w"\n'
            "[training]\nepochs = 5\n[model]\nbase_channels = 4\n",
        )
        cfg = PipelineConfig.from_file(path)
        assert cfg.settings.train_cfg.epochs == 5
        assert cfg.settings.train_cfg.seed == 3
        assert cfg.settings.unet_cfg.base_channels == 4
        assert cfg.settings.unet_cfg.num_downsamplings == 3  # desk default
        assert cfg.work_dir == tmp_path / "w"
        assert cfg.catalog_path == tmp_path / "cat.csv"

    def test_paper_profile_preset_values(self, tmp_path):
        path = self._write(
            tmp_path, 'profile = "paper"\ncatalog = "cat.csv"\nwork_dir = "w"\n'
        )
        s = PipelineConfig.from_file(path).settings
        assert s.train_cfg.patch_size == (96, 160, 160)
        assert s.train_cfg.batch_size == 2
        assert s.train_cfg.lr0 == 0.01
        assert s.train_cfg.epochs == 500
        assert s.train_cfg.poly_exponent == 0.9
        assert s.unet_cfg.num_downsamplings == 5

    def test_unknown_profile(self, tmp_path):
        path = self._write(tmp_path, 'profile = "huge"\ncatalog = "c.csv"\nwork_dir = "w"\n')
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(path)

    def test_unknown_override_key(self, tmp_path):
        path = self._write(
            tmp_path,
            'catalog = "c.csv"\nwork_dir = "w"\n[training]\nbogus = 3\n',
        )
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(path)

    def test_env_workdir_fallback(self, tmp_path, monkeypatch):
        path = self._write(tmp_path, 'catalog = "c.csv"\n')
        monkeypatch.setenv(pipeline.ENV_WORKDIR, str(tmp_path / "env_work"))
        cfg = PipelineConfig.from_file(path)
        assert cfg.work_dir == tmp_path / "env_work"

    def test_no_workdir_anywhere(self, tmp_path, monkeypatch):
        monkeypatch.delenv(pipeline.ENV_WORKDIR, raising=False)
        path = self._write(tmp_path, 'catalog = "c.csv"\n')
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(path)


class TestPipelineStages:
    def test_interpolate_only_stage_isolation(self, dataset, tmp_path):
        config = PipelineConfig(dataset, tmp_path / "w", tiny_settings())
        run_pipeline(config, ["interpolate"])
        out = tmp_path / "w" / "interpolated"
        assert len(list(out.glob("*.nii.gz"))) == 4
        assert not (tmp_path / "w" / "model_a").exists()
        assert not (tmp_path / "w" / "predictions").exists()

    def test_propagate_without_train_a(self, dataset, tmp_path):
        config = PipelineConfig(dataset, tmp_path / "w", tiny_settings())
        with pytest.raises(MissingPrerequisite):
            run_pipeline(config, ["propagate"])

    def test_infer_without_train_b(self, dataset, tmp_path):
        config = PipelineConfig(dataset, tmp_path / "w", tiny_settings())
        with pytest.raises(MissingPrerequisite):
            run_pipeline(config, ["infer"])

    def test_locked_workdir_rejected(self, dataset, tmp_path):
        work = tmp_path / "w"
        work.mkdir()
        (work / ".lock").write_text("123")
        config = PipelineConfig(dataset, work, tiny_settings())
        with pytest.raises(WorkDirLocked):
            run_pipeline(config, ["interpolate"])

    def test_full_run_artifacts(self, dataset, tmp_path):
        work = tmp_path / "w"
        config = PipelineConfig(
            dataset, work, tiny_settings(predict_with_model_a=True)
        )
        run_pipeline(config)
        assert (work / "model_a" / "checkpoint.pt").exists()
        assert (work / "model_b" / "checkpoint.pt").exists()
        val_cases = [r.case_id for r in dataio.load_catalog(dataset) if r.fold_id == 0]
        for cid in val_cases:
            assert (work / "predictions" / "model_b" / f"{cid}.nii.gz").exists()
            assert (work / "predictions" / "model_a" / f"{cid}.nii.gz").exists()
            assert (work / "diagnosis" / f"{cid}.csv").exists()
        scores = (work / "report" / "scores.csv").read_text()
        assert "Seg-Model-A" in scores and "Seg-Model-B" in scores
        assert (work / "report" / "dsc_by_class.png").exists()
        manifest = (work / "manifest.json").read_text()
        assert '"evaluate"' in manifest and '"config_hash"' in manifest
        assert not (work / ".lock").exists()

    def test_rerun_is_deterministic(self, dataset, tmp_path):
        outputs = []
        for name in ("w1", "w2"):
            config = PipelineConfig(dataset, tmp_path / name, tiny_settings(seed=9))
            run_pipeline(config)
            outputs.append((tmp_path / name / "report" / "scores.csv").read_bytes())
        assert outputs[0] == outputs[1]


class TestCli:
    def test_phantom_command_and_fold_sizes(self, tmp_path):
        out = tmp_path / "ds"
        assert cli.main(["phantom", "--n", "8", "--seed", "7", "--out", str(out)]) == 0
        records = dataio.load_catalog(out / "catalog.csv")
        assert len(records) == 8
        sizes = [sum(1 for r in records if r.fold_id == f) for f in range(4)]
        assert sizes == [2, 2, 2, 2]

    def test_phantom_rerun_bit_identical(self, tmp_path):
        args = ["phantom", "--n", "4", "--seed", "3", "--out"]
        assert cli.main(args + [str(tmp_path / "a")]) == 0
        assert cli.main(args + [str(tmp_path / "b")]) == 0
        for rel in ("catalog.csv", "images/phantom0003.nii.gz", "annotations/phantom0004.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_phantom_too_few_cases_exit_2(self, tmp_path):
        assert cli.main(["phantom", "--n", "2", "--seed", "1", "--out", str(tmp_path / "x")]) == 2

    def test_run_missing_prerequisite_exit_3(self, dataset, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            f'catalog = "{dataset}"\nwork_dir = "{tmp_path / "w"}"\n'
            "[training]\npatch_size = [16, 32, 32]\nepochs = 1\niterations_per_epoch = 1\n"
            "[model]\nnum_downsamplings = 2\nbase_channels = 2\n"
            "[inference]\nwindow_size = [16, 32, 32]\n"
        )
        assert cli.main(["run", "--config", str(cfg), "--stages", "train-b"]) == 3

    def test_run_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("this is not toml")
        assert cli.main(["run", "--config", str(cfg)]) == 2

    def test_run_interpolate_stage(self, dataset, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(f'catalog = "{dataset}"\n')
        work = tmp_path / "wenv"
        code = cli.main(
            ["run", "--config", str(cfg), "--stages", "interpolate", "--work", str(work)]
        )
        assert code == 0
        assert len(list((work / "interpolated").glob("*.nii.gz"))) == 4

    def test_evaluate_command(self, dataset, tmp_path):
        root = dataset.parent
        out = tmp_path / "rep"
        code = cli.main(
            ["evaluate", "--pred", str(root / "truth"), "--truth", str(root / "truth"),
             "--scope", "full", "--out", str(out)]
        )
        assert code == 0
        content = (out / "scores.csv").read_text()
        assert "1.000000" in content
        assert (out / "table.txt").exists()
        assert (out / "dsc_by_class.png").exists()

    def test_evaluate_annotated_scope_needs_sidecar(self, dataset, tmp_path):
        root = dataset.parent
        code = cli.main(
            ["evaluate", "--pred", str(root / "truth"), "--truth", str(root / "truth"),
             "--scope", "annotated", "--out", str(tmp_path / "r")]
        )
        assert code == 1  # MissingRange is an internal (data) error

    def test_evaluate_missing_dir_exit_2(self, tmp_path):
        assert cli.main(
            ["evaluate", "--pred", str(tmp_path / "nope"), "--truth", str(tmp_path)]
        ) == 2
