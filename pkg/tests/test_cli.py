import json
import shutil
from collections import Counter

import pytest
from PIL import Image as PILImage

from amcl.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_STAGE, main
from amcl.experiment import ConfigError, load_config
from amcl.pipeline import STAGES

TINY = """\
[data]
num_classes = 4
images_per_class_per_session = 3
[masks]
corpus_size = 256
[gan]
epochs = 1
batch_size = 64
generator_channels = 32,16,8,4
[pretrain]
encoder = resnet-tiny
epochs = 2
batch_size = 6
[finetune]
epochs = 2
batch_size = 6
"""

ARTIFACTS = ["config.ini", "manifest.jsonl", "masks.txt", "generator.ckpt", "discriminator.ckpt", "gan_loss.csv",
             "encoder_simclr.ckpt", "encoder_amcl.ckpt", "pretrain_amcl_history.csv", "classifier_scratch.ckpt",
             "classifier_amcl.ckpt", "report_amcl.json", "report_scratch.json", "compare.csv", "gan_loss.png",
             "mask_gallery.png", "pretrain_loss.png", "finetune_loss.png", "roc.png"]


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def full_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["all", "--config", str(tiny_config), "--output-dir", str(out)]) == EXIT_OK
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_all_stages_produce_artifacts(full_run):
    for name in ARTIFACTS:
        assert (full_run / name).exists(), name
    assert list((full_run / "data").rglob("*.png"))


def test_manifest_lists_each_artifact_once(full_run):
    records = [json.loads(line) for line in (full_run / "manifest.jsonl").read_text().splitlines()]
    counts = Counter(r["artifact"] for r in records)
    assert max(counts.values()) == 1
    assert {r["status"] for r in records} == {"ok"}
    assert set(STAGES) <= {r["stage"] for r in records}
    for r in records:
        assert set(r) >= {"stage", "artifact", "hash", "wall_time_s", "config_hash"}


def test_rerun_is_byte_identical(full_run, tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("AMCL_OUTPUT_DIR", str(tmp_path))
    assert main(["all", "--config", str(tiny_config)]) == EXIT_OK
    a, b = _files(full_run), _files(tmp_path)
    manifest_a, manifest_b = a.pop("manifest.jsonl"), b.pop("manifest.jsonl")
    # the written config differs only in the output directory it records
    ini_a, ini_b = (x.pop("config.ini").decode().splitlines() for x in (a, b))
    assert [line for line in ini_a if not line.startswith("output_dir")] == [
        line for line in ini_b if not line.startswith("output_dir")]
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []

    def stable(text):
        records = [json.loads(line) for line in text.splitlines()]
        return [{k: v for k, v in r.items() if k != "wall_time_s" and (k != "hash" or r["artifact"] != "config.ini")}
                for r in records]

    assert stable(manifest_a.decode()) == stable(manifest_b.decode())


def test_resume_skips_completed(full_run, tiny_config, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(full_run, out)
    args = ["all", "--config", str(tiny_config), "--output-dir", str(out)]
    assert main(args + ["--resume"]) == EXIT_OK
    before = _files(out)
    assert main(args + ["--resume"]) == EXIT_OK
    assert _files(out) == before
    # a file that no longer matches its recorded hash is rebuilt
    (out / "compare.csv").write_text("tampered\n")
    assert main(args + ["--resume"]) == EXIT_OK
    assert (out / "compare.csv").read_bytes() == (full_run / "compare.csv").read_bytes()


def test_gallery_dimensions(full_run):
    with PILImage.open(full_run / "mask_gallery.png") as im:
        assert im.size == (530, 530)


def test_compare_table(full_run):
    lines = (full_run / "compare.csv").read_text().splitlines()
    assert lines[0] == "mode,ACC,EER"
    assert [line.split(",")[0] for line in lines[1:]] == ["scratch", "simclr", "amcl"]


def test_synth_data_alone(tiny_config, tmp_path):
    assert main(["synth-data", "--config", str(tiny_config), "--output-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "data" / "synthetic_config.txt").exists()
    assert len(list((tmp_path / "data").rglob("*.png"))) == 24


def test_invalid_config_exit_code(tmp_path, capsys):
    assert main(["gen-masks", "--set", "pretrain.lambda_reg=-1", "--output-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["gen-masks", "--set", "nosuch.key=1", "--output-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["gen-masks", "--config", str(tmp_path / "absent.ini")]) == EXIT_CONFIG


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert main(["compare", "--output-dir", str(tmp_path)]) == EXIT_MISSING
    assert "report_" in capsys.readouterr().err
    records = [json.loads(line) for line in (tmp_path / "manifest.jsonl").read_text().splitlines()]
    assert any(r["stage"] == "compare" and r["status"] == "failed" for r in records)


def test_stage_failure_exit_code(tiny_config, tmp_path):
    (tmp_path / "masks.txt").write_text("AMCL-MASKS v1 16 5\nffff\n")
    assert main(["train-gan", "--config", str(tiny_config), "--output-dir", str(tmp_path)]) == EXIT_STAGE


def test_config_hash_independent_of_key_order(tmp_path):
    a = tmp_path / "a.ini"
    b = tmp_path / "b.ini"
    a.write_text("[gan]\nepochs = 3\nbatch_size = 16\n[data]\nnum_classes = 5\n")
    b.write_text("[data]\nnum_classes = 5\n[gan]\nbatch_size = 16\nepochs = 3\n")
    assert load_config(a, env={}).config_hash == load_config(b, env={}).config_hash
    assert load_config(a, env={}).config_hash != load_config(b, ["gan.epochs=4"], env={}).config_hash


def test_output_dir_precedence(tmp_path):
    cfg = load_config(None, ["experiment.output_dir=x"], env={"AMCL_OUTPUT_DIR": str(tmp_path)})
    assert cfg.output_dir == tmp_path
    assert load_config(None, ["experiment.output_dir=x"], env={}).output_dir.name == "x"


def test_config_errors():
    with pytest.raises(ConfigError):
        load_config(None, ["gan.epochs=abc"], env={})
    with pytest.raises(ConfigError):
        load_config(None, ["noequals"], env={})
