import json

import pytest
import yaml

from noise_adapt import __version__, cli
from noise_adapt.data import Manifest
from noise_adapt.simulate import read_pairs
from noise_adapt.train import load_encoder


def _run(*argv):
    return cli.cli(["--no-progress" if a == "@np" else a for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.cli(["--version"])
    assert ex.value.code == 0
    assert capsys.readouterr().out.strip() == __version__


def test_no_command_prints_help(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.cli([])
    assert ex.value.code == 1
    assert "usage" in capsys.readouterr().out


def test_missing_argument():
    with pytest.raises(ValueError, match="--out"):
        cli.cli(["data", "make-toy", "--no-progress"])


@pytest.mark.parametrize("verbosity", [0, 1, 2, 3])
def test_logger_levels(tmpdir, verbosity):
    argv = ["data", "make-toy", "--no-progress", "--n-clean", "1", "--n-source", "1", "--n-target", "1"]
    argv += ["--n-test", "1", "--duration", "0.1", "--noise-classes", "0", "--out", str(tmpdir)]
    if verbosity:
        argv.append("-" + "v" * verbosity)
    cli.cli(argv)
    levels = {0: "ERROR", 1: "WARNING", 2: "INFO", 3: "DEBUG"}
    assert cli.logging.getLevelName(cli.logger.level) == levels[verbosity]


def test_config_merge(tmpdir):
    conf = tmpdir.join("conf.yaml")
    conf.write(
        yaml.safe_dump(
            {
                "n_target": 3,
                "duration": 0.1,
                "noise_classes": 0,
                "make-toy": {"n_clean": 2, "n_source": 1, "n_test": 1},
            }
        )
    )
    out = tmpdir.join("toy")
    manifests = cli.cli(
        ["data", "make-toy", "--no-progress", "--config", str(conf), "--n-clean", "4", "--out", str(out)]
    )
    assert len(manifests["clean"]) == 4
    assert len(manifests["target"]) == 3
    assert len(manifests["source"]) == 1
    assert "noise_classes" not in manifests


def test_config_section_of_other_command_is_ignored(tmpdir):
    conf = tmpdir.join("conf.yaml")
    conf.write(yaml.safe_dump({"evaluate": {"n_clean": 9}, "duration": 0.1, "noise_classes": 0}))
    manifests = cli.cli(
        ["data", "make-toy", "--no-progress", "--config", str(conf), "--n-clean", "1", "--n-source", "1",
         "--n-target", "1", "--n-test", "1", "--out", str(tmpdir.join("toy"))]
    )
    assert len(manifests["clean"]) == 1


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_toy")
    cli.cli(
        ["data", "make-toy", "--no-progress", "--out", str(out), "--n-clean", "4", "--n-source", "2",
         "--n-target", "4", "--n-test", "4", "--duration", "0.25", "--noise-classes", "3"]
    )
    return out


def test_data_commands(toy_dir, tmp_path, capsys):
    manifest = cli.cli(
        ["data", "build-manifest", "--no-progress", "--root", str(toy_dir / "test"),
         "--reference-dir", str(toy_dir / "test_clean"), "--out", str(tmp_path / "test.jsonl")]
    )
    assert Manifest.read(tmp_path / "test.jsonl") == manifest
    assert all(e.reference_path for e in manifest)
    assert "4 utterances written" in capsys.readouterr().out

    src, tgt = cli.cli(
        ["data", "sample-subset", "--no-progress", "--source", str(toy_dir / "manifests" / "clean.jsonl"),
         "--target", str(toy_dir / "manifests" / "target.jsonl"), "--n", "2", "--seed", "1",
         "--out-source", str(tmp_path / "src.jsonl"), "--out-target", str(tmp_path / "tgt.jsonl")]
    )
    assert len(src) == len(tgt) == 2

    kept = cli.cli(
        ["data", "exclude", "--no-progress", "--test", str(toy_dir / "manifests" / "target.jsonl"),
         "--used", str(tmp_path / "tgt.jsonl"), "--out", str(tmp_path / "rest.jsonl")]
    )
    assert len(kept) == 2
    assert not set(kept.ids) & set(tgt.ids)


def test_finetune_encoder_targets_only(toy_dir, tmp_path):
    targets = str(toy_dir / "manifests" / "target.jsonl")
    encoder = tmp_path / "encoder.tar"
    with pytest.raises(ValueError, match="--corpus"):
        _run("finetune-encoder", "@np", "--targets", targets, "--out", str(encoder), "--embed-dim", "8")
    assert not encoder.exists()

    backbone = _run(
        "finetune-encoder", "@np", "--no-stage1", "--targets", targets, "--out", str(encoder),
        "--embed-dim", "8", "--stage2-epochs", "1", "--batch-size", "4",
    )
    assert encoder.exists()
    _, stats = load_encoder(str(encoder))
    assert stats.hi > stats.lo
    assert backbone.embed_dim == 8


def test_pipeline(toy_dir, tmp_path):
    manifests = toy_dir / "manifests"
    encoder = tmp_path / "encoder.tar"
    _run(
        "finetune-encoder", "@np", "--corpus", str(toy_dir / "noise_classes" / "manifest.jsonl"),
        "--targets", str(manifests / "target.jsonl"), "--out", str(encoder), "--embed-dim", "8",
        "--stage1-epochs", "1", "--stage2-epochs", "1", "--batch-size", "4", "--log", str(tmp_path / "enc.jsonl"),
    )
    assert encoder.exists()

    gan_dir = tmp_path / "gan"
    gan_args = [
        "train-gan", "@np", "--encoder", str(encoder), "--clean", str(manifests / "clean.jsonl"),
        "--targets", str(manifests / "target.jsonl"), "--out", str(gan_dir), "--epochs", "1",
        "--base-channels", "2", "--negatives", "15", "--patches-per-layer", "8", "--checkpoint-every", "1",
    ]
    bundle = _run(*gan_args, "--max-steps", "2")
    assert bundle.step == 2
    resumed = _run(*gan_args, "--resume", str(gan_dir / "bundle.tar"))
    assert resumed.step == 4
    with open(gan_dir / "train_log.jsonl") as f:
        assert [json.loads(line)["step"] for line in f] == [0, 1, 2, 3]

    sim_dir = tmp_path / "sim"
    pairs = _run(
        "simulate", "@np", "--bundle", str(gan_dir / "bundle.tar"), "--clean-manifest",
        str(manifests / "clean.jsonl"), "--targets", str(manifests / "target.jsonl"), "--out", str(sim_dir),
    )
    assert read_pairs(sim_dir / "pairs.jsonl") == pairs
    sweep = _run(
        "simulate", "@np", "--bundle", str(gan_dir / "bundle.tar"), "--clean-manifest",
        str(manifests / "clean.jsonl"), "--targets", str(manifests / "target.jsonl"),
        "--out", str(tmp_path / "sweep"), "--sigma-sweep", "0,1",
    )
    assert sorted(sweep) == [0.0, 1.0]

    se = tmp_path / "se.tar"
    backend = _run(
        "adapt-se", "@np", "--pairs", str(sim_dir / "pairs.jsonl"), "--out", str(se), "--epochs", "1",
        "--multi-resolution", "--band-mask-prob", "0.5",
    )
    assert backend.steps == len(pairs)

    report = _run(
        "evaluate", "@np", "--se", str(se), "--test", str(manifests / "test.jsonl"),
        "--out", str(tmp_path / "report"),
    )
    assert (tmp_path / "report.tsv").exists()
    assert len(report.per_utterance) == 4
    baseline = _run("evaluate", "@np", "--backend", "identity", "--test", str(manifests / "test.jsonl"))
    assert baseline.metrics == ["si_snr"]
    with pytest.raises(ValueError, match="--se"):
        _run("evaluate", "@np", "--test", str(manifests / "test.jsonl"))

    hist = _run(
        "analyze", "snr-hist", "@np", "--manifest", f"target={manifests / 'target.jsonl'}",
        str(manifests / "test.jsonl"), "--out", str(tmp_path / "hist"),
    )
    assert list(hist.fractions) == ["target", "test"]
    assert (tmp_path / "hist.svg").exists()

    proj = _run(
        "analyze", "embed-proj", "@np", "--encoder", str(encoder), "--manifest",
        str(toy_dir / "noise_classes" / "manifest.jsonl"), "--out", str(tmp_path / "proj"),
    )
    assert -1.0 <= proj.silhouette <= 1.0

    ablation = _run(
        "ablate", "@np", "--ablation", "full", "--bundle", str(gan_dir / "bundle.tar"),
        "--clean-manifest", str(manifests / "clean.jsonl"), "--targets", str(manifests / "target.jsonl"),
        "--test", str(manifests / "test.jsonl"), "--se", str(se), "--epochs", "1", "--out", str(tmp_path / "abl"),
    )
    assert (tmp_path / "abl" / "full" / "report.tsv").exists()
    assert len(ablation.per_utterance) == 4
