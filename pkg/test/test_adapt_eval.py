import json
import logging
import math

import numpy as np
import pytest
import torch
from conftest import tiny_bundle

from noise_adapt import dsp, toy
from noise_adapt.adapt_eval import (
    ablation_config,
    build_oracle_pairs,
    embedding_projection,
    evaluate,
    finetune_se,
    mix_at_snr,
    nearest_bucket,
    run_ablation,
    snr_histogram,
    spectral_profile,
    spectral_profile_distance,
    utterance_embeddings,
)
from noise_adapt.data import Domain, DomainRules, Manifest, ManifestEntry, build_manifest, build_pool
from noise_adapt.errors import ConfigurationError, InvalidInputError, SilhouetteUndefinedError
from noise_adapt.losses import PclConfig
from noise_adapt.metrics import MetricRegistry
from noise_adapt.models import DeskEncoder, GeneratorSpec
from noise_adapt.se import DeskSeBackend, IdentityBackend, SeTrainConfig, load_se_backend
from noise_adapt.simulate import (
    PerturbationConfig,
    generate_dataset,
    read_pairs,
    simulate_spectrogram,
    target_embeddings,
)
from noise_adapt.train import (
    EncoderFinetuneConfig,
    EncoderStageConfig,
    GanBundle,
    GanTrainConfig,
    finetune_encoder,
    train_gan,
)


def _unavailable():
    raise ImportError("not installed here")


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    toy.make_toy_corpus(root, n_clean=3, n_source=2, n_target=2, n_test=4, duration=0.25)
    return root


@pytest.fixture(scope="module")
def corpus(toy_root):
    names = ("clean", "source", "target", "test")
    return {name: Manifest.read(toy_root / "manifests" / f"{name}.jsonl") for name in names}


@pytest.fixture(scope="module")
def source_pairs(toy_root):
    return read_pairs(toy_root / "source_pairs.jsonl")


def test_finetune_se_runs_every_pair(source_pairs, tmp_path):
    backend = DeskSeBackend(SeTrainConfig(lr=1e-3))
    log = tmp_path / "se.jsonl"
    finetune_se(backend, source_pairs, epochs=2, seed=1, log_path=log)
    assert backend.steps == 2 * len(source_pairs)
    with open(log) as f:
        records = [json.loads(line) for line in f]
    assert [r["step"] for r in records] == list(range(2 * len(source_pairs)))
    assert sorted(r["clean_id"] for r in records if r["epoch"] == 0) == sorted(p.clean_id for p in source_pairs)


def test_finetune_se_errors(source_pairs):
    with pytest.raises(InvalidInputError):
        finetune_se(DeskSeBackend(), [])
    with pytest.raises(ConfigurationError):
        finetune_se(DeskSeBackend(), source_pairs, epochs=0)


@pytest.mark.parametrize(
    "snr,bucket", [(5.0, 2.5), (10.0, 7.5), (2.5, 2.5), (20.0, 17.5), (-3.0, 2.5), (14.9, 12.5)]
)
def test_nearest_bucket(snr, bucket):
    assert nearest_bucket(snr) == bucket


def test_identity_si_snr_matches_mixture_snr(tmp_path, rng):
    clean = toy.harmonic_tone(16000, rng)
    noise = rng.standard_normal(16000)
    c = clean.samples - clean.samples.mean()
    noise -= noise.mean()
    noise -= np.dot(noise, c) / np.dot(c, c) * c
    mixed = mix_at_snr(clean, dsp.Waveform(noise), 10.0)
    dsp.write_wav(tmp_path / "noisy" / "u1.wav", mixed, subtype="FLOAT")
    dsp.write_wav(tmp_path / "clean" / "u1.wav", clean, subtype="FLOAT")
    test = build_manifest(tmp_path / "noisy", DomainRules(reference_dir=str(tmp_path / "clean")))
    report = evaluate(IdentityBackend(), test)
    assert report.per_utterance["u1"]["si_snr"] == pytest.approx(10.0, abs=0.1)
    assert report.bucket_of["u1"] == 7.5


def test_evaluate_report(corpus, tmp_path, caplog):
    test = corpus["test"]
    reg = MetricRegistry.default()
    reg.register("pesq", _unavailable)
    no_ref = ManifestEntry("zz_noref", test.entries[0].audio_path, Domain.TARGET_NOISY, "pink", 2.5)
    manifest = Manifest(list(test.entries) + [no_ref])
    with caplog.at_level(logging.WARNING, logger="noise_adapt"):
        report = evaluate(IdentityBackend(), manifest, ["si_snr", "pesq"], registry=reg, num_workers=2)
    assert report.missing == ["pesq"]
    assert report.excluded == ["zz_noref"]
    assert "zz_noref has no clean reference" in caplog.text
    assert report.counts() == {2.5: 1, 7.5: 1, 12.5: 1, 17.5: 1}
    means = report.bucket_means()
    assert means[2.5]["si_snr"] < means[17.5]["si_snr"]
    assert means[2.5]["pesq"] is None
    table = report.to_table()
    assert table.splitlines()[0] == "bucket\tn\tsi_snr\tpesq"
    assert table.splitlines()[-1].startswith("all\t4\t")
    assert "NA" in table

    report.write(tmp_path / "out" / "report")
    assert (tmp_path / "out" / "report.tsv").read_text() == table
    lines = (tmp_path / "out" / "report.jsonl").read_text().splitlines()
    assert len(lines) == 4


def test_evaluate_caps_si_snr(tmp_path, rng):
    clean = toy.harmonic_tone(8000, rng)
    dsp.write_wav(tmp_path / "noisy" / "same.wav", clean, subtype="FLOAT")
    dsp.write_wav(tmp_path / "clean" / "same.wav", clean, subtype="FLOAT")
    test = build_manifest(tmp_path / "noisy", DomainRules(reference_dir=str(tmp_path / "clean")))
    report = evaluate(IdentityBackend(), test, ceiling=40.0)
    assert report.per_utterance["same"]["si_snr"] == 40.0


def test_snr_histogram(corpus, tmp_path):
    hist = snr_histogram(
        {"target": corpus["target"], "test": corpus["test"]}, bins=[0, 5, 10, 15, 20], out_prefix=tmp_path / "hist"
    )
    assert list(hist.fractions) == ["target", "test"]
    for frac in hist.fractions.values():
        assert frac.sum() == pytest.approx(1.0)
        assert len(frac) == 4
    np.testing.assert_allclose(hist.fractions["test"], [0.25, 0.25, 0.25, 0.25])
    np.testing.assert_allclose(hist.fractions["target"], [0.5, 0.5, 0.0, 0.0])
    assert (tmp_path / "hist.tsv").exists()
    assert (tmp_path / "hist.svg").read_text().lstrip().startswith("<?xml")


def test_snr_histogram_measures_missing_snr(corpus):
    unlabelled = Manifest(
        [ManifestEntry(e.utterance_id, e.audio_path, e.domain, None, None, e.reference_path) for e in corpus["test"]]
    )
    hist = snr_histogram([("test", unlabelled)], bins=[-40, 0, 5, 10, 15, 20, 60])
    assert hist.fractions["test"].sum() == pytest.approx(1.0)
    assert hist.fractions["test"][-1] == 0.0


def _clusters(rng, n=30, dim=8, spread=10.0):
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim)) + spread
    return np.concatenate([a, b]), ["a"] * n + ["b"] * n


def test_projection_separated_clusters(rng, tmp_path):
    x, labels = _clusters(rng)
    proj = embedding_projection([torch.from_numpy(v) for v in x], labels, out_prefix=tmp_path / "proj")
    assert proj.coords.shape == (60, 2)
    assert proj.silhouette > 0.8
    assert (tmp_path / "proj.svg").exists()
    assert len((tmp_path / "proj.tsv").read_text().splitlines()) == 61
    tsne = embedding_projection(x, labels, method="tsne")
    assert tsne.coords.shape == (60, 2)


def test_projection_shuffled_labels(rng):
    x, labels = _clusters(rng)
    scores = []
    for _ in range(20):
        shuffled = list(rng.permutation(labels))
        scores.append(embedding_projection(x, shuffled).silhouette)
    assert abs(np.mean(scores)) < 0.1


def test_projection_errors(rng):
    x, labels = _clusters(rng, n=4)
    with pytest.raises(ConfigurationError):
        embedding_projection(x, labels, method="umap")
    with pytest.raises(InvalidInputError):
        embedding_projection(x, labels[:-1])
    with pytest.raises(InvalidInputError):
        embedding_projection(x, ["a"] * len(x))
    with pytest.raises(SilhouetteUndefinedError):
        embedding_projection(np.ones((8, 3)), labels)


def test_utterance_embeddings(corpus):
    enc = DeskEncoder(embed_dim=8, channels=(4, 4, 4))
    embeddings = utterance_embeddings(corpus["target"], enc, dsp.CompressionStats(0.0, 4.0))
    assert [e.source_utterance_id for e in embeddings] == corpus["target"].ids
    assert all(e.dim == 8 for e in embeddings)


def test_spectral_profile_distance(rng):
    white = [toy.coloured_noise(8000, "white", rng) for _ in range(2)]
    brown = [toy.coloured_noise(8000, "brown", rng) for _ in range(2)]
    assert spectral_profile(white).shape == (129,)
    assert spectral_profile_distance(white, white) == 0.0
    assert spectral_profile_distance(white, brown) > spectral_profile_distance(white[:1], white[1:])


@pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0, 15.0])
def test_mix_at_snr(rng, snr_db):
    clean = toy.harmonic_tone(8000, rng)
    noise = dsp.Waveform(rng.standard_normal(3000))
    mixed = mix_at_snr(clean, noise, snr_db, rng)
    assert len(mixed) == len(clean)
    assert dsp.estimate_snr(mixed, clean) == pytest.approx(snr_db, abs=1e-9)
    with pytest.raises(InvalidInputError):
        mix_at_snr(clean, dsp.Waveform(np.zeros(100)), snr_db)


def test_build_oracle_pairs(corpus, tmp_path):
    pairs = build_oracle_pairs(corpus["clean"], corpus["target"], [10.0], tmp_path, seed=2)
    assert [p.clean_id for p in pairs] == corpus["clean"].ids
    assert read_pairs(tmp_path / "pairs.jsonl") == pairs
    for p in pairs:
        assert p.target_noise_id in corpus["target"].ids
        noisy = dsp.read_wav(p.simulated_waveform_path)
        clean = dsp.read_wav(p.clean_waveform_path)
        assert dsp.estimate_snr(noisy, clean) == pytest.approx(10.0, abs=0.05)


def test_ablation_config():
    base = GanTrainConfig(epochs=7)
    assert ablation_config("full", base) == base
    assert ablation_config("no_nse", base).lambda_nse == 0.0
    no_emb = ablation_config("no_embeddings", base)
    assert not no_emb.use_embeddings
    assert no_emb.epochs == 7
    with pytest.raises(ConfigurationError):
        ablation_config("no_pcl")


def test_run_ablation(corpus, tmp_path):
    bundle = tiny_bundle(target_ids=corpus["target"].ids)
    backend = DeskSeBackend(SeTrainConfig(lr=1e-3))
    with pytest.raises(ConfigurationError):
        run_ablation("no_nse", bundle, corpus["clean"], corpus["target"], corpus["test"], backend, tmp_path)
    report = run_ablation(
        "full", bundle, corpus["clean"], corpus["target"], corpus["test"], backend, tmp_path, epochs=1
    )
    assert sorted(report.per_utterance) == corpus["test"].ids
    assert backend.steps == len(corpus["clean"])
    assert (tmp_path / "full" / "report.tsv").exists()
    assert (tmp_path / "full" / "simulated" / "pairs.jsonl").exists()


# ---------------------------------------------------------------------------
# desk-scale end-to-end checks, enabled by --runslow
# ---------------------------------------------------------------------------


def _mean_si_snr(report):
    return report.aggregate()["si_snr"]


def _simulated_distance(bundle, corpus, out_dir):
    pairs = generate_dataset(corpus["clean"], corpus["target"], bundle, PerturbationConfig(0.0), out_dir)
    simulated = [dsp.read_wav(p.simulated_waveform_path) for p in pairs]
    target = [dsp.read_wav(e.audio_path) for e in corpus["target"]]
    return spectral_profile_distance(simulated, target)


def _toy_encoder(corpus, tmp_path):
    classes = toy.make_noise_class_corpus(tmp_path / "classes", per_class=8)
    cfg = EncoderFinetuneConfig(
        stage1=EncoderStageConfig(epochs=10, lr=1e-3, batch_size=8),
        stage2=EncoderStageConfig(epochs=20, lr=1e-3, batch_size=8),
    )
    return finetune_encoder(DeskEncoder(embed_dim=32), classes, cfg, corpus["target"])


def _train_toy_bundle(encoder, stats, corpus, cfg, out_dir):
    bundle = GanBundle.create(
        encoder, stats, GeneratorSpec(base_channels=16), train_cfg=cfg, target_ids=corpus["target"].ids
    )
    initial = None
    if out_dir is not None:
        initial = _simulated_distance(bundle, corpus, out_dir / "initial")
    clean_pool = build_pool(corpus["clean"], stats)
    noisy_pool = build_pool(corpus["target"], stats)
    train_gan(bundle, clean_pool, noisy_pool)
    return bundle, initial


@pytest.fixture(scope="module")
def toy_domain(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_full")
    corpus = toy.make_toy_corpus(root, n_clean=40, n_source=40, n_target=40, n_test=20)
    encoder, stats = _toy_encoder(corpus, root)
    return root, corpus, encoder, stats


@pytest.mark.slow
def test_toy_adaptation_end_to_end(toy_domain, tmp_path):
    root, corpus, encoder, stats = toy_domain
    cfg = GanTrainConfig(epochs=200, pcl=PclConfig(), checkpoint_every=200)
    bundle, initial = _train_toy_bundle(encoder, stats, corpus, cfg, tmp_path)
    trained = _simulated_distance(bundle, corpus, tmp_path / "trained")
    assert trained <= 0.5 * initial

    pretrained = DeskSeBackend(SeTrainConfig(lr=1e-3))
    finetune_se(pretrained, read_pairs(root / "source_pairs.jsonl"), epochs=5)
    pretrained.save(tmp_path / "pretrained_se.tar")
    baseline = _mean_si_snr(evaluate(pretrained, corpus["test"]))

    adapted = load_se_backend(tmp_path / "pretrained_se.tar")
    pairs = generate_dataset(corpus["clean"], corpus["target"], bundle, PerturbationConfig(2.0), tmp_path / "sim")
    rates = [
        simulate_spectrogram(
            dsp.read_wav(p.clean_waveform_path),
            target_embeddings(dsp.read_wav(corpus["target"].get(p.target_noise_id).audio_path), bundle),
            bundle,
            PerturbationConfig(2.0),
        )[2]
        for p in pairs
    ]
    assert np.mean(rates) < 0.01

    finetune_se(adapted, pairs, epochs=2)
    assert _mean_si_snr(evaluate(adapted, corpus["test"])) >= baseline + 0.5


@pytest.mark.slow
def test_encoder_finetune_separates_noise_classes(tmp_path):
    classes = toy.make_noise_class_corpus(tmp_path / "classes", per_class=16)
    targets = toy.make_noise_class_corpus(tmp_path / "targets", per_class=8, seed=1)
    labels = [e.noise_type for e in classes]
    torch.manual_seed(0)
    encoder = DeskEncoder(embed_dim=32)
    stats = dsp.CompressionStats(0.0, 4.0)
    before = embedding_projection(utterance_embeddings(classes, encoder, stats), labels).silhouette

    cfg = EncoderFinetuneConfig(
        stage1=EncoderStageConfig(epochs=15, lr=1e-3, batch_size=8),
        stage2=EncoderStageConfig(epochs=40, lr=1e-3, batch_size=8),
    )
    log = tmp_path / "encoder.jsonl"
    encoder, stats = finetune_encoder(encoder, classes, cfg, targets, stats=stats, log_path=log)
    after = embedding_projection(utterance_embeddings(classes, encoder, stats), labels).silhouette
    assert after > before
    with open(log) as f:
        stage2 = [json.loads(line) for line in f if '"stage2"' in line]
    assert stage2[-1]["train_accuracy"] >= 0.9


@pytest.mark.slow
def test_ablation_direction(toy_domain, tmp_path):
    _, corpus, encoder, stats = toy_domain
    distances = {}
    for name in ("full", "no_nse", "no_embeddings"):
        cfg = ablation_config(name, GanTrainConfig(epochs=100, checkpoint_every=100))
        bundle, _ = _train_toy_bundle(encoder, stats, corpus, cfg, None)
        distances[name] = _simulated_distance(bundle, corpus, tmp_path / name)
    assert distances["full"] <= distances["no_nse"]
    assert distances["full"] <= distances["no_embeddings"]


@pytest.mark.slow
def test_lambda_nse_lowers_nse(toy_domain, tmp_path):
    _, corpus, encoder, stats = toy_domain
    final = {}
    for lam in (10.0, 0.0):
        log = tmp_path / f"lambda_{lam:g}.jsonl"
        bundle = GanBundle.create(
            encoder, stats, GeneratorSpec(base_channels=16),
            train_cfg=GanTrainConfig(epochs=20, lambda_nse=lam), target_ids=corpus["target"].ids,
        )
        train_gan(bundle, build_pool(corpus["clean"], stats), build_pool(corpus["target"], stats), log_path=log)
        with open(log) as f:
            records = [json.loads(line) for line in f]
        final[lam] = np.mean([r["nse"] for r in records[-40:]])
    assert final[10.0] < final[0.0]
    assert math.isfinite(final[0.0])
