"""
Command line front end: ``noise-adapt <command> [<action>] ...``.

Every sub-command takes ``--config`` pointing at a YAML file. Keys are the
argument destinations (``lambda_nse``, ``clean_manifest``, ...), either at
the top level of the file or under a section named after the command
(``train-gan:``, ``evaluate:``, ``snr-hist:``); values given on the command
line win.
"""
import argparse
import logging
import pdb
import sys
from pathlib import Path

import yaml

from . import adapt_eval, data, simulate, toy
from .losses import PclConfig
from .metrics import load_registry
from .models import DeskEncoder, GeneratorSpec, load_scripted_encoder
from .se import MULTI_RESOLUTION, SINGLE_RESOLUTION, SeTrainConfig, build_se_backend, load_se_backend
from .train import (
    EncoderFinetuneConfig,
    EncoderStageConfig,
    GanBundle,
    GanTrainConfig,
    finetune_encoder,
    load_bundle,
    load_encoder,
    save_encoder,
    train_gan,
)

logger = logging.getLogger(__name__)

COMMAND_LINE_ONLY = {"config", "verbose", "version", "command", "action", "func", "subparser"}


def _float_list(x: str):
    return [float(v) for v in x.split(",") if v.strip()]


def _str_list(x: str):
    return [v.strip() for v in x.split(",") if v.strip()]


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        help=(
            "logging defaults to error/exception only. Takes up to three "
            "'-v' flags. '-v': warning. '-vv': info. '-vvv': debug."
        ),
        default=0,
    )
    common.add_argument(
        "--config",
        action="store",
        help="Path to the yaml config file",
    )
    common.add_argument(
        "--pdb",
        action="store_true",
        help="Enable PDB debugging on exception",
        default=False,
    )
    common.add_argument(
        "--no-progress",
        action="store_false",
        dest="show_progress",
        help="Do not display progress bars.",
    )
    common.add_argument(
        "--num-workers",
        type=int,
        default=1,
        help="Threads for simulation and evaluation. 1: Serial mode. 0: All available.",
    )
    common.add_argument(
        "--cache-dir",
        help="Where checkpoints given as URLs are downloaded to",
    )
    common.add_argument(
        "--version",
        action="store_true",
        help="Print version and quit",
        default=False,
    )
    return common


def _add_data_commands(sub, common):
    data_ap = sub.add_parser("data", help="Manifests, training subsets and toy corpora")
    actions = data_ap.add_subparsers(dest="action")

    p = actions.add_parser("build-manifest", parents=[common], help="Scan a directory of WAV files")
    p.add_argument("--root", help="Corpus directory")
    p.add_argument(
        "--domain",
        choices=[d.value for d in data.Domain],
        default=data.Domain.TARGET_NOISY.value,
    )
    p.add_argument(
        "--pattern",
        default=data.NAMING_PATTERN,
        help="Regex on the file stem with optional 'noise' and 'snr' groups",
    )
    p.add_argument("--label-file", help="Lines of '<id> <noise_type> [<snr_db>]'")
    p.add_argument("--reference-dir", help="Directory of clean references with matching names")
    p.add_argument("--out", help="Manifest file to write")
    p.set_defaults(func=_build_manifest, subparser=p)

    p = actions.add_parser("sample-subset", parents=[common], help="Draw the unpaired training subsets")
    p.add_argument("--source", help="Clean source manifest")
    p.add_argument("--target", help="Noisy target manifest")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--per-noise-type", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-source", help="Where to write the clean subset")
    p.add_argument("--out-target", help="Where to write the target subset")
    p.set_defaults(func=_sample_subset, subparser=p)

    p = actions.add_parser("exclude", parents=[common], help="Drop training utterances from a test set")
    p.add_argument("--test", help="Test manifest")
    p.add_argument("--used", nargs="+", help="Manifests of utterances used in training")
    p.add_argument("--out", help="Manifest file to write")
    p.set_defaults(func=_exclude, subparser=p)

    p = actions.add_parser("make-toy", parents=[common], help="Write the synthetic tone corpora")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--n-clean", type=int, default=40)
    p.add_argument("--n-source", type=int, default=40)
    p.add_argument("--n-target", type=int, default=40)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--duration", type=float, default=1.0, help="Seconds per utterance")
    p.add_argument(
        "--noise-classes",
        type=int,
        default=16,
        help="Utterances per colour in the labelled noise corpus; 0 skips it",
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_make_toy, subparser=p)
    data_ap.set_defaults(subparser=data_ap)


def _make_arg_parser():
    """
    Localize the ArgumentParser logic

    Returns
    -------
    argument_parser : argparse.ArgumentParser
        The instantiated argument parser for this CLI
    """
    common = _common_parser()
    ap = argparse.ArgumentParser(
        prog="noise-adapt",
        description="""
        Adapt a speech enhancer to an unseen noise domain by simulating
        target-domain training data with a noise-conditioned GAN.
        """,
    )
    ap.add_argument("--version", action="store_true", help="Print version and quit", default=False)
    sub = ap.add_subparsers(dest="command")
    _add_data_commands(sub, common)

    p = sub.add_parser("finetune-encoder", parents=[common], help="Two-stage noise encoder fine-tuning")
    p.add_argument("--corpus", help="Manifest labelled by noise type (stage 1)")
    p.add_argument("--targets", help="Target training subset (stage 2, one class per utterance)")
    p.add_argument("--out", help="Encoder checkpoint to write")
    p.add_argument("--stage1", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--stage2", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--stage1-epochs", type=int, default=30)
    p.add_argument("--stage2-epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument(
        "--encoder-source",
        help="TorchScript encoder (path or URL) to fine-tune instead of the desk encoder",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="JSON-lines loss log")
    p.set_defaults(func=_finetune_encoder, subparser=p)

    p = sub.add_parser("train-gan", parents=[common], help="Unpaired clean-to-noisy GAN training")
    p.add_argument("--encoder", help="Fine-tuned encoder checkpoint")
    p.add_argument("--clean", help="Clean training subset manifest")
    p.add_argument("--targets", help="Noisy target training subset manifest")
    p.add_argument("--out", help="Output directory for bundles and the loss log")
    p.add_argument("--resume", help="Bundle to continue training from")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--lambda-nse", type=float, default=10.0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--adv-form", choices=["nonsaturating", "saturating"], default="nonsaturating")
    p.add_argument("--negatives", type=int, default=256, help="Patch contrastive negatives per query")
    p.add_argument("--patches-per-layer", type=int, default=256, help="Query patches per feature layer")
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--base-channels", type=int, default=64)
    p.add_argument("--checkpoint-every", type=int, default=50, help="Epochs between checkpoints")
    p.add_argument("--max-steps", type=int, default=None, help="Stop after this many total steps")
    p.add_argument(
        "--ablation",
        choices=list(adapt_eval.ABLATIONS),
        default="full",
        help="Train one of the ablated configurations",
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_train_gan, subparser=p)

    p = sub.add_parser("simulate", parents=[common], help="Generate simulated noisy/clean pairs")
    p.add_argument("--bundle", help="Trained GAN bundle")
    p.add_argument("--clean-manifest", help="Clean utterances to translate")
    p.add_argument("--targets", help="Target subset whose noise conditions are imitated")
    p.add_argument("--sigma", type=float, default=2.0, help="Std of the embedding perturbation")
    p.add_argument(
        "--sigma-sweep",
        type=_float_list,
        help="Comma separated sigmas; one dataset per value under --out",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output directory")
    p.add_argument("--force", action="store_true", help="Overwrite a run with other parameters")
    p.set_defaults(func=_simulate, subparser=p)

    p = sub.add_parser("adapt-se", parents=[common], help="Fine-tune an SE model on pairs")
    p.add_argument("--backend", choices=["desk", "external"], default="desk")
    p.add_argument("--model-source", help="TorchScript SE model for the external backend")
    p.add_argument("--init", help="SE checkpoint to start from")
    p.add_argument("--pairs", help="Pair manifest (pairs.jsonl)")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument(
        "--multi-resolution",
        action="store_true",
        help="Multi-resolution STFT loss instead of a single resolution",
    )
    p.add_argument("--band-mask-prob", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="SE checkpoint to write")
    p.add_argument("--log", help="JSON-lines loss log")
    p.set_defaults(func=_adapt_se, subparser=p)

    p = sub.add_parser("evaluate", parents=[common], help="Score an SE model per SNR bucket")
    p.add_argument("--se", help="SE checkpoint; omit with --backend identity for the noisy baseline")
    p.add_argument("--backend", choices=["identity"], default=None)
    p.add_argument("--test", help="Test manifest with clean references")
    p.add_argument("--metrics", type=_str_list, default=["si_snr"])
    p.add_argument("--buckets", type=_float_list, default=list(adapt_eval.SNR_BUCKETS))
    p.add_argument("--metrics-config", help="YAML naming a provider per metric")
    p.add_argument("--out", help="Report prefix (.tsv and .jsonl)")
    p.set_defaults(func=_evaluate, subparser=p)

    analyze = sub.add_parser("analyze", help="SNR histograms and embedding projections")
    analyses = analyze.add_subparsers(dest="action")
    p = analyses.add_parser("snr-hist", parents=[common], help="SNR histogram per manifest")
    p.add_argument("--manifest", nargs="+", help="NAME=PATH pairs")
    p.add_argument("--bins", type=_float_list, default=list(adapt_eval.DEFAULT_HIST_EDGES))
    p.add_argument("--out", help="Output prefix (.tsv and .svg)")
    p.set_defaults(func=_snr_hist, subparser=p)

    p = analyses.add_parser("embed-proj", parents=[common], help="2-D embedding projection")
    p.add_argument("--encoder", help="Encoder checkpoint")
    p.add_argument("--manifest", help="Manifest of labelled utterances")
    p.add_argument("--label", choices=["noise_type", "domain"], default="noise_type")
    p.add_argument("--method", choices=sorted(adapt_eval.PROJECTORS), default="pca")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output prefix (.tsv and .svg)")
    p.set_defaults(func=_embed_proj, subparser=p)
    analyze.set_defaults(subparser=analyze)

    p = sub.add_parser("ablate", parents=[common], help="Simulate, adapt and evaluate one ablation")
    p.add_argument("--ablation", choices=list(adapt_eval.ABLATIONS), default="full")
    p.add_argument("--bundle", help="GAN bundle trained with that ablation")
    p.add_argument("--clean-manifest")
    p.add_argument("--targets")
    p.add_argument("--test")
    p.add_argument("--se", help="SE checkpoint to adapt; a fresh desk model when omitted")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--metrics", type=_str_list, default=["si_snr"])
    p.add_argument("--metrics-config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_ablate, subparser=p)
    return ap


def _init_logger(verbosity: int) -> None:
    # set up the logger
    global logger
    logger = logging.getLogger("noise_adapt")
    logmap = {0: logging.ERROR, 1: logging.WARNING, 2: logging.INFO, 3: logging.DEBUG}
    loglevel = logmap.get(min(int(verbosity), 3))

    # clear all handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.setLevel(loglevel)
    format_string = "%(levelname)s: %(message)s"
    formatter = logging.Formatter(fmt=format_string)
    stream_handler = logging.StreamHandler()
    stream_handler.setLevel(loglevel)
    stream_handler.setFormatter(fmt=formatter)

    logger.addHandler(stream_handler)

    if verbosity > 0:
        print("Log level set to %s" % logging.getLevelName(loglevel))


def _given_dests(parser: argparse.ArgumentParser, argv) -> set:
    """Destinations whose flag appears literally in ``argv``."""
    given = set()
    for a in parser._actions:
        for opt in a.option_strings:
            if any(arg == opt or arg.startswith(opt + "=") for arg in argv):
                given.add(a.dest)
    return given


def _apply_config(args, argv) -> None:
    logger.info("Loading config from %s", args.config)
    with open(args.config) as f:
        config_dict = yaml.safe_load(f) or {}
    section = getattr(args, "action", None) or args.command
    scoped = dict(config_dict)
    if isinstance(config_dict.get(section), dict):
        scoped.update(config_dict[section])
    logger.info("config: %s", scoped)
    given = _given_dests(args.subparser, argv)
    # use values from config file unless explicitly given on command line
    for a in args.subparser._actions:
        if a.dest in scoped and a.dest not in COMMAND_LINE_ONLY and a.dest not in given:
            logger.info("Using %s value from config file", a.dest)
            setattr(args, a.dest, scoped[a.dest])


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) in (None, "", []):
            raise ValueError(f"Missing command line argument: '--{name.replace('_', '-')}'")


def _parse_and_format_args(argv=None):
    """
    Collect arguments from ``argv`` (default ``sys.argv[1:]``), merge the
    config file and return the namespace, whose ``func`` runs the command.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _make_arg_parser()
    args = parser.parse_args(argv)

    if args.version:
        from . import __version__

        print(__version__)
        sys.exit(0)
    if getattr(args, "func", None) is None:
        (getattr(args, "subparser", None) or parser).print_help()
        sys.exit(1)

    _init_logger(int(args.verbose))
    logger.debug("argv: %s", argv)
    if args.config:
        _apply_config(args, argv)

    if args.pdb:
        # set the pdb_hook as the except hook for all exceptions
        def pdb_hook(exctype, value, traceback):
            pdb.post_mortem(traceback)

        sys.excepthook = pdb_hook
    return args


def cli(argv=None):
    """Thin wrapper around parsing the cli args and running the chosen command"""
    args = _parse_and_format_args(argv)
    return args.func(args)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _build_manifest(args):
    _require(args, "root", "out")
    rules = data.DomainRules(
        domain=data.Domain(args.domain),
        pattern=args.pattern or None,
        label_file=args.label_file,
        reference_dir=args.reference_dir,
    )
    manifest = data.build_manifest(args.root, rules)
    manifest.write(args.out)
    print(f"{len(manifest)} utterances written to {args.out}")
    return manifest


def _sample_subset(args):
    _require(args, "source", "target", "out_source", "out_target")
    src, tgt = data.sample_training_subset(
        data.Manifest.read(args.source),
        data.Manifest.read(args.target),
        n=args.n,
        per_noise_type=args.per_noise_type,
        seed=args.seed,
    )
    src.write(args.out_source)
    tgt.write(args.out_target)
    print(f"{len(src)} clean and {len(tgt)} target utterances sampled")
    return src, tgt


def _exclude(args):
    _require(args, "test", "used", "out")
    test = data.Manifest.read(args.test)
    kept = test
    for path in args.used:
        kept = data.exclude_from_test(kept, data.Manifest.read(path))
    kept.write(args.out)
    print(f"{len(kept)} of {len(test)} test utterances kept")
    return kept


def _make_toy(args):
    _require(args, "out")
    manifests = toy.make_toy_corpus(
        args.out,
        n_clean=args.n_clean,
        n_source=args.n_source,
        n_target=args.n_target,
        n_test=args.n_test,
        duration=args.duration,
        seed=args.seed,
        show_progress=args.show_progress,
    )
    if args.noise_classes > 0:
        manifests["noise_classes"] = toy.make_noise_class_corpus(
            Path(args.out) / "noise_classes",
            per_class=args.noise_classes,
            duration=args.duration,
            seed=args.seed + 1,
            show_progress=args.show_progress,
        )
    for name, manifest in manifests.items():
        print(f"{name}: {len(manifest)}")
    return manifests


def _finetune_encoder(args):
    _require(args, "out")
    if args.stage1:
        _require(args, "corpus")
    if args.encoder_source:
        backbone = load_scripted_encoder(args.encoder_source, args.embed_dim, args.cache_dir)
    else:
        backbone = DeskEncoder(embed_dim=args.embed_dim)
    cfg = EncoderFinetuneConfig(
        stage1=EncoderStageConfig(args.stage1, args.stage1_epochs, args.lr, args.batch_size),
        stage2=EncoderStageConfig(args.stage2, args.stage2_epochs, args.lr, args.batch_size),
        seed=args.seed,
    )
    targets = data.Manifest.read(args.targets) if args.targets else None
    backbone, stats = finetune_encoder(
        backbone,
        data.Manifest.read(args.corpus) if args.corpus else None,
        cfg,
        target_subset=targets,
        log_path=args.log,
        show_progress=args.show_progress,
    )
    save_encoder(backbone, stats, args.out)
    print(f"Encoder written to {args.out}")
    return backbone


def _train_gan(args):
    _require(args, "clean", "targets", "out")
    clean = data.Manifest.read(args.clean)
    targets = data.Manifest.read(args.targets)
    if args.resume:
        bundle = load_bundle(args.resume, args.cache_dir)
        logger.info("Resuming %s at step %d; training flags come from the bundle", args.resume, bundle.step)
    else:
        _require(args, "encoder")
        backbone, stats = load_encoder(args.encoder, args.cache_dir)
        cfg = GanTrainConfig(
            epochs=args.epochs,
            lr=args.lr,
            batch_size=args.batch_size,
            lambda_nse=args.lambda_nse,
            seed=args.seed,
            adv_form=args.adv_form,
            pcl=PclConfig(
                negatives=args.negatives,
                patches_per_layer=args.patches_per_layer,
                temperature=args.temperature,
            ),
            checkpoint_every=args.checkpoint_every,
        )
        cfg = adapt_eval.ablation_config(args.ablation, cfg)
        bundle = GanBundle.create(
            backbone,
            stats,
            GeneratorSpec(base_channels=args.base_channels),
            train_cfg=cfg,
            target_ids=targets.ids,
        )
    clean_pool = data.build_pool(clean, bundle.stats, bundle.stft_cfg, args.show_progress)
    noisy_pool = data.build_pool(targets, bundle.stats, bundle.stft_cfg, args.show_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_gan(
        bundle,
        clean_pool,
        noisy_pool,
        out_dir=out,
        log_path=out / "train_log.jsonl",
        max_steps=args.max_steps,
        show_progress=args.show_progress,
    )
    print(f"Bundle at step {bundle.step} written to {out}")
    return bundle


def _simulate(args):
    _require(args, "bundle", "clean_manifest", "targets", "out")
    bundle = load_bundle(args.bundle, args.cache_dir)
    clean = data.Manifest.read(args.clean_manifest)
    targets = data.Manifest.read(args.targets)
    kwargs = dict(force=args.force, num_workers=args.num_workers, show_progress=args.show_progress)
    if args.sigma_sweep:
        results = simulate.sigma_sweep(clean, targets, bundle, args.sigma_sweep, args.out, args.seed, **kwargs)
        for sigma, pairs in results.items():
            print(f"sigma={sigma:g}: {len(pairs)} pairs")
        return results
    pairs = simulate.generate_dataset(
        clean, targets, bundle, simulate.PerturbationConfig(args.sigma, args.seed), args.out, **kwargs
    )
    print(f"{len(pairs)} pairs written to {args.out}")
    return pairs


def _adapt_se(args):
    _require(args, "pairs", "out")
    if args.init:
        backend = load_se_backend(args.init, args.cache_dir)
    else:
        cfg = SeTrainConfig(
            lr=args.lr,
            stft_resolutions=MULTI_RESOLUTION if args.multi_resolution else SINGLE_RESOLUTION,
            band_mask_prob=args.band_mask_prob,
            seed=args.seed,
        )
        backend = build_se_backend(args.backend, args.model_source, cfg, args.cache_dir, args.seed)
    pairs = simulate.read_pairs(args.pairs)
    adapt_eval.finetune_se(
        backend, pairs, epochs=args.epochs, seed=args.seed, log_path=args.log, show_progress=args.show_progress
    )
    backend.save(args.out)
    print(f"SE model written to {args.out}")
    return backend


def _evaluate(args):
    _require(args, "test")
    if args.se:
        backend = load_se_backend(args.se, args.cache_dir)
    elif args.backend == "identity":
        backend = build_se_backend("identity")
    else:
        raise ValueError("Missing command line argument: '--se' (or '--backend identity')")
    report = adapt_eval.evaluate(
        backend,
        data.Manifest.read(args.test),
        args.metrics,
        args.buckets,
        registry=load_registry(args.metrics_config),
        num_workers=args.num_workers,
        show_progress=args.show_progress,
    )
    if args.out:
        report.write(args.out)
    print(report.to_table(), end="")
    return report


def _snr_hist(args):
    _require(args, "manifest")
    items = []
    for item in args.manifest:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        items.append((name, data.Manifest.read(path)))
    hist = adapt_eval.snr_histogram(items, args.bins, out_prefix=args.out)
    print(hist.to_table(), end="")
    return hist


def _embed_proj(args):
    _require(args, "encoder", "manifest")
    backbone, stats = load_encoder(args.encoder, args.cache_dir)
    manifest = data.Manifest.read(args.manifest)
    embeddings = adapt_eval.utterance_embeddings(manifest, backbone, stats, show_progress=args.show_progress)
    if args.label == "noise_type":
        labels = [e.noise_type for e in manifest]
    else:
        labels = [e.domain.value for e in manifest]
    proj = adapt_eval.embedding_projection(embeddings, labels, args.method, args.seed, out_prefix=args.out)
    print(f"silhouette\t{proj.silhouette:.4f}")
    return proj


def _ablate(args):
    _require(args, "bundle", "clean_manifest", "targets", "test", "out")
    bundle = load_bundle(args.bundle, args.cache_dir)
    if args.se:
        backend = load_se_backend(args.se, args.cache_dir)
    else:
        backend = build_se_backend("desk", seed=args.seed)
    report = adapt_eval.run_ablation(
        args.ablation,
        bundle,
        data.Manifest.read(args.clean_manifest),
        data.Manifest.read(args.targets),
        data.Manifest.read(args.test),
        backend,
        args.out,
        perturbation=simulate.PerturbationConfig(args.sigma, args.seed),
        epochs=args.epochs,
        metrics=args.metrics,
        registry=load_registry(args.metrics_config),
        force=args.force,
        show_progress=args.show_progress,
    )
    print(report.to_table(), end="")
    return report
