"""Command-line entry point: ``actclip <subcommand> [options]``.

Exit status: 0 on success, 1 on a runtime failure, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, RunConfig, apply_override, config_keys, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def fixture_path() -> Path:
    """The bundled 50-record annotation fixture."""
    return Path(str(resources.files("actclip") / "data" / "annotations_50.jsonl"))


def _epilog() -> str:
    keys = config_keys()
    return "config keys (override with --set KEY=VALUE):\n" + "\n".join(f"  {k}" for k in keys)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML or JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    parser.add_argument("--seed", type=int, help="sets seeds.data, seeds.model and seeds.sampling")
    parser.add_argument("--deterministic", action="store_true", help="force single-threaded deterministic execution")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="actclip", description="Disentangled video-language pretraining toolkit.",
                                     epilog=_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,curate,train,eval,gradcheck,export}")

    p = sub.add_parser("synth", help="render a synthetic clip corpus", epilog=_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--out", help="output directory (data.out_dir)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("curate", help="filter and re-caption annotations", epilog=_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("input", nargs="?", help="annotation JSONL (default: bundled 50-record fixture)")
    p.add_argument("--out", help="curated JSONL path")
    p.add_argument("--offline", action="store_true", help="use the rule-based oracle instead of the remote classifier")
    p.add_argument("--concurrency", type=int, default=1)

    p = sub.add_parser("train", help="train on a synthetic manifest", epilog=_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--manifest", help="dataset manifest (data.manifest)")
    p.add_argument("--out", help="output directory (train.out_dir)")
    p.add_argument("--steps", type=int, help="train.steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop after this many completed steps")

    p = sub.add_parser("eval", help="retrieval, probe and compositional reports", epilog=_epilog(),
                       formatter_class=fmt)
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", help="dataset manifest (default: data.manifest from the checkpoint)")
    p.add_argument("--split", default="test_seen", help="retrieval split")
    p.add_argument("--probe-split", default="all", help="probe split, or 'all'")
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--shuffle-labels", action="store_true", help="probe negative control")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--svg", help="write a leakage bar chart here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", epilog=_epilog(),
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--component", default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, default=128)

    p = sub.add_parser("export", help="branch embeddings as JSONL", epilog=_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(key, "override must look like KEY=VALUE")
        apply_override(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg.seeds.data = cfg.seeds.model = cfg.seeds.sampling = args.seed
    if args.deterministic:
        cfg.train.deterministic = True
    shortcuts = {"synth": {"out": "data.out_dir"},
                 "train": {"out": "train.out_dir", "manifest": "data.manifest", "steps": "train.steps"}}
    for attr, key in shortcuts.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            apply_override(cfg, key, value)
    return cfg.validate()


def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth_data import SynthSpec, Vocabularies, generate_dataset

    d = cfg.data
    vocab = Vocabularies(tuple(d.subjects), tuple(d.actions), tuple(d.objects))
    spec = SynthSpec(vocab, d.num_frames, d.height, d.width, d.clips_per_triplet, d.holdout_fraction)
    manifest = generate_dataset(spec, cfg.seeds.data, Path(d.out_dir), workers=args.workers)
    print(f"wrote {len(manifest.records)} clips to {d.out_dir}")
    for split, n in manifest.counts().items():
        print(f"  {split:<12} {n}")
    return EXIT_OK


def cmd_curate(args, cfg: RunConfig) -> int:
    from .curation import OfflineOracle, RemoteClassifier, filter_and_reannotate, read_annotations, summarize, \
        write_annotations

    src = Path(args.input) if args.input else fixture_path()
    client = OfflineOracle() if args.offline else RemoteClassifier.from_env()
    curated = filter_and_reannotate(read_annotations(src), client, args.concurrency)
    out = Path(args.out) if args.out else Path(src.stem + ".curated.jsonl")
    write_annotations(curated, out)
    failed = [r for r in curated if r.verdict == "pending"]
    summary = summarize([r.to_json() for r in curated if r.verdict == "kept"])
    print(summary.table())
    print(f"wrote {out} ({sum(r.verdict == 'kept' for r in curated)} kept, "
          f"{sum(r.verdict == 'eliminated' for r in curated)} eliminated, {len(failed)} pending)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .trainer import train

    result = train(cfg, resume=args.resume, until=args.until)
    last = result.history[-1] if result.history else None
    if last:
        print(f"step {last['step']}: total {last['total']:.4f} clip {last['clip']:.4f}")
    print(f"checkpoint {result.checkpoint}")
    print(f"metrics {result.metrics}")
    return EXIT_OK


def _load(args):
    from .checkpoint import load_trainer
    from .synth_data import load_manifest

    trainer = load_trainer(args.checkpoint)
    path = Path(args.manifest) if args.manifest else trainer.cfg.data.manifest_path()
    manifest = load_manifest(path)
    if manifest.vocab != trainer.vocab:
        raise ConfigError("data.manifest", "manifest vocabularies differ from the checkpoint")
    trainer.model.eval()
    return trainer.model, manifest


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import compositional_eval, leakage_svg, probe_eval, retrieval_eval, retrieval_table

    model, manifest = _load(args)
    reports = list(retrieval_eval(model, manifest, args.split))
    payload = {"retrieval": {args.split: [r.to_dict() for r in reports]}}
    print(f"retrieval ({args.split})")
    print(retrieval_table(reports))
    if manifest.split("test_unseen"):
        comp = compositional_eval(model, manifest)
        payload["compositional"] = comp.to_dict()
        print("\ncompositional (test_unseen)")
        print(retrieval_table([comp]))
    leakage = probe_eval(model, manifest, args.probe_split, args.probe_seed, args.shuffle_labels)
    payload["leakage"] = leakage.to_dict()
    print(f"\nleakage probe ({args.probe_split})")
    print(leakage.table())
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    if args.svg:
        leakage_svg(leakage, args.svg)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import COMPONENTS, grad_check
    from .trainer import set_deterministic

    set_deterministic(cfg.train.deterministic)
    names = COMPONENTS if args.component == "all" else [args.component]
    if any(n not in COMPONENTS for n in names):
        raise ConfigError("--component", f"unknown component {args.component!r}; choose from all, "
                          + ", ".join(COMPONENTS))
    ok = True
    for name in names:
        report = grad_check(name, args.eps, args.tol, cfg, max_elements=args.max_elements)
        print(report.format())
        ok &= report.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_export(args, cfg: RunConfig) -> int:
    from .evaluation import export_embeddings

    model, manifest = _load(args)
    n = export_embeddings(model, manifest, args.out, None if args.split == "all" else args.split)
    print(f"wrote {n} embeddings to {args.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "curate": cmd_curate, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.deterministic:
            from .trainer import set_deterministic
            set_deterministic(True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
