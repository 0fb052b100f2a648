"""Command-line entry point: ``hicontrast <command> [options]``.

Every command writes into a fresh run directory (``--out``); an existing,
non-empty directory is refused so earlier results are never overwritten.
The resolved configuration is echoed into the run directory as
``config.json``.  Exit status is 0 on success, 1 for invalid input and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig
from .encoders import init_params
from .pretrain import eval_alignment, init_state, load_checkpoint, run_pretrain, save_checkpoint
from .synth import (DENSE_MODALITIES, DatasetSpec, SourceSpec, load_dataset, make_dataset,
                    save_dataset, split)
from .transfer import cross_modality_supervision, finetune_parsing, missing_modality
from .verify import run_verify

logger = logging.getLogger("hicontrast")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
FRACTIONS = (1.0, 0.2, 0.1)


class UsageError(Exception):
    """Bad command-line input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers --------------------------------------------------------------

def _run_dir(path) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"run directory {out} already exists; choose a fresh --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required for this command")
    try:
        cfg = ExperimentConfig.load(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file {args.config} not found") from None
    return cfg.resolved(args.seed)


def heldout_spec(spec: DatasetSpec, n: int) -> DatasetSpec:
    """Fully paired held-out samples from an independent stream, ids after the dataset's."""
    total = sum(s.n_samples for s in spec.sources)
    return dataclasses.replace(spec, sources=[SourceSpec(n)], seed=spec.seed + 1_000_003,
                               id_offset=spec.id_offset + total)


def _splits(cfg: ExperimentConfig):
    return split(make_dataset(cfg.dataset), cfg.split, seed=cfg.dataset.seed)


def _strip(sample, modality):
    mask = dict(sample.modality_mask)
    mask[modality] = False
    return dataclasses.replace(sample, modality_mask=mask, **{modality: None})


def _params_from(checkpoint):
    return None if checkpoint is None else load_checkpoint(checkpoint).params


def _summary(samples) -> dict:
    per_source = collections.Counter(int(s.source) for s in samples)
    masks = collections.Counter("+".join(s.present) for s in samples)
    return {"n_samples": len(samples),
            "per_source": {str(k): v for k, v in sorted(per_source.items())},
            "mask_histogram": dict(sorted(masks.items()))}


# --- commands -------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(args.out)
    samples = make_dataset(cfg.dataset)
    (out / "config.json").write_text(cfg.to_json())
    save_dataset(samples, out / "dataset.bin")
    summary = _summary(samples)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(args.out)
    (out / "config.json").write_text(cfg.to_json())
    if args.dataset:
        train = load_dataset(args.dataset)
    else:
        train, _, _ = _splits(cfg)
    held = make_dataset(heldout_spec(cfg.dataset, cfg.heldout))
    state = load_checkpoint(args.checkpoint) if args.checkpoint else init_state(train, cfg.train)
    baseline = eval_alignment(init_params(cfg.train.seed, cfg.train.encoder), held)
    params, _, log = run_pretrain(train, cfg.train, state=state, checkpoint_dir=out)
    save_checkpoint(state, out / "checkpoint.bin", cfg.train)
    log.write_csv(out / "train_log.csv")
    metrics = {"untrained": baseline, "trained": eval_alignment(params, held), "steps": state.step}
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics["trained"], sort_keys=True))
    return EXIT_OK


def _finish(out: Path, metrics: dict, log) -> int:
    _write_json(out / "metrics.json", metrics)
    log.write_csv(out / "transfer_log.csv")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_transfer(args) -> int:
    if args.task != "parsing":
        raise UsageError(f"unsupported task {args.task!r}; only 'parsing' is available")
    cfg = _load_config(args)
    out = _run_dir(args.out)
    (out / "config.json").write_text(cfg.to_json())
    train, _, test = _splits(cfg)
    _, result, log = finetune_parsing(args.modality, train, test, cfg.transfer,
                                      params=_params_from(args.checkpoint), fraction=args.fraction)
    return _finish(out, {"task": "parsing", "modality": args.modality, "fraction": args.fraction,
                         "init": "pretrained" if args.checkpoint else "scratch",
                         "metrics": result.to_dict()}, log)


def cmd_xmod(args) -> int:
    if args.source == args.target:
        logger.info("source equals target: plain fine-tuning")
    cfg = _load_config(args)
    out = _run_dir(args.out)
    (out / "config.json").write_text(cfg.to_json())
    train, _, test = _splits(cfg)
    # first half keeps its labels but loses the target modality;
    # second half keeps both modalities and is used without labels
    half = len(train) // 2
    labelled = [_strip(s, args.target) if args.source != args.target else s
                for s in train[:half] if s.has(args.source)]
    paired = train[half:]
    _, result, log = cross_modality_supervision(args.source, args.target, labelled, paired, test,
                                                cfg.transfer, params=_params_from(args.checkpoint))
    return _finish(out, {"source": args.source, "target": args.target,
                         "contrastive": cfg.transfer.contrastive, "metrics": result.to_dict()}, log)


def cmd_missing(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(args.out)
    (out / "config.json").write_text(cfg.to_json())
    train, _, test = _splits(cfg)
    bimodal = [s for s in train if all(s.has(m) for m in DENSE_MODALITIES)]
    other = [m for m in DENSE_MODALITIES if m != args.test_modality][0]
    test_single = [_strip(s, other) for s in test if s.has(args.test_modality)]
    _, results, log = missing_modality(bimodal, test_single, cfg.transfer,
                                       params=_params_from(args.checkpoint),
                                       test_modalities=(args.test_modality,))
    return _finish(out, {"test_modality": args.test_modality, "contrastive": cfg.transfer.contrastive,
                         "metrics": results[args.test_modality].to_dict()}, log)


def cmd_verify(args) -> int:
    report = run_verify(seed=args.seed or 0, compare=not args.no_compare)
    if args.out:
        out = _run_dir(args.out)
        _write_json(out / "report.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hicontrast",
                     description="Multi-modal contrastive pre-training and transfer on synthetic humans.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(p, out_required=True, config=True):
        if config:
            p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", required=out_required, help="fresh run directory for all outputs")
        p.add_argument("--seed", type=int, default=None, help="override the config's global seed")

    p = sub.add_parser("generate", help="render the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="two-stage contrastive pre-training")
    common(p)
    p.add_argument("--checkpoint", help="resume from this pre-training checkpoint")
    p.add_argument("--dataset", help="train on this dataset file instead of the config's train split")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="fine-tune a parsing head on one modality")
    common(p)
    p.add_argument("--checkpoint", help="pre-trained encoders (omit for scratch init)")
    p.add_argument("--task", default="parsing", help="downstream task (only 'parsing')")
    p.add_argument("--modality", choices=DENSE_MODALITIES, required=True)
    p.add_argument("--fraction", type=float, choices=FRACTIONS, default=1.0,
                   help="fraction of the training split that keeps its labels")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("xmod", help="train on source-modality labels, test on the target modality")
    common(p)
    p.add_argument("--checkpoint", help="pre-trained encoders (omit for scratch init)")
    p.add_argument("--source", choices=DENSE_MODALITIES, required=True)
    p.add_argument("--target", choices=DENSE_MODALITIES, required=True)
    p.set_defaults(func=cmd_xmod)

    p = sub.add_parser("missing", help="train on fused modalities, infer from one")
    common(p)
    p.add_argument("--checkpoint", help="pre-trained encoders (omit for scratch init)")
    p.add_argument("--test-modality", choices=DENSE_MODALITIES, required=True)
    p.set_defaults(func=cmd_missing)

    p = sub.add_parser("verify", help="run the gradient, oracle and invariance checks")
    common(p, out_required=False, config=False)
    p.add_argument("--no-compare", action="store_true",
                   help="skip the weighting comparison (short training runs)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hicontrast: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hicontrast: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # surfaced verbatim, mapped to the runtime status
        print(f"hicontrast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
