"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (diverged
training, audit mismatch), 4 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import accounting
from . import autodiff as ad
from . import checkpoint as ckpt
from . import runconfig
from .config import ConfigError
from .harness import (
    ARMS,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    evaluation_loss,
    few_shot,
    pretrain_base,
    train,
)
from .hypernet import export_task_embeddings
from .tasks import DatasetFormatError, TaskRegistry, build_registry, ingest_jsonl, subsample
from .transformer import Model, build_model, load_base_weights

log = logging.getLogger("hyperformer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.cfg"


class AuditMismatch(ArithmeticError):
    pass


def registry_for(run: runconfig.RunConfig) -> TaskRegistry:
    if run.data is not None:
        ds = ingest_jsonl(run.data)
        if len(ds.vocab) > run.model.vocab:
            raise ConfigError(f"{run.data} needs a vocabulary of {len(ds.vocab)}, vocab={run.model.vocab}")
        return ds.to_registry()
    try:
        return build_registry(run.tasks, run.model.vocab)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def base_model_for(run: runconfig.RunConfig, registry: TaskRegistry) -> Optional[Model]:
    if run.base_checkpoint is not None:
        return ckpt.load(run.base_checkpoint)
    if run.pretrain.steps == 0:
        return None
    alphabet = max((s.alphabet for s in run.tasks), default=run.model.vocab - 3)
    log.info("pretraining base model for %d steps", run.pretrain.steps)
    return pretrain_base(run.model, run.pretrain_spec(alphabet), run.pretrain_train_config(), run.pretrain.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    run = runconfig.load(args.config, args.set)
    out = Path(args.out)
    registry = registry_for(run)
    if run.train.subsample is not None:
        registry = subsample(registry, run.train.subsample, run.train.seed)
    model = build_model(run.model, registry, run.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"metrics": "metrics.csv", "checkpoints": "ckpt-*", "best": "best"}
    if run.base_checkpoint is None and run.pretrain.steps > 0:
        artifacts["base"] = "base"
    (out / MANIFEST).write_text(runconfig.render(run, artifacts))
    base = base_model_for(run, registry)
    if base is not None:
        load_base_weights(model, base)
        if run.base_checkpoint is None:
            ckpt.save(base, out / "base")
    result = train(model, registry, run.train, run_dir=out)
    with open(out / "metrics.csv", "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for task in registry.names:
            metric = evaluate(model, registry, task, "test")
            loss = evaluation_loss(model, registry, task, "test")
            writer.writerow([result.best.step, task, "test", repr(metric), repr(loss)])
            print(f"{task} test exact_match {metric}")
    print(f"best checkpoint {out / (out / 'best').read_text().strip()} average {result.best.average}")
    return EXIT_OK


def _run_for_checkpoint(path: Path, config: Optional[str]) -> runconfig.RunConfig:
    manifest = Path(config) if config else path.parent / MANIFEST
    if not manifest.exists():
        raise ConfigError(f"no run configuration at {manifest}; pass --config")
    return runconfig.load(manifest)


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    model = ckpt.load(path)
    registry = registry_for(_run_for_checkpoint(path, args.config))
    if args.task not in registry or args.task not in model.task_names:
        raise ConfigError(f"unknown task {args.task!r}")
    metric = evaluate(model, registry, args.task, args.split)
    print(f"{args.task} {args.split} exact_match {metric}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    path = Path(args.checkpoint)
    model = ckpt.load(path)
    if args.source not in model.task_names:
        raise ConfigError(f"source task {args.source!r} is not in the checkpoint")
    name, _, text = args.target.partition("=")
    target = runconfig.parse_task_spec(name, text)
    if target.name in model.task_names:
        raise ConfigError(f"target task {target.name!r} already exists in the checkpoint")
    if min(args.shots) < 1:
        raise ConfigError("shots must be >= 1")
    if not model.config.has_adapters:
        raise ConfigError(f"transfer needs task-specific adapters or embeddings; {model.config.variant} "
                          f"with ablations {sorted(model.config.ablations)} has none")
    registry = build_registry([target], model.config.vocab)
    rows: List[Tuple] = []
    for shots in args.shots:
        for arm in ARMS:
            scores = []
            for seed in range(args.seeds):
                cfg = TrainConfig(steps=args.steps, batch_size=min(args.batch_size, shots),
                                  learning_rate=args.learning_rate, checkpoint_every=args.steps, seed=seed,
                                  restore_best=False)
                acc = few_shot(model, registry, args.source, target.name, arm, shots, seed, cfg)
                scores.append(acc)
                rows.append((shots, arm, seed, repr(acc), ""))
            rows.append((shots, arm, "mean", repr(float(np.mean(scores))), repr(float(np.std(scores)))))
            print(f"shots={shots} {arm}: {np.mean(scores):.4f}±{np.std(scores):.4f}")
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("shots", "arm", "seed", "accuracy", "std"))
        writer.writerows(rows)
    return EXIT_OK


def _formula_rows(run: runconfig.RunConfig, T: int) -> List[Tuple[str, Optional[int]]]:
    m = run.model
    L, h, d, t, e = m.layers, m.hidden, m.adapter_dim, m.task_dim, m.projector_hidden
    return [
        ("adapters", accounting.formula_adapters(T, L, h, d)),
        ("adapters-shared-ln", accounting.formula_adapters_shared_ln(T, L, h, d)),
        ("hyperformer", accounting.formula_hyperformer(T, L, h, d, t, e, m.feature_dim)),
        ("hyperformer++", accounting.formula_hyperformer_pp(T, L, h, d, t, e)),
        ("crossover_tasks", accounting.crossover_tasks(L, h, d, t, e)),
    ]


def cmd_audit(args) -> int:
    run = runconfig.load(args.config, args.set)
    names = [s.name for s in run.tasks] if run.data is None else registry_for(run).names
    if args.formula_only:
        for key, value in _formula_rows(run, len(names)):
            print(f"{key},{'none' if value is None else value}" if args.format == "csv" else f"{key:20s} {value}")
        return EXIT_OK
    variants = [run.model.variant] if args.variants is None else args.variants.split(",")
    budgets, failures = [], []
    for variant in variants:
        try:
            cfg = run.model.replace(variant=variant)
        except ConfigError as exc:
            raise ConfigError(f"{variant}: {exc}") from None
        model = build_model(cfg, names, run.train.seed)
        budgets.append(accounting.enumerate_budget(model))
        try:
            accounting.check_against_formula(model)
        except ValueError as exc:
            failures.append(str(exc))
    sys.stdout.write(accounting.report(budgets, args.format))
    if failures:
        raise AuditMismatch("; ".join(failures))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = ckpt.load(args.checkpoint)
    if not model.config.is_hyper or not model.config.has_adapters:
        raise ConfigError(f"variant {model.config.variant} has no task embeddings")
    export_task_embeddings(model.P, model.config, model.task_names, args.out, args.stack)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperformer", description="Hypernetwork-generated adapters on a small encoder-decoder transformer.",
        epilog="config keys:\n" + runconfig.describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=True):
        p.add_argument("--config", required=required, help="key=value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key; applied after the file, in order")

    p = sub.add_parser("train", help="multi-task training run")
    config_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--config", help="run configuration (default: manifest next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="few-shot transfer to a new task, two initialisation arms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="trained task used to initialise the target")
    p.add_argument("--target", required=True, help="NAME=generator[:field=value,...]")
    p.add_argument("--shots", type=int, nargs="+", default=[32])
    p.add_argument("--seeds", type=int, default=5, help="seeds 0..N-1 per arm")
    p.add_argument("--steps", type=int, default=400, help="fine-tuning steps per job")
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True, help="summary CSV")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("audit", help="parameter budget table")
    config_args(p)
    p.add_argument("--formula-only", action="store_true", help="print closed-form counts without building models")
    p.add_argument("--variants", help="comma-separated variants to build (default: the configured one)")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export-embeddings", help="task embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stack", choices=("enc", "dec"), default="enc")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.NonFiniteError, TrainingDiverged, AuditMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ckpt.CheckpointError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
