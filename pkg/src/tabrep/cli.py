"""Command-line entry point.

Subcommands cover the full pipeline: ``schema``, ``preprocess``,
``pretrain``, ``finetune``, ``embed``, ``eval``, and ``ablate``.  Every run
resolves its configuration from built-in defaults, then an optional JSON
config file, then explicit flags (last wins), and writes the resolved
snapshot next to its outputs so any command can be replayed exactly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corruption as corruption_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import training as training_mod
from .losses import LossConfig
from .model import Checkpoint, ModelConfig

OUTDIR_ENV = "TABREP_OUTDIR"

TRAIN_DEFAULTS = {
    "epochs": 1000,
    "batch": 128,
    "lr": 1e-4,
    "rho": 0.9,
    "eps": 1e-8,
    "ratio": 0.3,
    "corruption": "marginal",
    "sigma": 0.1,
    "margin": 2.0,
    "lam": 0.01,
    "p": 2,
    "alpha": 1.0,
    "beta": 1.0,
    "seed": 0,
    "checkpoint_every": 0,
    "token_dim": 16,
    "layers": 3,
    "heads": 2,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_train_flags(parser: _Parser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--rho", type=float, help="RMSProp decay")
    parser.add_argument("--eps", type=float, help="RMSProp epsilon")
    parser.add_argument("--ratio", type=float, help="corruption ratio")
    parser.add_argument("--corruption", choices=corruption_mod.CORRUPTION_MODES)
    parser.add_argument("--sigma", type=float, help="gaussian corruption sigma")
    parser.add_argument("--margin", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--p", type=int, choices=(1, 2))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    parser.add_argument("--token-dim", dest="token_dim", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--heads", type=int)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tabrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schema", help="infer column kinds from a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--label-column")
    p.add_argument("--max-cardinality", dest="max_cardinality", type=int)
    p.add_argument("--out")

    p = sub.add_parser("preprocess", help="fit the pipeline and write splits")
    p.add_argument("--input", required=True)
    p.add_argument("--label-column")
    p.add_argument("--splits", help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-cardinality", dest="max_cardinality", type=int)
    p.add_argument("--missing", nargs="*", help="missing-value markers")
    p.add_argument("--outdir")
    p.add_argument("--config")

    p = sub.add_parser("pretrain", help="pretrain the encoder")
    p.add_argument("--data", required=True, help="train split (.npz) or data dir")
    p.add_argument("--mode", choices=training_mod.TRAIN_MODES)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--outdir")
    p.add_argument("--config")
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="fine-tune a pretrained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    p.add_argument("--outdir")
    p.add_argument("--config")

    p = sub.add_parser("embed", help="export frozen embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output CSV (default <outdir>/embeddings.csv)")
    p.add_argument("--export-corruption-mask", dest="mask_out")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--outdir")
    p.add_argument("--config")

    p = sub.add_parser("eval", help="evaluate feature modes on the test split")
    p.add_argument("--data", required=True, help="data dir with train/test npz")
    p.add_argument("--checkpoint")
    p.add_argument("--features", help="raw|distilled|concat|all (default raw)")
    p.add_argument("--methods", help="comma list: logistic and adapter names")
    p.add_argument(
        "--adapter",
        action="append",
        help="NAME=COMMAND registration for a CSV-exchange adapter",
    )
    p.add_argument("--dataset-name", dest="dataset_name")
    p.add_argument("--outdir")
    p.add_argument("--config")

    p = sub.add_parser("ablate", help="corruption-ratio sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", help="comma list (default 0.0,...,0.6)")
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--dataset-name", dest="dataset_name")
    p.add_argument("--outdir")
    p.add_argument("--config")
    _add_train_flags(p)

    return parser


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        _require_path(config_path)
        with open(config_path, encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require_path(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise data_mod.DataError(f"input path not found: {p}")
    return p


def _outdir(resolved: dict) -> Path:
    out = resolved.get("outdir") or os.environ.get(OUTDIR_ENV)
    if not out:
        raise UsageError(
            f"an output directory is required (--outdir or ${OUTDIR_ENV})"
        )
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    resolved["outdir"] = str(path)
    return path


def _write_snapshot(outdir: Path, command: str, resolved: dict) -> None:
    snapshot = {"command": command, "config": resolved}
    with open(outdir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _train_config(resolved: dict, mode: str) -> training_mod.TrainConfig:
    return training_mod.TrainConfig(
        batch_size=resolved["batch"],
        epochs=resolved["epochs"],
        learning_rate=resolved["lr"],
        rmsprop_decay=resolved["rho"],
        rmsprop_epsilon=resolved["eps"],
        corruption_ratio=resolved["ratio"],
        corruption_mode=resolved["corruption"],
        corruption_sigma=resolved["sigma"],
        loss=LossConfig(
            lam=resolved["lam"],
            p=resolved["p"],
            alpha=resolved["alpha"],
            beta=resolved["beta"],
            margin=resolved["margin"],
        ),
        mode=mode,
        seed=resolved["seed"],
        checkpoint_every=resolved["checkpoint_every"],
    )


def _model_config(resolved: dict, dataset: data_mod.TableDataset) -> ModelConfig:
    n_classes = 2
    if dataset.label_classes is not None:
        n_classes = max(2, len(dataset.label_classes))
    elif dataset.y is not None and (dataset.y >= 0).any():
        n_classes = max(2, int(dataset.y.max()) + 1)
    return ModelConfig(
        n_features=dataset.n_features,
        token_dim=resolved["token_dim"],
        n_layers=resolved["layers"],
        n_heads=resolved["heads"],
        n_classes=n_classes,
    )


def _load_split(data_arg: str, split: str) -> data_mod.TableDataset:
    path = Path(data_arg)
    if path.is_dir():
        path = path / f"{split}.npz"
    _require_path(path)
    return data_mod.load_dataset(path)


def _preprocessor_hash(data_arg: str) -> str:
    path = Path(data_arg)
    candidate = (path if path.is_dir() else path.parent) / "preprocessor.json"
    if candidate.exists():
        return data_mod.PreprocessorState.load(candidate).digest()
    return ""


def _cmd_schema(args) -> int:
    resolved = _resolve(args, {"max_cardinality": data_mod.DEFAULT_MAX_CATEGORICAL_CARDINALITY})
    path = _require_path(args.input)
    table, _ = data_mod.load_csv(path, label_column=args.label_column)
    schema = data_mod.infer_schema(table, resolved["max_cardinality"])
    payload = json.dumps(
        [dataclasses.asdict(col) for col in schema], indent=2, sort_keys=True
    )
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


def _cmd_preprocess(args) -> int:
    defaults = {
        "input": None,
        "label_column": None,
        "splits": "0.8,0.1,0.1",
        "seed": 0,
        "max_cardinality": data_mod.DEFAULT_MAX_CATEGORICAL_CARDINALITY,
        "missing": list(data_mod.DEFAULT_MISSING_MARKERS),
        "outdir": None,
    }
    resolved = _resolve(args, defaults)
    resolved["input"] = args.input
    resolved["label_column"] = args.label_column or resolved["label_column"]
    path = _require_path(resolved["input"])
    outdir = _outdir(resolved)

    fractions = tuple(float(f) for f in str(resolved["splits"]).split(","))
    table, labels = data_mod.load_csv(
        path,
        label_column=resolved["label_column"],
        missing_markers=tuple(resolved["missing"]),
    )
    schema = data_mod.infer_schema(table, resolved["max_cardinality"])

    y_provisional = None
    classes = None
    if labels is not None:
        classes = sorted({v for v in labels if v is not None})
        y_provisional = data_mod.encode_labels(labels, classes)
    parts = data_mod.split_indices(
        y_provisional, table.n_rows, fractions, resolved["seed"], classes
    )

    train_rows = [table.rows[i] for i in parts[0]]
    train_table = data_mod.RawTable(columns=table.columns, rows=train_rows)
    train_labels = [labels[i] for i in parts[0]] if labels is not None else None
    state = data_mod.fit_preprocessor(train_table, schema, train_labels)
    state.save(outdir / "preprocessor.json")

    for name, idx in zip(("train", "val", "test"), parts):
        subset = data_mod.RawTable(
            columns=table.columns, rows=[table.rows[i] for i in idx]
        )
        subset_labels = [labels[i] for i in idx] if labels is not None else None
        dataset = data_mod.transform(
            subset, state, labels=subset_labels, row_ids=idx
        )
        data_mod.save_dataset(dataset, outdir / f"{name}.npz")
    _write_snapshot(outdir, "preprocess", resolved)
    print(f"wrote preprocessor and splits to {outdir}")
    return 0


def _cmd_pretrain(args) -> int:
    defaults = dict(TRAIN_DEFAULTS, data=None, mode="self", resume=None, outdir=None)
    resolved = _resolve(args, defaults)
    resolved["data"] = args.data
    resolved["mode"] = args.mode or resolved["mode"]
    resolved["resume"] = args.resume or resolved["resume"]
    outdir = _outdir(resolved)
    dataset = _load_split(resolved["data"], "train")
    config = _train_config(resolved, resolved["mode"])

    resume_from = None
    if resolved["resume"]:
        resume_from = Checkpoint.load(_require_path(resolved["resume"]))
    runner = (
        training_mod.pretrain_semi
        if resolved["mode"] == "semi"
        else training_mod.pretrain_self
    )
    checkpoint, reports = runner(
        dataset,
        config,
        model_config=None if resume_from else _model_config(resolved, dataset),
        resume_from=resume_from,
        checkpoint_path=outdir / "pretrained.ckpt",
        checkpoint_dir=outdir,
        log_path=outdir / "loss_log.jsonl",
        preprocessor_hash=_preprocessor_hash(resolved["data"]),
    )
    _write_snapshot(outdir, "pretrain", resolved)
    final = reports[-1].total if reports else float("nan")
    print(f"pretrained {checkpoint.step} steps; final loss {final:.6f}")
    return 0


def _cmd_finetune(args) -> int:
    defaults = {
        "checkpoint": None,
        "data": None,
        "epochs": 100,
        "lr": None,
        "batch": None,
        "seed": 0,
        "freeze_encoder": False,
        "outdir": None,
    }
    resolved = _resolve(args, defaults)
    resolved["checkpoint"] = args.checkpoint
    resolved["data"] = args.data
    outdir = _outdir(resolved)
    checkpoint = Checkpoint.load(_require_path(resolved["checkpoint"]))
    dataset = _load_split(resolved["data"], "train")
    tuned = training_mod.finetune(
        checkpoint,
        dataset,
        epochs=resolved["epochs"],
        lr=resolved["lr"],
        batch_size=resolved["batch"],
        seed=resolved["seed"],
        freeze_encoder=bool(resolved["freeze_encoder"]),
    )
    tuned.checkpoint(checkpoint.preprocessor_hash).save(outdir / "finetuned.ckpt")
    _write_snapshot(outdir, "finetune", resolved)
    last = tuned.loss_log[-1] if tuned.loss_log else float("nan")
    print(f"fine-tuned for {len(tuned.loss_log)} steps; final loss {last:.6f}")
    return 0


def _cmd_embed(args) -> int:
    defaults = {
        "checkpoint": None,
        "data": None,
        "out": None,
        "mask_out": None,
        "ratio": 0.3,
        "seed": 0,
        "outdir": None,
    }
    resolved = _resolve(args, defaults)
    resolved["checkpoint"] = args.checkpoint
    resolved["data"] = args.data
    outdir = _outdir(resolved)
    checkpoint = Checkpoint.load(_require_path(resolved["checkpoint"]))
    dataset = _load_split(resolved["data"], "train")
    batch = eval_mod.embed_dataset(checkpoint, dataset)
    out = Path(resolved["out"]) if resolved["out"] else outdir / "embeddings.csv"
    eval_mod.export_embeddings(batch, out)
    if resolved["mask_out"]:
        marginals = corruption_mod.fit_marginals(dataset)
        config = corruption_mod.CorruptionConfig(
            ratio=resolved["ratio"], seed=resolved["seed"]
        )
        _, mask = corruption_mod.corrupt(dataset.X, marginals, config)
        corruption_mod.export_masks(mask, dataset.row_ids, resolved["mask_out"])
    _write_snapshot(outdir, "embed", resolved)
    print(f"wrote {batch.Z.shape[0]} embeddings of width {batch.Z.shape[1]} to {out}")
    return 0


def _cmd_eval(args) -> int:
    defaults = {
        "data": None,
        "checkpoint": None,
        "features": "raw",
        "methods": "logistic",
        "dataset_name": "",
        "outdir": None,
    }
    resolved = _resolve(args, defaults)
    resolved["data"] = args.data
    resolved["checkpoint"] = args.checkpoint or resolved["checkpoint"]
    outdir = _outdir(resolved)
    for spec in args.adapter or []:
        if "=" not in spec:
            raise UsageError("--adapter expects NAME=COMMAND")
        name, command = spec.split("=", 1)
        eval_mod.register_adapter(
            name, eval_mod.command_adapter(command.split())
        )

    train = _load_split(resolved["data"], "train")
    test = _load_split(resolved["data"], "test")
    modes = (
        eval_mod.FEATURE_MODES
        if resolved["features"] == "all"
        else tuple(resolved["features"].split(","))
    )
    checkpoint = None
    if resolved["checkpoint"]:
        checkpoint = Checkpoint.load(_require_path(resolved["checkpoint"]))
    reports = eval_mod.evaluate_feature_modes(
        train,
        test,
        checkpoint=checkpoint,
        modes=modes,
        methods=tuple(str(resolved["methods"]).split(",")),
        dataset_name=resolved["dataset_name"],
    )
    table = eval_mod.render_metric_table(reports)
    (outdir / "metrics.txt").write_text(table, encoding="utf-8")
    eval_mod.write_reports_jsonl(reports, outdir / "reports.jsonl")
    _write_snapshot(outdir, "eval", resolved)
    print(table, end="")
    return 0


def _cmd_ablate(args) -> int:
    defaults = dict(
        TRAIN_DEFAULTS,
        data=None,
        ratios="0.0,0.1,0.2,0.3,0.4,0.5,0.6",
        finetune_epochs=30,
        dataset_name="",
        outdir=None,
    )
    defaults["epochs"] = 50
    resolved = _resolve(args, defaults)
    resolved["data"] = args.data
    outdir = _outdir(resolved)
    train = _load_split(resolved["data"], "train")
    test = _load_split(resolved["data"], "test")
    ratios = [float(r) for r in str(resolved["ratios"]).split(",")]
    config = _train_config(resolved, "semi")
    reports = eval_mod.ablation_runner(
        train,
        test,
        ratios,
        config,
        dataset_name=resolved["dataset_name"],
        finetune_epochs=resolved["finetune_epochs"],
    )
    table = eval_mod.render_ablation_table(reports)
    (outdir / "ablation.txt").write_text(table, encoding="utf-8")
    eval_mod.write_reports_jsonl(list(reports), outdir / "reports.jsonl")
    _write_snapshot(outdir, "ablate", resolved)
    print(table, end="")
    return 0


_COMMANDS = {
    "schema": _cmd_schema,
    "preprocess": _cmd_preprocess,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "embed": _cmd_embed,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv: list[str]) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except data_mod.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except training_mod.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
