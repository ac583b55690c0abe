"""Command-line interface.

Subcommands cover the whole workflow: ``synth`` writes a synthetic
dataset, ``train`` fits an embedding model, ``eval`` scores a model or
an imported embedding file, ``retrieve`` answers a single query, and
``pipeline`` drives the cross-validated experiment protocol. Every run
writes a ``run_manifest.json`` with the resolved options and seed, so
any output can be regenerated from its manifest.

Exit codes: 0 success, 2 usage error, 3 data or format error,
4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DegenerateInputError,
    DomainError,
    FormatError,
    NormalizationError,
    NotEnoughRatersError,
    SchemaError,
)
from .model import (
    ModelConfig,
    embedding_distance_matrix,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    IMPORTED_BASELINE,
    REGIMES,
    SEMI_SUPERVISED,
    SUPERVISED,
    ExperimentSpec,
    aggregate_results,
    generate_synthetic,
    import_embeddings,
    run_experiment,
)
from .ratings import mean_rating, set_distance_matrix
from .retrieval import build_index, knn_query, rating_correlation
from .training import SIMILARITY_LOSSES, TrainData, TrainSchedule, train
from . import data as dataio
from . import reports

LOSS_CHOICES = (*SIMILARITY_LOSSES, "regression")
SCHEDULE_CHOICES = ("regression_only", "similarity_only", "two_step_finetune",
                    "multi_task")


class UsageError(ConfigError):
    pass


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"config file {path}: {exc}") from exc
    if not isinstance(loaded, dict):
        raise FormatError(f"config file {path}: top level must be an object")
    return loaded


def _resolve(args, command: str, defaults: dict) -> dict:
    """Merge precedence: defaults < config-file section < explicit flags."""
    section = _load_config_file(args.config).get(command, {})
    resolved = dict(defaults)
    for key, value in section.items():
        if key not in defaults:
            raise UsageError(f"unknown option {key!r} in config section {command!r}")
        resolved[key] = value
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def _write_run_manifest(out_dir, command: str, options: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "options": {k: options[k] for k in sorted(options)},
        "version": __version__,
    }
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _parse_int_list(text, name: str) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(part) for part in str(text).split(",") if part != "")
    except ValueError as exc:
        raise UsageError(f"cannot parse {name} from {text!r}") from exc


def _split_epochs(total_or_list, n_steps: int, name: str) -> tuple[int, ...]:
    values = _parse_int_list(total_or_list, name)
    if len(values) == n_steps:
        return values
    if len(values) == 1:
        total = values[0]
        base = total // n_steps
        spread = [base] * n_steps
        for i in range(total - base * n_steps):
            spread[i] += 1
        return tuple(spread)
    raise UsageError(
        f"{name} needs 1 or {n_steps} comma-separated values, got {len(values)}"
    )


def _build_schedule(mode: str, loss: str, epochs, lr: float, batch_size: int,
                    seed: int, negate_exponent: bool) -> TrainSchedule:
    if loss == "regression":
        mode = "regression_only"
        loss = "dm_kl"  # unused by a pure-regression schedule
    common = dict(learning_rate=lr, batch_size=batch_size, seed=seed,
                  negate_exponent=negate_exponent)
    if mode == "regression_only":
        return TrainSchedule.regression_only(_split_epochs(epochs, 1, "epochs")[0],
                                             **common)
    if mode == "similarity_only":
        return TrainSchedule.similarity_only(_split_epochs(epochs, 1, "epochs")[0],
                                             similarity_loss=loss, **common)
    if mode == "two_step_finetune":
        return TrainSchedule.two_step_finetune(_split_epochs(epochs, 2, "epochs"),
                                               similarity_loss=loss, **common)
    return TrainSchedule.multi_task(_split_epochs(epochs, 3, "epochs"),
                                    similarity_loss=loss, **common)


def _model_config(dataset, embedding_dim: int, hidden, seed: int) -> ModelConfig:
    kind = dataset.records[0].kind
    if kind == dataio.FEATURES_KIND:
        return ModelConfig.for_features(
            input_dim=dataset.records[0].input.shape[0],
            embedding_dim=embedding_dim,
            hidden=_parse_int_list(hidden, "hidden"),
            seed=seed,
        )
    return ModelConfig.for_patches(
        patch_size=dataset.records[0].input.shape[0],
        embedding_dim=embedding_dim,
        channels=_parse_int_list(hidden, "hidden"),
        seed=seed,
    )


# -- synth -------------------------------------------------------------------

SYNTH_DEFAULTS = dict(n=None, seed=0, out=None, noise=0.3, feature_noise=0.05,
                      clutter_scale=6.0, feature_dim=32)


def cmd_synth(args) -> int:
    opts = _resolve(args, "synth", SYNTH_DEFAULTS)
    if opts["n"] is None or opts["out"] is None:
        raise UsageError("synth requires --n and --out")
    if opts["n"] < 10:
        raise UsageError(f"--n must be at least 10, got {opts['n']}")
    dataset = generate_synthetic(
        opts["n"], rating_noise=opts["noise"], feature_noise=opts["feature_noise"],
        clutter_scale=opts["clutter_scale"], feature_dim=opts["feature_dim"],
        seed=opts["seed"],
    )
    manifest = dataio.save_dataset(dataset, opts["out"])
    _write_run_manifest(opts["out"], "synth", opts)
    print(f"wrote {len(dataset)} records to {manifest}")
    return 0


# -- train -------------------------------------------------------------------

TRAIN_DEFAULTS = dict(data=None, schedule="similarity_only", loss="dm_kl",
                      epochs="100", seed=0, out=None, lr=0.01, batch_size=32,
                      val_group=None, embedding_dim=128, hidden="64,64",
                      negate_exponent=False)


def cmd_train(args) -> int:
    opts = _resolve(args, "train", TRAIN_DEFAULTS)
    if opts["data"] is None or opts["out"] is None:
        raise UsageError("train requires --data and --out")
    if opts["loss"] not in LOSS_CHOICES:
        raise UsageError(
            f"unknown loss {opts['loss']!r}; choose from {', '.join(LOSS_CHOICES)}"
        )
    dataset = dataio.load_dataset(opts["data"])
    schedule = _build_schedule(opts["schedule"], opts["loss"], opts["epochs"],
                               opts["lr"], opts["batch_size"], opts["seed"],
                               opts["negate_exponent"])
    model = init_model(_model_config(dataset, opts["embedding_dim"],
                                     opts["hidden"], opts["seed"]))
    if opts["val_group"] is not None:
        train_records = [r for r in dataset.records if r.group != opts["val_group"]]
        val_records = dataset.group_records(opts["val_group"])
        validation = TrainData(dataset.inputs(val_records),
                               tuple(r.rating_set for r in val_records))
    else:
        train_records = list(dataset.records)
        validation = None
    data = TrainData(dataset.inputs(train_records),
                     tuple(r.rating_set for r in train_records))
    result = train(model, data, schedule, validation=validation)

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.ckpt")
    reports.write_history_csv(out / "history.csv", result.history)
    reports.render_training_history(out / "history.png", result.history)
    _write_run_manifest(out, "train", opts)
    print(f"trained {schedule.total_epochs} epochs; checkpoint at "
          f"{out / 'checkpoint.ckpt'}")
    return 0


# -- eval --------------------------------------------------------------------

EVAL_DEFAULTS = dict(data=None, checkpoint=None, embeddings=None, out=None,
                     group=None, k_set="3,5,7,11,17")


def cmd_eval(args) -> int:
    opts = _resolve(args, "eval", EVAL_DEFAULTS)
    if opts["data"] is None or opts["out"] is None:
        raise UsageError("eval requires --data and --out")
    sources = [s for s in (opts["checkpoint"], opts["embeddings"]) if s]
    if len(sources) != 1:
        raise UsageError("eval needs exactly one of --checkpoint or --embeddings")
    dataset = dataio.load_dataset(opts["data"])
    k_set = _parse_int_list(opts["k_set"], "k-set")

    if opts["checkpoint"]:
        records = (dataset.group_records(opts["group"])
                   if opts["group"] is not None else list(dataset.records))
        if not records:
            raise DomainError(f"no records in group {opts['group']}")
        model = load_checkpoint(opts["checkpoint"])
        emb = model.embed_batch(dataset.inputs(records))
        index = build_index([r.id for r in records], emb)
        true_dm = set_distance_matrix([r.rating_set for r in records])
        correlation = rating_correlation(embedding_distance_matrix(emb),
                                         true_dm.entries)
    else:
        if opts["group"] is not None:
            raise UsageError("--group applies only to checkpoint evaluation")
        index, metrics = import_embeddings(opts["embeddings"], dataset)
        correlation = metrics["correlation"]

    bundle = reports.evaluation_reports(opts["out"], index, correlation, k_set)
    _write_run_manifest(opts["out"], "eval", opts)
    for key, value in bundle["metrics"].items():
        if isinstance(value, float):
            print(f"{key}: {value:.6f}")
        else:
            print(f"{key}: {value}")
    return 0


# -- retrieve ------------------------------------------------------------------

RETRIEVE_DEFAULTS = dict(data=None, checkpoint=None, query_id=None, k=4, out=None)


def cmd_retrieve(args) -> int:
    opts = _resolve(args, "retrieve", RETRIEVE_DEFAULTS)
    if not all((opts["data"], opts["checkpoint"], opts["query_id"])):
        raise UsageError("retrieve requires --data, --checkpoint and --query-id")
    dataset = dataio.load_dataset(opts["data"])
    query_record = dataset.by_id(opts["query_id"])
    model = load_checkpoint(opts["checkpoint"])
    emb = model.embed_batch(dataset.inputs())
    index = build_index(dataset.ids(), emb)
    query_vec = emb[dataset.ids().index(opts["query_id"])]
    k = int(opts["k"])
    if not 1 <= k <= index.size - 2:
        raise UsageError(f"--k must be in [1, {index.size - 2}]")
    neighbors = [(i, d) for i, d in knn_query(index, query_vec, k + 1)
                 if i != opts["query_id"]][:k]

    header = ("rank", "id", "distance", "malignancy", "mean_rating")
    rows = []
    for rank, (item_id, distance) in enumerate(neighbors, start=1):
        record = dataset.by_id(item_id)
        mean = mean_rating(record.rating_set).values
        rows.append((rank, item_id, distance, record.malignancy.value,
                     " ".join(f"{v:.1f}" for v in mean)))
    print(f"query {opts['query_id']} ({query_record.malignancy.value})")
    print(" | ".join(header))
    for row in rows:
        print(" | ".join(reports._fmt(v) for v in row))
    if opts["out"]:
        reports.write_csv(Path(opts["out"]) / "neighbors.csv", header, rows)
        _write_run_manifest(opts["out"], "retrieve", opts)
    return 0


# -- pipeline ------------------------------------------------------------------

PIPELINE_DEFAULTS = dict(data=None, regime=SEMI_SUPERVISED,
                         configs="0,1,2,3,4,5,6,7,8,9", seed=0, out=None,
                         jobs=1, embeddings=None, pred_epochs="800",
                         retrieval_epochs="300,40,10", loss="dm_kl", lr=0.1,
                         batch_size=32, embedding_dim=128, hidden="64,64")


def _summary_rows(results) -> list[tuple]:
    rows: list[tuple] = []
    by_regime: dict[str, list] = {}
    for r in results:
        by_regime.setdefault(r.regime, []).append(r)
    reference = None
    if SUPERVISED in by_regime:
        summary = aggregate_results(by_regime[SUPERVISED])
        reference = summary
        rows.append((SUPERVISED, summary.mean_correlation, summary.mean_hubness))
    for regime in (SEMI_SUPERVISED, IMPORTED_BASELINE):
        if regime not in by_regime:
            continue
        summary = aggregate_results(by_regime[regime])
        rows.append((regime, summary.mean_correlation, summary.mean_hubness))
        if reference is not None:
            rows.append((
                f"{regime}_cost",
                reports.relative_cost(summary.mean_correlation,
                                      reference.mean_correlation),
                reports.relative_cost(summary.mean_hubness,
                                      reference.mean_hubness),
            ))
    return rows


def cmd_pipeline(args) -> int:
    opts = _resolve(args, "pipeline", PIPELINE_DEFAULTS)
    if opts["data"] is None or opts["out"] is None:
        raise UsageError("pipeline requires --data and --out")
    if opts["regime"] not in REGIMES:
        raise UsageError(
            f"unknown regime {opts['regime']!r}; choose from {', '.join(REGIMES)}"
        )
    config_ids = _parse_int_list(opts["configs"], "configs")
    bad = [c for c in config_ids if c not in range(10)]
    if bad or not config_ids:
        raise UsageError(f"configuration ids must be 0..9, got {opts['configs']!r}")
    if opts["regime"] == IMPORTED_BASELINE and not opts["embeddings"]:
        raise UsageError("imported_baseline requires --embeddings")

    dataset = dataio.load_dataset(opts["data"])
    model_cfg = _model_config(dataset, opts["embedding_dim"], opts["hidden"],
                              opts["seed"])
    pred_schedule = _build_schedule("regression_only", "regression",
                                    opts["pred_epochs"], opts["lr"],
                                    opts["batch_size"], opts["seed"], False)
    retr_schedule = _build_schedule("multi_task", opts["loss"],
                                    opts["retrieval_epochs"], opts["lr"],
                                    opts["batch_size"], opts["seed"], False)
    spec = ExperimentSpec(
        regime=opts["regime"], model=model_cfg,
        prediction_schedule=pred_schedule, retrieval_schedule=retr_schedule,
        configs=config_ids, seed=opts["seed"],
        embeddings_path=opts["embeddings"],
    )
    results = run_experiment(spec, dataset, jobs=int(opts["jobs"]))

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    # per-config files first, then the merge, so parallel workers never
    # contend on one file
    for cid in config_ids:
        rows = [r for r in results if r.config_id == cid]
        reports.write_results_csv(out / f"results_config{cid}.csv", rows)
    reports.write_results_csv(out / "results.csv", results)
    summary_rows = _summary_rows(results)
    reports.write_summary_csv(out / "summary.csv", summary_rows)
    reports.render_summary_bars(out / "summary.png", summary_rows)
    _write_run_manifest(out, "pipeline", opts)
    for row in summary_rows:
        print(",".join(reports._fmt(v) for v in row))
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semble",
        description="Rating-similarity metric learning and retrieval diagnostics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--n", type=int, help="number of items (minimum 10)")
    p.add_argument("--noise", type=float, help="rater perturbation std (default 0.3)")
    p.add_argument("--feature-noise", dest="feature_noise", type=float,
                   help="white feature noise std (default 0.05)")
    p.add_argument("--clutter-scale", dest="clutter_scale", type=float,
                   help="correlated feature-noise scale (default 6.0)")
    p.add_argument("--feature-dim", dest="feature_dim", type=int,
                   help="feature dimension (default 32)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedding model")
    add_common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--schedule", choices=SCHEDULE_CHOICES,
                   help="training schedule (default similarity_only)")
    p.add_argument("--loss", choices=LOSS_CHOICES,
                   help="similarity loss, or 'regression' (default dm_kl)")
    p.add_argument("--epochs", help="total epochs, or per-step comma list")
    p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="batch size (default 32)")
    p.add_argument("--val-group", dest="val_group", type=int,
                   help="hold out this group for validation history")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int,
                   help="embedding length (default 128)")
    p.add_argument("--hidden", help="hidden widths or conv channels, comma list")
    p.add_argument("--negate-exponent", dest="negate_exponent",
                   action="store_const", const=True,
                   help="use exp(-distance) inside the KL softmax")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or embedding file")
    add_common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--embeddings", help="embedding JSONL to evaluate")
    p.add_argument("--group", type=int, help="restrict to one group")
    p.add_argument("--k-set", dest="k_set",
                   help="comma list of k values (default 3,5,7,11,17)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="query nearest neighbours for one item")
    add_common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--query-id", dest="query_id", help="id of the query item")
    p.add_argument("--k", type=int, help="number of neighbours (default 4)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("pipeline", help="run the cross-validated experiment protocol")
    add_common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--regime", choices=REGIMES,
                   help="experiment regime (default semi_supervised)")
    p.add_argument("--configs", help="comma list of configuration ids (default all)")
    p.add_argument("--jobs", type=int, help="parallel configuration workers")
    p.add_argument("--embeddings", help="embedding JSONL for imported_baseline")
    p.add_argument("--pred-epochs", dest="pred_epochs",
                   help="prediction-step epochs (default 800)")
    p.add_argument("--retrieval-epochs", dest="retrieval_epochs",
                   help="retrieval-step epochs, total or per-step (default 300,40,10)")
    p.add_argument("--loss", choices=SIMILARITY_LOSSES,
                   help="retrieval similarity loss (default dm_kl)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.1)")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="batch size (default 32)")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int,
                   help="embedding length (default 128)")
    p.add_argument("--hidden", help="hidden widths, comma list (default 64,64)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DomainError, SchemaError, NotEnoughRatersError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateInputError, NormalizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
