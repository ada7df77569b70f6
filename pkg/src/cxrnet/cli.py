"""Command-line entry point.

Subcommands: synth (synthetic dataset), prepare (manifest -> cohort),
train (cohort -> checkpoint + history), evaluate (checkpoint -> report),
params (parameter counts). Options can come from a JSON config file
(--config); every flag overrides its config key. Progress goes to stderr;
machine-readable results go to stdout as key=value lines or to files.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
All failures print a single "error: ..." line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data as data_mod
from . import evaluation as eval_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericalError
from .network import ConfigError, DenseNetConfig, build_network, count_parameters, preset_config
from .tensor import TensorError
from .training import (
    TrainConfig,
    class_weights,
    export_history_csv,
    train,
    unit_weights,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; serialized next to its artifacts."""

    command: str
    pathology: str
    seed: int
    network: dict | None
    train: dict | None
    data: dict
    paths: dict
    out_dir: str


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return dict(section)


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise UsageError(f"unknown {where} config keys: {', '.join(unknown)}")


def _seed(args, cfg: dict, section: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    for source in (section, cfg):
        if "seed" in source:
            value = source["seed"]
            if not isinstance(value, int):
                raise UsageError(f"seed must be an integer, got {value!r}")
            return value
    return 0


def _network_config(args, cfg: dict) -> DenseNetConfig:
    section = _section(cfg, "network")
    preset = getattr(args, "preset", None) or section.pop("preset", None)
    if preset is not None:
        if section:
            raise UsageError("network config may name a preset or list fields, not both")
        return preset_config(preset)
    if not section:
        raise UsageError("no network given: pass --preset or a config with a network section")
    fields = {f.name for f in dataclasses.fields(DenseNetConfig)}
    _check_keys(section, fields, "network")
    if "block_layers" in section:
        section["block_layers"] = tuple(section["block_layers"])
    return DenseNetConfig(**section)


def _train_config(args, cfg: dict) -> tuple[TrainConfig, str]:
    section = _section(cfg, "train")
    weighting = section.pop("weighting", "imbalance")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _check_keys(section, fields, "train")
    section["seed"] = _seed(args, cfg, section)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    if getattr(args, "weighting", None) is not None:
        weighting = args.weighting
    if weighting not in ("imbalance", "unit"):
        raise UsageError(f"weighting must be 'imbalance' or 'unit', got {weighting!r}")
    try:
        return TrainConfig(**section), weighting
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parse_triple(text: str, kind, what: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"{what} needs three comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError:
        raise UsageError(f"{what} values must be {kind.__name__}s, got {text!r}") from None


def _write_run_config(run: RunConfig, out: Path) -> None:
    (out / "run_config.json").write_text(
        json.dumps(dataclasses.asdict(run), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _cmd_synth(args) -> int:
    cfg = _load_config_file(args.config)
    section = _section(cfg, "synth")
    fields = {f.name for f in dataclasses.fields(data_mod.SyntheticSpec)}
    _check_keys(section, fields, "synth")
    section["seed"] = _seed(args, cfg, section)
    if args.side is not None:
        section["side"] = args.side
    if args.counts is not None:
        section["counts"] = _parse_triple(args.counts, int, "--counts")
    if args.positive_fraction is not None:
        section["positive_fraction"] = args.positive_fraction
    for key in ("counts", "radius_range", "contrast_range"):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(section[key])
    spec = data_mod.SyntheticSpec(**section)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data_mod.generate_synthetic(spec, out)
    print(f"wrote {sum(spec.counts)} images under {out}", file=sys.stderr)
    print(f"manifest={manifest}")
    return 0


def _cmd_prepare(args) -> int:
    cfg = _load_config_file(args.config)
    section = _section(cfg, "data")
    _check_keys(section, ("uncertain", "split_unit", "ratios", "seed", "view"), "data")
    pathology = args.pathology or cfg.get("pathology")
    if not pathology:
        raise UsageError("prepare needs --pathology (or a pathology config key)")
    uncertain = args.uncertain or section.get("uncertain", "exclude")
    split_unit = args.split_unit or section.get("split_unit", "per_image")
    view = section.get("view", "frontal_only")
    ratios = tuple(section.get("ratios", (0.64, 0.16, 0.20)))
    if args.ratios is not None:
        ratios = _parse_triple(args.ratios, float, "--ratios")
    seed = _seed(args, cfg, section)

    records = data_mod.parse_manifest(args.manifest)
    labeled = data_mod.extract_cohort(records, pathology, uncertain_policy=uncertain, view_filter=view)
    cohort = data_mod.split(labeled, ratios=ratios, seed=seed, unit=split_unit, pathology=pathology, policy=uncertain)
    cohort = dataclasses.replace(cohort, root=str(Path(args.manifest).resolve().parent))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_mod.write_cohort_csv(cohort, out / "cohort.csv", ratios=ratios)
    total_pos = sum(1 for r in cohort.records if r.label == 1)
    total_neg = len(cohort.records) - total_pos
    print(f"cohort {pathology!r}: {len(cohort.records)} records", file=sys.stderr)
    for name in data_mod.SPLIT_NAMES:
        pos, neg = cohort.counts(name)
        print(f"split={name} pos={pos} neg={neg}")
    print(f"split=all pos={total_pos} neg={total_neg}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    net_config = _network_config(args, cfg)
    train_config, weighting = _train_config(args, cfg)

    cohort = data_mod.read_cohort_csv(args.cohort)
    n_pos, n_neg = cohort.counts("train")
    weights = class_weights(n_pos, n_neg) if weighting == "imbalance" else unit_weights(n_pos, n_neg)
    print(
        f"training on {n_pos + n_neg} images ({n_pos} positive), weights "
        f"w_p={weights.w_p:.5f} w_n={weights.w_n:.5f}",
        file=sys.stderr,
    )

    network = build_network(net_config, seed=train_config.seed)

    def progress(epoch: int, train_loss: float, val_loss: float) -> None:
        print(
            f"epoch {epoch}/{train_config.epochs}: train_loss={train_loss:.6f} val_loss={val_loss:.6f}",
            file=sys.stderr,
            flush=True,
        )

    checkpoint, history = train(network, cohort, train_config, weights, progress=progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(checkpoint.network, checkpoint.meta.epoch, checkpoint.meta.val_loss, ckpt_path, extra=checkpoint.meta.extra)
    export_history_csv(history, out / "history.csv")
    run = RunConfig(
        command="train",
        pathology=cohort.pathology,
        seed=train_config.seed,
        network=dataclasses.asdict(net_config),
        train={**dataclasses.asdict(train_config), "weighting": weighting},
        data={"uncertain": cohort.policy, "split_unit": cohort.split_unit, "cohort_seed": cohort.seed},
        paths={"cohort": str(Path(args.cohort).resolve())},
        out_dir=str(out.resolve()),
    )
    _write_run_config(run, out)
    print(f"best_epoch={history.best_epoch} val_loss={checkpoint.meta.val_loss!r} checkpoint={ckpt_path}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config_file(args.config)
    threshold = args.threshold if args.threshold is not None else cfg.get("threshold")
    if threshold is not None and not 0.0 <= threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0,1], got {threshold}")

    checkpoint = load_checkpoint(args.checkpoint)
    cohort = data_mod.read_cohort_csv(args.cohort)
    mode, stats = eval_mod.norm_from_meta(checkpoint.meta)
    if threshold is None:
        val_scored = eval_mod.score_split(checkpoint.network, cohort, "val", mode, stats)
        threshold = eval_mod.select_threshold(val_scored)
        _, _, macro = eval_mod.f1_scores(val_scored, threshold)
        print(f"selected threshold {threshold!r} on the validation split (macro-F1 {macro:.4f})", file=sys.stderr)

    report = eval_mod.evaluate(checkpoint, cohort, threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_block = {"network": dataclasses.asdict(checkpoint.network.config), "norm_mode": mode}
    (out / "report.json").write_text(
        eval_mod.report_json(report, cohort.pathology, checkpoint.meta.seed, config_block), encoding="utf-8"
    )
    eval_mod.write_roc_csv(report.curve, out / "roc.csv")
    title = f"ROC - {cohort.pathology}" if cohort.pathology else "ROC"
    eval_mod.write_roc_svg(report.curve, out / "roc.svg", title=title)
    run = RunConfig(
        command="evaluate",
        pathology=cohort.pathology,
        seed=checkpoint.meta.seed,
        network=dataclasses.asdict(checkpoint.network.config),
        train=None,
        data={"norm_mode": mode},
        paths={"cohort": str(Path(args.cohort).resolve()), "checkpoint": str(Path(args.checkpoint).resolve())},
        out_dir=str(out.resolve()),
    )
    (out / "eval_config.json").write_text(
        json.dumps(dataclasses.asdict(run), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"auc={report.auc!r} threshold={report.threshold!r} f1_macro={report.f1_macro!r}")
    return 0


def _cmd_params(args) -> int:
    cfg = _load_config_file(args.config)
    net_config = _network_config(args, cfg)
    counts = count_parameters(build_network(net_config, seed=0))
    print(f"trainable={counts.trainable} non_trainable={counts.non_trainable}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cxrnet", description="Chest radiograph classifier on a numpy autodiff core.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, help="seed for every random choice of this run")

    p = sub.add_parser("synth", help="generate a synthetic dataset", description="Write images plus a manifest CSV.")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--side", type=int, help="image side length")
    p.add_argument("--counts", help="images per split, e.g. 800,200,250")
    p.add_argument("--positive-fraction", type=float, dest="positive_fraction")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("prepare", help="extract and split a cohort", description="Manifest CSV to cohort.csv with split tags.")
    common(p)
    p.add_argument("--manifest", required=True, help="manifest CSV path")
    p.add_argument("--pathology", help="pathology column to extract")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--uncertain", choices=("exclude", "as_negative", "as_positive"))
    p.add_argument("--split-unit", choices=("per_image", "per_patient"), dest="split_unit")
    p.add_argument("--ratios", help="train,val,test fractions, e.g. 0.64,0.16,0.20")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train from a cohort", description="Write checkpoint.bin and history.csv.")
    common(p)
    p.add_argument("--cohort", required=True, help="cohort.csv path")
    p.add_argument("--preset", help="network preset name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--weighting", choices=("imbalance", "unit"), help="loss weighting (default imbalance)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint", description="Write report.json, roc.csv, and roc.svg.")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin path")
    p.add_argument("--cohort", required=True, help="cohort.csv path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, help="decision threshold; omitted = select on the validation split")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("params", help="print parameter counts", description="Trainable and non-trainable counts for a config.")
    common(p)
    p.add_argument("--preset", help="network preset name")
    p.set_defaults(func=_cmd_params)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ConfigError, TensorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
