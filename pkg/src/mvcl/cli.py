"""Command-line interface: synth, train, eval, gradcheck.

Configuration comes from an optional JSON file with a strict schema; any
unknown key is rejected before any compute starts. Command-line flags
override file values. All randomness flows from the single configured
seed, and no command mutates its input files.
"""

import os

# Cap worker threads before numpy is imported anywhere in the process.
# BLAS pools are the package's only internal parallelism.
_threads = os.environ.get("MVCL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig, generate_synthetic, read_dataset, write_dataset
from .errors import ConfigError
from .pipeline import (
    STAGE_IDS,
    ModelConfig,
    StagePlan,
    StageSettings,
    evaluate_multimodal,
    load_checkpoint,
    restore_model,
    run_pipeline,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
    train_classifier,
)
from .rng import RngState
from .verification import format_check_table, run_gradient_checks

PRESET_BATCH = {"desk": 16, "paper": 128}

SPLIT_FILES = {"train": "train.mvcl", "val": "val.mvcl", "test": "test.mvcl"}

_STAGE_FLAGS = ("1", "2", "3", "cls", "all")


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out: str = "mvcl-out"
    dataset: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    batch_size: int | None = None
    label_granularity: float = 0.1
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.preset not in PRESET_BATCH:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in 64 bits")

    def stage_plan(self) -> StagePlan:
        defaults = {"stage1": StageSettings(epochs=20), "stage2": StageSettings(epochs=20),
                    "stage3": StageSettings(epochs=20), "classifier": StageSettings(epochs=30)}
        for name, values in self.stages.items():
            if name not in defaults:
                raise ConfigError(f"unknown stage {name!r} in config")
            unknown = set(values) - {"epochs", "lr"}
            if unknown:
                raise ConfigError(f"unknown stage keys {sorted(unknown)}")
            defaults[name] = replace(defaults[name], **values)
        return StagePlan(
            stage1=defaults["stage1"], stage2=defaults["stage2"],
            stage3=defaults["stage3"], classifier=defaults["classifier"],
            batch_size=self.batch_size or PRESET_BATCH[self.preset],
            clip_norm=self.clip_norm, label_granularity=self.label_granularity,
        )


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "synth" in raw:
        synth_raw = raw["synth"]
        synth_allowed = {f.name for f in fields(SynthConfig)}
        synth_unknown = set(synth_raw) - synth_allowed
        if synth_unknown:
            raise ConfigError(f"unknown synth keys {sorted(synth_unknown)}")
        if "dims" in synth_raw:
            synth_raw["dims"] = {m: tuple(v) for m, v in synth_raw["dims"].items()}
        raw["synth"] = SynthConfig(**synth_raw)
    if "model" in raw:
        model_unknown = set(raw["model"]) - set(ModelConfig.MODEL_PRESETS["desk"])
        if model_unknown:
            raise ConfigError(f"unknown model keys {sorted(model_unknown)}")
    return RunConfig(**raw)


def _apply_flags(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    if args.preset is not None:
        config.preset = args.preset
        if config.preset not in PRESET_BATCH:
            raise ConfigError(f"unknown preset {config.preset!r}")
    if getattr(args, "dataset", None) is not None:
        config.dataset = args.dataset
    return config


def _load_splits(dataset_dir: str):
    base = Path(dataset_dir)
    splits = {}
    header = None
    for split, filename in SPLIT_FILES.items():
        path = base / filename
        if not path.exists():
            raise ConfigError(f"dataset directory is missing {filename}")
        split_header, records = read_dataset(path)
        splits[split] = records
        header = header or split_header

    @dataclass
    class _Splits:
        train: list
        val: list
        test: list

    return header, _Splits(**splits)


def cmd_synth(config: RunConfig) -> int:
    synth = replace(config.synth, seed=config.seed)
    dataset = generate_synthetic(synth)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, filename in SPLIT_FILES.items():
        header = synth.header(split)
        write_dataset(out / filename, header, dataset.split(split))
        dims = " ".join(f"{m}:{header.dims[m][0]}x{header.dims[m][1]}" for m in ("t", "a", "v"))
        print(f"{split}: n={header.n} task={header.task} classes={header.num_classes} "
              f"multi_task={int(header.multi_task)} {dims}")
    return 0


def _print_metrics(report, **extra) -> None:
    print(report.to_json_line(**extra))


def cmd_train(config: RunConfig, stage: str) -> int:
    if config.dataset is None:
        raise ConfigError("train requires --dataset (a directory written by synth)")
    header, splits = _load_splits(config.dataset)
    model_config = ModelConfig.for_preset(config.preset, header, config.model)
    plan = config.stage_plan()
    rng = RngState(config.seed)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    def ckpt_path(name: str) -> Path:
        return out / f"{name}.mvck"

    def load_prior(name: str):
        path = ckpt_path(name)
        if not path.exists():
            raise ConfigError(f"stage checkpoint {path} not found; run earlier stages first")
        return load_checkpoint(path, expected_fingerprint=model_config.fingerprint())

    if stage == "all":
        result = run_pipeline(splits, plan, model_config, rng)
        for name, ckpt in result.checkpoints.items():
            save_checkpoint(ckpt_path(name), ckpt)
        report = result.reports["classifier_multimodal"]
        print(f"baseline mae={report.baseline.mae:.4f}", file=sys.stderr)
        _print_metrics(result.metrics, seed=config.seed, preset=config.preset, split="test")
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(result.metrics.to_json_line(seed=config.seed, preset=config.preset,
                                                 split="test") + "\n")
        return 0
    if stage == "1":
        result = run_stage1(splits, plan, model_config, rng)
    elif stage == "2":
        result = run_stage2(splits, plan, model_config, load_prior("stage1"))
    elif stage == "3":
        result = run_stage3(splits, plan, model_config, load_prior("stage2"))
    else:  # cls
        result = train_classifier(splits, plan, model_config, load_prior("stage3"),
                                  "multimodal")
    name = {"1": "stage1", "2": "stage2", "3": "stage3", "cls": "final"}[stage]
    save_checkpoint(ckpt_path(name), result.checkpoint)
    if stage == "cls":
        _print_metrics(result.report.final, seed=config.seed, preset=config.preset,
                       split="test")
    else:
        print(f"{name}: checkpoint written to {ckpt_path(name)}")
    return 0


def cmd_eval(config: RunConfig, checkpoint_path: str) -> int:
    if config.dataset is None:
        raise ConfigError("eval requires --dataset (a single .mvcl file)")
    header, records = read_dataset(config.dataset)
    model_config = ModelConfig.for_preset(config.preset, header, config.model)
    ckpt = load_checkpoint(checkpoint_path,
                           expected_fingerprint=model_config.fingerprint())
    model = restore_model(model_config, ckpt)
    report = evaluate_multimodal(model, records)
    _print_metrics(report, seed=config.seed, preset=config.preset,
                   split=Path(config.dataset).stem)
    return 0


def cmd_gradcheck(config: RunConfig) -> int:
    results = run_gradient_checks(config.seed)
    print(format_check_table(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset_help=None):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--preset", choices=sorted(PRESET_BATCH), default=None)
        if dataset_help:
            p.add_argument("--dataset", default=None, help=dataset_help)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)

    p_train = sub.add_parser("train", help="run the training pipeline")
    common(p_train, dataset_help="directory holding train/val/test.mvcl")
    p_train.add_argument("--stage", choices=_STAGE_FLAGS, default="all")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, dataset_help="a single .mvcl file")
    p_eval.add_argument("--checkpoint", required=True)

    p_check = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    common(p_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _apply_flags(load_run_config(args.config), args)
    except Exception as exc:  # bad config is a usage problem, not a runtime one
        parser.error(str(exc))
    if args.command in ("train", "eval") and config.dataset is None:
        parser.error(f"{args.command} requires --dataset")
    try:
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config, args.stage)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint)
        return cmd_gradcheck(config)
    except Exception as exc:  # noqa: BLE001 - single reporting point for exit codes
        stage = getattr(args, "stage", None)
        where = f" (stage {stage})" if args.command == "train" and stage else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
