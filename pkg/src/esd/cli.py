"""Command-line entry point: ``esd {gen-synth,train,eval,ablate,project}``.

Settings come from a flat ``key = value`` config file (``--config``) and
are overridden by flags. Every run writes ``manifest.cfg`` with all values
resolved, which can be fed back as ``--config`` to repeat the run.

Exit codes: 0 ok, 1 runtime/numeric failure, 2 usage/config error,
3 data/format error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import DatasetSplit, FeatureSet, blob_spec, gen_synthetic, load_features, save_features
from .errors import ConfigError, DataError, EsdError, EvalError
from .evaluation import ablate, evaluate, project_2d
from .model import disentangle, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train, write_metrics

COMMANDS = ("gen-synth", "train", "eval", "ablate", "project")
PATH_KEYS = ("source", "target", "checkpoint", "features", "out")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))

CHECKPOINT_FILE = "checkpoint.esdm"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.cfg"
EVAL_FILE = "eval.txt"


@dataclass
class RunConfig:
    command: str = ""
    alpha: float = 0.3
    beta: float = 0.1
    lr: float = 0.001
    batch_size: int = 32
    iterations: int = 100
    c1: float = 1e-4
    c2: float = 9e-4
    seed: int = 0
    ablation: str = "full"
    hidden: int = 512
    source: str = ""
    target: str = ""
    checkpoint: str = ""
    features: str = ""
    out: str = "esd_out"
    seeds: str = "0,1,2,3,4"
    workers: int = 1
    space: str = "di"
    format: str = "binary"
    synth_k: int = 3
    synth_d: int = 20
    synth_shift: float = 2.0
    synth_sigma: float = 1.0
    synth_margin: float = 2.2
    synth_samples: int = 200

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in TRAIN_KEYS})

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.seeds!r}") from None


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: Path | None = None) -> dict[str, object]:
    """Parse ``key = value`` lines. ``#`` starts a comment; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        value = _coerce(key, raw)
        if key in PATH_KEYS and value and base is not None:
            value = str((base / str(value)).resolve())
        values[key] = value
    return values


def manifest_text(cfg: RunConfig) -> str:
    lines = [f"# esd {__version__} run manifest, format 1"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def print_versioned_manifest(out_dir: str | Path, cfg: RunConfig) -> Path:
    """Write the fully resolved run configuration to ``out_dir/manifest.cfg``."""
    path = Path(out_dir) / MANIFEST_FILE
    path.write_text(manifest_text(cfg))
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--ablation", choices=("full", "no_step3", "no_step2", "no_step2_no_step3"))
    common.add_argument("--hidden", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--source", help="source feature file (ESDF or text)")
    common.add_argument("--target", help="target feature file (ESDF or text)")
    common.add_argument("--format", choices=("binary", "text"), help="feature file format for gen-synth")
    synth = common.add_argument_group("synthetic data (used when no --source/--target is given)")
    synth.add_argument("--synth-k", dest="synth_k", type=int, help="number of classes")
    synth.add_argument("--synth-d", dest="synth_d", type=int, help="feature width")
    synth.add_argument("--synth-shift", dest="synth_shift", type=float, help="target shift in units of sigma")
    synth.add_argument("--synth-sigma", dest="synth_sigma", type=float, help="per-coordinate noise std")
    synth.add_argument("--synth-margin", dest="synth_margin", type=float, help="class mean separation factor")
    synth.add_argument("--synth-samples", dest="synth_samples", type=int, help="samples per class per domain")

    parser = argparse.ArgumentParser(prog="esd", description="Enhanced separable disentanglement on feature vectors")
    parser.add_argument("--version", action="version", version=f"esd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synth", parents=[common], help="write synthetic source/target ESDF files")
    sub.add_parser("train", parents=[common], help="train and write checkpoint, metrics, manifest")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on labelled target data")
    ev.add_argument("--checkpoint")
    ab = sub.add_parser("ablate", parents=[common], help="run the four-variant ablation")
    ab.add_argument("--seeds", help="comma-separated seed list")
    ab.add_argument("--workers", type=int)
    pr = sub.add_parser("project", parents=[common], help="write 2-D PCA coordinates")
    pr.add_argument("--features")
    pr.add_argument("--checkpoint")
    pr.add_argument("--space", choices=("raw", "di", "ds"))
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    values: dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, base=path.resolve().parent))
    for key in FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None and key != "command":
            values[key] = str(Path(flag).resolve()) if key in PATH_KEYS else flag
    values["command"] = args.command
    if "out" not in values:
        values["out"] = str(Path(RunConfig.out).resolve())
    cfg = RunConfig(**values)
    if cfg.space not in ("raw", "di", "ds"):
        raise ConfigError(f"space must be raw, di or ds, got {cfg.space!r}")
    cfg.train_config()
    return cfg


# ---- subcommands ----

def _synthetic_split(cfg: RunConfig) -> DatasetSplit:
    spec = blob_spec(
        K=cfg.synth_k,
        d=cfg.synth_d,
        shift_sigmas=cfg.synth_shift,
        n_per_class=cfg.synth_samples,
        seed=cfg.seed,
        sigma=cfg.synth_sigma,
        margin=cfg.synth_margin,
    )
    return gen_synthetic(spec)


def _load_split(cfg: RunConfig) -> DatasetSplit:
    if not cfg.source and not cfg.target:
        return _synthetic_split(cfg)
    if not (cfg.source and cfg.target):
        raise ConfigError("give both source and target feature files, or neither for synthetic data")
    return DatasetSplit.from_sets(load_features(cfg.source), load_features(cfg.target))


def _cmd_gen_synth(cfg: RunConfig, out: Path) -> None:
    split = _synthetic_split(cfg)
    save_features(out / "source.esdf", FeatureSet(split.source_features, split.source_labels, split.K), cfg.format)
    save_features(out / "target.esdf", FeatureSet(split.target_features, split.target_labels, split.K), cfg.format)
    print(f"wrote {out / 'source.esdf'} and {out / 'target.esdf'} ({split.n_s}+{split.n_t} samples, d={split.d})")


def _cmd_train(cfg: RunConfig, out: Path) -> None:
    split = _load_split(cfg)
    state, reports = train(split, cfg.train_config())
    save_checkpoint(state, out / CHECKPOINT_FILE)
    write_metrics(out / METRICS_FILE, reports)
    if split.target_labels is not None:
        (out / EVAL_FILE).write_text(evaluate(state, split).to_text())
    final = reports[-1].total if reports else float("nan")
    print(f"trained {len(reports)} steps, final objective {final:.6g}; outputs in {out}")


def _cmd_eval(cfg: RunConfig, out: Path) -> None:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if not (cfg.source and cfg.target):
        raise ConfigError("eval needs --source and a labelled --target feature file")
    state = load_checkpoint(cfg.checkpoint)
    split = DatasetSplit.from_sets(load_features(cfg.source), load_features(cfg.target), K=state.K)
    if split.d != state.feature_dim:
        raise DataError(f"feature width {split.d} does not match checkpoint feature_dim {state.feature_dim}")
    text = evaluate(state, split).to_text()
    (out / EVAL_FILE).write_text(text)
    sys.stdout.write(text)


def _cmd_ablate(cfg: RunConfig, out: Path) -> None:
    split = _load_split(cfg)
    table = ablate(split, cfg.train_config(), cfg.seed_list(), workers=cfg.workers)
    csv = table.to_csv()
    (out / "ablation.csv").write_text(csv)
    sys.stdout.write(csv)


def _cmd_project(cfg: RunConfig, out: Path) -> None:
    if not cfg.features:
        raise ConfigError("project needs --features")
    fs = load_features(cfg.features)
    x = fs.features
    if cfg.space != "raw":
        if not cfg.checkpoint:
            raise ConfigError(f"space {cfg.space!r} needs --checkpoint (or use --space raw)")
        state = load_checkpoint(cfg.checkpoint)
        pair = disentangle(state, x)
        x = (pair.f_di if cfg.space == "di" else pair.f_ds).value
    path = out / "projection.csv"
    project_2d(x, fs.labels, path)
    print(f"wrote {x.shape[0]} points to {path}")


HANDLERS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "project": _cmd_project,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            print_versioned_manifest(out, cfg)
        except OSError as exc:
            print(f"esd: cannot write to output directory {out}: {exc.strerror}", file=sys.stderr)
            return 1
        HANDLERS[cfg.command](cfg, out)
    except ConfigError as exc:
        print(f"esd: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, EvalError) as exc:
        print(f"esd: data error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"esd: data error: no such file {exc.filename}", file=sys.stderr)
        return 3
    except (EsdError, OSError) as exc:
        print(f"esd: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
