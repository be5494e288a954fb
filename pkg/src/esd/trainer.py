"""The ESD training step and loop.

Each step evaluates all loss terms on one tape and backpropagates the
weighted sum once. Routing is enforced per term by choosing which parameter
groups enter that term's sub-graph as trainable leaves:

    term   groups receiving gradient
    l_di   trunk, head_di, c_di
    l_ds   trunk, head_ds, c_ds
    l_s    trunk, head_di, head_ds
    l_o    trunk, head_di           (c_ds used frozen)
    l_a    trunk, head_di, head_ds  (c_di used frozen)
    l_r    recon                    (disentangled inputs detached)
    l_t    recon                    (disentangler and both classifiers frozen)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import losses, nn
from .data import DatasetSplit, FeatureBatch, batches, minmax_normalize
from .errors import ConfigError, NumericError
from .losses import LossReport
from .model import (
    DISENTANGLER,
    DisentangledPair,
    ModelState,
    classify_di,
    disentangle,
    discriminate_ds,
    init_model,
    reconstruct,
)
from .nn import Node

ABLATIONS = ("full", "no_step3", "no_step2", "no_step2_no_step3")
TERMS = ("l_di", "l_ds", "l_s", "l_o", "l_a", "l_r", "l_t")
ROUTING = {
    "l_di": frozenset({"trunk", "head_di", "c_di"}),
    "l_ds": frozenset({"trunk", "head_ds", "c_ds"}),
    "l_s": frozenset({"trunk", "head_di", "head_ds"}),
    "l_o": frozenset({"trunk", "head_di"}),
    "l_a": frozenset({"trunk", "head_di", "head_ds"}),
    "l_r": frozenset({"recon"}),
    "l_t": frozenset({"recon"}),
}
NONE = frozenset()


@dataclass
class TrainConfig:
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

    def __post_init__(self):
        for name in ("alpha", "beta", "lr", "c1", "c2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"{name} must be a finite number, got {value!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError(f"c1 and c2 must be positive, got {self.c1}, {self.c2}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be non-negative, got {self.iterations}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be positive, got {self.hidden}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def step2(self) -> bool:
        return self.ablation in ("full", "no_step3")

    @property
    def step3(self) -> bool:
        return self.ablation in ("full", "no_step2")

    def enabled_terms(self) -> tuple[str, ...]:
        terms = ["l_di", "l_ds"]
        if self.step2:
            terms += ["l_s", "l_o", "l_a"]
        if self.step3:
            terms += ["l_r", "l_t"]
        return tuple(terms)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Objective:
    total: Node
    terms: dict[str, Node]
    hard_agreement: float

    def report(self, cfg: TrainConfig) -> LossReport:
        r = LossReport(**{name: node.item() for name, node in self.terms.items()})
        r.total = losses.combine_objective(r, cfg.alpha, cfg.beta)
        return r


class _Term:
    """Names the loss term being built so numeric failures say which one broke."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is NumericError:
            raise NumericError(f"non-finite value in loss term {self.name}: {exc}") from exc
        return False


def _probs(state: ModelState, f: Node) -> Node:
    return nn.softmax_rows(classify_di(state, f, live=NONE))


def _ssim_pair(pair: DisentangledPair, cfg: TrainConfig, bounds: dict, key: str) -> Node:
    di = minmax_normalize(pair.f_di, bounds.setdefault(f"{key}_di", _bounds(pair.f_di)))
    ds = minmax_normalize(pair.f_ds, bounds.setdefault(f"{key}_ds", _bounds(pair.f_ds)))
    return losses.ssim_similarity(di, ds, cfg.c1, cfg.c2)


def _bounds(x: Node) -> tuple[float, float]:
    return float(x.value.min()), float(x.value.max())


def _hard(state: ModelState, pair: DisentangledPair) -> float:
    return losses.agreement_loss(_probs(state, pair.f_ds), _probs(state, pair.f_di), mode="hard").item()


def _step1(state, ps, pt, labels, c_di_live, c_ds_live) -> dict[str, Node]:
    out = {}
    with _Term("l_di"):
        out["l_di"] = losses.cross_entropy(classify_di(state, ps.f_di, live=c_di_live), labels)
    with _Term("l_ds"):
        out["l_ds"] = losses.domain_bce(
            discriminate_ds(state, ps.f_ds, live=c_ds_live), discriminate_ds(state, pt.f_ds, live=c_ds_live)
        )
    return out


def _step2(state, ps, pt, cfg, bounds, prefix="") -> dict[str, Node]:
    out = {}
    with _Term("l_s"):
        s = nn.add(_ssim_pair(ps, cfg, bounds, prefix + "src"), _ssim_pair(pt, cfg, bounds, prefix + "tgt"))
        out["l_s"] = nn.scale(s, 0.5)
    with _Term("l_o"):
        out["l_o"] = losses.opposite_bce(
            discriminate_ds(state, ps.f_di, live=NONE), discriminate_ds(state, pt.f_di, live=NONE)
        )
    with _Term("l_a"):
        out["l_a"] = nn.add(
            losses.agreement_loss(_probs(state, ps.f_ds), _probs(state, ps.f_di)),
            losses.agreement_loss(_probs(state, pt.f_ds), _probs(state, pt.f_di)),
        )
    return out


def _detached(pair: DisentangledPair) -> DisentangledPair:
    tape = pair.f_di.tape
    return DisentangledPair(tape.constant(pair.f_di.value), tape.constant(pair.f_ds.value))


def build_objective(
    state: ModelState,
    src: FeatureBatch,
    tgt: FeatureBatch,
    cfg: TrainConfig,
    terms: Iterable[str] | None = None,
    bounds: dict | None = None,
    tape: nn.Tape | None = None,
) -> Objective:
    """Evaluate every enabled loss term and their weighted sum on one tape.

    ``terms`` restricts which enabled terms contribute to the returned total
    (all values are still reported). ``bounds`` caches the min-max
    normalization ranges by name; pass a dict filled by an earlier call to
    hold them fixed.
    """
    enabled = cfg.enabled_terms()
    active = set(enabled if terms is None else terms)
    unknown = active - set(TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}")
    bounds = {} if bounds is None else bounds
    tape = nn.Tape() if tape is None else tape
    xs, xt = tape.constant(src.features), tape.constant(tgt.features)

    ps = disentangle(state, xs, live=DISENTANGLER)
    pt = disentangle(state, xt, live=DISENTANGLER)
    nodes = _step1(state, ps, pt, src.labels, frozenset({"c_di"}), frozenset({"c_ds"}))
    if cfg.step2:
        nodes.update(_step2(state, ps, pt, cfg, bounds))

    if cfg.step3:
        with _Term("l_r"):
            rs = reconstruct(state, _detached(ps), live=frozenset({"recon"}))
            rt = reconstruct(state, _detached(pt), live=frozenset({"recon"}))
            nodes["l_r"] = nn.add(losses.reconstruction_mse(rs, xs), losses.reconstruction_mse(rt, xt))
        with _Term("l_t"):
            qs = disentangle(state, rs, live=NONE)
            qt = disentangle(state, rt, live=NONE)
            repeat = _step1(state, qs, qt, src.labels, NONE, NONE)
            if cfg.step2:
                repeat.update(_step2(state, qs, qt, cfg, bounds, prefix="recon_"))
            l_t = repeat["l_di"]
            for name in ("l_ds", "l_s", "l_o", "l_a"):
                if name in repeat:
                    l_t = nn.add(l_t, repeat[name])
            nodes["l_t"] = l_t

    zero = tape.constant(0.0)
    for name in TERMS:
        nodes.setdefault(name, zero)

    def group(names, weight):
        picked = [nodes[n] for n in names if n in active and n in enabled]
        if not picked:
            return None
        acc = picked[0]
        for node in picked[1:]:
            acc = nn.add(acc, node)
        return acc if weight == 1.0 else nn.scale(acc, weight)

    parts = [
        p
        for p in (
            group(("l_di", "l_ds"), 1.0),
            group(("l_s", "l_o", "l_a"), cfg.alpha),
            group(("l_r", "l_t"), cfg.beta),
        )
        if p is not None
    ]
    total = parts[0] if parts else zero
    for p in parts[1:]:
        total = nn.add(total, p)

    hard = 0.5 * (_hard(state, ps) + _hard(state, pt))
    return Objective(total, nodes, hard)


def train_step(
    state: ModelState,
    src: FeatureBatch,
    tgt: FeatureBatch,
    cfg: TrainConfig,
    terms: Iterable[str] | None = None,
) -> LossReport:
    """One joint backward over the weighted objective, then one SGD update."""
    obj = build_objective(state, src, tgt, cfg, terms)
    report = obj.report(cfg)
    report.hard_agreement = obj.hard_agreement
    for name in TERMS:
        if not math.isfinite(getattr(report, name)):
            raise NumericError(f"loss term {name} is not finite")
    obj.total.tape.backward(obj.total)
    nn.sgd_step(state.param_groups(), cfg.lr)
    return report


def seeds_for(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Independent streams for weight init and batch order, both from one seed."""
    init, order = np.random.SeedSequence(seed).spawn(2)
    return init, order


def init_for(split: DatasetSplit, cfg: TrainConfig) -> ModelState:
    init_seq, _ = seeds_for(cfg.seed)
    return init_model(split.d, split.K, np.random.default_rng(init_seq), hidden=cfg.hidden)


def train(
    split: DatasetSplit,
    cfg: TrainConfig,
    observer: Callable[[int, LossReport], None] | None = None,
    terms: Iterable[str] | None = None,
    state: ModelState | None = None,
) -> tuple[ModelState, list[LossReport]]:
    """Run ``cfg.iterations`` optimizer steps. Deterministic for a given seed.

    ``observer`` is called synchronously with ``(step, report)`` after every
    step; it must not mutate the model.
    """
    state = state or init_for(split, cfg)
    reports: list[LossReport] = []
    if cfg.iterations == 0:
        return state, reports
    _, order_seq = seeds_for(cfg.seed)
    stream = batches(split, cfg.batch_size, order_seq.generate_state(1)[0])
    for step in range(1, cfg.iterations + 1):
        src, tgt = next(stream)
        report = train_step(state, src, tgt, cfg, terms)
        reports.append(report)
        if observer is not None:
            observer(step, report)
    return state, reports


# ---- metrics log ----

METRIC_COLUMNS = ("step",) + TERMS + ("total",)


def metrics_line(step: int, report: LossReport) -> str:
    return ",".join([str(step)] + [format(v, ".17g") for v in report.values()])


def write_metrics(path: str | Path, reports: list[LossReport]) -> None:
    lines = [metrics_line(i, r) for i, r in enumerate(reports, start=1)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            cells = line.split(",")
            rows.append({name: float(c) for name, c in zip(METRIC_COLUMNS, cells)})
    return rows
