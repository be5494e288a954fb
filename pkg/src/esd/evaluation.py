"""Target-domain evaluation, the four-variant ablation and 2-D projection export."""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, nn
from .data import DatasetSplit
from .errors import ConfigError, DataError, EvalError
from .model import ModelState, classify_di, disentangle, discriminate_ds
from .trainer import ABLATIONS, TrainConfig, train

VARIANT_LABELS = {
    "full": "ESD",
    "no_step3": "ESD-III",
    "no_step2": "ESD-II",
    "no_step2_no_step3": "ESD-II-III",
}

# Desk-scale benchmark used by the acceptance suite: default loss weights and batch
# size, but a larger step budget that moves a freshly initialized network.
BENCHMARK = dict(alpha=0.3, beta=0.1, batch_size=32, lr=0.05, iterations=300, hidden=512)


@dataclass
class EvalReport:
    target_accuracy: float
    per_class_accuracy: list[float]
    mean_per_class: float
    discriminator_accuracy: float
    hard_agreement: float

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                text = ",".join(format(v, ".17g") for v in value)
            else:
                text = format(value, ".17g")
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key == "per_class_accuracy":
                values[key] = [float(v) for v in raw.split(",") if v]
            else:
                values[key] = float(raw)
        return cls(**values)


def _argmax_di(state: ModelState, x: np.ndarray) -> np.ndarray:
    pair = disentangle(state, x)
    return np.argmax(classify_di(state, pair.f_di).value, axis=1)


def _hard_agreement(state: ModelState, x: np.ndarray) -> float:
    pair = disentangle(state, x)
    p_ds = nn.softmax_rows(classify_di(state, pair.f_ds))
    p_di = nn.softmax_rows(classify_di(state, pair.f_di))
    return losses.agreement_loss(p_ds, p_di, mode="hard").item()


def evaluate(state: ModelState, split: DatasetSplit) -> EvalReport:
    """Score the model on labelled target data.

    Classes missing from the target labels score 0 in the per-class list.
    The discriminator counts a row as source when its probability is >= 0.5.
    """
    if split.target_labels is None:
        raise EvalError("evaluation needs target labels")
    labels = split.target_labels
    pred = _argmax_di(state, split.target_features)
    correct = pred == labels
    per_class = []
    for k in range(state.K):
        mask = labels == k
        per_class.append(float(correct[mask].mean()) if mask.any() else 0.0)

    p_src = discriminate_ds(state, disentangle(state, split.source_features).f_ds).value[:, 0]
    p_tgt = discriminate_ds(state, disentangle(state, split.target_features).f_ds).value[:, 0]
    hits = np.count_nonzero(p_src >= 0.5) + np.count_nonzero(p_tgt < 0.5)
    hard = 0.5 * (_hard_agreement(state, split.source_features) + _hard_agreement(state, split.target_features))
    return EvalReport(
        target_accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        mean_per_class=float(np.mean(per_class)),
        discriminator_accuracy=hits / (split.n_s + split.n_t),
        hard_agreement=hard,
    )


# ---- ablation ----

@dataclass
class AblationRow:
    variant: str
    label: str
    accuracies: list[float]
    mean_report: EvalReport

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_csv(self) -> str:
        header = "variant,mean_acc,std_acc," + ",".join(f"seed_{s}" for s in self.seeds)
        lines = [header]
        for r in self.rows:
            cells = [r.variant, format(r.mean_acc, ".17g"), format(r.std_acc, ".17g")]
            cells += [format(a, ".17g") for a in r.accuracies]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _mean_report(reports: list[EvalReport]) -> EvalReport:
    per_class = np.mean([r.per_class_accuracy for r in reports], axis=0).tolist()
    return EvalReport(
        target_accuracy=float(np.mean([r.target_accuracy for r in reports])),
        per_class_accuracy=per_class,
        mean_per_class=float(np.mean(per_class)),
        discriminator_accuracy=float(np.mean([r.discriminator_accuracy for r in reports])),
        hard_agreement=float(np.mean([r.hard_agreement for r in reports])),
    )


def _run_variant(split: DatasetSplit, cfg: TrainConfig) -> EvalReport:
    state, _ = train(split, cfg)
    return evaluate(state, split)


def ablate(split: DatasetSplit, cfg: TrainConfig, seeds: Sequence[int], workers: int = 1) -> AblationTable:
    """Train every ablation variant for every seed and tabulate target accuracy.

    Rows come back in the fixed order ESD, ESD-III, ESD-II, ESD-II-III
    regardless of ``workers``.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    if split.target_labels is None:
        raise EvalError("ablation needs target labels for scoring")
    jobs = [(v, replace(cfg, ablation=v, seed=s)) for v in ABLATIONS for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_variant, [split] * len(jobs), [c for _, c in jobs]))
    else:
        reports = [_run_variant(split, c) for _, c in jobs]
    rows = []
    for i, variant in enumerate(ABLATIONS):
        chunk = reports[i * len(seeds) : (i + 1) * len(seeds)]
        rows.append(
            AblationRow(variant, VARIANT_LABELS[variant], [r.target_accuracy for r in chunk], _mean_report(chunk))
        )
    return AblationTable(rows, seeds)


# ---- 2-D projection ----

def top2_directions(cov: np.ndarray, tol: float = 1e-13, max_iter: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    """Leading two eigenpairs of a symmetric PSD matrix by orthogonal iteration.

    Returns ``(eigenvalues, vectors)`` with vectors as columns, largest first,
    each signed so its largest-magnitude entry is positive.
    """
    d = cov.shape[0]
    k = min(2, d)
    # deterministic start that is not orthogonal to any axis
    q = np.linalg.qr(np.cos(np.arange(1, d * k + 1, dtype=np.float64).reshape(d, k)) + 1.0)[0]
    prev = None
    for _ in range(max_iter):
        q, _ = np.linalg.qr(cov @ q)
        ritz = q.T @ cov @ q
        if prev is not None and np.max(np.abs(ritz - prev)) <= tol * max(1.0, np.abs(ritz).max()):
            break
        prev = ritz
    # Rayleigh-Ritz on the converged 2-D subspace
    small = q.T @ cov @ q
    vals, vecs = np.linalg.eigh(small)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], q @ vecs[:, order]
    for j in range(k):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, vecs


def pca_2d(features: np.ndarray) -> np.ndarray:
    x = nn.as_matrix(features)
    if x.shape[0] < 3:
        raise DataError(f"projection needs at least 3 samples, got {x.shape[0]}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / x.shape[0]
    if not np.any(cov):
        warnings.warn("zero-variance data: projection is degenerate, emitting axis-aligned coordinates")
        out = np.zeros((x.shape[0], 2))
        width = min(2, x.shape[1])
        out[:, :width] = centered[:, :width]
        return out
    _, vecs = top2_directions(cov)
    coords = centered @ vecs
    if coords.shape[1] == 1:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return coords


def project_2d(features: np.ndarray, labels: Sequence[int] | None, path: str | Path) -> np.ndarray:
    """Write ``x,y,label`` lines (label -1 when unknown) and return the coordinates."""
    coords = pca_2d(features)
    n = coords.shape[0]
    if labels is None:
        labels = [-1] * n
    if len(labels) != n:
        raise DataError(f"{len(labels)} labels for {n} samples")
    lines = [f"{format(x, '.17g')},{format(y, '.17g')},{int(lab)}" for (x, y), lab in zip(coords, labels)]
    Path(path).write_text("".join(line + "\n" for line in lines))
    return coords
