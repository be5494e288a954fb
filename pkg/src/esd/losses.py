"""Loss terms of the ESD objective, built from tape primitives.

Every function accepts either :class:`~esd.nn.Node` objects or plain arrays
(which are placed on a fresh tape) and returns a 1x1 node, so the same code
serves training, evaluation and gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import DataError, DimensionError
from .nn import Node

PROB_EPS = 1e-12


def _nodes(*xs):
    tape = next((x.tape for x in xs if isinstance(x, Node)), None)
    tape = nn.Tape() if tape is None else tape
    return [x if isinstance(x, Node) else tape.constant(x) for x in xs]


def _one_minus(p: Node) -> Node:
    return nn.add_const(nn.scale(p, -1.0), 1.0)


def _clamp(p: Node) -> Node:
    return nn.clip(p, PROB_EPS, 1.0 - PROB_EPS)


@dataclass(frozen=True)
class SsimStats:
    mu1: float
    mu2: float
    var1: float
    var2: float
    cov: float
    c1: float
    c2: float


@dataclass
class LossReport:
    l_di: float = 0.0
    l_ds: float = 0.0
    l_s: float = 0.0
    l_o: float = 0.0
    l_a: float = 0.0
    l_r: float = 0.0
    l_t: float = 0.0
    total: float = 0.0
    # argmax-agreement fraction averaged over both domains; logged, never differentiated
    hard_agreement: float = field(default=float("nan"), compare=False)

    COLUMNS = ("l_di", "l_ds", "l_s", "l_o", "l_a", "l_r", "l_t", "total")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.COLUMNS)


def cross_entropy(logits, labels: Sequence[int]) -> Node:
    (logits,) = _nodes(logits)
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.size} labels for {n} rows")
    if n == 0:
        raise DataError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"cross_entropy: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = nn.pick(nn.log_softmax_rows(logits), labels)
    return nn.scale(nn.mean_all(picked), -1.0)


def _check_probs(name: str, *ps: Node) -> None:
    for p in ps:
        if p.value.size == 0:
            raise DataError(f"{name}: empty batch")
        if p.shape[1] != 1:
            raise DimensionError(f"{name}: expected an n x 1 column of probabilities, got {p.shape}")


def domain_bce(p_source, p_target) -> Node:
    """Discriminator loss with source labelled 1 and target labelled 0."""
    p_source, p_target = _nodes(p_source, p_target)
    _check_probs("domain_bce", p_source, p_target)
    s = nn.mean_all(nn.log(_clamp(p_source)))
    t = nn.mean_all(nn.log(_one_minus(_clamp(p_target))))
    return nn.scale(nn.add(s, t), -0.5)


def opposite_bce(p_di_source, p_di_target) -> Node:
    """Discriminator loss with the labels flipped: source 0, target 1."""
    p_di_source, p_di_target = _nodes(p_di_source, p_di_target)
    _check_probs("opposite_bce", p_di_source, p_di_target)
    s = nn.mean_all(nn.log(_one_minus(_clamp(p_di_source))))
    t = nn.mean_all(nn.log(_clamp(p_di_target)))
    return nn.scale(nn.add(s, t), -0.5)


def ssim_stats(b1, b2, c1: float, c2: float) -> SsimStats:
    b1, b2 = np.asarray(b1, dtype=np.float64), np.asarray(b2, dtype=np.float64)
    d1, d2 = b1 - b1.mean(), b2 - b2.mean()
    return SsimStats(
        float(b1.mean()), float(b2.mean()),
        float((d1 * d1).mean()), float((d2 * d2).mean()), float((d1 * d2).mean()),
        c1, c2,
    )


def ssim_similarity(b1, b2, c1: float = 1e-4, c2: float = 9e-4) -> Node:
    """Batch-level structural similarity, one scalar for the whole pair.

    Means, variances and the cross-covariance are population statistics over
    all entries of each batch.
    """
    b1, b2 = _nodes(b1, b2)
    if b1.shape != b2.shape:
        raise DimensionError(f"ssim_similarity: shapes {b1.shape} and {b2.shape} differ")
    if b1.value.size < 2:
        raise DimensionError("ssim_similarity needs at least two elements per batch")
    if c1 <= 0 or c2 <= 0:
        raise DataError("ssim_similarity: stabilizers c1 and c2 must be positive")
    mu1, mu2 = nn.mean_all(b1), nn.mean_all(b2)
    d1, d2 = nn.sub(b1, mu1), nn.sub(b2, mu2)
    var1, var2 = nn.mean_all(nn.square(d1)), nn.mean_all(nn.square(d2))
    cov = nn.mean_all(nn.mul(d1, d2))
    luminance = nn.add_const(nn.scale(nn.mul(mu1, mu2), 2.0), c1)
    structure = nn.add_const(nn.scale(cov, 2.0), c2)
    lum_den = nn.add_const(nn.add(nn.square(mu1), nn.square(mu2)), c1)
    var_den = nn.add_const(nn.add(var1, var2), c2)
    return nn.absolute(nn.div(nn.mul(luminance, structure), nn.mul(lum_den, var_den)))


def agreement_loss(p_via_ds, p_via_di, mode: str = "soft") -> Node:
    """Prediction agreement between the classifier on f_ds and on f_di.

    ``soft`` is the mean row-wise inner product of the two probability rows
    and is differentiable. ``hard`` is the fraction of rows whose argmax
    matches (ties go to the lowest class index); it is returned as a
    constant node and carries no gradient.
    """
    p_via_ds, p_via_di = _nodes(p_via_ds, p_via_di)
    if p_via_ds.shape != p_via_di.shape:
        raise DimensionError(f"agreement_loss: shapes {p_via_ds.shape} and {p_via_di.shape} differ")
    if mode == "soft":
        return nn.mean_all(nn.sum_rows(nn.mul(p_via_ds, p_via_di)))
    if mode == "hard":
        same = np.argmax(p_via_ds.value, axis=1) == np.argmax(p_via_di.value, axis=1)
        return p_via_ds.tape.constant(same.mean())
    raise DataError(f"agreement_loss: mode must be 'soft' or 'hard', got {mode!r}")


def reconstruction_mse(recon, original) -> Node:
    """Mean over rows of the squared L2 distance."""
    recon, original = _nodes(recon, original)
    if recon.shape != original.shape:
        raise DimensionError(f"reconstruction_mse: shapes {recon.shape} and {original.shape} differ")
    n = recon.shape[0]
    return nn.scale(nn.sum_all(nn.square(nn.sub(recon, original))), 1.0 / n)


def combine_objective(report: LossReport, alpha: float, beta: float) -> float:
    step1 = report.l_di + report.l_ds
    step2 = report.l_s + report.l_o + report.l_a
    step3 = report.l_r + report.l_t
    return step1 + alpha * step2 + beta * step3
