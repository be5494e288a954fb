"""ESD networks: disentangler, invariant classifier, domain discriminator, reconstructor.

Layout for ``feature_dim=d``, ``hidden=h``, ``K`` classes::

    trunk    d -> d      relu    shared by both branches
    head_di  d -> h      relu    -> f_di
    head_ds  d -> h      relu    -> f_ds
    c_di     h -> K              logits
    c_ds     h -> 1      sigmoid domain probability (source = 1)
    recon    2h -> h     relu, h -> d

With the default sizes (d=1000, h=512) this gives 1000 -> 1000 -> 512 per
branch and a 1024 -> 512 -> 1000 reconstructor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .errors import DimensionError, FormatError
from .nn import Node, ParamGroup, Tape

GROUP_NAMES = ("trunk", "head_di", "head_ds", "c_di", "c_ds", "recon")
DISENTANGLER = frozenset({"trunk", "head_di", "head_ds"})
ALL_GROUPS = frozenset(GROUP_NAMES)

CHECKPOINT_MAGIC = b"ESDM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelState:
    K: int
    feature_dim: int
    hidden: int
    groups: dict[str, ParamGroup] = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 2:
            raise DimensionError(f"need at least 2 classes, got K={self.K}")
        self._check_shapes()

    def _check_shapes(self) -> None:
        d, h, k = self.feature_dim, self.hidden, self.K
        expected = {
            "trunk": [(d, d), (1, d)],
            "head_di": [(d, h), (1, h)],
            "head_ds": [(d, h), (1, h)],
            "c_di": [(h, k), (1, k)],
            "c_ds": [(h, 1), (1, 1)],
            "recon": [(2 * h, h), (1, h), (h, d), (1, d)],
        }
        if list(self.groups) != list(GROUP_NAMES):
            raise DimensionError(f"model groups must be {GROUP_NAMES}, got {tuple(self.groups)}")
        for name, shapes in expected.items():
            got = [t.shape for t in self.groups[name].tensors]
            if got != shapes:
                raise DimensionError(f"group {name!r}: expected tensor shapes {shapes}, got {got}")

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def param_groups(self) -> list[ParamGroup]:
        return list(self.groups.values())

    def freeze(self, names: Iterable[str] = GROUP_NAMES, frozen: bool = True) -> None:
        for name in names:
            self.groups[name].frozen = frozen

    def copy(self) -> "ModelState":
        groups = {
            name: ParamGroup(name, [t.copy() for t in g.tensors], frozen=g.frozen)
            for name, g in self.groups.items()
        }
        return ModelState(self.K, self.feature_dim, self.hidden, groups)


@dataclass
class DisentangledPair:
    f_di: Node
    f_ds: Node


def init_model(feature_dim: int, K: int, rng: np.random.Generator | int, hidden: int = 512) -> ModelState:
    """Uniform Glorot weights and zero biases, drawn in group order."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d, h = feature_dim, hidden
    layers = {
        "trunk": [(d, d)],
        "head_di": [(d, h)],
        "head_ds": [(d, h)],
        "c_di": [(h, K)],
        "c_ds": [(h, 1)],
        "recon": [(2 * h, h), (h, d)],
    }
    groups = {}
    for name, dims in layers.items():
        tensors = []
        for fan_in, fan_out in dims:
            tensors += nn.linear_params(rng, fan_in, fan_out)
        groups[name] = ParamGroup(name, tensors)
    return ModelState(K, feature_dim, hidden, groups)


def _input(x) -> Node:
    return x if isinstance(x, Node) else Tape().constant(x)


def _dense(state: ModelState, name: str, x: Node, live, layer: int = 0) -> Node:
    group = state.groups[name]
    trainable = name in live
    W = x.tape.param(group, 2 * layer, trainable)
    b = x.tape.param(group, 2 * layer + 1, trainable)
    return nn.linear(x, W, b)


def _check_width(x: Node, width: int, what: str) -> None:
    if x.shape[1] != width:
        raise DimensionError(f"{what}: expected input width {width}, got shape {x.shape}")


def disentangle(state: ModelState, f_g, live=ALL_GROUPS) -> DisentangledPair:
    f_g = _input(f_g)
    _check_width(f_g, state.feature_dim, "disentangle")
    shared = nn.relu(_dense(state, "trunk", f_g, live))
    f_di = nn.relu(_dense(state, "head_di", shared, live))
    f_ds = nn.relu(_dense(state, "head_ds", shared, live))
    return DisentangledPair(f_di, f_ds)


def classify_di(state: ModelState, f, live=ALL_GROUPS) -> Node:
    """Class logits; callers apply softmax."""
    f = _input(f)
    _check_width(f, state.hidden, "classify_di")
    return _dense(state, "c_di", f, live)


def discriminate_ds(state: ModelState, f, live=ALL_GROUPS) -> Node:
    """Probability that each row comes from the source domain."""
    f = _input(f)
    _check_width(f, state.hidden, "discriminate_ds")
    return nn.sigmoid(_dense(state, "c_ds", f, live))


def reconstruct(state: ModelState, pair: DisentangledPair, live=ALL_GROUPS) -> Node:
    f_di, f_ds = _input(pair.f_di), pair.f_ds
    if not isinstance(f_ds, Node):
        f_ds = f_di.tape.constant(f_ds)
    _check_width(f_di, state.hidden, "reconstruct (f_di)")
    _check_width(f_ds, state.hidden, "reconstruct (f_ds)")
    joined = nn.concat_cols(f_di, f_ds)
    hidden = nn.relu(_dense(state, "recon", joined, live, layer=0))
    return _dense(state, "recon", hidden, live, layer=1)


# ---- checkpoint file ----

def checkpoint_bytes(state: ModelState) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<HII", CHECKPOINT_VERSION, state.K, state.feature_dim)]
    for name, group in state.groups.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<H", len(group.tensors)))
        for t in group.tensors:
            out.append(struct.pack("<II", *t.shape))
            out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(data: bytes) -> ModelState:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not an ESDM checkpoint (bad magic)", 0)
    version, K, feature_dim = r.unpack("<HII", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    groups: dict[str, ParamGroup] = {}
    while r.pos < len(data):
        start = r.pos
        (name_len,) = r.unpack("<H", "group name length")
        try:
            name = r.take(name_len, "group name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("group name is not valid UTF-8", start + 2) from None
        if name not in GROUP_NAMES or name in groups:
            raise FormatError(f"unexpected parameter group {name!r}", start)
        (count,) = r.unpack("<H", "tensor count")
        tensors = []
        for _ in range(count):
            rows, cols = r.unpack("<II", "tensor shape")
            raw = r.take(8 * rows * cols, f"tensor data of group {name!r}")
            tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols))
        groups[name] = ParamGroup(name, tensors)
    if tuple(groups) != GROUP_NAMES:
        raise FormatError(f"checkpoint groups {tuple(groups)} do not match {GROUP_NAMES}", r.pos)
    hidden = groups["head_di"].tensors[0].shape[1]
    try:
        return ModelState(K, feature_dim, hidden, groups)
    except DimensionError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}", r.pos) from None


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes())
