"""Deltas between checkpoints, low-rank adapters, and per-layer sparsity.

A delta is an ordinary ParamSet holding tuned - base per tensor; DeltaSet
is an alias kept for signatures where the distinction matters to a reader.
Provenance (which checkpoints a delta came from, what was skipped) travels
in ParamSet metadata rather than a separate wrapper type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyParamSet,
    InvalidThreshold,
    MissingParameter,
    ShapeMismatch,
    UnknownParameter,
)
from .param_core import ParamSet, as_tensor, matmul

DeltaSet = ParamSet


def extract_delta(tuned: ParamSet, base: ParamSet, mode: str = "strict") -> DeltaSet:
    """Per-tensor difference tuned - base.

    strict: both sets must hold exactly the same names; a name present on
    one side only raises MissingParameter identifying the side that lacks
    it. lenient: names present in both are differenced, the rest are
    dropped and listed in the result metadata under "skipped". Shared
    names must agree on shape in either mode.
    """
    if mode == "strict":
        only_base = sorted(set(base.names) - set(tuned.names))
        if only_base:
            raise MissingParameter(f"tuned checkpoint lacks parameters: {only_base}")
        only_tuned = sorted(set(tuned.names) - set(base.names))
        if only_tuned:
            raise MissingParameter(f"base checkpoint lacks parameters: {only_tuned}")
        return tuned.subtract(base)
    if mode != "lenient":
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    out = {}
    for name in tuned.names:
        if name not in base:
            continue
        a, b = tuned[name], base[name]
        if a.shape != b.shape:
            raise ShapeMismatch(f"{name!r}: {a.shape} vs {b.shape}")
        out[name] = a - b
    skipped = sorted(set(tuned.names) ^ set(base.names))
    metadata = {"skipped": ",".join(skipped)} if skipped else None
    return ParamSet._wrap(out, metadata)


def apply_delta(base: ParamSet, delta: DeltaSet, weight: float = 1.0) -> ParamSet:
    """base + weight * delta. Base names absent from delta pass through."""
    extra = sorted(set(delta.names) - set(base.names))
    if extra:
        raise UnknownParameter(f"delta names absent from base: {extra}")
    weight = float(weight)
    out = {}
    for name in base.names:
        tensor = base[name]
        if name in delta:
            d = delta[name]
            if d.shape != tensor.shape:
                raise ShapeMismatch(f"{name!r}: {tensor.shape} vs {d.shape}")
            out[name] = tensor + weight * d
        else:
            out[name] = tensor.copy()
    return ParamSet._wrap(out)


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank update factors for a set of 2-d weights.

    factors maps a weight name to (down, up): for a weight of shape
    (out_dim, in_dim), down has shape (rank, in_dim) and up has shape
    (out_dim, rank); every layer shares the same rank. The composed dense
    update per layer is scaling * (up @ down). scaling defaults to 1.0 and
    is a free knob; callers wanting a conventional alpha-over-rank factor
    supply it here themselves.
    """

    factors: dict
    rank: int
    scaling: float = 1.0

    def __post_init__(self):
        if not isinstance(self.rank, int) or isinstance(self.rank, bool) or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank!r}")
        if not np.isfinite(self.scaling) or self.scaling < 0:
            raise ValueError(f"scaling must be a non-negative real, got {self.scaling!r}")


def compose_lora(adapter: LoraAdapter) -> DeltaSet:
    """Materialize an adapter into a dense DeltaSet, layer names preserved."""
    out = {}
    for name, (down, up) in adapter.factors.items():
        down = as_tensor(down)
        up = as_tensor(up)
        if down.ndim != 2 or up.ndim != 2:
            raise ShapeMismatch(f"{name!r}: factors must be 2-d, got {down.shape} and {up.shape}")
        if down.shape[0] != adapter.rank or up.shape[1] != adapter.rank:
            raise ShapeMismatch(
                f"{name!r}: rank-{adapter.rank} adapter holds factors "
                f"{down.shape} and {up.shape}"
            )
        out[name] = float(adapter.scaling) * matmul(up, down)
    return ParamSet._wrap(out)


@dataclass(frozen=True)
class SparsityReport:
    """Per-layer fractions of near-zero delta entries plus their average."""

    per_layer: dict
    average: float


def sparsity(
    delta: DeltaSet, threshold: float = 1e-5, element_weighted: bool = False
) -> SparsityReport:
    """Fraction of entries with |value| < threshold, by layer and averaged.

    The average weights every layer equally regardless of element count;
    element_weighted=True pools all elements into a single fraction
    instead. Zero-size tensors count as fully sparse.
    """
    threshold = float(threshold)
    if not np.isfinite(threshold) or threshold <= 0:
        raise InvalidThreshold(f"threshold must be a positive real, got {threshold!r}")
    if len(delta) == 0:
        raise EmptyParamSet("sparsity of an empty delta is undefined")
    per_layer = {}
    small_total = 0
    element_total = 0
    for name, tensor in delta.items():
        small = int(np.count_nonzero(np.abs(tensor) < threshold))
        per_layer[name] = small / tensor.size if tensor.size else 1.0
        small_total += small
        element_total += tensor.size
    if element_weighted:
        average = small_total / element_total if element_total else 1.0
    else:
        average = sum(per_layer.values()) / len(per_layer)
    return SparsityReport(per_layer, float(average))


def format_sparsity_report(report: SparsityReport) -> str:
    """Flat text rendering: one "name fraction" line per layer, then AVERAGE."""
    lines = [f"{name} {frac:.4f}" for name, frac in sorted(report.per_layer.items())]
    lines.append(f"AVERAGE {report.average:.4f}")
    return "\n".join(lines) + "\n"
