"""Delta sparsification: random drop-and-rescale, top-k trim, thresholding.

All three transforms are pure and elementwise; surviving values keep their
sign and magnitude except for the drop transform's uniform rescale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidDensity, InvalidProbability, InvalidThreshold, UnsupportedMethod
from .param_core import ParamSet, flatten_concat, keyed_uniforms, unflatten

GRANULARITIES = ("per_tensor", "global")


def dare(delta: ParamSet, drop_prob: float, seed: int) -> ParamSet:
    """Zero each element with probability drop_prob, rescale survivors.

    Survivors are multiplied by 1/(1-drop_prob), which makes the transform
    unbiased in expectation. Randomness is keyed by (seed, tensor name,
    element index), never by iteration order, so results are identical no
    matter how the work is scheduled.
    """
    p = float(drop_prob)
    if not np.isfinite(p) or p < 0.0 or p >= 1.0:
        raise InvalidProbability(f"drop probability must lie in [0, 1), got {drop_prob!r}")
    if p == 0.0:
        return ParamSet._wrap({n: t.copy() for n, t in delta.items()})
    rescale = 1.0 / (1.0 - p)
    out = {}
    for name, tensor in delta.items():
        u = keyed_uniforms(seed, name, tensor.size).reshape(tensor.shape)
        out[name] = np.where(u < p, 0.0, tensor * rescale)
    return ParamSet._wrap(out)


def _survivor_count(density: float, total: int) -> int:
    # repr() recovers the shortest decimal that round-trips, so 0.3 means
    # exactly 3/10 here rather than its slightly larger binary neighbour;
    # the ceiling of the exact product keeps density=1 lossless and any
    # positive density non-empty.
    if total == 0:
        return 0
    return int(math.ceil(Fraction(repr(float(density))) * total))


def _keep_topk(values: np.ndarray, keep: int) -> np.ndarray:
    flat = values.ravel()
    if keep >= flat.size:
        return values.copy()
    # Ties at the cut: magnitude descending, then element index ascending.
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    chosen = order[:keep]
    out[chosen] = flat[chosen]
    return out.reshape(values.shape)


def trim_topk(delta: ParamSet, density: float, granularity: str = "per_tensor") -> ParamSet:
    """Keep the ceil(density * N) largest-magnitude elements, zero the rest.

    granularity picks whether N counts each tensor separately or the whole
    flattened delta. Surviving values are unchanged.
    """
    d = float(density)
    if not np.isfinite(d) or d <= 0.0 or d > 1.0:
        raise InvalidDensity(f"density must lie in (0, 1], got {density!r}")
    if granularity == "per_tensor":
        out = {n: _keep_topk(t, _survivor_count(d, t.size)) for n, t in delta.items()}
        return ParamSet._wrap(out)
    if granularity != "global":
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    vector, schema = flatten_concat(delta)
    kept = _keep_topk(vector, _survivor_count(d, vector.size))
    return unflatten(kept, schema)


def threshold_prune(delta: ParamSet, threshold: float) -> ParamSet:
    """Zero every element with magnitude strictly below threshold. No rescale."""
    tau = float(threshold)
    if not np.isfinite(tau) or tau <= 0.0:
        raise InvalidThreshold(f"threshold must be a positive real, got {threshold!r}")
    return ParamSet._wrap({n: np.where(np.abs(t) < tau, 0.0, t) for n, t in delta.items()})


_REQUIRED_BY_METHOD = {
    "dare": ("drop_prob", "seed"),
    "trim_topk": ("density",),
    "threshold": ("threshold",),
}


@dataclass(frozen=True)
class SparsifySpec:
    """Serializable description of one sparsification transform.

    Exactly the fields relevant to the chosen method are required; any
    others are ignored. granularity only affects trim_topk and defaults to
    per_tensor.
    """

    method: str
    drop_prob: float | None = None
    seed: int | None = None
    density: float | None = None
    granularity: str = "per_tensor"
    threshold: float | None = None

    def __post_init__(self):
        if self.method not in _REQUIRED_BY_METHOD:
            raise UnsupportedMethod(f"unknown sparsify method {self.method!r}")
        for key in _REQUIRED_BY_METHOD[self.method]:
            if getattr(self, key) is None:
                raise ValueError(f"sparsify method {self.method!r} requires {key!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )

    def to_dict(self) -> dict:
        out = {"method": self.method}
        for key in _REQUIRED_BY_METHOD[self.method]:
            out[key] = getattr(self, key)
        if self.method == "trim_topk":
            out["granularity"] = self.granularity
        return out

    @classmethod
    def from_dict(cls, data) -> "SparsifySpec":
        if not isinstance(data, dict):
            raise ValueError(f"sparsify spec must be an object, got {type(data).__name__}")
        method = data.get("method")
        if method not in _REQUIRED_BY_METHOD:
            raise UnsupportedMethod(f"unknown sparsify method {method!r}")
        kwargs = {"method": method}
        for key in _REQUIRED_BY_METHOD[method]:
            if key not in data:
                raise ValueError(f"sparsify method {method!r} requires {key!r}")
            kwargs[key] = data[key]
        if method == "trim_topk" and "granularity" in data:
            kwargs["granularity"] = data["granularity"]
        return cls(**kwargs)


def sparsify_delta(delta: ParamSet, spec: SparsifySpec | None) -> ParamSet:
    """Apply one transform per its spec; None passes the delta through."""
    if spec is None:
        return delta
    if spec.method == "dare":
        return dare(delta, spec.drop_prob, spec.seed)
    if spec.method == "trim_topk":
        return trim_topk(delta, spec.density, spec.granularity)
    return threshold_prune(delta, spec.threshold)
