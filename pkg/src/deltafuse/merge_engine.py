"""Merging delta sets into a base checkpoint.

Five methods are provided. linear adds a weighted sum of deltas, with
weights normalized to sum to one unless normalization is switched off;
task_arithmetic is the same sum with weights always used raw; ties trims
each weighted delta to its largest entries, elects a sign per element by
majority, and averages the values that agree with it; dare_ties randomly
drops and rescales each delta before the ties procedure; slerp spherically
interpolates between exactly two deltas.

A MergeRecipe captures a whole merge (method, per-input weights and
optional sparsification, method knobs) as a JSON document so merges are
reproducible from a single file.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UnsupportedMethod, ZeroWeightSum
from .delta_ops import DeltaSet, apply_delta
from .param_core import ParamSet, flatten_concat, unflatten, load_checkpoint
from .sparsify import SparsifySpec, dare, sparsify_delta, trim_topk

METHODS = ("linear", "task_arithmetic", "ties", "dare_ties", "slerp")

# Below this norm a delta direction is meaningless; below this sine the
# spherical weights are numerically unstable. Both fall back to lerp.
_SLERP_NORM_FLOOR = 1e-12
_SLERP_SIN_FLOOR = 1e-8


def _check_inputs(deltas, weights):
    if not deltas:
        raise ValueError("merging requires at least one delta")
    if weights is None:
        weights = [1.0] * len(deltas)
    weights = [float(w) for w in weights]
    if len(weights) != len(deltas):
        raise ValueError(f"{len(deltas)} deltas but {len(weights)} weights")
    if not all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    first = deltas[0]
    for d in deltas[1:]:
        if d.names != first.names:
            raise ValueError("all deltas must hold the same parameter names")
        for name in first.names:
            if d[name].shape != first[name].shape:
                raise ValueError(f"delta shapes disagree for {name!r}")
    return weights


def _weighted_sum(deltas, coefficients) -> DeltaSet:
    acc = {name: np.zeros_like(t) for name, t in deltas[0].items()}
    for c, d in zip(coefficients, deltas):
        for name, t in d.items():
            acc[name] += c * t
    return ParamSet._wrap(acc)


def merge_linear(base: ParamSet, deltas, weights=None, normalize: bool = True) -> ParamSet:
    """base plus the weighted sum of the deltas.

    With normalize on (the default) each weight is divided by the weight
    total first, so weights express proportions; normalize off uses them
    raw, which is exactly the task_arithmetic rule.
    """
    weights = _check_inputs(deltas, weights)
    if normalize:
        total = sum(weights)
        if total == 0.0:
            raise ZeroWeightSum("cannot normalize weights that sum to zero")
        weights = [w / total for w in weights]
    return apply_delta(base, _weighted_sum(deltas, weights))


def merge_task_arithmetic(base: ParamSet, deltas, weights=None) -> ParamSet:
    """base plus the raw weighted sum of the deltas (no normalization)."""
    return merge_linear(base, deltas, weights, normalize=False)


def merge_ties(
    base: ParamSet,
    deltas,
    weights=None,
    density: float = 0.5,
    granularity: str = "per_tensor",
) -> ParamSet:
    """Trim, elect sign, average agreeing values, add to base.

    Per element: the elected sign is the sign of the sum of the trimmed
    weighted deltas' signs; a zero (tied) election falls back to the sign
    of the summed values. The merged value is the mean of the nonzero
    entries whose sign matches the election, or zero when nothing agrees,
    leaving that element at the base value.
    """
    weights = _check_inputs(deltas, weights)
    trimmed = [
        trim_topk(d.scale(w), density, granularity) for d, w in zip(deltas, weights)
    ]
    out = {}
    for name in trimmed[0].names:
        stack = np.stack([d[name] for d in trimmed], axis=0)
        signs = np.sign(stack)
        elected = np.sign(signs.sum(axis=0))
        elected = np.where(elected == 0.0, np.sign(stack.sum(axis=0)), elected)
        agree = (signs == elected) & (stack != 0.0)
        count = agree.sum(axis=0)
        total = np.where(agree, stack, 0.0).sum(axis=0)
        out[name] = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return apply_delta(base, ParamSet._wrap(out))


def merge_dare_ties(
    base: ParamSet,
    deltas,
    weights=None,
    density: float = 0.5,
    drop_prob: float = 0.5,
    seed: int = 0,
    granularity: str = "per_tensor",
) -> ParamSet:
    """Random drop-and-rescale each delta, then run the ties procedure.

    Delta i is dropped under seed XOR i, so the whole merge can be
    reproduced stepwise with the public dare and merge_ties functions, and
    drops stay independent across deltas.
    """
    weights = _check_inputs(deltas, weights)
    dropped = [dare(d, drop_prob, int(seed) ^ i) for i, d in enumerate(deltas)]
    return merge_ties(base, dropped, weights, density, granularity)


def _slerp_vectors(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a < _SLERP_NORM_FLOOR or norm_b < _SLERP_NORM_FLOOR:
        return (1.0 - t) * a + t * b
    cos_omega = min(1.0, max(-1.0, float(np.dot(a, b)) / (norm_a * norm_b)))
    omega = float(np.arccos(cos_omega))
    sin_omega = float(np.sin(omega))
    if abs(sin_omega) < _SLERP_SIN_FLOOR:
        return (1.0 - t) * a + t * b
    return (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / sin_omega


def merge_slerp(
    base: ParamSet,
    deltas,
    t: float = 0.5,
    granularity: str = "global",
) -> ParamSet:
    """Spherical interpolation between exactly two deltas.

    By default both deltas are flattened into single direction vectors so
    one global angle governs the blend; granularity "per_tensor"
    interpolates each tensor pair with its own angle. Degenerate geometry
    (a near-zero delta, or a near-straight angle) falls back to linear
    interpolation; two zero deltas return base unchanged with a warning,
    since no direction exists. t=0 and t=1 return the endpoints exactly.
    """
    _check_inputs(deltas, None)
    if len(deltas) != 2:
        raise ValueError(f"slerp merges exactly two deltas, got {len(deltas)}")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must be in [0, 1], got {t}")
    if granularity not in ("global", "per_tensor"):
        raise ValueError(f"granularity must be 'global' or 'per_tensor', got {granularity!r}")
    left, right = deltas
    if t == 0.0:
        return apply_delta(base, left)
    if t == 1.0:
        return apply_delta(base, right)
    vec_a, schema = flatten_concat(left)
    vec_b, _ = flatten_concat(right)
    if (
        float(np.linalg.norm(vec_a)) < _SLERP_NORM_FLOOR
        and float(np.linalg.norm(vec_b)) < _SLERP_NORM_FLOOR
    ):
        warnings.warn("slerp: both deltas are zero; returning base unchanged")
        return base.scale(1.0)
    if granularity == "global":
        merged = unflatten(_slerp_vectors(vec_a, vec_b, t), schema)
    else:
        merged = ParamSet._wrap(
            {name: _slerp_vectors(left[name], right[name], t) for name in left.names}
        )
    return apply_delta(base, merged)


def merge(
    base: ParamSet,
    deltas,
    weights=None,
    method: str = "ties",
    *,
    density: float = 0.5,
    drop_prob: float = 0.5,
    seed: int = 0,
    t: float = 0.5,
    granularity: str | None = None,
    normalize_weights: bool = True,
) -> ParamSet:
    """Dispatch to one of the five merge methods by name."""
    if method == "linear":
        return merge_linear(base, deltas, weights, normalize_weights)
    if method == "task_arithmetic":
        return merge_task_arithmetic(base, deltas, weights)
    if method == "ties":
        return merge_ties(base, deltas, weights, density, granularity or "per_tensor")
    if method == "dare_ties":
        return merge_dare_ties(
            base, deltas, weights, density, drop_prob, seed, granularity or "per_tensor"
        )
    if method == "slerp":
        if weights is not None and any(float(w) != 1.0 for w in weights):
            raise ValueError("slerp is controlled by t, not weights")
        return merge_slerp(base, deltas, t, granularity or "global")
    raise UnsupportedMethod(f"unknown merge method {method!r}, expected one of {list(METHODS)}")


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------

_KNOBS_BY_METHOD = {
    "linear": {"normalize_weights"},
    "task_arithmetic": set(),
    "ties": {"density", "granularity"},
    "dare_ties": {"density", "granularity", "drop", "seed"},
    "slerp": {"t", "granularity"},
}


@dataclass
class RecipeInput:
    """One input of a merge: a delta reference plus weight and optional
    sparsification applied before merging."""

    delta: str
    weight: float = 1.0
    sparsify: SparsifySpec | None = None

    def to_dict(self) -> dict:
        out = {"delta": self.delta, "weight": self.weight}
        if self.sparsify is not None:
            out["sparsify"] = self.sparsify.to_dict()
        return out

    @classmethod
    def from_dict(cls, data) -> "RecipeInput":
        if not isinstance(data, dict):
            raise FormatError("each input entry must be a JSON object", field="inputs")
        for key in data:
            if key not in ("delta", "weight", "sparsify"):
                raise FormatError("unexpected key in input entry", field=key)
        if "delta" not in data or not isinstance(data["delta"], str) or not data["delta"]:
            raise FormatError("input entry needs a non-empty 'delta' reference", field="delta")
        weight = data.get("weight", 1.0)
        if isinstance(weight, bool) or not isinstance(weight, (int, float)):
            raise FormatError("weight must be a number", field="weight")
        spec = None
        if "sparsify" in data:
            spec = SparsifySpec.from_dict(data["sparsify"])
        return cls(delta=data["delta"], weight=float(weight), sparsify=spec)


@dataclass
class MergeRecipe:
    """A merge captured as data: method, inputs and knobs.

    JSON layout:

        {"method": "ties",
         "base": "base.ckpt",
         "inputs": [{"delta": "a.ckpt", "weight": 1.0,
                     "sparsify": {"method": "trim_topk", "density": 0.2}},
                    {"delta": "b.ckpt"}],
         "density": 0.5, "granularity": "per_tensor"}

    Only the knobs meaningful for the chosen method are accepted; unknown
    keys are rejected so typos fail loudly. slerp takes exactly two
    inputs, every other method at least one.
    """

    method: str
    inputs: list = field(default_factory=list)
    base: str | None = None
    density: float = 0.5
    drop: float = 0.5
    seed: int = 0
    t: float = 0.5
    granularity: str | None = None
    normalize_weights: bool = True

    def weights(self) -> list:
        return [entry.weight for entry in self.inputs]

    def to_dict(self) -> dict:
        out = {"method": self.method, "inputs": [entry.to_dict() for entry in self.inputs]}
        if self.base is not None:
            out["base"] = self.base
        for knob in sorted(_KNOBS_BY_METHOD.get(self.method, set())):
            value = getattr(self, knob)
            if knob == "granularity":
                value = value or ("global" if self.method == "slerp" else "per_tensor")
            out[knob] = value
        return out

    @classmethod
    def from_dict(cls, data) -> "MergeRecipe":
        if not isinstance(data, dict):
            raise FormatError("recipe must be a JSON object", field="recipe")
        method = data.get("method")
        if method not in METHODS:
            raise FormatError(f"method must be one of {list(METHODS)}", field="method")
        knobs = _KNOBS_BY_METHOD[method]
        for key in data:
            if key not in {"method", "base", "inputs"} | knobs:
                raise FormatError(f"unexpected key for {method} recipe", field=key)
        raw_inputs = data.get("inputs")
        if not isinstance(raw_inputs, list) or not raw_inputs:
            raise FormatError("recipe needs a non-empty 'inputs' list", field="inputs")
        if method == "slerp" and len(raw_inputs) != 2:
            raise FormatError("slerp requires exactly 2 inputs", field="inputs")
        base = data.get("base")
        if base is not None and (not isinstance(base, str) or not base):
            raise FormatError("base must be a non-empty path string", field="base")
        kwargs = {}
        for knob in knobs:
            if knob in data:
                kwargs[knob] = data[knob]
        return cls(
            method=method,
            inputs=[RecipeInput.from_dict(d) for d in raw_inputs],
            base=base,
            **kwargs,
        )

    @classmethod
    def from_json(cls, text: str) -> "MergeRecipe":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"recipe is not valid JSON: {exc.msg}", offset=exc.pos) from None
        return cls.from_dict(data)

    def provenance(self) -> dict:
        """Deterministic summary stored in a merged checkpoint's metadata."""
        out = {k: v for k, v in self.to_dict().items() if k not in ("base", "inputs")}
        out["weights"] = self.weights()
        out["num_inputs"] = len(self.inputs)
        sparsify = [
            entry.sparsify.to_dict() if entry.sparsify is not None else None
            for entry in self.inputs
        ]
        if any(s is not None for s in sparsify):
            out["sparsify"] = sparsify
        return out


def load_recipe(path) -> MergeRecipe:
    """Parse a recipe file; relative paths resolve against its directory."""
    with open(path, "r", encoding="utf-8") as fh:
        recipe = MergeRecipe.from_json(fh.read())
    root = os.path.dirname(os.path.abspath(path))
    for entry in recipe.inputs:
        if not os.path.isabs(entry.delta):
            entry.delta = os.path.join(root, entry.delta)
    if recipe.base is not None and not os.path.isabs(recipe.base):
        recipe.base = os.path.join(root, recipe.base)
    return recipe


def apply_recipe(recipe: MergeRecipe, base: ParamSet, deltas) -> ParamSet:
    """Run a recipe against already-loaded tensors."""
    if len(deltas) != len(recipe.inputs):
        raise ValueError(f"recipe lists {len(recipe.inputs)} inputs, got {len(deltas)} deltas")
    prepared = [
        sparsify_delta(delta, entry.sparsify)
        for entry, delta in zip(recipe.inputs, deltas)
    ]
    return merge(
        base,
        prepared,
        recipe.weights(),
        recipe.method,
        density=recipe.density,
        drop_prob=recipe.drop,
        seed=recipe.seed,
        t=recipe.t,
        granularity=recipe.granularity,
        normalize_weights=recipe.normalize_weights,
    )


def run_recipe(recipe: MergeRecipe, base_path=None):
    """Load the recipe's checkpoints, merge, return (params, provenance)."""
    path = base_path if base_path is not None else recipe.base
    if path is None:
        raise ValueError("recipe has no base path and none was provided")
    base = load_checkpoint(path)
    deltas = [load_checkpoint(entry.delta) for entry in recipe.inputs]
    return apply_recipe(recipe, base, deltas), recipe.provenance()
