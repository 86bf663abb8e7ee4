"""Small dense classifiers with supervised and preference losses.

A ToyNet is a frozen base model: fully connected layers named
layer{i}.weight / layer{i}.bias, tanh on every hidden layer, softmax over
the last. Trainable state is always a separate delta ParamSet added to the
base at evaluation time, so every loss here takes (net, delta, batch) and
returns a LossValue whose gradients cover exactly the delta's schema
(or the full parameter schema when delta is None). check_gradients
verifies any such loss against central finite differences.

Shapes follow the rows-are-examples convention: inputs are (batch, dim),
weights are (out_dim, in_dim), so a layer computes a @ W.T + b.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .delta_ops import LoraAdapter, apply_delta, compose_lora
from .errors import EmptyBatch, FormatError, MissingParameter, ShapeMismatch
from .param_core import ParamSet, SeededRng, as_tensor, atomic_write_bytes, matmul

_PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------


def init_params(dims, rng: SeededRng) -> ParamSet:
    """Random parameters for the layer sizes in dims.

    dims = [in, hidden..., out]. Weights are normal with scale
    1/sqrt(fan_in), biases start at zero.
    """
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must list at least two positive sizes, got {dims}")
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normals(fan_out * fan_in).reshape(fan_out, fan_in) / np.sqrt(fan_in)
        out[f"layer{i}.weight"] = w
        out[f"layer{i}.bias"] = np.zeros(fan_out)
    return ParamSet(out)


_LAYER_RE = re.compile(r"^layer(\d+)\.(weight|bias)$")


def _layers(params: ParamSet):
    found = {}
    for name in params.names:
        m = _LAYER_RE.match(name)
        if m is None:
            raise ShapeMismatch(f"unexpected parameter name {name!r} for a dense network")
        found.setdefault(int(m.group(1)), set()).add(m.group(2))
    count = len(found)
    if count == 0:
        raise MissingParameter("network has no layers")
    if sorted(found) != list(range(count)):
        raise MissingParameter(f"layer indices must be contiguous from 0, got {sorted(found)}")
    pairs = []
    for i in range(count):
        if found[i] != {"weight", "bias"}:
            raise MissingParameter(f"layer {i} needs both weight and bias")
        w = params[f"layer{i}.weight"]
        b = params[f"layer{i}.bias"]
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeMismatch(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
        if pairs and w.shape[1] != pairs[-1][0].shape[0]:
            raise ShapeMismatch(
                f"layer {i} expects {w.shape[1]} inputs, previous layer emits {pairs[-1][0].shape[0]}"
            )
        pairs.append((w, b))
    return pairs


def layer_dims(params: ParamSet):
    pairs = _layers(params)
    return [pairs[0][0].shape[1]] + [w.shape[0] for w, _ in pairs]


class ToyNet:
    """A frozen dense classifier: base parameters plus their layer sizes.

    The net itself never changes during training; pair it with a delta
    ParamSet to evaluate shifted parameters. A delta may cover any subset
    of the parameter names (e.g. only the weights of a low-rank adapter).
    """

    __slots__ = ("params", "dims")

    def __init__(self, params: ParamSet):
        self.params = params
        self.dims = tuple(layer_dims(params))

    @classmethod
    def initialize(cls, dims, seed) -> "ToyNet":
        rng = seed if isinstance(seed, SeededRng) else SeededRng(int(seed))
        return cls(init_params(dims, rng))

    @property
    def classes(self) -> int:
        return self.dims[-1]

    def __repr__(self) -> str:
        return f"ToyNet(dims={list(self.dims)})"


def _effective(net: ToyNet, delta: ParamSet | None) -> ParamSet:
    if delta is None or len(delta) == 0:
        return net.params
    return apply_delta(net.params, delta)


def _check_net_inputs(params: ParamSet, inputs) -> np.ndarray:
    x = as_tensor(inputs)
    if x.ndim != 2:
        raise ShapeMismatch(f"inputs must be (batch, dim), got {x.shape}")
    expected = _layers(params)[0][0].shape[1]
    if x.shape[1] != expected:
        raise ShapeMismatch(f"inputs have dim {x.shape[1]}, network expects {expected}")
    return x


def _forward_states(params: ParamSet, x: np.ndarray):
    pairs = _layers(params)
    activations = [x]
    for i, (w, b) in enumerate(pairs):
        z = activations[-1] @ w.T + b
        activations.append(np.tanh(z) if i < len(pairs) - 1 else z)
    return activations


def logits(net: ToyNet, delta: ParamSet | None, inputs) -> np.ndarray:
    """Pre-softmax scores of shape (batch, classes)."""
    params = _effective(net, delta)
    return _forward_states(params, _check_net_inputs(params, inputs))[-1]


def forward(net: ToyNet, delta: ParamSet | None, inputs) -> np.ndarray:
    """Class probabilities under base-plus-delta parameters.

    A single feature vector yields a probability vector; a (batch, dim)
    matrix yields one row of probabilities per example.
    """
    x = as_tensor(inputs)
    single = x.ndim == 1
    probs = softmax(logits(net, delta, x.reshape(1, -1) if single else x))
    return probs[0] if single else probs


def _backprop(params: ParamSet, activations, d_logits: np.ndarray) -> ParamSet:
    pairs = _layers(params)
    grads = {}
    d = d_logits
    for i in reversed(range(len(pairs))):
        w, _ = pairs[i]
        grads[f"layer{i}.weight"] = d.T @ activations[i]
        grads[f"layer{i}.bias"] = d.sum(axis=0)
        if i > 0:
            a = activations[i]  # tanh output of the previous layer
            d = (d @ w) * (1.0 - a * a)
    return ParamSet._wrap(grads)


def _grads_for(net: ToyNet, delta: ParamSet | None, states, d_logits) -> ParamSet:
    full = _backprop(_effective(net, delta), states, d_logits)
    if delta is None or delta.names == net.params.names:
        return full
    # Partial deltas train a subset; gradients keep exactly that schema.
    return ParamSet._wrap({name: full[name] for name in delta.names})


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so neither branch exponentiates a large positive value.
    out = np.empty_like(x)
    pos = x >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


def _as_labels(values, count, what) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != count:
        raise ShapeMismatch(f"{what} must be a vector of length {count}")
    if arr.dtype == np.bool_ or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{what} must be integers")
    if int(arr.min()) < 0:
        raise ValueError(f"{what} must be non-negative")
    return arr.astype(np.int64)


def _as_inputs(values) -> np.ndarray:
    x = as_tensor(values)
    if x.ndim != 2:
        raise ShapeMismatch(f"inputs must be (batch, dim), got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyBatch("batch has no rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    return x


@dataclass(frozen=True)
class SupervisedBatch:
    """Inputs (batch, dim) with integer class labels (batch,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = _as_inputs(self.inputs)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", _as_labels(self.labels, x.shape[0], "labels"))

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class PreferencePair:
    """One input with a preferred and a rejected class label."""

    x: np.ndarray
    winner: int
    loser: int


@dataclass(frozen=True)
class PreferenceBatch:
    """Inputs (batch, dim) with winner and loser labels per row."""

    inputs: np.ndarray
    winners: np.ndarray
    losers: np.ndarray

    def __post_init__(self):
        x = _as_inputs(self.inputs)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "winners", _as_labels(self.winners, x.shape[0], "winners"))
        object.__setattr__(self, "losers", _as_labels(self.losers, x.shape[0], "losers"))
        if np.any(self.winners == self.losers):
            raise ValueError("winner and loser must differ in every pair")

    def __len__(self):
        return self.inputs.shape[0]

    @classmethod
    def from_pairs(cls, pairs) -> "PreferenceBatch":
        if not pairs:
            raise EmptyBatch("no preference pairs")
        return cls(
            inputs=np.stack([as_tensor(p.x) for p in pairs]),
            winners=np.array([p.winner for p in pairs]),
            losers=np.array([p.loser for p in pairs]),
        )

    def pairs(self):
        for i in range(len(self)):
            yield PreferencePair(self.inputs[i], int(self.winners[i]), int(self.losers[i]))


def _check_classes(labels: np.ndarray, classes: int, what: str) -> None:
    if labels.size and labels.max() >= classes:
        raise ValueError(f"{what} contain class {int(labels.max())}, network has {classes}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossValue:
    """Scalar loss with analytic gradients over the trainable schema."""

    value: float
    grads: ParamSet
    extras: dict = field(default_factory=dict)


def sft_loss(
    net: ToyNet,
    delta: ParamSet | None,
    batch: SupervisedBatch,
    l1_lambda: float = 0.0,
) -> LossValue:
    """Mean cross entropy under base-plus-delta, plus an L1 penalty on delta.

    value = CE + l1_lambda * sum|delta|. The subgradient of |d| at d == 0
    is taken as 0, so exactly-zero delta entries feel no pull and plain
    gradient descent leaves them untouched.
    """
    l1_lambda = float(l1_lambda)
    if l1_lambda < 0.0:
        raise ValueError("l1_lambda must be non-negative")
    params = _effective(net, delta)
    x = _check_net_inputs(params, batch.inputs)
    states = _forward_states(params, x)
    out = states[-1]
    _check_classes(batch.labels, out.shape[1], "labels")
    n = x.shape[0]
    logp = log_softmax(out)
    ce = -float(logp[np.arange(n), batch.labels].mean())
    d_logits = softmax(out)
    d_logits[np.arange(n), batch.labels] -= 1.0
    grads = _grads_for(net, delta, states, d_logits / n)
    value = ce
    extras = {"cross_entropy": ce}
    if l1_lambda > 0.0 and delta is not None:
        penalty = l1_lambda * delta.l1_norm()
        value += penalty
        grads = grads.add(
            ParamSet._wrap({name: l1_lambda * np.sign(t) for name, t in delta.items()})
        )
        extras["l1_penalty"] = penalty
    elif l1_lambda > 0.0:
        extras["l1_penalty"] = 0.0
    return LossValue(value=value, grads=grads, extras=extras)


def dpo_loss(
    net: ToyNet,
    ref_delta: ParamSet | None,
    policy_delta: ParamSet | None,
    batch: PreferenceBatch,
    beta: float = 1.0,
) -> LossValue:
    """Preference loss of the policy delta against a frozen reference delta.

    Per pair, the margin is beta times the difference in policy-vs-
    reference log probability between winner and loser; the loss is the
    mean of -log sigmoid(margin), computed as logaddexp(0, -margin) so
    large negative margins cannot overflow. Gradients cover only the
    policy delta.
    """
    beta = float(beta)
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    params = _effective(net, policy_delta)
    x = _check_net_inputs(params, batch.inputs)
    states = _forward_states(params, x)
    out = states[-1]
    _check_classes(batch.winners, out.shape[1], "winners")
    _check_classes(batch.losers, out.shape[1], "losers")
    n = x.shape[0]
    rows = np.arange(n)
    logp = log_softmax(out)
    ref_params = _effective(net, ref_delta)
    ref_logp = log_softmax(_forward_states(ref_params, x)[-1])
    margin = beta * (
        (logp[rows, batch.winners] - ref_logp[rows, batch.winners])
        - (logp[rows, batch.losers] - ref_logp[rows, batch.losers])
    )
    value = float(np.logaddexp(0.0, -margin).mean())
    # d value / d margin = sigmoid(margin) - 1; the softmax terms of the
    # winner and loser log probs cancel because both share one input row.
    factor = beta * (_sigmoid(margin) - 1.0) / n
    d_logits = np.zeros_like(out)
    np.add.at(d_logits, (rows, batch.winners), factor)
    np.add.at(d_logits, (rows, batch.losers), -factor)
    grads = _grads_for(net, policy_delta, states, d_logits)
    extras = {
        "mean_margin": float(margin.mean()),
        "preferred_rate": float((margin > 0).mean()),
    }
    return LossValue(value=value, grads=grads, extras=extras)


def orpo_loss(
    net: ToyNet,
    delta: ParamSet | None,
    batch: PreferenceBatch,
    beta: float = 0.1,
) -> LossValue:
    """Reference-free preference loss: winner NLL plus an odds-gap term.

    value = mean[-log p(winner) + beta * -log sigmoid(g)] where
    g = log odds(winner) - log odds(loser) and odds(y) = p_y / (1 - p_y).
    Probabilities are clamped to [1e-12, 1 - 1e-12] before the odds so
    saturated networks stay finite.
    """
    beta = float(beta)
    if beta < 0.0:
        raise ValueError("beta must be non-negative")
    params = _effective(net, delta)
    x = _check_net_inputs(params, batch.inputs)
    states = _forward_states(params, x)
    out = states[-1]
    _check_classes(batch.winners, out.shape[1], "winners")
    _check_classes(batch.losers, out.shape[1], "losers")
    n = x.shape[0]
    rows = np.arange(n)
    logp = log_softmax(out)
    probs = np.clip(softmax(out), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    p_w = probs[rows, batch.winners]
    p_l = probs[rows, batch.losers]
    gap = (np.log(p_w) - np.log1p(-p_w)) - (np.log(p_l) - np.log1p(-p_l))
    nll = -float(logp[rows, batch.winners].mean())
    value = nll + beta * float(np.logaddexp(0.0, -gap).mean())

    onehot_w = np.zeros_like(out)
    onehot_w[rows, batch.winners] = 1.0
    onehot_l = np.zeros_like(out)
    onehot_l[rows, batch.losers] = 1.0
    raw = softmax(out)
    d_logits = (raw - onehot_w) / n
    if beta > 0.0:
        # d g / d z = (onehot_w - p) / (1 - p_w) - (onehot_l - p) / (1 - p_l)
        factor = beta * (_sigmoid(gap) - 1.0) / n
        gap_grad = (onehot_w - raw) / (1.0 - p_w)[:, None] - (onehot_l - raw) / (
            1.0 - p_l
        )[:, None]
        d_logits = d_logits + factor[:, None] * gap_grad
    grads = _grads_for(net, delta, states, d_logits)
    extras = {"winner_nll": nll, "mean_odds_gap": float(gap.mean())}
    return LossValue(value=value, grads=grads, extras=extras)


def accuracy(net: ToyNet, delta: ParamSet | None, batch: SupervisedBatch) -> float:
    """Fraction of batch rows whose argmax class matches the label."""
    scores = logits(net, delta, batch.inputs)
    _check_classes(batch.labels, scores.shape[1], "labels")
    return float((scores.argmax(axis=1) == batch.labels).mean())


def preference_rate(net: ToyNet, delta: ParamSet | None, batch: PreferenceBatch) -> float:
    """Fraction of pairs where the winner outscores the loser."""
    scores = logits(net, delta, batch.inputs)
    _check_classes(batch.winners, scores.shape[1], "winners")
    _check_classes(batch.losers, scores.shape[1], "losers")
    rows = np.arange(len(batch))
    return float((scores[rows, batch.winners] > scores[rows, batch.losers]).mean())


# ---------------------------------------------------------------------------
# Low-rank adapter training support
# ---------------------------------------------------------------------------


def lora_grads(adapter: LoraAdapter, dense_grads: ParamSet) -> ParamSet:
    """Chain rule through adapter composition.

    Given gradients w.r.t. the composed dense delta (scaling * up @ down
    per layer), returns gradients w.r.t. the factors, under names
    "{layer}.down" and "{layer}.up".
    """
    out = {}
    s = float(adapter.scaling)
    for name, (down, up) in adapter.factors.items():
        g = dense_grads[name]
        down = as_tensor(down)
        up = as_tensor(up)
        out[f"{name}.up"] = s * matmul(g, down.T)
        out[f"{name}.down"] = s * matmul(up.T, g)
    return ParamSet._wrap(out)


def pack_lora(adapter: LoraAdapter) -> ParamSet:
    """Factors as one ParamSet ("{layer}.down" / "{layer}.up")."""
    out = {}
    for name, (down, up) in adapter.factors.items():
        out[f"{name}.down"] = as_tensor(down)
        out[f"{name}.up"] = as_tensor(up)
    return ParamSet(out)


def unpack_lora(factors: ParamSet, rank: int, scaling: float = 1.0) -> LoraAdapter:
    """Inverse of pack_lora."""
    layers = {}
    for name in factors.names:
        if name.endswith(".down"):
            stem = name[: -len(".down")]
            layers[stem] = (factors[name], factors[f"{stem}.up"])
    return LoraAdapter(factors=layers, rank=rank, scaling=scaling)


def init_lora(params: ParamSet, rank: int, rng: SeededRng, scaling: float = 1.0) -> LoraAdapter:
    """Fresh adapter over every 2-d tensor in params.

    down factors start random (scale 1/sqrt(fan_in)), up factors start at
    zero, so the composed delta is exactly zero before any training. Each
    layer draws from its own substream, independent of iteration order.
    """
    factors = {}
    for name, tensor in params.items():
        if tensor.ndim != 2:
            continue
        out_dim, in_dim = tensor.shape
        sub = rng.spawn(name)
        down = sub.normals(rank * in_dim).reshape(rank, in_dim) / np.sqrt(in_dim)
        factors[name] = (down, np.zeros((out_dim, rank)))
    if not factors:
        raise ShapeMismatch("params hold no 2-d tensors to adapt")
    return LoraAdapter(factors=factors, rank=rank, scaling=scaling)


def lora_sft_loss(
    net: ToyNet,
    adapter: LoraAdapter,
    batch: SupervisedBatch,
    l1_lambda: float = 0.0,
) -> LossValue:
    """Supervised loss of net plus the composed adapter delta.

    The L1 penalty (if any) applies to the composed dense delta, as in
    sft_loss; gradients come back over the factor schema.
    """
    dense = compose_lora(adapter)
    inner = sft_loss(net, dense, batch, l1_lambda)
    return LossValue(inner.value, lora_grads(adapter, inner.grads), dict(inner.extras))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def check_gradients(
    loss_fn,
    net: ToyNet,
    delta: ParamSet | None,
    batch,
    epsilon: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference grads.

    loss_fn maps (net, delta, batch) to a LossValue. Every delta
    coordinate is probed, or a random subsample of `samples` of them
    (without replacement) for large deltas. Coordinates within 10*epsilon
    of zero but not exactly zero are skipped: they sit on the L1
    subgradient kink where finite differences are meaningless. Relative
    error uses max(|fd|, |analytic|, 1e-8) in the denominator so
    near-zero gradients compare on an absolute scale.
    """
    epsilon = float(epsilon)
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if delta is None:
        delta = ParamSet({name: np.zeros_like(t) for name, t in net.params.items()})
    analytic = loss_fn(net, delta, batch).grads
    coords = []
    for name in delta.names:
        flat = delta[name].ravel()
        for i in range(flat.size):
            v = abs(float(flat[i]))
            if v == 0.0 or v > 10.0 * epsilon:
                coords.append((name, i))
    if not coords:
        raise ValueError("no coordinates left to check")
    take = min(samples, len(coords))
    order = np.argsort(SeededRng(seed).uniforms(len(coords)), kind="stable")[:take]

    worst = 0.0
    for pos in order:
        name, idx = coords[int(pos)]
        tensors = delta.to_dict()
        flat = tensors[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + epsilon
        up = loss_fn(net, ParamSet(tensors), batch).value
        flat[idx] = original - epsilon
        down = loss_fn(net, ParamSet(tensors), batch).value
        fd = (up - down) / (2.0 * epsilon)
        an = float(analytic[name].ravel()[idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Dataset files
#
# Line-oriented text (docs/dataset_format.md). The first non-blank line is
# a header:
#
#     # dataset kind=<supervised|preference> dims=<d>
#
# Every following non-blank, non-comment line holds d feature floats then
# one label (supervised) or winner and loser labels (preference), all
# whitespace-separated. Floats are written with repr() so values
# round-trip bit-exactly.
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^#\s*dataset\s+kind=(supervised|preference)\s+dims=(\d+)\s*$")


def save_dataset(path, batch) -> None:
    """Write a batch in the line-oriented dataset format, atomically."""
    if isinstance(batch, SupervisedBatch):
        kind = "supervised"
        labels = [(int(v),) for v in batch.labels]
    elif isinstance(batch, PreferenceBatch):
        kind = "preference"
        labels = [(int(w), int(l)) for w, l in zip(batch.winners, batch.losers)]
    else:
        raise TypeError(f"cannot save {type(batch).__name__} as a dataset")
    lines = [f"# dataset kind={kind} dims={batch.inputs.shape[1]}"]
    for row, tail in zip(batch.inputs, labels):
        fields = [repr(float(v)) for v in row] + [str(v) for v in tail]
        lines.append(" ".join(fields))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _parse_label(token: str, what: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"{what} must be an integer, got {token!r}", field=f"line {lineno}") from None
    if value < 0:
        raise FormatError(f"{what} must be non-negative, got {value}", field=f"line {lineno}")
    return value


def load_dataset(path):
    """Read a dataset file into a SupervisedBatch or PreferenceBatch."""
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    kind = None
    dims = 0
    inputs, first, second = [], [], []
    for lineno, line in enumerate(raw_lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if kind is None:
            m = _HEADER_RE.match(stripped)
            if m is None:
                raise FormatError(
                    "first line must be '# dataset kind=<kind> dims=<d>'",
                    field=f"line {lineno}",
                )
            kind = m.group(1)
            dims = int(m.group(2))
            continue
        if stripped.startswith("#"):
            continue
        tokens = stripped.split()
        expected = dims + (1 if kind == "supervised" else 2)
        if len(tokens) != expected:
            raise FormatError(
                f"expected {expected} fields, got {len(tokens)}", field=f"line {lineno}"
            )
        try:
            features = [float(t) for t in tokens[:dims]]
        except ValueError:
            raise FormatError("malformed feature value", field=f"line {lineno}") from None
        if not all(np.isfinite(features)):
            raise FormatError("features must be finite", field=f"line {lineno}")
        inputs.append(features)
        if kind == "supervised":
            first.append(_parse_label(tokens[dims], "label", lineno))
        else:
            winner = _parse_label(tokens[dims], "winner", lineno)
            loser = _parse_label(tokens[dims + 1], "loser", lineno)
            if winner == loser:
                raise FormatError("winner and loser must differ", field=f"line {lineno}")
            first.append(winner)
            second.append(loser)
    if kind is None:
        raise FormatError("dataset file is empty", field="line 1")
    if not inputs:
        raise FormatError("dataset has a header but no rows", field=f"line {len(raw_lines)}")
    matrix = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), dims)
    if kind == "supervised":
        return SupervisedBatch(matrix, np.asarray(first, dtype=np.int64))
    return PreferenceBatch(
        matrix,
        np.asarray(first, dtype=np.int64),
        np.asarray(second, dtype=np.int64),
    )
