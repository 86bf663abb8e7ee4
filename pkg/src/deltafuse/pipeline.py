"""Parallel vs sequential fine-tuning experiments on a synthetic benchmark.

The module trains delta adapters on small dense classifiers and compares
four arms:

- parallel_sparse: an L1-regularized supervised delta and a preference
  delta trained independently from the same base, then merged
- parallel_dense: the same without the L1 penalty
- sequential: supervised first, then preference training continued from
  that delta (the reference model for DPO is base plus the supervised
  delta)
- individual: each delta alone, plus the untouched base

The benchmark generator builds classification data whose informative
features come in correlated duplicate pairs (so an L1 penalty can
concentrate each pair's weight onto one coordinate) and preference pairs
that partly contradict the classification labels (the conflict knob), so
sequential training pays a measurable alignment tax. Everything is a pure
function of the seed.

A structural note on the sequential arm: for a linear policy the
preference margin is linear in the parameters, so the DPO gradient
depends on the trainable delta only through its displacement from the
reference delta. Starting stage two at the supervised delta and anchoring
the reference there therefore reproduces, exactly, the delta that
preference training from zero would produce, and the sequential arm's
parameters coincide with dense task arithmetic to machine precision. The
report shows this as two identical rows. ORPO's winner NLL term is not a
function of that displacement alone, so under orpo the two rows differ."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .delta_ops import DeltaSet, apply_delta, extract_delta, sparsity
from .errors import (
    DivergenceDetected,
    EmptySuite,
    FormatError,
    UnsupportedMethod,
)
from .merge_engine import METHODS, MergeRecipe, RecipeInput, apply_recipe
from .param_core import ParamSet, SeededRng, zeros_like
from .sparsify import SparsifySpec
from .toy_models import (
    PreferenceBatch,
    SupervisedBatch,
    ToyNet,
    accuracy,
    dpo_loss,
    init_params,
    orpo_loss,
    preference_rate,
    sft_loss,
)

LOSSES = ("sft", "sft_sparse", "dpo", "orpo")
OPTIMIZERS = ("sgd", "sgd_momentum")
PREF_METHODS = ("dpo", "orpo")
ARMS = ("individual", "parallel_dense", "parallel_sparse", "sequential")

_MOMENTUM = 0.9
_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_PATIENCE = 50


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings for one training stage.

    steps may be 0 so orchestrators can express a skipped stage, but
    train_adapter itself requires at least one step. lr may be 0 (a
    degenerate run returning a zero delta); productive training of course
    needs lr > 0. l1_lambda only applies to the sft_sparse loss; beta only
    to the preference losses.
    """

    steps: int
    lr: float
    l1_lambda: float = 0.0
    beta: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    pref_method: str = "dpo"

    def __post_init__(self):
        if not isinstance(self.steps, int) or isinstance(self.steps, bool) or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps!r}")
        if not (math.isfinite(self.lr) and self.lr >= 0.0):
            raise ValueError(f"lr must be a finite non-negative real, got {self.lr!r}")
        if not (math.isfinite(self.l1_lambda) and self.l1_lambda >= 0.0):
            raise ValueError(f"l1_lambda must be non-negative, got {self.l1_lambda!r}")
        if not (math.isfinite(self.beta) and self.beta > 0.0):
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {list(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.pref_method not in PREF_METHODS:
            raise ValueError(
                f"pref_method must be one of {list(PREF_METHODS)}, got {self.pref_method!r}"
            )


def train_adapter(net: ToyNet, loss: str, data, config: TrainConfig, *,
                  init_delta: DeltaSet | None = None,
                  ref_delta: DeltaSet | None = None) -> DeltaSet:
    """Train a delta by full-batch gradient descent; the net stays frozen.

    loss is one of sft, sft_sparse (adds the config's L1 penalty), dpo
    (reference model = base plus ref_delta) or orpo. The returned delta
    carries initial and final loss in its metadata. Training is
    deterministic: full-batch descent uses no randomness beyond the
    caller-provided data.
    """
    if loss not in LOSSES:
        raise UnsupportedMethod(f"unknown loss {loss!r}, expected one of {list(LOSSES)}")
    if config.steps < 1:
        raise ValueError("train_adapter needs steps >= 1")
    if data is None:
        raise ValueError("training data is required")
    supervised = loss in ("sft", "sft_sparse")
    expected = SupervisedBatch if supervised else PreferenceBatch
    if not isinstance(data, expected):
        raise ValueError(f"loss {loss!r} trains on a {expected.__name__}")
    lam = config.l1_lambda if loss == "sft_sparse" else 0.0

    def compute(delta):
        if supervised:
            return sft_loss(net, delta, data, l1_lambda=lam)
        if loss == "dpo":
            return dpo_loss(net, ref_delta, delta, data, beta=config.beta)
        return orpo_loss(net, delta, data, beta=config.beta)

    delta = zeros_like(net.params) if init_delta is None else init_delta
    velocity = None
    initial = None
    blown = 0
    for step in range(config.steps):
        out = compute(delta)
        if not math.isfinite(out.value):
            raise DivergenceDetected(f"loss became non-finite at step {step}")
        if initial is None:
            initial = out.value
        if out.value > _DIVERGENCE_FACTOR * initial:
            blown += 1
            if blown >= _DIVERGENCE_PATIENCE:
                raise DivergenceDetected(
                    f"loss exceeded {_DIVERGENCE_FACTOR:g}x its initial value "
                    f"for {_DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                )
        else:
            blown = 0
        if config.optimizer == "sgd_momentum":
            velocity = out.grads if velocity is None else velocity.scale(_MOMENTUM).add(out.grads)
            update = velocity
        else:
            update = out.grads
        delta = delta.subtract(update.scale(config.lr))
    final = compute(delta).value
    if not math.isfinite(final):
        raise DivergenceDetected("loss became non-finite after the last step")
    return delta.with_metadata({
        "loss": loss,
        "steps": str(config.steps),
        "initial_loss": repr(float(initial)),
        "final_loss": repr(float(final)),
    })


def run_sequential(net: ToyNet, sft_data, pref_data, config: TrainConfig,
                   pref_config: TrainConfig | None = None) -> DeltaSet:
    """Two-stage training: supervised delta first, preference continues it.

    The preference stage starts from the supervised delta and, for DPO,
    uses base-plus-supervised-delta as the frozen reference. Either stage
    is skipped when its data is None or its config has steps == 0; with
    both stages skipped the zero delta comes back.
    """
    pref_config = config if pref_config is None else pref_config
    if sft_data is None or config.steps == 0:
        sft_delta = zeros_like(net.params)
    else:
        sft_delta = train_adapter(net, "sft_sparse", sft_data, config)
    if pref_data is None or pref_config.steps == 0:
        return sft_delta
    return train_adapter(
        net, pref_config.pref_method, pref_data, pref_config,
        init_delta=sft_delta, ref_delta=sft_delta,
    )


def paired_recipe(method: str, *, weights=(1.0, 1.0), density: float = 0.5,
                  drop: float = 0.5, seed: int = 0, t: float = 0.5,
                  granularity: str | None = None, normalize_weights: bool = True,
                  sparsify: tuple = (None, None)) -> MergeRecipe:
    """A two-input recipe labeled sft/pref, for in-memory parallel merges."""
    if method not in METHODS:
        raise UnsupportedMethod(f"unknown merge method {method!r}")
    for spec in sparsify:
        if spec is not None and not isinstance(spec, SparsifySpec):
            raise ValueError("sparsify entries must be SparsifySpec or None")
    return MergeRecipe(
        method=method,
        inputs=[
            RecipeInput(delta="sft", weight=float(weights[0]), sparsify=sparsify[0]),
            RecipeInput(delta="pref", weight=float(weights[1]), sparsify=sparsify[1]),
        ],
        density=density,
        drop=drop,
        seed=int(seed),
        t=t,
        granularity=granularity,
        normalize_weights=normalize_weights,
    )


def run_parallel(net: ToyNet, sft_data, pref_data, config: TrainConfig,
                 recipe: MergeRecipe | None = None,
                 pref_config: TrainConfig | None = None) -> ParamSet:
    """Train both deltas independently from the base, merge per the recipe.

    The two adapters never see each other's data or state, so training
    order is irrelevant. A None dataset (or a zero-step stage config)
    contributes a zero delta, which reproduces the individual arms through
    the same merge path. Returns the merged parameters.
    """
    pref_config = config if pref_config is None else pref_config
    recipe = paired_recipe("ties") if recipe is None else recipe
    if len(recipe.inputs) != 2:
        raise ValueError("parallel merging pairs one supervised input with one preference input")
    if sft_data is None or config.steps == 0:
        sft_delta = zeros_like(net.params)
    else:
        sft_delta = train_adapter(net, "sft_sparse", sft_data, config)
    if pref_data is None or pref_config.steps == 0:
        pref_delta = zeros_like(net.params)
    else:
        pref_delta = train_adapter(net, pref_config.pref_method, pref_data, pref_config)
    return apply_recipe(recipe, net.params, [sft_delta, pref_delta])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    """Per-suite metrics plus their unweighted mean."""

    per_task: dict
    average: float


def evaluate(model, suites) -> EvalResult:
    """Score a model on named suites; the average weighs every suite equally.

    model is a ParamSet or a ToyNet. Supervised suites score argmax
    accuracy; preference suites score the fraction of pairs ranking the
    winner above the loser.
    """
    net = model if isinstance(model, ToyNet) else ToyNet(model)
    if not suites:
        raise EmptySuite("no evaluation suites provided")
    per_task = {}
    for name in sorted(suites):
        batch = suites[name]
        if isinstance(batch, SupervisedBatch):
            per_task[name] = accuracy(net, None, batch)
        elif isinstance(batch, PreferenceBatch):
            per_task[name] = preference_rate(net, None, batch)
        else:
            raise ValueError(f"suite {name!r} is neither a supervised nor a preference batch")
    return EvalResult(per_task=per_task, average=float(sum(per_task.values()) / len(per_task)))


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    """Generator knobs for the synthetic classification/preference tasks.

    Each class owns one pair of feature dimensions (2c, 2c+1) that carry
    the same per-row draw plus independent jitter, so the pair is nearly
    duplicated and a weight on either coordinate works; remaining
    dimensions are low-amplitude noise at training time; held-out splits
    draw them at the larger eval_noise amplitude, so deltas that picked
    up drift on spurious dimensions pay for it at evaluation while
    deltas that kept them at zero are unaffected. Preference pairs are
    drawn from a
    two-class subslice: inputs of the conflict class c* and of its rival
    (c* + 1). On c* inputs a conflict-sized fraction prefers the rival
    over the true class; all remaining pairs back the true class, with c*
    reinforcing pairs avoiding the rival as a loser so the preference
    data stays internally satisfiable. The tension is therefore purely
    against the classification labels, and classes outside the subslice
    are never seen by preference training.
    """

    dims: int = 32
    classes: int = 4
    separation: float = 1.0
    spread: float = 0.3
    jitter: float = 0.05
    noise: float = 0.02
    eval_noise: float = 0.3
    train_size: int = 256
    pref_size: int = 256
    eval_size: int = 400
    pretrain_size: int = 192
    pretrain_steps: int = 60
    pretrain_lr: float = 0.03
    conflict: float = 0.85
    conflict_class: int = 0

    def __post_init__(self):
        ints = {
            "dims": self.dims, "classes": self.classes, "train_size": self.train_size,
            "pref_size": self.pref_size, "eval_size": self.eval_size,
            "pretrain_size": self.pretrain_size, "pretrain_steps": self.pretrain_steps,
        }
        for name, value in ints.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.dims < 2 * self.classes:
            raise ValueError(f"dims must be at least {2 * self.classes} for {self.classes} classes")
        if min(self.train_size, self.pref_size, self.eval_size) < 1:
            raise ValueError("train, preference and eval sizes must be positive")
        for name in ("separation", "spread", "jitter", "noise", "eval_noise", "pretrain_lr"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be a finite non-negative real, got {value!r}")
        if not (0.0 <= self.conflict <= 1.0):
            raise ValueError(f"conflict must lie in [0, 1], got {self.conflict!r}")
        if not isinstance(self.conflict_class, int) or isinstance(self.conflict_class, bool) \
                or not (0 <= self.conflict_class < self.classes):
            raise ValueError(
                f"conflict_class must be a class index below {self.classes}, "
                f"got {self.conflict_class!r}"
            )

    def to_dict(self) -> dict:
        return {
            "dims": self.dims, "classes": self.classes,
            "separation": self.separation, "spread": self.spread,
            "jitter": self.jitter, "noise": self.noise, "eval_noise": self.eval_noise,
            "train_size": self.train_size, "pref_size": self.pref_size,
            "eval_size": self.eval_size, "pretrain_size": self.pretrain_size,
            "pretrain_steps": self.pretrain_steps, "pretrain_lr": self.pretrain_lr,
            "conflict": self.conflict, "conflict_class": self.conflict_class,
        }

    @classmethod
    def from_dict(cls, data) -> "BenchmarkConfig":
        if not isinstance(data, dict):
            raise FormatError("benchmark config must be a JSON object", field="benchmark")
        known = set(cls().to_dict())
        for key in data:
            if key not in known:
                raise FormatError("unexpected benchmark config key", field=key)
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"invalid benchmark config: {exc}", field="benchmark") from None


@dataclass(frozen=True)
class Benchmark:
    """One seeded instance of the synthetic tasks plus the shared base net."""

    seed: int
    config: BenchmarkConfig
    base: ToyNet
    pretrain: SupervisedBatch
    sft_train: SupervisedBatch
    pref_train: PreferenceBatch
    suites: dict


def _class_features(rng: SeededRng, labels: np.ndarray, cfg: BenchmarkConfig,
                    noise_amp: float | None = None) -> np.ndarray:
    n = labels.shape[0]
    pairs = cfg.classes
    x = np.zeros((n, cfg.dims))
    shared = rng.normals(n * pairs).reshape(n, pairs) * cfg.spread
    jit = rng.normals(n * 2 * pairs).reshape(n, 2 * pairs) * cfg.jitter
    for k in range(pairs):
        core = shared[:, k] + cfg.separation * (labels == k)
        x[:, 2 * k] = core + jit[:, 2 * k]
        x[:, 2 * k + 1] = core + jit[:, 2 * k + 1]
    tail = cfg.dims - 2 * pairs
    if tail:
        amp = cfg.noise if noise_amp is None else noise_amp
        x[:, 2 * pairs:] = rng.normals(n * tail).reshape(n, tail) * amp
    return x


def _supervised_split(rng: SeededRng, cfg: BenchmarkConfig, count: int,
                      noise_amp: float | None = None) -> SupervisedBatch:
    labels = np.arange(count, dtype=np.int64) % cfg.classes
    return SupervisedBatch(_class_features(rng, labels, cfg, noise_amp), labels)


def _preference_split(rng: SeededRng, cfg: BenchmarkConfig, count: int,
                      noise_amp: float | None = None) -> PreferenceBatch:
    star = cfg.conflict_class
    rival = (star + 1) % cfg.classes
    # the preference domain is the two-class subslice {c*, rival}
    labels = np.where(np.arange(count) % 2 == 0, star, rival).astype(np.int64)
    x = _class_features(rng, labels, cfg, noise_amp)
    conflicted = (labels == star) & (rng.uniforms(count) < cfg.conflict)
    offsets = rng.integers(cfg.classes - 1, count)
    losers = (labels + 1 + offsets) % cfg.classes
    if cfg.classes > 2:
        # reinforcing pairs on the conflict class skip its preferred rival,
        # keeping the preference data free of internal contradictions
        shifted = (labels + 2 + offsets % (cfg.classes - 2)) % cfg.classes
        losers = np.where(labels == star, shifted, losers)
    winners = np.where(conflicted, rival, labels)
    losers = np.where(conflicted, labels, losers)
    return PreferenceBatch(x, winners, losers)


def make_benchmark(seed: int, config: BenchmarkConfig | None = None) -> Benchmark:
    """Build all splits and a briefly pretrained base net from one seed."""
    cfg = BenchmarkConfig() if config is None else config
    rng = SeededRng(int(seed))
    pretrain = _supervised_split(rng.spawn("pretrain"), cfg, cfg.pretrain_size)
    sft_train = _supervised_split(rng.spawn("sft"), cfg, cfg.train_size)
    pref_train = _preference_split(rng.spawn("pref"), cfg, cfg.pref_size)
    suites = {
        "classification": _supervised_split(
            rng.spawn("eval.classification"), cfg, cfg.eval_size, cfg.eval_noise),
        "preference": _preference_split(
            rng.spawn("eval.preference"), cfg, cfg.eval_size, cfg.eval_noise),
    }
    init = init_params([cfg.dims, cfg.classes], rng.spawn("init"))
    # A broadly trained base has learned to ignore the uninformative
    # dimensions; start its weight columns there at zero so only the
    # fine-tuning deltas can introduce support on them.
    weight = init["layer0.weight"].copy()
    weight[:, 2 * cfg.classes:] = 0.0
    net = ToyNet(ParamSet({"layer0.weight": weight, "layer0.bias": init["layer0.bias"]}))
    if cfg.pretrain_steps > 0:
        warmup = TrainConfig(steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, seed=int(seed))
        net = ToyNet(apply_delta(net.params, train_adapter(net, "sft", pretrain, warmup)))
    return Benchmark(
        seed=int(seed), config=cfg, base=net, pretrain=pretrain,
        sft_train=sft_train, pref_train=pref_train, suites=suites,
    )


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of an experiment matrix, loadable from JSON."""

    arms: tuple = ARMS
    methods: tuple = METHODS
    seeds: tuple = tuple(range(10))
    steps: int = 8000
    lr: float = 0.03
    pref_steps: int | None = 1500
    pref_lr: float | None = 0.05
    sparse_lambda: float = 2e-3
    lambda_grid: tuple = (0.0, 1e-4, 1e-3)
    beta: float = 2.0
    pref_method: str = "dpo"
    optimizer: str = "sgd"
    density: float = 0.5
    drop: float = 0.5
    t: float = 0.5
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "lambda_grid", tuple(self.lambda_grid))
        if not self.arms:
            raise ValueError("at least one arm is required")
        for arm in self.arms:
            if arm not in ARMS:
                raise ValueError(f"unknown arm {arm!r}, expected a subset of {list(ARMS)}")
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"unknown merge method {method!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for seed in self.seeds:
            if not isinstance(seed, int) or isinstance(seed, bool):
                raise ValueError(f"seeds must be integers, got {seed!r}")
        if not (math.isfinite(self.sparse_lambda) and self.sparse_lambda >= 0.0):
            raise ValueError(
                f"sparse_lambda must be a finite non-negative real, got {self.sparse_lambda!r}"
            )
        for lam in self.lambda_grid:
            if isinstance(lam, bool) or not (math.isfinite(lam) and lam >= 0.0):
                raise ValueError(
                    f"lambda_grid entries must be finite non-negative reals, got {lam!r}"
                )
        if not (math.isfinite(self.density) and 0.0 < self.density <= 1.0):
            raise ValueError(f"density must lie in (0, 1], got {self.density!r}")
        if not (math.isfinite(self.drop) and 0.0 <= self.drop < 1.0):
            raise ValueError(f"drop must lie in [0, 1), got {self.drop!r}")
        if not (math.isfinite(self.t) and 0.0 <= self.t <= 1.0):
            raise ValueError(f"t must lie in [0, 1], got {self.t!r}")
        # reuse the per-stage validation
        self.stage_config()
        self.pref_stage_config()

    def stage_config(self, l1_lambda: float = 0.0, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, lr=self.lr, l1_lambda=l1_lambda, beta=self.beta,
            seed=seed, optimizer=self.optimizer, pref_method=self.pref_method,
        )

    def pref_stage_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            steps=self.steps if self.pref_steps is None else self.pref_steps,
            lr=self.lr if self.pref_lr is None else self.pref_lr,
            beta=self.beta, seed=seed,
            optimizer=self.optimizer, pref_method=self.pref_method,
        )

    def to_dict(self) -> dict:
        return {
            "arms": list(self.arms),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "steps": self.steps,
            "lr": self.lr,
            "pref_steps": self.pref_steps,
            "pref_lr": self.pref_lr,
            "sparse_lambda": self.sparse_lambda,
            "lambda_grid": list(self.lambda_grid),
            "beta": self.beta,
            "pref_method": self.pref_method,
            "optimizer": self.optimizer,
            "density": self.density,
            "drop": self.drop,
            "t": self.t,
            "benchmark": self.benchmark.to_dict(),
        }

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise FormatError("experiment config must be a JSON object", field="config")
        known = set(cls().to_dict())
        for key in data:
            if key not in known:
                raise FormatError("unexpected experiment config key", field=key)
        kwargs = dict(data)
        if "benchmark" in kwargs:
            kwargs["benchmark"] = BenchmarkConfig.from_dict(kwargs["benchmark"])
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"invalid experiment config: {exc}", field="config") from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc.msg}", offset=exc.pos) from None
        return cls.from_dict(data)


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_json(fh.read())


@dataclass(frozen=True)
class ReportRow:
    """One (arm, method, seed) cell. method is "-" where it does not apply."""

    arm: str
    method: str
    seed: int
    metrics: dict | None
    average: float | None
    sparsity: float | None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "arm": self.arm, "method": self.method, "seed": self.seed,
            "metrics": self.metrics, "average": self.average,
            "sparsity": self.sparsity, "status": self.status,
        }


@dataclass(frozen=True)
class ExperimentReport:
    """Sorted rows plus per-(arm, method) aggregates and the config used."""

    config: ExperimentConfig
    rows: tuple
    aggregates: dict

    def select(self, arm: str | None = None, method: str | None = None) -> list:
        out = []
        for row in self.rows:
            if arm is not None and row.arm != arm:
                continue
            if method is not None and row.method != method:
                continue
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def _aggregate(rows) -> dict:
    cells = {}
    for row in rows:
        if row.status != "ok":
            continue
        cells.setdefault((row.arm, row.method), []).append(row.average)
    out = {}
    for (arm, method), values in sorted(cells.items()):
        arr = np.asarray(values)
        out[f"{arm}/{method}"] = {
            "mean": float(arr.mean()),
            "stddev": float(arr.std()),
            "count": int(arr.size),
        }
    return out


def _experiment_cells(cfg: ExperimentConfig):
    for arm in sorted(cfg.arms):
        if arm == "individual":
            for variant in ("base", "pref", "sft"):
                yield arm, variant
        elif arm == "sequential":
            yield arm, "-"
        else:
            for method in sorted(cfg.methods):
                yield arm, method


def run_experiment(config: ExperimentConfig | None = None) -> ExperimentReport:
    """Run the full arms x methods x seeds matrix and aggregate the rows.

    Deltas shared between cells (the dense and sparse supervised deltas
    and the preference delta) are trained once per seed. A cell whose
    training or merge raises a package error is flagged as failed and the
    rest of the matrix still runs.
    """
    cfg = ExperimentConfig() if config is None else config
    rows = []
    for seed in cfg.seeds:
        bench = make_benchmark(seed, cfg.benchmark)
        base = bench.base
        cache = {}

        def shared(key, build, cache=cache):
            if key not in cache:
                try:
                    cache[key] = ("ok", build())
                except Exception as exc:  # noqa: BLE001 - flagged per row
                    cache[key] = ("err", exc)
            state, value = cache[key]
            if state == "err":
                raise value
            return value

        def sft_delta(lam, bench=bench, base=base, seed=seed, shared=shared):
            return shared(("sft", lam), lambda: train_adapter(
                base, "sft_sparse", bench.sft_train, cfg.stage_config(lam, seed)))

        def pref_delta(bench=bench, base=base, seed=seed, shared=shared):
            return shared(("pref",), lambda: train_adapter(
                base, cfg.pref_method, bench.pref_train, cfg.pref_stage_config(seed)))

        for arm, method in _experiment_cells(cfg):
            try:
                if arm == "individual":
                    if method == "base":
                        params = base.params
                    elif method == "sft":
                        params = apply_delta(base.params, sft_delta(0.0))
                    else:
                        params = apply_delta(base.params, pref_delta())
                elif arm == "sequential":
                    stage2 = train_adapter(
                        base, cfg.pref_method, bench.pref_train, cfg.pref_stage_config(seed),
                        init_delta=sft_delta(0.0), ref_delta=sft_delta(0.0),
                    )
                    params = apply_delta(base.params, stage2)
                else:
                    lam = cfg.sparse_lambda if arm == "parallel_sparse" else 0.0
                    recipe = paired_recipe(
                        method, density=cfg.density, drop=cfg.drop, seed=seed, t=cfg.t,
                    )
                    params = apply_recipe(recipe, base.params, [sft_delta(lam), pref_delta()])
                result = evaluate(params, bench.suites)
                effective = extract_delta(params, base.params)
                rows.append(ReportRow(
                    arm=arm, method=method, seed=int(seed),
                    metrics=dict(result.per_task), average=result.average,
                    sparsity=(sparsity(effective, element_weighted=True).average
                              if len(effective) else 1.0),
                ))
            except Exception as exc:  # noqa: BLE001 - row-level isolation
                rows.append(ReportRow(
                    arm=arm, method=method, seed=int(seed),
                    metrics=None, average=None, sparsity=None,
                    status=f"failed: {type(exc).__name__}: {exc}",
                ))
    rows.sort(key=lambda row: (row.arm, row.method, row.seed))
    return ExperimentReport(config=cfg, rows=tuple(rows), aggregates=_aggregate(rows))


def format_report_table(report: ExperimentReport) -> str:
    """Aligned text table: one line per (arm, method) with per-task means."""
    tasks = sorted({
        name for row in report.rows if row.metrics is not None for name in row.metrics
    })
    header = ["arm", "method"] + tasks + ["average", "stddev", "seeds"]
    lines = [header]
    cells = {}
    for row in report.rows:
        if row.status == "ok":
            cells.setdefault((row.arm, row.method), []).append(row)
    for (arm, method), ok_rows in sorted(cells.items()):
        entry = report.aggregates[f"{arm}/{method}"]
        task_means = [
            f"{float(np.mean([r.metrics[t] for r in ok_rows])):.4f}" for t in tasks
        ]
        lines.append(
            [arm, method] + task_means
            + [f"{entry['mean']:.4f}", f"{entry['stddev']:.4f}", str(entry["count"])]
        )
    failed = [row for row in report.rows if row.status != "ok"]
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    text = "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
        for line in lines
    )
    if failed:
        text += "\n" + "\n".join(
            f"FAILED {row.arm}/{row.method} seed={row.seed}: {row.status}" for row in failed
        )
    return text + "\n"
