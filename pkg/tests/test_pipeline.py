"""Training stages, the synthetic benchmark, and the experiment matrix.

Directional claims about the four arms live in test_acceptance; here the
contracts are structural: stage plumbing, determinism, config round trips
and report arithmetic, all on deliberately tiny runs.
"""

import json
import math

import numpy as np
import pytest

from deltafuse import (
    Benchmark,
    BenchmarkConfig,
    DivergenceDetected,
    EmptySuite,
    ExperimentConfig,
    FormatError,
    ParamSet,
    SupervisedBatch,
    ToyNet,
    TrainConfig,
    UnsupportedMethod,
    apply_delta,
    apply_recipe,
    evaluate,
    extract_delta,
    make_benchmark,
    paired_recipe,
    run_experiment,
    run_parallel,
    run_sequential,
    sparsity,
    train_adapter,
    zeros_like,
)
from deltafuse.merge_engine import MergeRecipe, RecipeInput
from deltafuse.pipeline import format_report_table, load_experiment_config
from deltafuse.toy_models import PreferenceBatch

# Small enough that a full training stage is a few milliseconds.
SMALL = BenchmarkConfig(
    dims=8, classes=3, train_size=60, pref_size=60, eval_size=30,
    pretrain_size=36, pretrain_steps=5, pretrain_lr=0.05,
)
SMALL_EXPERIMENT = ExperimentConfig(
    methods=("task_arithmetic", "ties"),
    seeds=(0, 1),
    steps=40, lr=0.05, pref_steps=40, pref_lr=0.05,
    sparse_lambda=5e-3,
    benchmark=SMALL,
)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(0, SMALL)


@pytest.fixture(scope="module")
def default_bench():
    return make_benchmark(0)


@pytest.fixture(scope="module")
def report():
    return run_experiment(SMALL_EXPERIMENT)


class TestTrainConfig:
    def test_zero_steps_allowed_for_stage_skipping(self):
        assert TrainConfig(steps=0, lr=0.1).steps == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"steps": -1, "lr": 0.1},
            {"steps": True, "lr": 0.1},
            {"steps": 10, "lr": -0.1},
            {"steps": 10, "lr": math.inf},
            {"steps": 10, "lr": 0.1, "l1_lambda": -1e-3},
            {"steps": 10, "lr": 0.1, "beta": 0.0},
            {"steps": 10, "lr": 0.1, "optimizer": "adam"},
            {"steps": 10, "lr": 0.1, "pref_method": "ppo"},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestTrainAdapter:
    def test_zero_lr_returns_zero_delta_with_metadata(self, bench):
        delta = train_adapter(
            bench.base, "sft", bench.sft_train, TrainConfig(steps=1, lr=0.0)
        )
        for name in delta.names:
            assert not np.any(delta[name])
        assert delta.metadata["loss"] == "sft"
        assert delta.metadata["steps"] == "1"
        assert delta.metadata["initial_loss"] == delta.metadata["final_loss"]

    def test_training_reduces_loss(self, bench):
        delta = train_adapter(
            bench.base, "sft", bench.sft_train, TrainConfig(steps=200, lr=0.05)
        )
        assert (float(delta.metadata["final_loss"])
                < float(delta.metadata["initial_loss"]))

    def test_dpo_training_reduces_loss_and_helps_preferences(self, bench):
        from deltafuse.toy_models import preference_rate

        cfg = TrainConfig(steps=200, lr=0.05, beta=1.0)
        delta = train_adapter(bench.base, "dpo", bench.pref_train, cfg)
        assert (float(delta.metadata["final_loss"])
                < float(delta.metadata["initial_loss"]))
        before = preference_rate(bench.base, None, bench.pref_train)
        after = preference_rate(bench.base, delta, bench.pref_train)
        assert after > before

    def test_l1_penalty_produces_sparser_delta(self, bench):
        dense = train_adapter(
            bench.base, "sft_sparse", bench.sft_train,
            TrainConfig(steps=300, lr=0.02),
        )
        sparse = train_adapter(
            bench.base, "sft_sparse", bench.sft_train,
            TrainConfig(steps=300, lr=0.02, l1_lambda=5e-3),
        )
        # the oscillation band around a pinned coordinate scales with
        # lr * l1_lambda, so this short hot run needs a matching threshold
        dense_frac = sparsity(dense, threshold=1e-4, element_weighted=True).average
        sparse_frac = sparsity(sparse, threshold=1e-4, element_weighted=True).average
        assert sparse_frac > dense_frac + 0.2

    def test_plain_sft_ignores_l1_lambda(self, bench):
        cfg = TrainConfig(steps=50, lr=0.05, l1_lambda=5e-3)
        with_lambda = train_adapter(bench.base, "sft", bench.sft_train, cfg)
        without = train_adapter(
            bench.base, "sft", bench.sft_train, TrainConfig(steps=50, lr=0.05)
        )
        for name in with_lambda.names:
            np.testing.assert_array_equal(with_lambda[name], without[name])

    def test_momentum_changes_the_trajectory(self, bench):
        plain = train_adapter(
            bench.base, "sft", bench.sft_train, TrainConfig(steps=50, lr=0.02)
        )
        heavy = train_adapter(
            bench.base, "sft", bench.sft_train,
            TrainConfig(steps=50, lr=0.02, optimizer="sgd_momentum"),
        )
        assert any(
            np.max(np.abs(plain[name] - heavy[name])) > 1e-6 for name in plain.names
        )

    def test_deterministic(self, bench):
        cfg = TrainConfig(steps=120, lr=0.05)
        a = train_adapter(bench.base, "sft", bench.sft_train, cfg)
        b = train_adapter(bench.base, "sft", bench.sft_train, cfg)
        for name in a.names:
            np.testing.assert_array_equal(a[name], b[name])

    def test_divergence_detected_on_contradictory_data(self, bench):
        # identical inputs with different labels cannot be separated, so a
        # huge step oscillates instead of saturating into a perfect fit
        x = np.zeros((2, SMALL.dims))
        x[:, 0] = 1.0
        with pytest.raises(DivergenceDetected):
            train_adapter(
                bench.base, "sft", SupervisedBatch(x, [0, 1]),
                TrainConfig(steps=300, lr=1e6),
            )

    def test_rejects_zero_steps(self, bench):
        with pytest.raises(ValueError, match="steps >= 1"):
            train_adapter(
                bench.base, "sft", bench.sft_train, TrainConfig(steps=0, lr=0.1)
            )

    def test_rejects_unknown_loss(self, bench):
        with pytest.raises(UnsupportedMethod, match="rlhf"):
            train_adapter(
                bench.base, "rlhf", bench.sft_train, TrainConfig(steps=1, lr=0.1)
            )

    def test_rejects_missing_or_mismatched_data(self, bench):
        with pytest.raises(ValueError, match="data"):
            train_adapter(bench.base, "sft", None, TrainConfig(steps=1, lr=0.1))
        with pytest.raises(ValueError, match="PreferenceBatch"):
            train_adapter(
                bench.base, "dpo", bench.sft_train, TrainConfig(steps=1, lr=0.1)
            )
        with pytest.raises(ValueError, match="SupervisedBatch"):
            train_adapter(
                bench.base, "sft", bench.pref_train, TrainConfig(steps=1, lr=0.1)
            )


class TestRunSequential:
    def test_zero_pref_steps_returns_supervised_delta(self, bench):
        cfg = TrainConfig(steps=60, lr=0.05, l1_lambda=1e-3)
        skip = TrainConfig(steps=0, lr=0.05)
        two_stage = run_sequential(
            bench.base, bench.sft_train, bench.pref_train, cfg, pref_config=skip
        )
        sft_only = train_adapter(bench.base, "sft_sparse", bench.sft_train, cfg)
        for name in two_stage.names:
            np.testing.assert_array_equal(two_stage[name], sft_only[name])

    def test_missing_sft_data_trains_preference_from_zero(self, bench):
        cfg = TrainConfig(steps=60, lr=0.05)
        seq = run_sequential(bench.base, None, bench.pref_train, cfg)
        direct = train_adapter(bench.base, "dpo", bench.pref_train, cfg)
        for name in seq.names:
            np.testing.assert_array_equal(seq[name], direct[name])

    def test_both_stages_skipped_gives_zero_delta(self, bench):
        cfg = TrainConfig(steps=60, lr=0.05)
        delta = run_sequential(bench.base, None, None, cfg)
        for name in delta.names:
            assert not np.any(delta[name])

    def test_stage_two_uses_the_pref_method(self, bench):
        cfg = TrainConfig(steps=30, lr=0.05, pref_method="orpo")
        delta = run_sequential(bench.base, bench.sft_train, bench.pref_train, cfg)
        assert delta.metadata["loss"] == "orpo"


class TestPairedRecipeAndParallel:
    def test_recipe_shape(self):
        recipe = paired_recipe("ties", density=0.25, seed=7)
        assert recipe.method == "ties"
        assert [entry.delta for entry in recipe.inputs] == ["sft", "pref"]
        assert recipe.density == 0.25 and recipe.seed == 7

    def test_rejects_unknown_method(self):
        with pytest.raises(UnsupportedMethod, match="average"):
            paired_recipe("average")

    def test_rejects_bad_sparsify_entries(self):
        with pytest.raises(ValueError, match="SparsifySpec"):
            paired_recipe("ties", sparsify=("topk", None))

    def test_matches_manual_train_then_merge(self, bench):
        cfg = TrainConfig(steps=80, lr=0.05, l1_lambda=1e-3)
        pref_cfg = TrainConfig(steps=80, lr=0.05, beta=2.0)
        recipe = paired_recipe("ties", density=0.5)
        merged = run_parallel(
            bench.base, bench.sft_train, bench.pref_train, cfg,
            recipe=recipe, pref_config=pref_cfg,
        )
        sft = train_adapter(bench.base, "sft_sparse", bench.sft_train, cfg)
        pref = train_adapter(bench.base, "dpo", bench.pref_train, pref_cfg)
        manual = apply_recipe(recipe, bench.base.params, [sft, pref])
        for name in merged.names:
            np.testing.assert_array_equal(merged[name], manual[name])

    def test_empty_sft_side_reduces_to_single_delta_arithmetic(self, bench):
        cfg = TrainConfig(steps=80, lr=0.05)
        merged = run_parallel(
            bench.base, None, bench.pref_train, cfg,
            recipe=paired_recipe("task_arithmetic"),
        )
        pref = train_adapter(bench.base, "dpo", bench.pref_train, cfg)
        alone = apply_delta(bench.base.params, pref)
        for name in merged.names:
            np.testing.assert_allclose(merged[name], alone[name], atol=1e-15)

    def test_rejects_recipes_without_exactly_two_inputs(self, bench):
        cfg = TrainConfig(steps=1, lr=0.0)
        recipe = MergeRecipe(
            method="linear", inputs=[RecipeInput(delta="only", weight=1.0)]
        )
        with pytest.raises(ValueError, match="pairs"):
            run_parallel(bench.base, bench.sft_train, bench.pref_train, cfg, recipe)


class TestEvaluate:
    def test_hand_built_suites_average_evenly(self):
        net = ToyNet(ParamSet({
            "layer0.weight": [[1.0, 0.0], [0.0, 1.0]],
            "layer0.bias": [0.0, 0.0],
        }))
        x = np.array([[2.0, 0.0], [0.0, 2.0]])
        perfect = SupervisedBatch(x, [0, 1])
        half = SupervisedBatch(x, [0, 0])
        result = evaluate(net, {"good": perfect, "rough": half})
        assert result.per_task == {"good": 1.0, "rough": 0.5}
        assert result.average == 0.75

    def test_zero_net_scores_chance_accuracy_and_no_wins(self, default_bench):
        dims = default_bench.config.dims
        classes = default_bench.config.classes
        zero = ParamSet({
            "layer0.weight": np.zeros((classes, dims)),
            "layer0.bias": np.zeros(classes),
        })
        result = evaluate(zero, default_bench.suites)
        # labels cycle through the classes, so argmax ties resolve to class 0
        assert result.per_task["classification"] == 1.0 / classes
        assert result.per_task["preference"] == 0.0

    def test_param_set_and_net_agree(self, bench):
        direct = evaluate(bench.base, bench.suites)
        wrapped = evaluate(bench.base.params, bench.suites)
        assert direct == wrapped

    def test_empty_suites_rejected(self, bench):
        with pytest.raises(EmptySuite):
            evaluate(bench.base, {})

    def test_unknown_suite_type_rejected(self, bench):
        with pytest.raises(ValueError, match="neither"):
            evaluate(bench.base, {"junk": [1, 2, 3]})


class TestBenchmark:
    def test_deterministic_per_seed(self):
        a = make_benchmark(3, SMALL)
        b = make_benchmark(3, SMALL)
        np.testing.assert_array_equal(a.sft_train.inputs, b.sft_train.inputs)
        np.testing.assert_array_equal(
            a.pref_train.winners, b.pref_train.winners
        )
        for name in a.base.params.names:
            np.testing.assert_array_equal(a.base.params[name], b.base.params[name])

    def test_seeds_differ(self):
        a = make_benchmark(0, SMALL)
        b = make_benchmark(1, SMALL)
        assert np.max(np.abs(a.sft_train.inputs - b.sft_train.inputs)) > 1e-3

    def test_base_has_no_weight_on_noise_dims_before_pretraining(self):
        cfg = BenchmarkConfig(
            dims=8, classes=3, pretrain_steps=0,
            train_size=12, pref_size=12, eval_size=12, pretrain_size=12,
        )
        bench = make_benchmark(0, cfg)
        weight = bench.base.params["layer0.weight"]
        assert not np.any(weight[:, 2 * cfg.classes:])
        assert np.all(np.abs(weight[:, : 2 * cfg.classes]) > 0)

    def test_eval_splits_draw_noise_dims_at_eval_amplitude(self):
        cfg = BenchmarkConfig(
            dims=16, classes=3, noise=0.02, eval_noise=0.5,
            train_size=200, pref_size=200, eval_size=200,
            pretrain_size=12, pretrain_steps=0,
        )
        bench = make_benchmark(0, cfg)
        tail = slice(2 * cfg.classes, None)
        train_std = float(bench.sft_train.inputs[:, tail].std())
        eval_std = float(bench.suites["classification"].inputs[:, tail].std())
        assert train_std < 0.03
        assert 0.4 < eval_std < 0.6

    def test_preference_split_stays_on_the_conflict_subslice(self):
        cfg = BenchmarkConfig(
            dims=10, classes=4, conflict=0.5, pref_size=400,
            train_size=12, eval_size=12, pretrain_size=12, pretrain_steps=0,
        )
        pref = make_benchmark(0, cfg).pref_train
        star, rival = 0, 1
        assert np.all(pref.winners != pref.losers)
        assert set(np.unique(pref.winners)) <= {star, rival}
        # reinforcing pairs on the conflict class never name the rival as loser
        star_backed = pref.winners == star
        assert not np.any(pref.losers[star_backed] == rival)

    def test_conflict_extremes(self):
        cfg = dict(
            dims=10, classes=4, pref_size=200,
            train_size=12, eval_size=12, pretrain_size=12, pretrain_steps=0,
        )
        none = make_benchmark(0, BenchmarkConfig(conflict=0.0, **cfg)).pref_train
        star_inputs = np.arange(200) % 2 == 0
        assert np.all(none.winners[star_inputs] == 0)
        full = make_benchmark(0, BenchmarkConfig(conflict=1.0, **cfg)).pref_train
        assert np.all(full.winners[star_inputs] == 1)
        assert np.all(full.losers[star_inputs] == 0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"classes": 1},
            {"dims": 6, "classes": 4},
            {"conflict": 1.5},
            {"conflict_class": 4},
            {"noise": -0.1},
            {"eval_noise": math.nan},
            {"train_size": 0},
        ],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            BenchmarkConfig(**kwargs)

    def test_config_round_trip(self):
        cfg = BenchmarkConfig(dims=12, classes=3, conflict=0.4)
        assert BenchmarkConfig.from_dict(cfg.to_dict()) == cfg

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(FormatError) as err:
            BenchmarkConfig.from_dict({"dims": 12, "classses": 3})
        assert err.value.field == "classses"


class TestExperimentConfig:
    def test_round_trip_through_json(self):
        cfg = SMALL_EXPERIMENT
        again = ExperimentConfig.from_json(json.dumps(cfg.to_dict()))
        assert again == cfg

    def test_pref_stage_falls_back_to_main_stage(self):
        cfg = ExperimentConfig(
            steps=17, lr=0.25, pref_steps=None, pref_lr=None, benchmark=SMALL
        )
        stage = cfg.pref_stage_config(seed=3)
        assert stage.steps == 17 and stage.lr == 0.25 and stage.seed == 3

    def test_stage_config_carries_shared_knobs(self):
        cfg = ExperimentConfig(
            beta=3.0, optimizer="sgd_momentum", pref_method="orpo", benchmark=SMALL
        )
        stage = cfg.stage_config(l1_lambda=1e-3, seed=5)
        assert stage.beta == 3.0
        assert stage.optimizer == "sgd_momentum"
        assert stage.pref_method == "orpo"
        assert stage.l1_lambda == 1e-3

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"arms": ()},
            {"arms": ("serial",)},
            {"methods": ("average",)},
            {"seeds": ()},
            {"seeds": (0.5,)},
            {"steps": -1},
            {"sparse_lambda": -1.0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ExperimentConfig(**kwargs)

    def test_from_json_reports_parse_offset(self):
        with pytest.raises(FormatError) as err:
            ExperimentConfig.from_json('{"steps": }')
        assert err.value.offset == 10

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(FormatError) as err:
            ExperimentConfig.from_dict({"stepz": 5})
        assert err.value.field == "stepz"

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(SMALL_EXPERIMENT.to_dict()))
        assert load_experiment_config(path) == SMALL_EXPERIMENT


class TestRunExperiment:
    def test_row_inventory(self, report):
        per_seed = 3 + 1 + 2 * len(SMALL_EXPERIMENT.methods)
        assert len(report.rows) == per_seed * len(SMALL_EXPERIMENT.seeds)
        assert all(row.status == "ok" for row in report.rows)
        keys = [(row.arm, row.method, row.seed) for row in report.rows]
        assert keys == sorted(keys)

    def test_aggregates_recompute_from_rows(self, report):
        for key, entry in report.aggregates.items():
            arm, method = key.split("/")
            values = [
                row.average for row in report.select(arm, method)
                if row.status == "ok"
            ]
            assert entry["count"] == len(values)
            assert abs(entry["mean"] - np.mean(values)) < 1e-12
            assert abs(entry["stddev"] - np.std(values)) < 1e-12

    def test_report_is_byte_deterministic(self, report):
        again = run_experiment(SMALL_EXPERIMENT)
        assert again.to_json() == report.to_json()

    def test_select_filters(self, report):
        rows = report.select("parallel_sparse", "ties")
        assert [row.seed for row in rows] == list(SMALL_EXPERIMENT.seeds)
        assert {row.arm for row in report.select(arm="sequential")} == {"sequential"}

    def test_sequential_dpo_coincides_with_dense_task_arithmetic(self, report):
        # a linear policy makes the anchored stage-two displacement equal
        # to the from-zero preference delta, so these two cells must match
        seq = {row.seed: row for row in report.select("sequential", "-")}
        arith = {
            row.seed: row
            for row in report.select("parallel_dense", "task_arithmetic")
        }
        for seed in SMALL_EXPERIMENT.seeds:
            assert seq[seed].metrics == arith[seed].metrics

    def test_sparse_rows_report_higher_delta_sparsity(self, report):
        sparse = report.select("parallel_sparse", "ties")
        dense = report.select("parallel_dense", "ties")
        mean = lambda rows: np.mean([row.sparsity for row in rows])  # noqa: E731
        assert mean(sparse) >= mean(dense)

    # an enormous L1 pull makes the sparse stage oscillate by +-lr*lambda
    # every step, so only the parallel_sparse cells blow up
    FAILING = ExperimentConfig(
        methods=("task_arithmetic",), seeds=(0,),
        steps=300, lr=1e6, sparse_lambda=1.0, pref_steps=5, pref_lr=0.01,
        benchmark=SMALL,
    )

    def test_failed_cells_are_flagged_not_fatal(self):
        report = run_experiment(self.FAILING)
        by_status = {row.status == "ok" for row in report.rows}
        assert by_status == {True, False}
        base_row = report.select("individual", "base")[0]
        assert base_row.status == "ok"
        failed = [row for row in report.rows if row.status != "ok"]
        assert {row.arm for row in failed} == {"parallel_sparse"}
        assert all(row.status.startswith("failed: ") for row in failed)
        assert all(row.average is None for row in failed)
        assert "individual/base" in report.aggregates
        assert "parallel_sparse/task_arithmetic" not in report.aggregates

    def test_table_lists_cells_and_failures(self, report):
        table = format_report_table(report)
        lines = table.splitlines()
        assert lines[0].split()[:2] == ["arm", "method"]
        assert any(line.startswith("parallel_sparse") and "ties" in line
                   for line in lines)
        assert "FAILED" in format_report_table(run_experiment(self.FAILING))

    def test_orpo_breaks_the_sequential_arithmetic_identity(self):
        cfg = ExperimentConfig(
            methods=("task_arithmetic",), seeds=(0,),
            steps=40, lr=0.05, pref_steps=40, pref_lr=0.05,
            pref_method="orpo", benchmark=SMALL,
        )
        report = run_experiment(cfg)
        seq = report.select("sequential", "-")[0]
        arith = report.select("parallel_dense", "task_arithmetic")[0]
        assert seq.metrics != arith.metrics


class TestBenchmarkDataclass:
    def test_fields_round_trip(self, bench):
        assert isinstance(bench, Benchmark)
        assert bench.seed == 0
        assert bench.config == SMALL
        assert set(bench.suites) == {"classification", "preference"}
        assert isinstance(bench.pref_train, PreferenceBatch)
        # effective delta of the pretrained base against a fresh init is nonzero
        fresh = make_benchmark(0, SMALL)
        assert extract_delta(
            apply_delta(bench.base.params, zeros_like(bench.base.params)),
            fresh.base.params,
        ).names == bench.base.params.names
