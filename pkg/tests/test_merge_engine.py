"""Merge methods against hand cases and a straight-line scalar oracle."""

import json
import math
from fractions import Fraction

import numpy as np
import pytest

from deltafuse import (
    FormatError,
    ParamSet,
    SeededRng,
    UnsupportedMethod,
    ZeroWeightSum,
    dare,
    merge,
    merge_dare_ties,
    merge_linear,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
    save_checkpoint,
)
from deltafuse.merge_engine import (
    MergeRecipe,
    RecipeInput,
    apply_recipe,
    load_recipe,
    run_recipe,
)
from deltafuse.sparsify import SparsifySpec


def ties_oracle(base, deltas, weights, density):
    """Scalar re-statement of the trim/elect/average procedure.

    Pure Python loops over flat lists; shares no code with the engine
    beyond the survivor-count convention, which is part of the contract.
    """
    out = {}
    for name in base.names:
        weighted = [(w * d[name]).ravel().tolist() for w, d in zip(weights, deltas)]
        size = len(weighted[0])
        keep = math.ceil(Fraction(repr(density)) * size)
        trimmed = []
        for values in weighted:
            ranked = sorted(range(size), key=lambda i: (-abs(values[i]), i))
            kept = [0.0] * size
            for i in ranked[:keep]:
                kept[i] = values[i]
            trimmed.append(kept)
        merged = []
        for j in range(size):
            column = [t[j] for t in trimmed]
            sign_sum = sum((v > 0) - (v < 0) for v in column)
            sign = (sign_sum > 0) - (sign_sum < 0)
            if sign == 0:
                total = sum(column)
                sign = (total > 0) - (total < 0)
            agreeing = [v for v in column if v != 0.0 and ((v > 0) - (v < 0)) == sign]
            merged.append(sum(agreeing) / len(agreeing) if agreeing else 0.0)
        out[name] = base[name] + np.array(merged).reshape(base[name].shape)
    return ParamSet(out)


def random_sets(seed, shapes, count):
    rng = SeededRng(seed)
    sets = []
    for _ in range(count):
        sets.append(
            ParamSet(
                {n: rng.normals(int(np.prod(s))).reshape(s) for n, s in shapes.items()}
            )
        )
    return sets


SHAPES = {"layer0.weight": (4, 6), "layer0.bias": (4,), "head": (2, 4)}


class TestLinear:
    def test_weights_are_normalized(self):
        base, d1, d2 = random_sets(1, SHAPES, 3)
        out = merge_linear(base, [d1, d2], [2.0, 1.0])
        for name in base.names:
            expected = base[name] + (2.0 * d1[name] + 1.0 * d2[name]) / 3.0
            assert np.allclose(out[name], expected, rtol=1e-13, atol=1e-15)

    def test_single_delta_any_weight_is_plain_apply(self):
        base, d1 = random_sets(2, SHAPES, 2)
        out = merge_linear(base, [d1], [0.25])
        for name in base.names:
            assert np.allclose(out[name], base[name] + d1[name], rtol=1e-15, atol=0)

    def test_zero_weight_sum_only_when_normalizing(self):
        base, d1, d2 = random_sets(3, SHAPES, 3)
        with pytest.raises(ZeroWeightSum):
            merge_linear(base, [d1, d2], [1.0, -1.0])
        out = merge_linear(base, [d1, d2], [1.0, -1.0], normalize=False)
        for name in base.names:
            expected = base[name] + d1[name] - d2[name]
            assert np.allclose(out[name], expected, rtol=1e-13, atol=1e-15)

    def test_normalize_off_uses_raw_weights(self):
        base, d1, d2 = random_sets(18, SHAPES, 3)
        raw = merge_linear(base, [d1, d2], [0.5, 0.25], normalize=False)
        ta = merge_task_arithmetic(base, [d1, d2], [0.5, 0.25])
        assert raw.equals(ta)

    def test_input_validation(self):
        base, d1 = random_sets(4, SHAPES, 2)
        with pytest.raises(ValueError):
            merge_linear(base, [], [])
        with pytest.raises(ValueError):
            merge_linear(base, [d1], [1.0, 2.0])
        with pytest.raises(ValueError):
            merge_linear(base, [d1], [float("inf")])
        with pytest.raises(ValueError):
            merge_linear(base, [d1, ParamSet({"other": [1.0]})])


class TestTaskArithmetic:
    def test_raw_weighted_sum(self):
        base, d1, d2 = random_sets(5, SHAPES, 3)
        out = merge_task_arithmetic(base, [d1, d2], [0.5, -0.25])
        for name in base.names:
            expected = base[name] + 0.5 * d1[name] - 0.25 * d2[name]
            assert np.allclose(out[name], expected, rtol=1e-13, atol=1e-15)

    def test_differs_from_linear_when_weights_do_not_sum_to_one(self):
        base, d1, d2 = random_sets(6, SHAPES, 3)
        ta = merge_task_arithmetic(base, [d1, d2], [1.0, 1.0])
        lin = merge_linear(base, [d1, d2], [1.0, 1.0])
        assert not ta.equals(lin)

    def test_sequential_application_is_additive(self):
        # Adding the two scaled deltas one merge at a time lands on the
        # same point as one combined merge, up to float reassociation.
        base, d1, d2 = random_sets(19, SHAPES, 3)
        stepwise = merge_task_arithmetic(
            merge_task_arithmetic(base, [d1], [0.7]), [d2], [-0.3]
        )
        combined = merge_task_arithmetic(base, [d1, d2], [0.7, -0.3])
        for name in base.names:
            assert np.allclose(stepwise[name], combined[name], rtol=1e-12, atol=1e-15)


class TestTies:
    def test_hand_case_with_tie_fallback(self):
        base = ParamSet({"w": np.ones((2, 2))})
        d1 = ParamSet({"w": [[1.0, -2.0], [0.5, 0.0]]})
        d2 = ParamSet({"w": [[2.0, 1.0], [-0.5, 0.0]]})
        out = merge_ties(base, [d1, d2], density=0.5)
        # (0,0): both positive, mean(1,2)=1.5. (0,1): sign tie, value sum
        # is -1 so the negative side wins and only -2 agrees. Row 1 was
        # trimmed away entirely, so base shows through.
        assert out["w"].tolist() == [[2.5, -1.0], [1.0, 1.0]]

    def test_exact_sign_cancellation_keeps_base(self):
        base = ParamSet({"w": [10.0]})
        d1 = ParamSet({"w": [1.0]})
        d2 = ParamSet({"w": [-1.0]})
        out = merge_ties(base, [d1, d2], density=1.0)
        assert out["w"].tolist() == [10.0]

    def test_duplicate_delta_collapses_to_single(self):
        # Averaging values that all agree is idempotent, so merging the
        # same delta twice must equal merging it once.
        base, d1 = random_sets(20, SHAPES, 2)
        twice = merge_ties(base, [d1, d1], density=0.5)
        once = merge_ties(base, [d1], density=0.5)
        assert twice.equals(once)

    def test_matches_scalar_oracle_on_random_cases(self):
        rng = SeededRng(99)
        for case in range(25):
            k = int(rng.integers(3, 1)[0]) + 2
            sets = random_sets(1000 + case, SHAPES, k + 1)
            base, deltas = sets[0], sets[1:]
            weights = (rng.uniforms(k) * 2.0 - 0.5).tolist()
            density = round(float(rng.uniforms(1)[0]) * 0.9 + 0.05, 3)
            got = merge_ties(base, deltas, weights, density)
            expected = ties_oracle(base, deltas, weights, density)
            for name in base.names:
                assert np.allclose(got[name], expected[name], rtol=0, atol=1e-12)

    def test_negative_weight_flips_signs(self):
        base = ParamSet({"w": [0.0, 0.0]})
        d1 = ParamSet({"w": [1.0, -1.0]})
        out = merge_ties(base, [d1], [-2.0], density=1.0)
        assert out["w"].tolist() == [-2.0, 2.0]


class TestDareTies:
    def test_zero_drop_reduces_to_ties(self):
        base, d1, d2 = random_sets(7, SHAPES, 3)
        a = merge_dare_ties(base, [d1, d2], drop_prob=0.0, density=0.4, seed=3)
        b = merge_ties(base, [d1, d2], density=0.4)
        assert a.equals(b)

    def test_deterministic_and_seed_sensitive(self):
        base, d1, d2 = random_sets(8, SHAPES, 3)
        kwargs = dict(drop_prob=0.9, density=0.5)
        assert merge_dare_ties(base, [d1, d2], seed=1, **kwargs).equals(
            merge_dare_ties(base, [d1, d2], seed=1, **kwargs)
        )
        assert not merge_dare_ties(base, [d1, d2], seed=1, **kwargs).equals(
            merge_dare_ties(base, [d1, d2], seed=2, **kwargs)
        )

    def test_deltas_get_independent_drop_masks(self):
        base = ParamSet({"w": np.zeros(4000)})
        same = ParamSet({"w": np.ones(4000)})
        out = merge_dare_ties(base, [same, same], drop_prob=0.5, density=1.0, seed=4)
        # A shared mask would leave exactly half the elements nonzero;
        # independent masks leave about 1 - 0.5**2 = 0.75. The midpoint
        # 0.625 is many standard errors from both.
        survived = float(np.mean(out["w"] != 0.0))
        assert survived > 0.625

    def test_matches_manual_composition(self):
        # Drop seeds are derived as seed XOR input index, so the fused
        # operation must be reproducible with the public pieces.
        base, d1, d2 = random_sets(9, SHAPES, 3)
        seed = 21
        out = merge_dare_ties(base, [d1, d2], drop_prob=0.8, density=0.3, seed=seed)
        dropped = [dare(d, 0.8, seed ^ i) for i, d in enumerate([d1, d2])]
        assert out.equals(merge_ties(base, dropped, density=0.3))


class TestSlerp:
    def test_endpoints_exact(self):
        base, d1, d2 = random_sets(10, SHAPES, 3)
        at0 = merge_slerp(base, [d1, d2], t=0.0)
        at1 = merge_slerp(base, [d1, d2], t=1.0)
        for name in base.names:
            assert np.array_equal(at0[name], base[name] + d1[name])
            assert np.array_equal(at1[name], base[name] + d2[name])

    def test_norm_preserved_between_equal_norm_deltas(self):
        rng = SeededRng(11)
        a = rng.normals(50)
        b = rng.normals(50)
        b = b * (np.linalg.norm(a) / np.linalg.norm(b))
        base = ParamSet({"w": np.zeros(50)})
        for t in (0.1, 0.25, 0.5, 0.9):
            out = merge_slerp(base, [ParamSet({"w": a}), ParamSet({"w": b})], t=t)
            assert np.linalg.norm(out["w"]) == pytest.approx(np.linalg.norm(a), rel=1e-10)

    def test_orthogonal_quarter_circle(self):
        base = ParamSet({"w": np.zeros(2)})
        da = ParamSet({"w": [1.0, 0.0]})
        db = ParamSet({"w": [0.0, 1.0]})
        out = merge_slerp(base, [da, db], t=0.5)
        assert np.allclose(out["w"], [np.sqrt(0.5), np.sqrt(0.5)], rtol=1e-15)
        third = merge_slerp(base, [da, db], t=1.0 / 3.0)
        angle = math.atan2(third["w"][1], third["w"][0])
        assert angle == pytest.approx(math.pi / 2 / 3, rel=1e-12)

    def test_near_zero_delta_falls_back_to_lerp(self):
        base = ParamSet({"w": np.zeros(3)})
        tiny = ParamSet({"w": [1e-13, 0.0, 0.0]})
        big = ParamSet({"w": [0.0, 2.0, 0.0]})
        out = merge_slerp(base, [tiny, big], t=0.25)
        assert np.allclose(out["w"], 0.75 * tiny["w"] + 0.25 * big["w"], rtol=0, atol=1e-18)

    def test_both_zero_warns_and_returns_base(self):
        base = ParamSet({"w": [3.0, -1.0], "b": [0.5]})
        zero = ParamSet({"w": [0.0, 0.0], "b": [0.0]})
        with pytest.warns(UserWarning, match="zero"):
            out = merge_slerp(base, [zero, zero.scale(1.0)], t=0.5)
        assert out.equals(base)

    def test_parallel_deltas_fall_back_to_lerp(self):
        base = ParamSet({"w": np.zeros(3)})
        a = ParamSet({"w": [1.0, 2.0, 3.0]})
        b = a.scale(2.0)
        out = merge_slerp(base, [a, b], t=0.5)
        assert np.allclose(out["w"], 1.5 * a["w"], rtol=1e-15)

    def test_global_vs_per_tensor(self):
        # p pairs are orthogonal, q pairs are parallel: the per-tensor
        # angles differ, so one global angle cannot reproduce both.
        base = ParamSet({"p": np.zeros(2), "q": np.zeros(2)})
        d1 = ParamSet({"p": [1.0, 0.0], "q": [2.0, 0.0]})
        d2 = ParamSet({"p": [0.0, 1.0], "q": [4.0, 0.0]})
        global_mid = merge_slerp(base, [d1, d2], t=0.5, granularity="global")
        per_mid = merge_slerp(base, [d1, d2], t=0.5, granularity="per_tensor")
        assert not global_mid.equals(per_mid)
        # Per-tensor: the orthogonal unit pair stays on the unit circle
        # and the parallel pair reduces to lerp.
        assert np.linalg.norm(per_mid["p"]) == pytest.approx(1.0, rel=1e-12)
        assert per_mid["q"].tolist() == [3.0, 0.0]

    def test_validation(self):
        base, d1, d2, d3 = random_sets(12, SHAPES, 4)
        with pytest.raises(ValueError):
            merge_slerp(base, [d1, d2, d3])
        with pytest.raises(ValueError):
            merge_slerp(base, [d1, d2], t=1.5)
        with pytest.raises(ValueError):
            merge_slerp(base, [d1, d2], t=0.5, granularity="chunky")


class TestDispatcher:
    def test_dispatch_matches_direct(self):
        base, d1, d2 = random_sets(13, SHAPES, 3)
        assert merge(base, [d1, d2], method="linear").equals(merge_linear(base, [d1, d2]))
        assert merge(base, [d1, d2], method="ties", density=0.3).equals(
            merge_ties(base, [d1, d2], density=0.3)
        )
        assert merge(base, [d1, d2], method="dare_ties", drop_prob=0.7, seed=5).equals(
            merge_dare_ties(base, [d1, d2], drop_prob=0.7, seed=5)
        )
        assert merge(base, [d1, d2], method="slerp", t=0.7).equals(
            merge_slerp(base, [d1, d2], t=0.7)
        )

    def test_dispatch_passes_normalize_flag(self):
        base, d1, d2 = random_sets(21, SHAPES, 3)
        out = merge(base, [d1, d2], [3.0, -3.0], method="linear", normalize_weights=False)
        assert out.equals(merge_linear(base, [d1, d2], [3.0, -3.0], normalize=False))

    def test_unknown_method(self):
        base, d1 = random_sets(14, SHAPES, 2)
        with pytest.raises(UnsupportedMethod):
            merge(base, [d1], method="frankenmerge")

    def test_slerp_rejects_weights(self):
        base, d1, d2 = random_sets(15, SHAPES, 3)
        with pytest.raises(ValueError):
            merge(base, [d1, d2], [0.3, 0.7], method="slerp")


class TestRecipes:
    def recipe_dict(self):
        return {
            "method": "dare_ties",
            "base": "base.ckpt",
            "inputs": [
                {"delta": "sft.ckpt", "weight": 1.0,
                 "sparsify": {"method": "trim_topk", "density": 0.5}},
                {"delta": "pref.ckpt", "weight": 0.5},
            ],
            "density": 0.4,
            "drop": 0.6,
            "seed": 11,
            "granularity": "per_tensor",
        }

    def test_round_trip(self):
        recipe = MergeRecipe.from_dict(self.recipe_dict())
        assert recipe.method == "dare_ties"
        assert recipe.weights() == [1.0, 0.5]
        assert recipe.inputs[0].sparsify == SparsifySpec(method="trim_topk", density=0.5)
        again = MergeRecipe.from_dict(recipe.to_dict())
        assert again.to_dict() == recipe.to_dict()

    def test_strict_keys(self):
        bad = self.recipe_dict()
        bad["t"] = 0.5  # slerp knob on a dare_ties recipe
        with pytest.raises(FormatError):
            MergeRecipe.from_dict(bad)
        with pytest.raises(FormatError):
            MergeRecipe.from_dict({"method": "nope", "inputs": [{"delta": "x"}]})
        with pytest.raises(FormatError):
            MergeRecipe.from_dict({"method": "ties", "inputs": []})
        with pytest.raises(FormatError):
            MergeRecipe.from_dict({"method": "ties", "inputs": [{"delta": "x", "path": "x"}]})
        with pytest.raises(FormatError):
            MergeRecipe.from_json("{not json")

    def test_slerp_requires_exactly_two_inputs(self):
        entries = [{"delta": "a"}, {"delta": "b"}, {"delta": "c"}]
        with pytest.raises(FormatError):
            MergeRecipe.from_dict({"method": "slerp", "inputs": entries})
        with pytest.raises(FormatError):
            MergeRecipe.from_dict({"method": "slerp", "inputs": entries[:1]})
        ok = MergeRecipe.from_dict({"method": "slerp", "inputs": entries[:2], "t": 0.25})
        assert ok.t == 0.25

    def test_load_resolves_relative_paths(self, tmp_path):
        recipe_path = tmp_path / "r.json"
        recipe_path.write_text(json.dumps(
            {"method": "linear", "base": "base.ckpt", "inputs": [{"delta": "d.ckpt"}]}
        ))
        recipe = load_recipe(recipe_path)
        assert recipe.base == str(tmp_path / "base.ckpt")
        assert recipe.inputs[0].delta == str(tmp_path / "d.ckpt")

    def test_run_recipe_end_to_end(self, tmp_path):
        base, d1, d2 = random_sets(16, SHAPES, 3)
        save_checkpoint(tmp_path / "base.ckpt", base)
        save_checkpoint(tmp_path / "d1.ckpt", d1)
        save_checkpoint(tmp_path / "d2.ckpt", d2)
        (tmp_path / "r.json").write_text(json.dumps({
            "method": "ties",
            "base": "base.ckpt",
            "inputs": [{"delta": "d1.ckpt"}, {"delta": "d2.ckpt", "weight": 2.0}],
            "density": 0.5,
        }))
        recipe = load_recipe(tmp_path / "r.json")
        merged, provenance = run_recipe(recipe)
        assert merged.equals(merge_ties(base, [d1, d2], [1.0, 2.0], density=0.5))
        assert provenance["method"] == "ties"
        assert provenance["weights"] == [1.0, 2.0]
        with pytest.raises(ValueError):
            run_recipe(MergeRecipe(method="ties", inputs=[RecipeInput(delta="x")]))

    def test_apply_recipe_sparsifies_per_input(self):
        base, d1, d2 = random_sets(17, SHAPES, 3)
        recipe = MergeRecipe(
            method="task_arithmetic",
            inputs=[
                RecipeInput(delta="a", weight=1.0,
                            sparsify=SparsifySpec(method="threshold", threshold=0.5)),
                RecipeInput(delta="b", weight=1.0),
            ],
        )
        from deltafuse import threshold_prune

        out = apply_recipe(recipe, base, [d1, d2])
        expected = merge_task_arithmetic(base, [threshold_prune(d1, 0.5), d2])
        assert out.equals(expected)

    def test_apply_recipe_honors_normalize_flag(self):
        base, d1, d2 = random_sets(22, SHAPES, 3)
        recipe = MergeRecipe(
            method="linear",
            inputs=[RecipeInput(delta="a", weight=1.0), RecipeInput(delta="b", weight=-1.0)],
            normalize_weights=False,
        )
        out = apply_recipe(recipe, base, [d1, d2])
        assert out.equals(merge_linear(base, [d1, d2], [1.0, -1.0], normalize=False))
