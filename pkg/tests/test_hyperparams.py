import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbtlab.errors import ConfigError
from pbtlab.hyperparams import (
    INTEGER,
    POSITIVE,
    UNIT,
    HyperParams,
    MutationConfig,
    ParamSpec,
    default_rl_specs,
    load_param_specs,
    mutate,
    sample_initial,
    save_param_specs,
    validate,
)


class ScriptedRng:
    """Replays fixed draws so mutation arithmetic can be checked by hand."""

    def __init__(self, randoms, uniforms=()):
        self._randoms = list(randoms)
        self._uniforms = list(uniforms)

    def random(self):
        return self._randoms.pop(0)

    def uniform(self, lo, hi):
        value = self._uniforms.pop(0)
        assert lo <= value <= hi
        return value


def spec_positive(name="x", initial=0.016, bounds=(0.0016, 0.16)):
    return ParamSpec(name, POSITIVE, initial, bounds)


class TestParamSpec:
    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            ParamSpec("x", POSITIVE, 1.0, (2.0, 1.0))

    def test_initial_outside_bounds(self):
        with pytest.raises(ConfigError):
            ParamSpec("x", POSITIVE, 100.0, (0.1, 10.0))

    def test_unit_bounds_inside_open_interval(self):
        with pytest.raises(ConfigError):
            ParamSpec("g", UNIT, 0.99, (0.8, 1.0))

    def test_integer_bounds_must_be_integers(self):
        with pytest.raises(ConfigError):
            ParamSpec("e", INTEGER, 2, (1, 8.5))

    def test_integer_clamp_rounds(self):
        spec = ParamSpec("e", INTEGER, 2, (1, 8))
        assert spec.clamp(3.6) == 4
        assert spec.clamp(0.2) == 1
        assert spec.clamp(11) == 8


class TestMutate:
    def test_prob_zero_is_identity(self):
        specs = default_rl_specs()
        p = HyperParams.from_initial(specs)
        out = mutate(p, MutationConfig(prob=1e-12), random.Random(0))
        assert out.values == p.values

    def test_hand_evaluated_divide(self):
        # selection coin 0.1 < 0.2, factor 1.25, direction coin 0.9 -> divide
        spec = spec_positive()
        p = HyperParams([spec], {"x": 0.016})
        rng = ScriptedRng(randoms=[0.1, 0.9], uniforms=[1.25])
        out = mutate(p, MutationConfig(), rng)
        assert out["x"] == pytest.approx(0.016 / 1.25, rel=1e-15)
        assert out["x"] == pytest.approx(0.0128, rel=1e-12)

    def test_hand_evaluated_multiply(self):
        spec = spec_positive()
        p = HyperParams([spec], {"x": 0.016})
        rng = ScriptedRng(randoms=[0.1, 0.2], uniforms=[1.25])
        out = mutate(p, MutationConfig(), rng)
        assert out["x"] == pytest.approx(0.02, rel=1e-12)

    def test_unit_interval_moves_complement(self):
        spec = ParamSpec("gamma", UNIT, 0.99, (0.8, 0.9999))
        p = HyperParams([spec], {"gamma": 0.99})
        # multiply branch: headroom 0.01 * 1.2 -> value 0.988
        out = mutate(p, MutationConfig(), ScriptedRng([0.0, 0.0], [1.2]))
        assert out["gamma"] == pytest.approx(0.988, rel=1e-12)
        # divide branch: headroom 0.01 / 1.25 -> value 0.992
        out = mutate(p, MutationConfig(), ScriptedRng([0.0, 0.9], [1.25]))
        assert out["gamma"] == pytest.approx(0.992, rel=1e-12)

    def test_integer_steps_and_clamps(self):
        spec = ParamSpec("epochs", INTEGER, 2, (1, 8))
        p = HyperParams([spec], {"epochs": 1})
        down = mutate(p, MutationConfig(), ScriptedRng([0.0, 0.9]))
        assert down["epochs"] == 1  # clamped at the lower bound
        up = mutate(p, MutationConfig(), ScriptedRng([0.0, 0.0]))
        assert up["epochs"] == 2

    def test_clamp_at_hard_bound(self):
        spec = spec_positive(initial=0.15, bounds=(0.0016, 0.16))
        p = HyperParams([spec], {"x": 0.15})
        out = mutate(p, MutationConfig(), ScriptedRng([0.0, 0.0], [1.5]))
        assert out["x"] == 0.16

    def test_immutable_untouched(self):
        specs = [ParamSpec("x", POSITIVE, 1.0, (0.1, 10.0), mutable=False)]
        p = HyperParams.from_initial(specs)
        out = mutate(p, MutationConfig(prob=1.0), random.Random(3))
        assert out["x"] == 1.0

    def test_deterministic_byte_for_byte(self):
        specs = default_rl_specs()
        p = HyperParams.from_initial(specs)
        a = mutate(p, MutationConfig(), random.Random(77))
        b = mutate(p, MutationConfig(), random.Random(77))
        assert json.dumps(a.as_dict()) == json.dumps(b.as_dict())

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_closure_over_bounds(self, seed):
        specs = default_rl_specs()
        p = HyperParams.from_initial(specs)
        rng = random.Random(seed)
        for _ in range(5):
            p = mutate(p, MutationConfig(), rng)
        assert validate(p) == []


class TestMutationStatistics:
    def test_frequency_direction_and_symmetry(self):
        # Monte-Carlo check of the mutation distribution: per-parameter
        # selection frequency, direction balance among continuous mutations,
        # and sign symmetry of log(new/old).
        specs = default_rl_specs()
        initial = HyperParams.from_initial(specs)
        rng = random.Random(20240817)
        trials = 100_000
        mutated = {s.name: 0 for s in specs if s.mutable}
        increased = decreased = 0
        for _ in range(trials):
            out = mutate(initial, MutationConfig(), rng)
            for s in specs:
                if not s.mutable:
                    continue
                new, old = out.values[s.name], initial.values[s.name]
                if new != old:
                    mutated[s.name] += 1
                    if s.kind in (POSITIVE, UNIT):
                        if new > old:
                            increased += 1
                        else:
                            decreased += 1
        for name, count in mutated.items():
            assert 0.19 <= count / trials <= 0.21, name
        frac_up = increased / (increased + decreased)
        assert 0.49 <= frac_up <= 0.51
        # two-sided sign test at the same tolerance
        assert abs(increased - decreased) / (increased + decreased) <= 0.02


class TestSampleInitial:
    def test_unit_jitter_reproduces_initials(self):
        specs = default_rl_specs()
        hp = sample_initial(specs, random.Random(1), jitter=(1.0, 1.0))
        assert hp.as_dict() == {s.name: s.initial for s in specs}

    def test_all_samples_within_bounds(self):
        specs = default_rl_specs()
        rng = random.Random(5)
        for _ in range(10_000):
            assert validate(sample_initial(specs, rng)) == []

    def test_different_seeds_differ(self):
        specs = default_rl_specs()
        a = sample_initial(specs, random.Random(1))
        b = sample_initial(specs, random.Random(2))
        assert a.as_dict() != b.as_dict()

    def test_immutable_kept_exact(self):
        specs = default_rl_specs()
        hp = sample_initial(specs, random.Random(9))
        assert hp["gae_lambda"] == 0.95
        assert hp["entropy_coef"] == 0.0


class TestValidate:
    def test_clean(self):
        assert validate(HyperParams.from_initial(default_rl_specs())) == []

    def test_reports_violation_by_name(self):
        specs = default_rl_specs()
        p = HyperParams.from_initial(specs)
        p.values["gamma"] = 1.2
        problems = validate(p)
        assert len(problems) == 1 and "gamma" in problems[0]

    def test_missing_and_unknown(self):
        specs = [spec_positive("a"), spec_positive("b")]
        p = HyperParams(specs, {"a": 0.016, "zz": 1.0})
        problems = validate(p)
        assert any("b: missing" in m for m in problems)
        assert any("zz" in m for m in problems)


def test_spec_file_round_trip(tmp_path):
    specs = default_rl_specs()
    path = tmp_path / "specs.jsonl"
    save_param_specs(specs, path)
    assert load_param_specs(path) == specs


def test_mutation_config_validation():
    with pytest.raises(ConfigError):
        MutationConfig(prob=1.5)
    with pytest.raises(ConfigError):
        MutationConfig(scale_min=0.9)
    with pytest.raises(ConfigError):
        MutationConfig(scale_min=1.6, scale_max=1.5)
