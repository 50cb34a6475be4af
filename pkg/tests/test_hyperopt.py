import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskbench.config import SearchDimension
from deskbench.errors import ValidationError
from deskbench.hyperopt import (
    TpeSettings,
    TrialRecord,
    sample_grid,
    sample_random,
    suggest_tpe,
)


def dim_choice(name="c", values=("a", "b")):
    return SearchDimension(name=name, kind="choice", values=tuple(values))


def dim_uniform(name="u", low=0.0, high=1.0):
    return SearchDimension(name=name, kind="uniform", low=low, high=high)


def dim_log(name="lr", low=1e-4, high=1e-2):
    return SearchDimension(name=name, kind="log_uniform", low=low, high=high)


def dim_int(name="k", low=1, high=3):
    return SearchDimension(name=name, kind="int_uniform", low=low, high=high)


# ---------------------------------------------------------------------------
# Grid

def test_grid_cartesian_product():
    grid = sample_grid([dim_choice(), dim_int(low=1, high=3)], grid_points_per_range=3)
    assert len(grid) == 6
    assert {(p["c"], p["k"]) for p in grid} == {
        (c, k) for c in ("a", "b") for k in (1, 2, 3)
    }


def test_grid_single_choice():
    assert sample_grid([dim_choice(values=("x",))]) == [{"c": "x"}]


def test_grid_log_uniform_geometric():
    grid = sample_grid([dim_log()], grid_points_per_range=3)
    values = [p["lr"] for p in grid]
    assert values == pytest.approx([1e-4, 1e-3, 1e-2])


def test_grid_cap_exceeded():
    dims = [dim_int(name=f"d{i}", low=1, high=10) for i in range(5)]
    with pytest.raises(ValidationError, match="random sampler"):
        sample_grid(dims, grid_points_per_range=10)


def test_grid_int_dedupe():
    grid = sample_grid([dim_int(low=1, high=2)], grid_points_per_range=5)
    assert [p["k"] for p in grid] == [1, 2]


def test_grid_empty_space_rejected():
    with pytest.raises(ValidationError):
        sample_grid([])


# ---------------------------------------------------------------------------
# Random

SPACE = [dim_choice(), dim_uniform(), dim_log(), dim_int()]


def test_random_bounds_and_count():
    draws = sample_random(SPACE, 20, seed=5)
    assert len(draws) == 20
    for p in draws:
        assert p["c"] in ("a", "b")
        assert 0.0 <= p["u"] <= 1.0
        assert 1e-4 <= p["lr"] <= 1e-2
        assert p["k"] in (1, 2, 3)
        assert isinstance(p["k"], int)


def test_random_seed_repeatability():
    assert sample_random(SPACE, 10, seed=3) == sample_random(SPACE, 10, seed=3)
    assert sample_random(SPACE, 10, seed=3) != sample_random(SPACE, 10, seed=4)


def test_random_log_uniform_median():
    draws = sample_random([dim_log()], 10_000, seed=0)
    median = float(np.median([p["lr"] for p in draws]))
    assert 8e-4 <= median <= 1.25e-3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30))
def test_property_random_within_bounds(seed, n):
    for p in sample_random(SPACE, n, seed=seed):
        assert p["c"] in ("a", "b")
        assert 0.0 <= p["u"] <= 1.0
        assert 1e-4 <= p["lr"] <= 1e-2
        assert 1 <= p["k"] <= 3


# ---------------------------------------------------------------------------
# TPE

def _history(pairs):
    return [TrialRecord(params={"u": x}, objective=obj, trial_index=i)
            for i, (x, obj) in enumerate(pairs)]


def test_tpe_empty_history_random_fallback():
    p = suggest_tpe([dim_uniform()], [], "maximize", seed=1)
    assert 0.0 <= p["u"] <= 1.0


def test_tpe_all_failed_random_fallback():
    history = [TrialRecord(params={"u": 0.5}, objective=None, trial_index=i)
               for i in range(10)]
    p = suggest_tpe([dim_uniform()], history, "maximize", seed=1)
    assert 0.0 <= p["u"] <= 1.0


def test_tpe_only_space_names():
    history = _history([(0.1, -0.2), (0.2, -0.1), (0.3, 0.0),
                        (0.4, -0.3), (0.5, -0.5), (0.6, -0.6)])
    p = suggest_tpe([dim_uniform()], history, "maximize", seed=2)
    assert set(p) == {"u"}
    assert 0.0 <= p["u"] <= 1.0


def test_tpe_deterministic_under_seed():
    history = _history([(x / 10, -(x / 10 - 0.3) ** 2) for x in range(10)])
    a = suggest_tpe([dim_uniform()], history, "maximize", seed=9)
    b = suggest_tpe([dim_uniform()], history, "maximize", seed=9)
    assert a == b


def test_tpe_concentrates_near_good_region():
    # objective peaks at u = 0.3; most suggestions should land nearby
    history = _history([(x / 20, -(x / 20 - 0.3) ** 2) for x in range(20)])
    close = 0
    for seed in range(30):
        p = suggest_tpe([dim_uniform()], history, "maximize", seed=seed)
        close += abs(p["u"] - 0.3) < 0.25
    assert close >= 20


def test_tpe_categorical_and_int_types():
    history = [
        TrialRecord(params={"c": "a", "k": 1}, objective=1.0, trial_index=0),
        TrialRecord(params={"c": "a", "k": 1}, objective=0.9, trial_index=1),
        TrialRecord(params={"c": "b", "k": 3}, objective=0.1, trial_index=2),
        TrialRecord(params={"c": "a", "k": 2}, objective=0.8, trial_index=3),
        TrialRecord(params={"c": "b", "k": 3}, objective=0.0, trial_index=4),
        TrialRecord(params={"c": "a", "k": 1}, objective=0.95, trial_index=5),
    ]
    p = suggest_tpe([dim_choice(), dim_int()], history, "maximize", seed=3)
    assert p["c"] in ("a", "b")
    assert isinstance(p["k"], int) and 1 <= p["k"] <= 3


def test_tpe_minimize_direction():
    # minimize distance to 0.7
    history = _history([(x / 10, (x / 10 - 0.7) ** 2) for x in range(10)])
    hits = 0
    for seed in range(20):
        p = suggest_tpe([dim_uniform()], history, "minimize",
                        TpeSettings(n_startup=5), seed=seed)
        hits += abs(p["u"] - 0.7) < 0.3
    assert hits >= 14


def test_tpe_empty_space():
    assert suggest_tpe([], _history([(0.1, 0.5)] * 6), "maximize", seed=0) == {}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_tpe_within_bounds(seed):
    rng = np.random.default_rng(seed)
    history = []
    for i in range(12):
        params = {"u": float(rng.uniform(0, 1)), "lr": float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-2)))),
                  "k": int(rng.integers(1, 4)), "c": ("a", "b")[int(rng.integers(0, 2))]}
        history.append(TrialRecord(params=params, objective=float(rng.normal()), trial_index=i))
    p = suggest_tpe(SPACE, history, "maximize", seed=seed)
    assert p["c"] in ("a", "b")
    assert 0.0 <= p["u"] <= 1.0
    assert 1e-4 <= p["lr"] <= 1e-2
    assert 1 <= p["k"] <= 3 and isinstance(p["k"], int)
