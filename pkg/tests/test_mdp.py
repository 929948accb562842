import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxq.mdp import (
    CapacityExceeded,
    InvalidAction,
    InvalidState,
    MdpModel,
    Transition,
    VariableSchema,
    enumerate_states,
    sample_step,
)
from maxq.oracle import flat_value_iteration
from maxq.taxi import NORTH, TaxiConfig, move, taxi_model


class Huge(MdpModel):
    schemas = tuple(VariableSchema(f"v{k}", 10) for k in range(8))
    actions = ("noop",)

    def transitions(self, state, action):
        return [Transition(state, 1.0, 0.0)]

    def is_terminal(self, state):
        return False

    def start_states(self):
        return [(0,) * 8]


class SampledModel(MdpModel):
    """The model obtained by drawing one outcome per (state, action)."""

    def __init__(self, base, seed):
        self.schemas = base.schemas
        self.actions = base.actions
        self.base = base
        rng = random.Random(seed)
        self.table = {}
        for s in enumerate_states(base):
            for a in base.actions:
                out = sample_step(base, s, a, rng)
                self.table[(s, a)] = [Transition(out.next_state, 1.0, out.reward)]

    def transitions(self, state, action):
        return self.table[(state, action)]

    def is_terminal(self, state):
        return self.base.is_terminal(state)

    def start_states(self):
        return self.base.start_states()


def test_enumeration_order_matches_encoding():
    model = taxi_model()
    states = enumerate_states(model)
    assert len(states) == model.num_states == 500
    assert [model.encode(s) for s in states] == list(range(500))
    assert states == sorted(states)


@given(st.integers(min_value=0, max_value=499))
def test_encode_decode_round_trip(index):
    model = taxi_model()
    assert model.encode(model.decode(index)) == index


def test_enumeration_guard():
    with pytest.raises(CapacityExceeded):
        enumerate_states(Huge())


def test_invalid_inputs():
    model = taxi_model()
    rng = random.Random(0)
    with pytest.raises(InvalidAction):
        sample_step(model, (0, 0, 0, 1), "Fly", rng)
    with pytest.raises(InvalidState):
        sample_step(model, (0, 0, 0, 4), "North", rng)
    with pytest.raises(InvalidState):
        sample_step(model, (0, 0, 0), "North", rng)


def test_deterministic_model_has_single_outcomes():
    model = taxi_model()
    for s in enumerate_states(model):
        for a in model.actions:
            dist = model.transitions(s, a)
            assert len(dist) == 1 and dist[0].probability == 1.0
    assert model.tabular.deterministic


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=499), st.sampled_from(range(6)),
       st.floats(min_value=0.0, max_value=1.0))
def test_probabilities_sum_to_one(index, action, noise):
    model = taxi_model(TaxiConfig(noise))
    dist = model.transitions(model.decode(index), model.actions[action])
    assert sum(t.probability for t in dist) == pytest.approx(1.0, abs=1e-12)
    assert all(t.probability > 0 for t in dist)


@given(st.integers(min_value=0), st.integers(min_value=0, max_value=499))
def test_sampling_is_seed_deterministic(seed, index):
    model = taxi_model(TaxiConfig(0.2))
    state = model.decode(index)
    a = sample_step(model, state, "East", random.Random(seed))
    b = sample_step(model, state, "East", random.Random(seed))
    assert a == b


def test_sampling_consumes_one_draw():
    model = taxi_model(TaxiConfig(0.2))
    rng = random.Random(5)
    sample_step(model, (2, 2, 0, 1), "North", rng)
    ref = random.Random(5)
    ref.random()
    assert rng.random() == ref.random()


def test_noisy_north_frequency():
    model = taxi_model(TaxiConfig(0.2))
    state = (2, 2, 0, 1)
    intended = move(2, 2, NORTH)
    rng = random.Random(1234)
    draws = 100_000
    hits = sum(sample_step(model, state, "North", rng).next_state[:2] == intended for _ in range(draws))
    assert abs(hits / draws - 0.8) <= 0.01


def test_value_iteration_on_sampled_model():
    model = taxi_model()
    sampled = SampledModel(model, seed=3)
    a = flat_value_iteration(model)
    b = flat_value_iteration(sampled)
    assert np.max(np.abs(a.values - b.values)) <= 1e-9
