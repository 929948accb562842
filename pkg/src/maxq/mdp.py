"""Factored finite MDPs.

States are tuples of small integers, one per named variable. Every model can
enumerate its full transition distribution, which is what the exact oracles
and audits are built on; learners only ever sample.
"""

from __future__ import annotations

import abc
import itertools
import math
import random
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse

StateVector = tuple[int, ...]

MAX_ENUMERATED_STATES = 10**7
PROBABILITY_TOLERANCE = 1e-12


class MdpError(Exception):
    """Base class for model errors."""


class CapacityExceeded(MdpError):
    pass


class InvalidAction(MdpError, ValueError):
    pass


class InvalidState(MdpError, ValueError):
    pass


@dataclass(frozen=True)
class VariableSchema:
    """A named discrete state variable taking values ``0 .. domain_size - 1``."""

    name: str
    domain_size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.name.isidentifier():
            raise ValueError(f"variable name {self.name!r} is not an identifier")
        if self.domain_size < 1:
            raise ValueError(f"variable {self.name!r}: domain_size must be >= 1")
        if self.labels is not None and len(self.labels) != self.domain_size:
            raise ValueError(f"variable {self.name!r}: expected {self.domain_size} labels")

    def label(self, value: int) -> str:
        if self.labels is None:
            return str(value)
        return self.labels[value]


class PrimitiveOutcome(NamedTuple):
    next_state: StateVector
    reward: float
    terminal_episode: bool


class Transition(NamedTuple):
    next_state: StateVector
    probability: float
    reward: float


class MdpModel(abc.ABC):
    """Interface for an enumerable factored MDP.

    Subclasses set ``schemas`` and ``actions`` and implement
    :meth:`transitions`, :meth:`is_terminal` and :meth:`start_states`.
    Rewards attach to transitions, so two outcomes reaching the same next
    state may carry different rewards. Models are immutable once built.
    """

    schemas: tuple[VariableSchema, ...]
    actions: tuple[str, ...]

    @abc.abstractmethod
    def transitions(self, state: StateVector, action: str) -> list[Transition]:
        """Full outcome distribution of ``action`` in ``state``."""

    @abc.abstractmethod
    def is_terminal(self, state: StateVector) -> bool:
        """Whether the episode is over in ``state``."""

    @abc.abstractmethod
    def start_states(self) -> list[StateVector]:
        """States an episode may start in; drawn uniformly."""

    @cached_property
    def variable_names(self) -> tuple[str, ...]:
        names = tuple(schema.name for schema in self.schemas)
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        return names

    @cached_property
    def _variable_index(self) -> dict[str, int]:
        return {name: k for k, name in enumerate(self.variable_names)}

    @cached_property
    def _action_index(self) -> dict[str, int]:
        return {a: k for k, a in enumerate(self.actions)}

    @cached_property
    def _strides(self) -> tuple[int, ...]:
        strides = []
        step = 1
        for schema in reversed(self.schemas):
            strides.append(step)
            step *= schema.domain_size
        return tuple(reversed(strides))

    @property
    def num_states(self) -> int:
        return math.prod(schema.domain_size for schema in self.schemas)

    def variable_index(self, name: str) -> int:
        try:
            return self._variable_index[name]
        except KeyError:
            raise KeyError(f"unknown state variable {name!r}") from None

    def action_index(self, action: str) -> int:
        try:
            return self._action_index[action]
        except KeyError:
            raise InvalidAction(f"unknown action {action!r}") from None

    def validate_state(self, state: Sequence[int]) -> StateVector:
        state = tuple(state)
        if len(state) != len(self.schemas):
            raise InvalidState(f"expected {len(self.schemas)} components, got {len(state)}")
        for value, schema in zip(state, self.schemas):
            if not 0 <= value < schema.domain_size:
                raise InvalidState(f"{schema.name}={value} outside [0, {schema.domain_size})")
        return state

    def encode(self, state: StateVector) -> int:
        """Mixed-radix index; agrees with the order of :func:`enumerate_states`."""
        return sum(v * s for v, s in zip(state, self._strides))

    def decode(self, index: int) -> StateVector:
        values = []
        for stride, schema in zip(self._strides, self.schemas):
            values.append((index // stride) % schema.domain_size)
        return tuple(values)

    def describe(self, state: StateVector) -> str:
        return ",".join(
            f"{schema.name}={schema.label(v)}" for v, schema in zip(state, self.schemas)
        )

    @cached_property
    def tabular(self) -> TabularModel:
        return TabularModel(self)


def enumerate_states(model: MdpModel) -> list[StateVector]:
    """Every state exactly once, lexicographic in the value vector."""
    count = model.num_states
    if count > MAX_ENUMERATED_STATES:
        raise CapacityExceeded(f"{count} states exceeds the enumeration guard {MAX_ENUMERATED_STATES}")
    return list(itertools.product(*(range(s.domain_size) for s in model.schemas)))


def _pick(cumulative: Sequence[float], u: float) -> int:
    for k, c in enumerate(cumulative):
        if u < c:
            return k
    return len(cumulative) - 1


def sample_step(
    model: MdpModel, state: Sequence[int], action: str, rng: random.Random
) -> PrimitiveOutcome:
    """Draw one outcome of ``action``. Consumes exactly one ``rng.random()``."""
    state = model.validate_state(state)
    model.action_index(action)
    outcomes = model.transitions(state, action)
    cumulative = list(itertools.accumulate(t.probability for t in outcomes))
    chosen = outcomes[_pick(cumulative, rng.random())]
    return PrimitiveOutcome(chosen.next_state, chosen.reward, model.is_terminal(chosen.next_state))


class TabularModel:
    """Integer-indexed cache of an enumerable model.

    ``outcomes[s][a]`` is a tuple of ``(cumulative_probability, next_index,
    reward)`` used by the fast samplers; ``matrices`` and ``expected_rewards``
    feed the exact solvers.
    """

    def __init__(self, model: MdpModel) -> None:
        states = enumerate_states(model)
        self.model = model
        self.num_states = len(states)
        self.num_actions = len(model.actions)
        self.terminal = [model.is_terminal(s) for s in states]
        self.starts = [model.encode(s) for s in model.start_states()]
        self.outcomes: list[list[tuple[tuple[float, int, float], ...]]] = []
        rows: list[list[int]] = [[] for _ in model.actions]
        cols: list[list[int]] = [[] for _ in model.actions]
        vals: list[list[float]] = [[] for _ in model.actions]
        self.expected_rewards = np.zeros((self.num_actions, self.num_states))
        self.deterministic = True
        for s_index, state in enumerate(states):
            per_action = []
            for a_index, action in enumerate(model.actions):
                dist = model.transitions(state, action)
                total = sum(t.probability for t in dist)
                if abs(total - 1.0) > PROBABILITY_TOLERANCE:
                    raise MdpError(f"probabilities for {state}, {action} sum to {total}")
                if len(dist) > 1:
                    self.deterministic = False
                cum = 0.0
                entries = []
                for t in dist:
                    cum += t.probability
                    ns = model.encode(t.next_state)
                    entries.append((cum, ns, float(t.reward)))
                    rows[a_index].append(s_index)
                    cols[a_index].append(ns)
                    vals[a_index].append(t.probability)
                    self.expected_rewards[a_index, s_index] += t.probability * t.reward
                per_action.append(tuple(entries))
            self.outcomes.append(per_action)
        n = self.num_states
        self.matrices = [
            sparse.csr_matrix((vals[a], (rows[a], cols[a])), shape=(n, n))
            for a in range(self.num_actions)
        ]

    def step(self, s: int, a: int, u: float) -> tuple[int, float]:
        entries = self.outcomes[s][a]
        for cum, ns, r in entries:
            if u < cum:
                return ns, r
        _, ns, r = entries[-1]
        return ns, r
