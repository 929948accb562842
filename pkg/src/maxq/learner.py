"""MAXQ-Q learning and a flat Q-learning baseline.

Both learners own their tables, schedules and random source, and share the
budgeted training loop in :class:`Learner`. Tables start at zero and only
entries that have been updated are stored.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

from .compiled import CompiledHierarchy
from .hierarchy import TaskGraph
from .mdp import MdpModel, StateVector

DEFAULT_STEP_CAP = 10_000


class NoAvailableChild(RuntimeError):
    pass


class EpisodeStepCapExceeded(RuntimeError):
    pass


class _BudgetExhausted(Exception):
    pass


@dataclass(frozen=True)
class StepSizeRule:
    """``harmonic``: alpha = c / (c + n) after n earlier updates of the entry.
    ``constant``: alpha = c every time (no convergence guarantee)."""

    kind: str = "harmonic"
    value: float = 1.0

    def __post_init__(self) -> None:
        if self.kind == "harmonic":
            if not self.value > 0:
                raise ValueError("harmonic step-size constant must be positive")
        elif self.kind == "constant":
            if not 0.0 <= self.value <= 1.0:
                raise ValueError("constant step size must lie in [0, 1]")
        else:
            raise ValueError(f"unknown step-size rule {self.kind!r}")

    def alpha(self, visits: int) -> float:
        if self.kind == "harmonic":
            return self.value / (self.value + visits)
        return self.value

    @property
    def converges(self) -> bool:
        """Whether sum(alpha) diverges while sum(alpha^2) converges."""
        return self.kind == "harmonic"

    @property
    def label(self) -> str:
        if self.kind == "harmonic":
            return f"harmonic(c={self.value:g})"
        return f"constant({self.value:g}) [practical mode]"


@dataclass(frozen=True)
class LearningSchedule:
    default: StepSizeRule = StepSizeRule()
    overrides: Mapping[str, StepSizeRule] = field(default_factory=dict)

    def rule(self, name: str) -> StepSizeRule:
        return self.overrides.get(name, self.default)


@dataclass(frozen=True)
class ExplorationSchedule:
    """Boltzmann temperature ``max(minimum, initial * decay**episode)``."""

    initial_temperature: float = 10.0
    decay: float = 0.99
    minimum: float = 0.05

    def __post_init__(self) -> None:
        if not self.initial_temperature > 0 or not self.minimum > 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def temperature(self, episode: int) -> float:
        return max(self.minimum, self.initial_temperature * self.decay**episode)


def boltzmann_index(values: Sequence[float], temperature: float, u: float) -> int:
    """Index drawn with probability proportional to exp(value / temperature)."""
    top = max(values)
    weights = [math.exp((v - top) / temperature) for v in values]
    threshold = u * sum(weights)
    acc = 0.0
    for k, w in enumerate(weights):
        acc += w
        if threshold < acc:
            return k
    return len(values) - 1


class SubtaskResult(NamedTuple):
    final_state: StateVector
    steps: int
    reward: float
    episode_ended: bool
    truncated: bool


class Learner:
    """Budgeted training loop shared by the tabular learners.

    Subclasses implement ``_episode(start_index)`` and call
    ``_before_step()`` ahead of every primitive action.
    """

    def __init__(self, model: MdpModel, exploration: ExplorationSchedule, gamma: float,
                 seed: int | random.Random, step_cap: int) -> None:
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        self.model = model
        self.tabular = model.tabular
        self.exploration = exploration
        self.gamma = gamma
        self.rng = seed if isinstance(seed, random.Random) else random.Random(seed)
        self.step_cap = step_cap
        self.steps = 0
        self.episodes = 0
        self.truncations = 0
        self.temperature = exploration.temperature(0)
        self._budget = math.inf
        self._next_checkpoint = math.inf
        self._interval = 0
        self._on_checkpoint: Callable[[int], None] | None = None
        self._episode_steps = 0
        self._truncated = False

    def _before_step(self) -> None:
        if self.steps >= self._next_checkpoint:
            self._on_checkpoint(self.steps)
            self._next_checkpoint += self._interval
        if self.steps >= self._budget:
            raise _BudgetExhausted

    def _after_step(self) -> None:
        self.steps += 1
        self._episode_steps += 1
        if self._episode_steps >= self.step_cap:
            self._truncated = True

    def _start_episode(self) -> int:
        starts = self.tabular.starts
        self.temperature = self.exploration.temperature(self.episodes)
        self._episode_steps = 0
        self._truncated = False
        return starts[self.rng.randrange(len(starts))]

    def _episode(self, s: int) -> None:
        raise NotImplementedError

    def train(self, budget: int, interval: int | None = None,
              on_checkpoint: Callable[[int], None] | None = None) -> None:
        """Run episodes until ``budget`` more primitive steps have executed.

        ``on_checkpoint(steps)`` fires at the starting step count, every
        ``interval`` steps after it, and once more at the end of the budget.
        The episode in progress when the budget runs out is abandoned.
        """
        start = self.steps
        self._budget = start + budget
        self._on_checkpoint = on_checkpoint
        if on_checkpoint is not None and interval:
            self._interval = interval
            self._next_checkpoint = start
        else:
            self._next_checkpoint = math.inf
        last = None
        try:
            while True:
                s = self._start_episode()
                self._episode(s)
                if self._truncated:
                    self.truncations += 1
                self.episodes += 1
        except _BudgetExhausted:
            pass
        finally:
            if on_checkpoint is not None and interval:
                last = self._next_checkpoint - self._interval
            self._next_checkpoint = math.inf
            self._budget = math.inf
        if on_checkpoint is not None and interval and last != self.steps:
            on_checkpoint(self.steps)


class MaxqLearner(Learner):
    """MAXQ-Q over a task graph, with ordered Boltzmann exploration.

    ``C[edge][key]`` holds completion values and ``V[node][key]`` the leaf
    values of primitive nodes. ``trace``, when set to a list, receives a
    ``(node, state_index)`` pair for every invocation. ``observe``, when set,
    maps ``(node_name, state)`` to the state that node's own decisions and
    updates see; the environment always advances the true state.
    """

    def __init__(self, model: MdpModel, graph: TaskGraph,
                 schedule: LearningSchedule = LearningSchedule(),
                 exploration: ExplorationSchedule = ExplorationSchedule(),
                 gamma: float = 1.0, seed: int | random.Random = 0,
                 step_cap: int = DEFAULT_STEP_CAP,
                 compiled: CompiledHierarchy | None = None) -> None:
        super().__init__(model, exploration, gamma, seed, step_cap)
        h = compiled if compiled is not None else CompiledHierarchy(graph, model)
        self.h = h
        self.graph = h.graph
        self.schedule = schedule
        self.C: list[dict[int, float]] = [{} for _ in h.edges]
        self.C_visits: list[dict[int, int]] = [{} for _ in h.edges]
        self.V: list[dict[int, float]] = [{} for _ in h.names]
        self.V_visits: list[dict[int, int]] = [{} for _ in h.names]
        self._edge_alpha = [schedule.rule(e.table) for e in h.edges]
        self._leaf_alpha = [schedule.rule(name) for name in h.names]
        self._eliminated = [e.eliminated for e in h.edges]
        self._slots = [[(sl.edge, sl.child, sl.key) for sl in slots] for slots in h.slots]
        self._term = h.term
        self._prim = h.is_primitive
        self._leaf_keys = h.leaf_keys
        self.trace: list[tuple[int, int]] | None = None
        self.observe: Callable[[str, StateVector], StateVector] | None = None

    # -- values ----------------------------------------------------------

    def _v(self, node: int, s: int) -> float:
        if self._prim[node]:
            return self.V[node].get(self._leaf_keys[node][s], 0.0)
        best = -math.inf
        found = False
        term = self._term
        C = self.C
        for edge, child, key in self._slots[node]:
            c = child[s]
            if c < 0 or term[c][s]:
                continue
            q = self._v(c, s) + C[edge].get(key[s], 0.0)
            if not found or q > best:
                best = q
                found = True
        if not found:
            raise NoAvailableChild(f"{self.h.names[node]} has no executable child in {self.h.states[s]}")
        return best

    def _q_values(self, node: int, s: int) -> tuple[list[int], list[int], list[float]]:
        positions, children, qs = [], [], []
        term = self._term
        for pos, (edge, child, key) in enumerate(self._slots[node]):
            c = child[s]
            if c < 0 or term[c][s]:
                continue
            positions.append(pos)
            children.append(c)
            qs.append(self._v(c, s) + self.C[edge].get(key[s], 0.0))
        return positions, children, qs

    def _best(self, node: int, s: int) -> tuple[int, int, float]:
        positions, children, qs = self._q_values(node, s)
        if not qs:
            raise NoAvailableChild(f"{self.h.names[node]} has no executable child in {self.h.states[s]}")
        k = 0
        for j in range(1, len(qs)):
            if qs[j] > qs[k]:
                k = j
        return positions[k], children[k], qs[k]

    def _select(self, node: int, s: int) -> tuple[int, int]:
        positions, children, qs = self._q_values(node, s)
        if not qs:
            raise NoAvailableChild(f"{self.h.names[node]} has no executable child in {self.h.states[s]}")
        if len(qs) == 1:
            return positions[0], children[0]
        k = boltzmann_index(qs, self.temperature, self.rng.random())
        return positions[k], children[k]

    def _max_q(self, node: int, s: int) -> float:
        best = 0.0
        found = False
        term = self._term
        for edge, child, key in self._slots[node]:
            c = child[s]
            if c < 0 or term[c][s]:
                continue
            q = self._v(c, s) + self.C[edge].get(key[s], 0.0)
            if not found or q > best:
                best = q
                found = True
        return best

    # -- public, state-vector API ------------------------------------------

    def _node(self, name: str) -> int:
        try:
            return self.h.index[name]
        except KeyError:
            from .hierarchy import InvalidSubtask
            raise InvalidSubtask(name) from None

    def evaluate_v(self, node: str, state: StateVector) -> float:
        """V(node, state) from the current tables by the recursive max."""
        return self._v(self._node(node), self.model.encode(state))

    def q_value(self, node: str, state: StateVector, child_position: int) -> float:
        n = self._node(node)
        s = self.model.encode(state)
        edge, child, key = self._slots[n][child_position]
        return self._v(child[s], s) + self.C[edge].get(key[s], 0.0)

    def best_child(self, node: str, state: StateVector) -> tuple[str, float]:
        """Greedy child; exact ties go to the earliest declared child."""
        _, c, q = self._best(self._node(node), self.model.encode(state))
        return self.h.names[c], q

    def select_child(self, node: str, state: StateVector, temperature: float | None = None) -> str:
        if temperature is not None:
            self.temperature = temperature
        _, c = self._select(self._node(node), self.model.encode(state))
        return self.h.names[c]

    def run(self, node: str, state: StateVector) -> SubtaskResult:
        """Execute ``node`` from ``state`` with learning, as one episode fragment."""
        n = self._node(node)
        s = self.model.encode(self.model.validate_state(state))
        if self._term[n][s]:
            raise ValueError(f"{node} is already terminated in {state}")
        self._episode_steps = 0
        self._truncated = False
        self.temperature = self.exploration.temperature(self.episodes)
        s2, steps, reward = self._run(n, s)
        return SubtaskResult(self.h.states[s2], steps, reward, self.tabular.terminal[s2], self._truncated)

    # -- learning --------------------------------------------------------

    def _episode(self, s: int) -> None:
        self._run(self.h.root, s)

    def _run(self, node: int, s: int) -> tuple[int, int, float]:
        if self.trace is not None:
            self.trace.append((node, s))
        if self._prim[node]:
            self._before_step()
            s2, r = self.tabular.step(s, self.h.action_of[node], self.rng.random())
            self._after_step()
            key = self._leaf_keys[node][s]
            visits = self.V_visits[node]
            n = visits.get(key, 0)
            alpha = self._leaf_alpha[node].alpha(n)
            if alpha > 0.0:
                table = self.V[node]
                table[key] = (1.0 - alpha) * table.get(key, 0.0) + alpha * r
                visits[key] = n + 1
            return s2, 1, r

        observe = self.observe
        if observe is not None:
            name = self.h.names[node]
            enc, states = self.model.encode, self.h.states
            look = lambda x: enc(observe(name, states[x]))  # noqa: E731
        else:
            look = None
        term = self._term[node]
        gamma = self.gamma
        slots = self._slots[node]
        steps = 0
        total = 0.0
        discount = 1.0
        o = s if look is None else look(s)
        while not term[o]:
            pos, child = self._select(node, o)
            s2, n, r = self._run(child, s)
            total += discount * r
            g = 1.0 if gamma == 1.0 else gamma**n
            discount *= g
            steps += n
            if self._truncated:
                return s2, steps, total
            o2 = s2 if look is None else look(s2)
            edge, _, key = slots[pos]
            if not self._eliminated[edge]:
                target = 0.0 if term[o2] else g * self._max_q(node, o2)
                k = key[o]
                visits = self.C_visits[edge]
                count = visits.get(k, 0)
                alpha = self._edge_alpha[edge].alpha(count)
                if alpha > 0.0:
                    table = self.C[edge]
                    table[k] = (1.0 - alpha) * table.get(k, 0.0) + alpha * target
                    visits[k] = count + 1
            s, o = s2, o2
        return s, steps, total

    # -- greedy execution --------------------------------------------------

    def greedy_primitive(self, stack: tuple[int, ...], s: int) -> tuple[tuple[int, ...], int]:
        """Descend greedily from the top of ``stack`` to a primitive."""
        node = stack[-1]
        while not self._prim[node]:
            _, node, _ = self._best(node, s)
            stack = stack + (node,)
        return stack[:-1], node

    def greedy_return(self, s: int, cap: int, rng: random.Random) -> float:
        """Undiscounted return of one greedy episode capped at ``cap`` steps."""
        tab = self.tabular
        term = self._term
        stack: tuple[int, ...] = (self.h.root,)
        total = 0.0
        for _ in range(cap):
            stack, prim = self.greedy_primitive(stack, s)
            s, r = tab.step(s, self.h.action_of[prim], rng.random())
            total += r
            while stack and term[stack[-1]][s]:
                stack = stack[:-1]
            if not stack:
                break
        return total

    # -- inspection --------------------------------------------------------

    def stored_entries(self) -> dict[tuple[str, str, str], float]:
        """Completion entries as ``(table, key, child) -> value``."""
        out = {}
        for eid, table in enumerate(self.C):
            info = self.h.edges[eid]
            for key, value in table.items():
                out[(info.table, self.h.describe_key(info.spec, key), info.ref)] = value
        return out

    def snapshot(self) -> str:
        """One ``table<TAB>key<TAB>child<TAB>value`` line per stored entry, sorted.

        Leaf values use the action as the table and ``.`` as the child.
        """
        lines = [f"{t}\t{k}\t{c}\t{v:.17g}" for (t, k, c), v in self.stored_entries().items()]
        for node, table in enumerate(self.V):
            spec = self.h.leaf_specs[node]
            for key, value in table.items():
                lines.append(f"{self.h.names[node]}\t{self.h.describe_key(spec, key)}\t.\t{value:.17g}")
        lines.sort()
        return "".join(line + "\n" for line in lines)


class FlatQLearner(Learner):
    """One-step Q-learning over the full state space with Boltzmann exploration."""

    def __init__(self, model: MdpModel, schedule: LearningSchedule = LearningSchedule(),
                 exploration: ExplorationSchedule = ExplorationSchedule(),
                 gamma: float = 1.0, seed: int | random.Random = 0,
                 step_cap: int = DEFAULT_STEP_CAP) -> None:
        super().__init__(model, exploration, gamma, seed, step_cap)
        tab = self.tabular
        self.Q = [[0.0] * tab.num_actions for _ in range(tab.num_states)]
        self.visits: dict[tuple[int, int], int] = {}
        self.rule = schedule.rule("Q")

    def greedy_action(self, s: int) -> int:
        row = self.Q[s]
        best = 0
        for a in range(1, len(row)):
            if row[a] > row[best]:
                best = a
        return best

    def _episode(self, s: int) -> None:
        tab = self.tabular
        terminal = tab.terminal
        Q = self.Q
        rng = self.rng
        gamma = self.gamma
        rule = self.rule
        visits = self.visits
        while not terminal[s]:
            a = boltzmann_index(Q[s], self.temperature, rng.random())
            self._before_step()
            s2, r = tab.step(s, a, rng.random())
            self._after_step()
            target = r if terminal[s2] else r + gamma * max(Q[s2])
            n = visits.get((s, a), 0)
            alpha = rule.alpha(n)
            if alpha > 0.0:
                Q[s][a] = (1.0 - alpha) * Q[s][a] + alpha * target
                visits[(s, a)] = n + 1
            s = s2
            if self._truncated:
                return

    def greedy_return(self, s: int, cap: int, rng: random.Random) -> float:
        tab = self.tabular
        total = 0.0
        for _ in range(cap):
            if tab.terminal[s]:
                break
            s, r = tab.step(s, self.greedy_action(s), rng.random())
            total += r
        return total

    def snapshot(self) -> str:
        model = self.model
        lines = [
            f"Q\t{model.describe(model.decode(s))}\t{model.actions[a]}\t{self.Q[s][a]:.17g}"
            for (s, a) in self.visits
        ]
        lines.sort()
        return "".join(line + "\n" for line in lines)
