"""Exact solvers: flat value iteration and the bottom-up hierarchical DP.

Both work on dense/sparse matrices built from the enumerated model. The
hierarchical solver needs nothing from the flat one, so their agreement on
Taxi is a real check rather than a tautology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compiled import CompiledHierarchy
from .hierarchy import TaskGraph
from .mdp import MdpModel

TIE_TOLERANCE = 1e-9


class Divergence(RuntimeError):
    pass


@dataclass
class FlatSolution:
    values: np.ndarray
    q_values: np.ndarray  # (actions, states)
    policy: np.ndarray
    residual: float
    iterations: int

    def mean_start_value(self, model: MdpModel) -> float:
        return float(np.mean(self.values[model.tabular.starts]))


def _first_max(q: np.ndarray, tol: float) -> np.ndarray:
    """Row-wise argmax over axis 0 that prefers the earliest near-maximal entry."""
    best = q.max(axis=0)
    return np.argmax(q >= best - tol, axis=0)


def flat_value_iteration(model: MdpModel, gamma: float = 1.0, tol: float = 1e-10,
                         max_iterations: int = 1_000_000) -> FlatSolution:
    """Optimal state values by value iteration followed by exact policy evaluation."""
    tab = model.tabular
    terminal = np.array(tab.terminal)
    live = ~terminal
    R = tab.expected_rewards
    P = tab.matrices
    n = tab.num_states
    v = np.zeros(n)

    def backup(values: np.ndarray) -> np.ndarray:
        q = np.stack([R[a] + gamma * (P[a] @ values) for a in range(tab.num_actions)])
        q[:, terminal] = 0.0
        return q

    iterations = 0
    prev = np.inf
    stalled = 0
    while True:
        iterations += 1
        q = backup(v)
        new = q.max(axis=0)
        delta = float(np.max(np.abs(new - v)))
        v = new
        if not np.isfinite(delta):
            raise Divergence("value iteration produced non-finite values")
        if delta <= tol * 0.01:
            break
        stalled = stalled + 1 if delta >= prev else 0
        prev = delta
        if iterations >= max_iterations or stalled > 1000:
            raise Divergence(f"value iteration failed to converge (last change {delta:g})")

    policy = _first_max(backup(v), TIE_TOLERANCE)
    # exact evaluation of the greedy policy; fall back to the VI values if improper
    rows = np.flatnonzero(live)
    M = np.zeros((n, n))
    b = np.zeros(n)
    for s in rows:
        M[s] = P[policy[s]].getrow(s).toarray().ravel()
        b[s] = R[policy[s], s]
    sub = np.ix_(rows, rows)
    try:
        exact = np.zeros(n)
        exact[rows] = np.linalg.solve(np.eye(len(rows)) - gamma * M[sub], b[rows])
        if np.all(np.isfinite(exact)) and np.max(np.abs(exact - v)) < 1e-6:
            v = exact
    except np.linalg.LinAlgError:
        pass
    q = backup(v)
    residual = float(np.max(np.abs(q.max(axis=0) - v)))
    return FlatSolution(v, q, _first_max(q, TIE_TOLERANCE), residual, iterations)


@dataclass
class HierarchicalSolution:
    """Recursively optimal values under ordered tie-breaking.

    ``values[node]`` is V(node, s); ``completions[(node, pos)]`` is C(node, s,
    child at ``pos``) and NaN where that child cannot run; ``policy[node]`` is
    the chosen slot position or -1. ``kernels[node][s, s']`` is the discounted
    probability that ``node`` started in s terminates in s'.
    """

    compiled: CompiledHierarchy
    gamma: float
    values: dict[str, np.ndarray] = field(default_factory=dict)
    completions: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    policy: dict[str, np.ndarray] = field(default_factory=dict)
    kernels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def root_values(self) -> np.ndarray:
        return self.values[self.compiled.graph.root]

    def policy_fn(self):
        """The greedy policy as a chain-analysis policy ``(node, s) -> [(pos, 1.0)]``."""
        names = self.compiled.names
        table = {k: self.policy[names[k]] for k in range(len(names)) if names[k] in self.policy}

        def choose(node: int, s: int):
            return [(int(table[node][s]), 1.0)]

        return choose


def _solve_subtask(h: CompiledHierarchy, k: int, sol: HierarchicalSolution,
                   tol: float, max_iterations: int) -> None:
    n = h.num_states
    gamma = sol.gamma
    name = h.names[k]
    term = np.array(h.term[k])
    running = ~term
    slots = h.slots[k]
    npos = len(slots)
    avail = np.zeros((npos, n), dtype=bool)
    kern = np.zeros((npos, n, n))
    vals = np.full((npos, n), -np.inf)
    for pos, slot in enumerate(slots):
        for s in np.flatnonzero(running):
            c = slot.child[s]
            if c < 0 or h.term[c][s]:
                continue
            child = h.names[c]
            avail[pos, s] = True
            kern[pos, s] = sol.kernels[child][s]
            vals[pos, s] = sol.values[child][s]

    good = avail & np.isfinite(vals)
    support = kern > 0.0
    winning = running.copy()
    if gamma == 1.0:
        # states from which some policy terminates with probability one
        while True:
            safe = term | winning
            ok = good & ~np.any(support & ~safe[None, None, :], axis=2)
            reach = term.copy()
            while True:
                grow = running & winning & ~reach & np.any(ok & np.any(support & reach[None, None, :], axis=2), axis=0)
                if not grow.any():
                    break
                reach |= grow
            new_winning = reach & running
            if np.array_equal(new_winning, winning):
                break
            winning = new_winning
        ok = good & ~np.any(support & ~(term | winning)[None, None, :], axis=2)
    else:
        ok = good

    def q_of(w: np.ndarray) -> np.ndarray:
        q = np.where(ok, vals + np.einsum("psn,n->ps", kern, w), -np.inf)
        return q

    w = np.zeros(n)
    for it in range(max_iterations):
        q = q_of(w)
        new = np.zeros(n)
        new[winning] = q[:, winning].max(axis=0)
        delta = float(np.max(np.abs(new - w))) if n else 0.0
        w = new
        if delta <= tol:
            break
    else:
        raise Divergence(f"value iteration for {name} did not converge")

    # policy iteration from the value-iteration policy gives exact values
    policy = np.full(n, -1)
    for _ in range(100):
        q = q_of(w)
        chosen = _first_max(np.where(ok, q, -np.inf), TIE_TOLERANCE)
        chosen[~winning] = -1
        if np.array_equal(chosen, policy):
            break
        policy = chosen
        idx = np.flatnonzero(winning)
        M = kern[policy[idx], idx][:, idx]
        b = vals[policy[idx], idx]
        try:
            x = np.linalg.solve(np.eye(len(idx)) - M, b)
        except np.linalg.LinAlgError as err:
            raise Divergence(f"greedy policy for {name} is improper") from err
        w = np.zeros(n)
        w[idx] = x

    # states with no executable child keep the first available slot for reference
    stuck = running & ~winning
    for s in np.flatnonzero(stuck):
        options = np.flatnonzero(avail[:, s])
        policy[s] = options[0] if len(options) else -1

    idx = np.flatnonzero(winning)
    kernel = np.zeros((n, n))
    if len(idx):
        M = kern[policy[idx], idx][:, idx]
        term_idx = np.flatnonzero(term)
        absorb = kern[policy[idx], idx][:, term_idx]
        kernel[np.ix_(idx, term_idx)] = np.linalg.solve(np.eye(len(idx)) - M, absorb)

    value = np.zeros(n)
    value[winning] = w[winning]
    value[stuck] = -np.inf
    sol.values[name] = value
    sol.kernels[name] = kernel
    sol.policy[name] = policy
    w_finite = np.where(np.isfinite(value), value, 0.0)
    w_finite[term] = 0.0
    for pos in range(npos):
        comp = np.full(n, np.nan)
        cont = np.einsum("sn,n->s", kern[pos], w_finite)
        comp[ok[pos]] = cont[ok[pos]]
        bad = avail[pos] & ~ok[pos]
        comp[bad] = -np.inf
        sol.completions[(name, pos)] = comp


def hierarchical_dp_oracle(model: MdpModel, graph: TaskGraph, gamma: float = 1.0,
                           tol: float = 1e-12, max_iterations: int = 200_000,
                           compiled: CompiledHierarchy | None = None) -> HierarchicalSolution:
    """Recursively optimal solution, solving subtasks from the leaves upward.

    Each subtask is an SMDP over its children, whose termination kernels and
    values are already known. Ties between children go to the earliest
    declared one, which makes the solution unique. States from which a
    subtask cannot terminate get value ``-inf``.
    """
    h = compiled if compiled is not None else CompiledHierarchy(graph, model)
    tab = h.tabular
    sol = HierarchicalSolution(h, gamma)
    for k in reversed(h.top_down):
        name = h.names[k]
        if h.is_primitive[k]:
            a = h.action_of[k]
            sol.kernels[name] = gamma * tab.matrices[a].toarray()
            sol.values[name] = tab.expected_rewards[a].copy()
        else:
            _solve_subtask(h, k, sol, tol, max_iterations)
    return sol
