"""Exact analysis of a fixed hierarchical policy as an absorbing Markov chain.

A chain state is ``(stack, s)``: the active subtasks from the analysed node
down to the one about to choose, and the environment state. One chain step
is one primitive action. Subtasks return strictly call-and-return: after each
primitive, every subtask on the stack whose predicate now holds is popped;
popping the analysed node absorbs the chain in the resulting state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .compiled import CompiledHierarchy

# (node, state) -> [(slot position, probability)] over executable slots
HierarchicalPolicy = Callable[[int, int], Sequence[tuple[int, float]]]

DEFAULT_HORIZON = 2000
MAX_HORIZON = 128_000
MASS_TOLERANCE = 1e-9


class HorizonTooSmall(RuntimeError):
    pass


def outcome_probabilities(entries) -> list[tuple[float, int, float]]:
    """``(probability, next_state, reward)`` from cumulative tabular outcomes."""
    out = []
    prev = 0.0
    for cum, ns, r in entries:
        out.append((cum - prev, ns, r))
        prev = cum
    return out


@dataclass
class Chain:
    """Transient part ``T``, absorption ``A`` into environment states, and
    expected one-step rewards ``r``. ``start_rows[i]`` is the chain state
    that starts the analysed node in ``starts[i]``."""

    states: list[tuple[tuple[int, ...], int]]
    T: sparse.csr_matrix
    A: sparse.csr_matrix
    r: np.ndarray
    starts: list[int]
    start_rows: list[int]


def build_chain(h: CompiledHierarchy, node: int | Sequence[int], starts: Sequence[int],
                policy: HierarchicalPolicy) -> Chain:
    """Chain for running ``node`` from each start; ``node`` may also give one
    node per start, all of the same kind (primitive or composite)."""
    tab = h.tabular
    nodes = [node] * len(starts) if isinstance(node, int) else list(node)
    node = nodes[0] if nodes else 0
    n_env = h.num_states
    term = h.term
    if h.is_primitive[node]:
        # one step, absorbed immediately
        states = [((c,), s) for c, s in zip(nodes, starts)]
        rows, cols, vals = [], [], []
        r = np.zeros(len(starts))
        for i, s in enumerate(starts):
            for p, ns, rew in outcome_probabilities(tab.outcomes[s][h.action_of[nodes[i]]]):
                rows.append(i)
                cols.append(ns)
                vals.append(p)
                r[i] += p * rew
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(starts), n_env))
        T = sparse.csr_matrix((len(starts), len(starts)))
        return Chain(states, T, A, r, list(starts), list(range(len(starts))))

    index: dict[tuple[tuple[int, ...], int], int] = {}
    states: list[tuple[tuple[int, ...], int]] = []
    queue: list[int] = []

    def lookup(key: tuple[tuple[int, ...], int]) -> int:
        i = index.get(key)
        if i is None:
            i = len(states)
            index[key] = i
            states.append(key)
            queue.append(i)
        return i

    start_rows = [lookup(((c,), s)) for c, s in zip(nodes, starts)]
    choice_cache: dict[tuple[int, int], list[tuple[tuple[int, ...], int, float]]] = {}

    def descend(stack: tuple[int, ...], s: int) -> list[tuple[tuple[int, ...], int, float]]:
        """(stack at execution, primitive, probability) for one decision."""
        out = []
        top = stack[-1]
        for pos, p in policy(top, s):
            if p <= 0.0:
                continue
            c = h.slots[top][pos].child[s]
            if h.is_primitive[c]:
                out.append((stack, c, p))
            else:
                cached = choice_cache.get((c, s))
                if cached is None:
                    cached = [(st[1:], prim, q) for st, prim, q in descend((c,), s)]
                    choice_cache[(c, s)] = cached
                for tail, prim, q in cached:
                    out.append((stack + (c,) + tail, prim, p * q))
        return out

    t_rows, t_cols, t_vals = [], [], []
    a_rows, a_cols, a_vals = [], [], []
    rewards: list[float] = []
    head = 0
    while head < len(queue):
        i = queue[head]
        head += 1
        stack, s = states[i]
        expected = 0.0
        for exec_stack, prim, p in descend(stack, s):
            for q, ns, rew in outcome_probabilities(tab.outcomes[s][h.action_of[prim]]):
                w = p * q
                expected += w * rew
                st = exec_stack
                while st and term[st[-1]][ns]:
                    st = st[:-1]
                if st:
                    t_rows.append(i)
                    t_cols.append(lookup((st, ns)))
                    t_vals.append(w)
                else:
                    a_rows.append(i)
                    a_cols.append(ns)
                    a_vals.append(w)
        rewards.append(expected)
    m = len(states)
    T = sparse.csr_matrix((t_vals, (t_rows, t_cols)), shape=(m, m))
    A = sparse.csr_matrix((a_vals, (a_rows, a_cols)), shape=(m, n_env))
    return Chain(states, T, A, np.array(rewards), list(starts), start_rows)


@dataclass
class Absorption:
    """Exact termination behaviour per start.

    ``distribution[i, s']`` is the probability (weighted by gamma^N when
    discounting) that the node started in ``starts[i]`` terminates in s';
    ``values[i]`` is the expected discounted reward until termination.
    """

    starts: list[int]
    distribution: sparse.csr_matrix
    values: np.ndarray
    mass: np.ndarray


def _solve_visits(chain: Chain, gamma: float) -> np.ndarray:
    m = len(chain.states)
    k = len(chain.start_rows)
    E = np.zeros((m, k))
    E[chain.start_rows, np.arange(k)] = 1.0
    if chain.T.nnz == 0:
        return E
    lhs = (sparse.identity(m, format="csc") - gamma * chain.T.T).tocsc()
    try:
        X = splu(lhs).solve(E)
    except RuntimeError as err:  # singular: some start never terminates
        raise HorizonTooSmall("the policy does not terminate from every start") from err
    if not np.all(np.isfinite(X)):
        raise HorizonTooSmall("the policy does not terminate from every start")
    return X


def absorb(chain: Chain, gamma: float = 1.0, tolerance: float = MASS_TOLERANCE) -> Absorption:
    """Termination distribution and value for every start, by one sparse solve.

    ``X = (I - gamma T)^-T E`` holds expected discounted visits to each chain
    state; distributions follow as ``X^T A`` and values as ``X^T r``.
    """
    X = _solve_visits(chain, gamma)
    dist = sparse.csr_matrix(chain.A.T @ X).T.tocsr()
    dist.eliminate_zeros()
    values = X.T @ chain.r
    mass = np.asarray(sparse.csr_matrix(chain.A.T @ _solve_visits(chain, 1.0)).sum(axis=0)).ravel() \
        if gamma != 1.0 else np.asarray(dist.sum(axis=1)).ravel()
    if len(mass) and 1.0 - mass.min() > tolerance:
        raise HorizonTooSmall(f"termination mass {mass.min():.12g} is below 1 - {tolerance:g}")
    return Absorption(list(chain.starts), dist, values, mass)


def lumped_blocks(chain: Chain, labels: np.ndarray, decimals: int = 12) -> np.ndarray:
    """Coarsest partition of chain states into probabilistically bisimilar blocks.

    ``labels`` maps each environment state to an observation label. Two
    states share a block only if they absorb with equal probability into
    every label and move with equal probability into every block. States in
    one block therefore have identical (label, N) termination distributions.
    The converse need not hold, so callers confirm separated pairs with
    :func:`pair_gap`. Probabilities are compared after rounding.
    """
    m = len(chain.states)
    num_labels = int(labels.max()) + 1 if len(labels) else 0
    project = sparse.csr_matrix((np.ones(len(labels)), (np.arange(len(labels)), labels)),
                                shape=(len(labels), num_labels))
    base = np.round((chain.A @ project).toarray(), decimals)
    _, block = np.unique(base, axis=0, return_inverse=True)
    block = block.ravel()
    T = chain.T.tocsr()
    while True:
        count = int(block.max()) + 1
        onehot = sparse.csr_matrix((np.ones(m), (np.arange(m), block)), shape=(m, count))
        into = np.round((T @ onehot).toarray(), decimals)
        _, refined = np.unique(np.hstack([block[:, None].astype(float), into]), axis=0, return_inverse=True)
        refined = refined.ravel()
        if int(refined.max()) + 1 == count:
            return block
        block = refined


@dataclass(frozen=True)
class PairGap:
    """Total variation between two starts' (label, N) distributions and the
    single largest difference, found at step ``steps`` for ``label``."""

    total_variation: float
    steps: int
    label: int
    left: float
    right: float


def pair_gap(chain: Chain, row_a: int, row_b: int, labels: np.ndarray,
             horizon: int = DEFAULT_HORIZON, max_horizon: int = MAX_HORIZON,
             tolerance: float = MASS_TOLERANCE) -> PairGap:
    """Compare two chain states step by step until both have terminated with
    probability at least ``1 - tolerance``."""
    m = len(chain.states)
    num_labels = int(labels.max()) + 1
    d = np.zeros((m, 2))
    d[row_a, 0] = 1.0
    d[row_b, 1] = 1.0
    TT = chain.T.T.tocsr()
    AT = chain.A.T.tocsr()
    mass = np.zeros(2)
    tv = 0.0
    best = PairGap(0.0, 0, -1, 0.0, 0.0)
    n = 0
    while True:
        n += 1
        h = AT @ d
        la = np.bincount(labels, weights=h[:, 0], minlength=num_labels)
        lb = np.bincount(labels, weights=h[:, 1], minlength=num_labels)
        diff = np.abs(la - lb)
        tv += 0.5 * float(diff.sum())
        k = int(np.argmax(diff))
        if diff[k] > abs(best.left - best.right):
            best = PairGap(0.0, n, k, float(la[k]), float(lb[k]))
        mass += h.sum(axis=0)
        if 1.0 - mass.min() <= tolerance:
            break
        d = TT @ d
        if n >= horizon:
            if horizon * 2 > max_horizon:
                raise HorizonTooSmall(
                    f"termination mass {mass.min():.12g} after {n} steps is below 1 - {tolerance:g}")
            horizon *= 2
    return PairGap(tv, best.steps, best.label, best.left, best.right)


def step_joint(chain: Chain, row: int, horizon: int = DEFAULT_HORIZON,
               max_horizon: int = MAX_HORIZON, tolerance: float = MASS_TOLERANCE):
    """Yield ``(n, h)`` with ``h[s']`` the probability of terminating in s'
    after exactly ``n`` steps from one chain state."""
    d = np.zeros(len(chain.states))
    d[row] = 1.0
    TT = chain.T.T.tocsr()
    AT = chain.A.T.tocsr()
    mass = 0.0
    n = 0
    while True:
        n += 1
        h = AT @ d
        mass += float(h.sum())
        yield n, h
        if 1.0 - mass <= tolerance:
            return
        d = TT @ d
        if n >= horizon:
            if horizon * 2 > max_horizon:
                raise HorizonTooSmall(f"termination mass {mass:.12g} after {n} steps is below 1 - {tolerance:g}")
            horizon *= 2


def capped_return(chain: Chain, cap: int) -> float:
    """Expected undiscounted return over uniformly drawn starts, each episode
    cut off after ``cap`` primitive steps."""
    d = np.zeros(len(chain.states))
    np.add.at(d, chain.start_rows, 1.0 / len(chain.start_rows))
    TT = chain.T.T.tocsr()
    total = 0.0
    for _ in range(cap):
        if not d.any():
            break
        total += float(chain.r @ d)
        d = TT @ d
    return total


def greedy_policy(learner) -> HierarchicalPolicy:
    """The learner's frozen greedy choice with ordered tie-breaking."""

    def choose(node: int, s: int):
        pos, _, _ = learner._best(node, s)
        return [(pos, 1.0)]

    return choose


def flat_chain(tab, actions: Sequence[int], starts: Sequence[int]) -> Chain:
    """Chain of a deterministic flat policy; terminal states absorb."""
    n = tab.num_states
    rows, cols, vals = [], [], []
    a_rows, a_cols, a_vals = [], [], []
    r = np.zeros(n)
    for s in range(n):
        if tab.terminal[s]:
            continue
        for p, ns, rew in outcome_probabilities(tab.outcomes[s][actions[s]]):
            r[s] += p * rew
            if tab.terminal[ns]:
                a_rows.append(s)
                a_cols.append(ns)
                a_vals.append(p)
            else:
                rows.append(s)
                cols.append(ns)
                vals.append(p)
    T = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A = sparse.csr_matrix((a_vals, (a_rows, a_cols)), shape=(n, n))
    return Chain([((), s) for s in range(n)], T, A, r, list(starts), list(starts))


def exact_greedy_return(learner, cap: int) -> float:
    """Expected capped return of a learner's greedy policy from the start distribution."""
    tab = learner.tabular
    if hasattr(learner, "h"):
        chain = build_chain(learner.h, learner.h.root, tab.starts, greedy_policy(learner))
    else:
        chain = flat_chain(tab, [learner.greedy_action(s) for s in range(tab.num_states)], tab.starts)
    return capped_return(chain, cap)
