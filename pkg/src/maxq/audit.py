"""Brute-force checks of the five state-abstraction conditions, and value accounting.

Subtask irrelevance and result-distribution irrelevance quantify over
abstract hierarchical policies. Those checks take an explicit list of
policies and are exact for each one: termination distributions come from
absorbing-chain solves, not simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .chain import HierarchicalPolicy, absorb, build_chain, lumped_blocks, pair_gap, step_joint
from .compiled import CompiledHierarchy
from .hierarchy import TaskGraph
from .mdp import MdpModel, enumerate_states
from .oracle import hierarchical_dp_oracle

DISTRIBUTION_TOLERANCE = 1e-9
VALUE_TOLERANCE = 1e-9
REWARD_TOLERANCE = 1e-12
RANDOM_POLICIES = 20

CONDITIONS = ("subtask-irrelevance", "leaf-irrelevance", "result-distribution", "termination", "shielding")


@dataclass(frozen=True)
class Counterexample:
    s1: tuple[int, ...]
    s2: tuple[int, ...] | None
    child: str
    left: float
    right: float
    what: str = ""

    def describe(self, model: MdpModel) -> str:
        text = f"s1=({model.describe(self.s1)})"
        if self.s2 is not None:
            text += f" s2=({model.describe(self.s2)})"
        text += f" child={self.child} left={self.left:.12g} right={self.right:.12g}"
        if self.what:
            text += f" [{self.what}]"
        return text


@dataclass
class ConditionResult:
    condition: str
    subject: str
    passed: bool
    discrepancy: float = 0.0
    counterexample: Counterexample | None = None
    policies: int = 0
    note: str = ""

    def __post_init__(self) -> None:
        if not self.passed and self.counterexample is None:
            raise ValueError("a failed check must carry a counterexample")


@dataclass
class AuditReport:
    model: MdpModel
    results: list[ConditionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def by_condition(self) -> dict[str, list[ConditionResult]]:
        out: dict[str, list[ConditionResult]] = {c: [] for c in CONDITIONS}
        for r in self.results:
            out.setdefault(r.condition, []).append(r)
        return out

    def summary_lines(self) -> list[str]:
        """One PASS/FAIL line per condition."""
        lines = []
        for condition, results in self.by_condition().items():
            if not results:
                continue
            ok = all(r.passed for r in results)
            worst = max(r.discrepancy for r in results)
            lines.append(f"{'PASS' if ok else 'FAIL'} {condition}: {len(results)} checks, max discrepancy {worst:.3g}")
        return lines

    def to_text(self) -> str:
        lines = self.summary_lines()
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            line = f"  {status} {r.condition} {r.subject} discrepancy={r.discrepancy:.3g}"
            if r.policies:
                line += f" policies={r.policies}"
            if r.note:
                line += f" ({r.note})"
            lines.append(line)
            if r.counterexample is not None:
                lines.append("    counterexample: " + r.counterexample.describe(self.model))
        return "\n".join(lines) + "\n"

    def to_lines(self) -> str:
        """Tab-separated: condition, subject, PASS|FAIL, counterexample or '-', discrepancy."""
        out = []
        for r in self.results:
            cx = "-" if r.counterexample is None else r.counterexample.describe(self.model)
            out.append(f"{r.condition}\t{r.subject}\t{'PASS' if r.passed else 'FAIL'}\t{cx}\t{r.discrepancy:.17g}")
        return "".join(line + "\n" for line in out)


# -- policies ------------------------------------------------------------


def random_abstract_policy(h: CompiledHierarchy, seed: int, floor: float = 0.2) -> HierarchicalPolicy:
    """A stochastic policy whose choice probabilities depend only on each
    subtask's abstract state.

    Weights per (table, key) are a Dirichlet(1) draw mixed with the uniform
    distribution in proportion ``1 - floor : floor``. The floor keeps every
    child's probability bounded away from zero so random walks terminate
    within a practical horizon.
    """
    rng = np.random.default_rng(seed)
    weights: dict[tuple[str, int], np.ndarray] = {}
    keys: list[list[int] | None] = []
    tables: list[str] = []
    for k, name in enumerate(h.names):
        if h.is_primitive[k]:
            keys.append(None)
            tables.append("")
            continue
        spec = h.graph.key_spec(name)
        keys.append([spec.key(s) for s in h.states])
        tables.append(h.graph.subtask(name).table)
    # draw in a fixed order so the policy is a function of the seed alone
    for k, name in enumerate(h.names):
        if keys[k] is None:
            continue
        for key in sorted(set(keys[k])):
            if (tables[k], key) not in weights:
                width = len(h.slots[k])
                draw = rng.dirichlet(np.ones(width))
                weights[(tables[k], key)] = (1.0 - floor) * draw + floor / width

    def choose(node: int, s: int):
        w = weights[(tables[node], keys[node][s])]
        options = h.available(node, s)
        total = sum(w[pos] for pos, _ in options)
        return [(pos, w[pos] / total) for pos, _ in options]

    return choose


def audit_policies(h: CompiledHierarchy, count: int = RANDOM_POLICIES, seed: int = 0,
                   gamma: float = 1.0) -> list[HierarchicalPolicy]:
    """The recursively optimal policy followed by ``count`` random abstract ones."""
    policies = [hierarchical_dp_oracle(h.model, h.graph, gamma, compiled=h).policy_fn()]
    seeds = np.random.SeedSequence(seed).generate_state(count)
    policies += [random_abstract_policy(h, int(x)) for x in seeds]
    return policies


# -- helpers ---------------------------------------------------------------


def _compiled(model: MdpModel, g: TaskGraph, compiled: CompiledHierarchy | None) -> CompiledHierarchy:
    if compiled is not None and compiled.graph is g:
        return compiled
    return CompiledHierarchy(g, model)


def _group_tv(rows: sparse.csr_matrix, groups: np.ndarray):
    """Largest total variation between each row and the first row of its group.

    Returns (discrepancy, row, reference row, column of largest gap).
    """
    n = rows.shape[0]
    if n == 0:
        return 0.0, -1, -1, -1
    _, first = np.unique(groups, return_index=True)
    ref_of = first[np.searchsorted(np.unique(groups), groups)]
    diff = (rows - rows[ref_of]).tocsr()
    diff.data = np.abs(diff.data)
    tv = 0.5 * np.asarray(diff.sum(axis=1)).ravel()
    worst = int(np.argmax(tv))
    col = -1
    if tv[worst] > 0:
        row = diff.getrow(worst)
        col = int(row.indices[np.argmax(row.data)])
    return float(tv[worst]), worst, int(ref_of[worst]), col


def _group_refs(groups: np.ndarray) -> np.ndarray:
    """Index of the first member of each element's group."""
    uniq, first = np.unique(groups, return_index=True)
    return first[np.searchsorted(uniq, groups)]


def _slot_chain(h: CompiledHierarchy, parent: int, pos: int, policy: HierarchicalPolicy):
    """Chain of slot ``pos`` of ``parent`` from every state where it can run,
    with the child each start resolves to."""
    slot = h.slots[parent][pos]
    starts, nodes = [], []
    for s in range(h.num_states):
        if h.term[parent][s]:
            continue
        c = slot.child[s]
        if c < 0 or h.term[c][s]:
            continue
        starts.append(s)
        nodes.append(c)
    if not starts:
        return None
    return starts, nodes, build_chain(h, nodes, starts, policy)


def _first_separated_gap(chain, starts, groups, labels):
    """Largest-discrepancy check over pairs the lumping cannot identify.

    Returns ``(PairGap, i, ref)`` for the first pair whose (label, N)
    distributions really differ by more than the tolerance, else ``None``.
    """
    refs = _group_refs(groups)
    blocks = lumped_blocks(chain, labels)
    rows = np.asarray(chain.start_rows)
    for i in np.flatnonzero(blocks[rows] != blocks[rows[refs]]):
        gap = pair_gap(chain, rows[refs[i]], rows[i], labels)
        if gap.total_variation > DISTRIBUTION_TOLERANCE:
            return gap, int(i), int(refs[i])
    return None


# -- subtask irrelevance -------------------------------------------------


def check_subtask_irrelevance(model: MdpModel, g: TaskGraph, i: str,
                              policies: Sequence[HierarchicalPolicy],
                              compiled: CompiledHierarchy | None = None,
                              gamma: float = 1.0) -> ConditionResult:
    """Variables outside ``i``'s relevant set must not influence, or be
    influenced by, what its children do (factorisation and value equality)."""
    h = _compiled(model, g, compiled)
    node = h.index[i]
    xs = g.subtask(i).relevant_vars
    ys = tuple(v for v in g.variable_names if v not in xs)
    subject = f"{i} Y={{{','.join(ys)}}}"
    if not ys:
        return ConditionResult("subtask-irrelevance", subject, True, policies=len(policies), note="Y empty")
    xspec, yspec = g.variable_spec(xs), g.variable_spec(ys)
    xlab = np.array([xspec.key(s) for s in h.states])
    ylab = np.array([yspec.key(s) for s in h.states])
    ysize = yspec.size
    worst = 0.0
    found: Counterexample | None = None

    def record(value: float, cx: Counterexample) -> None:
        nonlocal worst, found
        if value > worst:
            worst = value
            found = cx

    for policy in policies:
        for pos in range(len(h.slots[node])):
            built = _slot_chain(h, node, pos, policy)
            if built is None:
                continue
            starts, nodes, chain = built
            starts_arr = np.array(starts)
            xgroups = xlab[starts_arr]
            # (a) the x', N distribution is the same for every y sharing x
            hit = _first_separated_gap(chain, starts, xgroups, xlab)
            if hit is not None:
                gap, a, b = hit
                what = f"P(x'=({h.describe_key(xspec, gap.label)}), N={gap.steps} | s)"
                record(gap.total_variation, Counterexample(h.states[starts[b]], h.states[starts[a]],
                                                           h.names[nodes[a]], gap.left, gap.right, what))
            exact = absorb(chain, 1.0)
            yproj = sparse.csr_matrix((np.ones(h.num_states), (np.arange(h.num_states), ylab)),
                                      shape=(h.num_states, ysize))
            py = (exact.distribution @ yproj).toarray()
            # y' depends on y alone
            refs = _group_refs(ylab[starts_arr])
            tv = 0.5 * np.abs(py - py[refs]).sum(axis=1)
            k = int(np.argmax(tv))
            if tv[k] > DISTRIBUTION_TOLERANCE:
                col = int(np.argmax(np.abs(py[k] - py[refs[k]])))
                record(float(tv[k]), Counterexample(
                    h.states[starts[refs[k]]], h.states[starts[k]], h.names[nodes[k]],
                    py[refs[k], col], py[k, col], f"P(y'=({h.describe_key(yspec, col)}) | s)"))
            # the joint is the product; automatic when y' is certain
            for k in np.flatnonzero(py.max(axis=1) < 1.0 - DISTRIBUTION_TOLERANCE):
                gap = 0.0
                for _, hn in step_joint(chain, chain.start_rows[k]):
                    pxn = np.bincount(xlab, weights=hn, minlength=xspec.size)
                    gap += 0.5 * float(np.abs(hn - pxn[xlab] * py[k, ylab]).sum())
                if gap > DISTRIBUTION_TOLERANCE:
                    record(gap, Counterexample(h.states[starts[k]], None, h.names[nodes[k]],
                                               gap, 0.0, "P(x',y',N|s) differs from P(x',N|s) P(y'|s)"))
                    break
            # (b) V(j, (x, y1)) = V(j, (x, y2))
            values = exact.values if gamma == 1.0 else absorb(chain, gamma).values
            refs = _group_refs(xgroups)
            dv = np.abs(values - values[refs])
            k = int(np.argmax(dv))
            if dv[k] > VALUE_TOLERANCE:
                record(float(dv[k]), Counterexample(h.states[starts[refs[k]]], h.states[starts[k]],
                                                    h.names[nodes[k]], values[refs[k]], values[k],
                                                    "V(j, s)"))
    return ConditionResult("subtask-irrelevance", subject, found is None, worst, found, len(policies))


# -- leaf irrelevance ----------------------------------------------------


def check_leaf_irrelevance(model: MdpModel, action: str, leaf_relevant_vars: Sequence[str]) -> ConditionResult:
    """Expected one-step reward of ``action`` must be a function of the
    relevant variables, over all non-terminal states."""
    tab = model.tabular
    a = model.action_index(action)
    positions = [model.variable_index(v) for v in leaf_relevant_vars]
    subject = f"{action} X={{{','.join(leaf_relevant_vars)}}}"
    seen: dict[tuple[int, ...], int] = {}
    worst = 0.0
    found = None
    for s, state in enumerate(enumerate_states(model)):
        if tab.terminal[s]:
            continue
        key = tuple(state[p] for p in positions)
        ref = seen.setdefault(key, s)
        diff = abs(tab.expected_rewards[a, s] - tab.expected_rewards[a, ref])
        if diff > REWARD_TOLERANCE and diff > worst:
            worst = diff
            found = Counterexample(model.decode(ref), state, action,
                                   float(tab.expected_rewards[a, ref]), float(tab.expected_rewards[a, s]),
                                   "expected reward")
    return ConditionResult("leaf-irrelevance", subject, found is None, worst, found)


# -- result distribution irrelevance --------------------------------------


def check_result_distribution(model: MdpModel, g: TaskGraph, j: str, y_vars: Sequence[str],
                              policies: Sequence[HierarchicalPolicy],
                              compiled: CompiledHierarchy | None = None,
                              compare_steps: bool = False) -> ConditionResult:
    """States differing only on ``y_vars`` must give ``j`` the same
    termination-state distribution (undiscounted; steps summed out unless
    ``compare_steps``)."""
    h = _compiled(model, g, compiled)
    node = h.index[j]
    subject = f"{j} Y={{{','.join(y_vars)}}}"
    if compare_steps:
        subject += " with N"
    others = tuple(v for v in g.variable_names if v not in y_vars)
    if not y_vars:
        return ConditionResult("result-distribution", subject, True, policies=len(policies), note="Y empty")
    starts = [s for s in range(h.num_states) if not h.term[node][s]]
    if not starts:
        return ConditionResult("result-distribution", subject, True, policies=len(policies), note="never runs")
    groups = np.array([g.variable_spec(others).key(h.states[s]) for s in starts])
    finals = np.arange(h.num_states)
    worst = 0.0
    found = None
    for policy in policies:
        chain = build_chain(h, node, starts, policy)
        if compare_steps:
            hit = _first_separated_gap(chain, starts, groups, finals)
            if hit is None:
                continue
            gap, a, b = hit
            worst = gap.total_variation
            what = f"P(s'=({model.describe(h.states[gap.label])}), N={gap.steps} | s)"
            found = Counterexample(h.states[starts[b]], h.states[starts[a]], j, gap.left, gap.right, what)
            break
        dist = absorb(chain, 1.0).distribution
        tv, a, b, c = _group_tv(dist, groups)
        if tv > DISTRIBUTION_TOLERANCE and tv > worst:
            worst = tv
            what = f"P(s'=({model.describe(h.states[c])}) | s)"
            found = Counterexample(h.states[starts[b]], h.states[starts[a]], j, dist[b, c], dist[a, c], what)
    return ConditionResult("result-distribution", subject, found is None, worst, found, len(policies))


# -- termination -----------------------------------------------------------


def _descendant_actions(g: TaskGraph, node: str) -> list[str]:
    seen: set[str] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        if not g.is_primitive(n):
            stack.extend(g.children_of(n))
    return [a for a in g.actions if a in seen]


def check_termination(g: TaskGraph, model: MdpModel, i: str, j: str,
                      compiled: CompiledHierarchy | None = None, literal: bool = False) -> ConditionResult:
    """Whenever ``j`` terminates while running inside ``i``, ``i`` terminates too.

    Checked over every primitive transition a descendant of ``j`` can make
    from a state where both are running. ``literal`` instead demands
    ``T_j(s) => T_i(s)`` at every state, which is stronger.
    """
    h = _compiled(model, g, compiled)
    ni, nj = h.index[i], h.index[j]
    subject = f"({i}, {j})" + (" literal" if literal else "")
    tab = h.tabular
    if literal:
        for s in range(h.num_states):
            if h.term[nj][s] and not h.term[ni][s]:
                return ConditionResult("termination", subject, False, 1.0,
                                       Counterexample(h.states[s], None, j, 1.0, 0.0, "T_j holds, T_i does not"))
        return ConditionResult("termination", subject, True)
    actions = [model.action_index(a) for a in _descendant_actions(g, j)]
    for s in range(h.num_states):
        if h.term[ni][s] or h.term[nj][s]:
            continue
        for a in actions:
            for cum, ns, _ in tab.outcomes[s][a]:
                if h.term[nj][ns] and not h.term[ni][ns]:
                    return ConditionResult(
                        "termination", subject, False, 1.0,
                        Counterexample(h.states[s], h.states[ns], model.actions[a], 1.0, 0.0,
                                       "j terminated in s2 but i did not"))
    return ConditionResult("termination", subject, True)


# -- shielding -------------------------------------------------------------


@dataclass
class ShieldingResult:
    shielded: frozenset[int]
    result: ConditionResult


def check_shielding(g: TaskGraph, model: MdpModel, i: str,
                    traces: Iterable[tuple[str, tuple[int, ...]]] = (),
                    compiled: CompiledHierarchy | None = None) -> ShieldingResult:
    """Shielded states of ``i``, cross-checked against recorded executions.

    ``traces`` yields ``(node, state)`` pairs for every subtask invocation of
    some run; executing ``i`` in a state computed as shielded is a failure.
    """
    h = _compiled(model, g, compiled)
    node = h.index[i]
    shielded = frozenset(s for s in range(h.num_states) if h.shielded[node][s])
    executed = 0
    for name, state in traces:
        if name != i:
            continue
        executed += 1
        s = model.encode(state)
        if s in shielded:
            cx = Counterexample(state, None, i, 1.0, 0.0, "executed in a shielded state")
            return ShieldingResult(shielded, ConditionResult("shielding", i, False, 1.0, cx,
                                                             note=f"{len(shielded)} shielded"))
    note = f"{len(shielded)} shielded, {executed} executions checked"
    return ShieldingResult(shielded, ConditionResult("shielding", i, True, note=note))


def record_trace(model: MdpModel, g: TaskGraph, steps: int = 20_000, seed: int = 0,
                 compiled: CompiledHierarchy | None = None) -> list[tuple[str, tuple[int, ...]]]:
    """Invocation trace of a short MAXQ-Q learning run."""
    from .learner import MaxqLearner

    h = _compiled(model, g, compiled)
    learner = MaxqLearner(model, g, seed=seed, compiled=h)
    learner.trace = []
    learner.train(steps)
    return [(h.names[n], h.states[s]) for n, s in learner.trace]


# -- value accounting ------------------------------------------------------


@dataclass
class ValueCount:
    mode: str
    total: int
    breakdown: list[tuple[str, int, str]]

    def to_text(self) -> str:
        lines = [f"{self.total}"]
        for label, count, note in self.breakdown:
            lines.append(f"  {label}\t{count}\t{note}")
        return "\n".join(lines) + "\n"


COUNT_MODES = ("flat", "maxq_plain", "maxq_abstracted")


def count_values(g: TaskGraph, model: MdpModel, mode: str,
                 compiled: CompiledHierarchy | None = None) -> ValueCount:
    """Number of stored values each representation needs.

    ``maxq_plain`` counts one value per state for every (parent instance,
    child slot) pair and every primitive. ``maxq_abstracted`` counts
    distinct keys of each completion table over the states where the parent
    is running and unshielded and the child can run, skips eliminated
    edges, and counts distinct leaf keys over states where some running
    parent can invoke the primitive.
    """
    if mode not in COUNT_MODES:
        raise ValueError(f"unknown count mode {mode!r}; expected one of {', '.join(COUNT_MODES)}")
    n = model.num_states
    if mode == "flat":
        total = n * len(model.actions)
        return ValueCount(mode, total, [("Q", total, f"{n} states x {len(model.actions)} actions")])
    if mode == "maxq_plain":
        g = g.plain()
    h = _compiled(model, g, compiled)
    plain = mode == "maxq_plain"
    breakdown = []
    edge_keys: dict[int, set[int]] = {}
    leaf_keys: dict[int, set[int]] = {k: set() for k, p in enumerate(h.is_primitive) if p}
    for k, name in enumerate(h.names):
        if h.is_primitive[k]:
            continue
        for slot in h.slots[k]:
            keys = edge_keys.setdefault(slot.edge, set())
            eliminated = h.edges[slot.edge].eliminated
            for s in range(n):
                c = slot.child[s]
                if plain:
                    keys.add(slot.key[s])
                    continue
                if h.term[k][s] or h.shielded[k][s] or c < 0 or h.term[c][s]:
                    continue
                if h.is_primitive[c]:
                    leaf_keys[c].add(h.leaf_keys[c][s])
                if not eliminated:
                    keys.add(slot.key[s])
    completions = 0
    for eid, info in enumerate(h.edges):
        count = len(edge_keys.get(eid, ()))
        completions += count
        names = ",".join(info.spec.names) or "-"
        note = "eliminated" if info.eliminated and not plain else f"key ({names})"
        breakdown.append((f"C {info.label}", count, note))
    leaves = 0
    for k, name in enumerate(h.names):
        if not h.is_primitive[k]:
            continue
        count = n if plain else len(leaf_keys[k])
        leaves += count
        names = ",".join(h.leaf_specs[k].names) or "-"
        breakdown.append((f"V {name}", count, f"key ({names})"))
    breakdown.append(("completion subtotal", completions, ""))
    breakdown.append(("leaf subtotal", leaves, ""))
    return ValueCount(mode, completions + leaves, breakdown)


# -- full audit ------------------------------------------------------------


def edge_result_checks(g: TaskGraph) -> list[tuple[str, str, tuple[str, ...]]]:
    """(parent, child instance, Y_j) for every edge declaring result variables."""
    out = []
    for (parent, ref), ann in g.edges.items():
        if ann.result_vars is None:
            continue
        y = tuple(v for v in g.subtask(parent).relevant_vars if v not in ann.result_vars)
        for child in g.expand_ref(ref):
            out.append((parent, child, y))
    return out


def run_audit(model: MdpModel, g: TaskGraph, policies: int = RANDOM_POLICIES, seed: int = 0,
              trace_steps: int = 20_000) -> AuditReport:
    """All five checks on every subject the graph declares an abstraction for."""
    h = CompiledHierarchy(g, model)
    pols = audit_policies(h, policies, seed)
    report = AuditReport(model)
    for name in g.subtasks:
        if len(g.subtask(name).relevant_vars) < len(g.variable_names):
            report.results.append(check_subtask_irrelevance(model, g, name, pols, compiled=h))
    for action in g.actions:
        report.results.append(check_leaf_irrelevance(model, action, g.leaf_relevant_vars[action]))
    checked = set()
    for _, child, y in edge_result_checks(g):
        if (child, y) in checked:
            continue
        checked.add((child, y))
        report.results.append(check_result_distribution(model, g, child, y, pols, compiled=h))
    for (parent, ref), ann in g.edges.items():
        if ann.eliminated:
            for child in g.expand_ref(ref):
                report.results.append(check_termination(g, model, parent, child, compiled=h))
    trace = record_trace(model, g, trace_steps, seed, compiled=h)
    for name in g.subtasks:
        report.results.append(check_shielding(g, model, name, trace, compiled=h).result)
    return report
