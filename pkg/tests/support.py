"""Shared helpers for the test modules."""

from maxq.compiled import CompiledHierarchy
from maxq.learner import ExplorationSchedule, LearningSchedule, MaxqLearner, StepSizeRule
from maxq.taxi import IN_TAXI

# relabels the four landmarks; InTaxi stays put so passenger == destination is preserved
LANDMARK_PERMUTATION = (2, 3, 1, 0)


def scramble_landmarks(name, state):
    """The state Navigate sees when landmark labels are permuted."""
    if not name.startswith("Navigate"):
        return state
    row, col, passenger, dest = state
    p = passenger if passenger == IN_TAXI else LANDMARK_PERMUTATION[passenger]
    return (row, col, p, LANDMARK_PERMUTATION[dest])


def make_learner(model, graph, seed=0, alpha=StepSizeRule("harmonic", 10.0), cooling=0.99):
    return MaxqLearner(model, graph, LearningSchedule(alpha), ExplorationSchedule(10.0, cooling, 0.05),
                       seed=seed)


def table_of(learner, table):
    """Completion entries of one shared table, as a sorted list of lines."""
    return sorted(line for line in learner.snapshot().splitlines() if line.startswith(table + "\t"))


def elimination_violations(learner: MaxqLearner, trace=None) -> list[str]:
    """Stored completion entries that the abstraction says must not exist.

    An entry is legitimate only if some state projects onto its key while the
    parent is running, not shielded, and the child is executable. Eliminated
    edges must be empty. ``trace`` invocations must never hit shielded nodes.
    """
    h: CompiledHierarchy = learner.h
    live: list[set[int]] = [set() for _ in h.edges]
    for node, slots in enumerate(h.slots):
        for s in range(h.num_states):
            if h.term[node][s] or h.shielded[node][s]:
                continue
            for pos, _child in h.available(node, s):
                slot = slots[pos]
                live[slot.edge].add(slot.key[s])
    problems = []
    for eid, table in enumerate(learner.C):
        info = h.edges[eid]
        if info.eliminated and table:
            problems.append(f"{info.label}: {len(table)} entries on an eliminated edge")
        for key in table:
            if key not in live[eid]:
                problems.append(f"{info.label}: entry {h.describe_key(info.spec, key)} has no live state")
    for node, s in trace or ():
        if h.shielded[node][s]:
            problems.append(f"{h.names[node]} invoked in shielded state {h.states[s]}")
    return problems
