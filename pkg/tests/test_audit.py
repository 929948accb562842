import numpy as np
import pytest

from maxq.audit import (
    CONDITIONS,
    ConditionResult,
    audit_policies,
    check_leaf_irrelevance,
    check_result_distribution,
    check_shielding,
    check_subtask_irrelevance,
    check_termination,
    count_values,
    random_abstract_policy,
    record_trace,
    run_audit,
)
from maxq.chain import absorb, build_chain
from maxq.compiled import CompiledHierarchy
from maxq.hierarchy import SubtaskDef, TaskGraph
from maxq.mdp import MdpModel, Transition, VariableSchema
from maxq.oracle import hierarchical_dp_oracle
from maxq.taxi import IN_TAXI, TaxiConfig, taxi_model, taxi_task_graph

ALL_VARS = ("taxi_row", "taxi_col", "passenger_loc", "destination")


class Ring(MdpModel):
    """A walker on a ring of four cells that stops at cell 0; ``tag`` never changes."""

    schemas = (VariableSchema("pos", 4), VariableSchema("tag", 2))
    actions = ("cw", "ccw")

    def transitions(self, state, action):
        pos, tag = state
        if pos == 0:
            return [Transition(state, 1.0, 0.0)]
        step = 1 if action == "cw" else -1
        return [Transition(((pos + step) % 4, tag), 0.7, -1.0), Transition((pos, tag), 0.3, -1.0)]

    def is_terminal(self, state):
        return state[0] == 0

    def start_states(self):
        return [(p, t) for p in (1, 2, 3) for t in (0, 1)]


def ring_graph(relevant=("pos",)):
    subs = [SubtaskDef("Root", ("cw", "ccw"), lambda s: s[0] == 0, relevant)]
    return TaskGraph(Ring.schemas, Ring.actions, subs, root="Root", episode_terminal=lambda s: s[0] == 0)


@pytest.fixture(scope="module", params=[0.0, 0.2], ids=["deterministic", "noisy"])
def taxi(request):
    model = taxi_model(TaxiConfig(request.param))
    graph = taxi_task_graph()
    h = CompiledHierarchy(graph, model)
    policies = audit_policies(h, 5, seed=0)
    return model, graph, h, policies


@pytest.fixture(scope="module")
def deterministic():
    model = taxi_model()
    graph = taxi_task_graph()
    h = CompiledHierarchy(graph, model)
    return model, graph, h, audit_policies(h, 5, seed=0)


# -- positives -------------------------------------------------------------

@pytest.mark.parametrize("subtask", ["Get", "Put", "Navigate(R)", "Navigate(Y)"])
def test_subtask_irrelevance_holds(taxi, subtask):
    model, graph, h, policies = taxi
    result = check_subtask_irrelevance(model, graph, subtask, policies, compiled=h)
    assert result.passed, result.counterexample
    assert result.policies == len(policies)


def test_leaf_irrelevance_holds(taxi):
    model, graph, _, _ = taxi
    for action in graph.actions:
        assert check_leaf_irrelevance(model, action, graph.leaf_relevant_vars[action]).passed


@pytest.mark.parametrize("child,y", [("Get", ("taxi_row", "taxi_col")),
                                     ("Navigate(B)", ("taxi_row", "taxi_col")),
                                     ("Navigate(G)", ("taxi_row", "taxi_col"))])
def test_result_distribution_holds(taxi, child, y):
    model, graph, h, policies = taxi
    assert check_result_distribution(model, graph, child, y, policies, compiled=h).passed


def test_termination_holds(taxi):
    model, graph, h, _ = taxi
    assert check_termination(graph, model, "Root", "Put", compiled=h).passed
    # identical predicates pass trivially
    assert check_termination(graph, model, "Put", "Put", compiled=h, literal=True).passed


def test_shielding_holds(deterministic):
    model, graph, h, _ = deterministic
    trace = record_trace(model, graph, 10_000, seed=2, compiled=h)
    put = check_shielding(graph, model, "Put", trace, compiled=h)
    assert put.result.passed and len(put.shielded) == 400
    assert all(h.states[s][2] != IN_TAXI for s in put.shielded)
    root = check_shielding(graph, model, "Root", trace, compiled=h)
    assert root.result.passed and not root.shielded


def test_oracle_policy_is_audited_too(deterministic):
    model, graph, h, _ = deterministic
    oracle = hierarchical_dp_oracle(model, graph, compiled=h).policy_fn()
    result = check_subtask_irrelevance(model, graph, "Get", [oracle], compiled=h)
    assert result.passed


def test_full_audit_passes():
    model = taxi_model()
    report = run_audit(model, taxi_task_graph(), policies=3, trace_steps=5_000)
    assert report.passed
    lines = report.summary_lines()
    assert [line.split()[1].rstrip(":") for line in lines] == list(CONDITIONS)
    assert all(line.startswith("PASS") for line in lines)
    machine = report.to_lines().splitlines()
    assert len(machine) == len(report.results)
    assert len({(r.condition, r.subject) for r in report.results}) == len(report.results)


# -- negatives ---------------------------------------------------------------

def test_navigation_needs_both_coordinates(deterministic):
    model, graph, h, policies = deterministic
    bad = graph.with_changes(relevant={n: ("taxi_col",) for n in graph.table_instances("Navigate")})
    result = check_subtask_irrelevance(model, bad, "Navigate(R)", policies)
    assert not result.passed
    cx = result.counterexample
    assert cx.s1[1] == cx.s2[1] and cx.s1[0] != cx.s2[0]
    assert "s1=" in cx.describe(model)


def test_pickup_reward_depends_on_position():
    model = taxi_model()
    result = check_leaf_irrelevance(model, "Pickup", ())
    assert not result.passed
    assert {result.counterexample.left, result.counterexample.right} == {-1.0, -10.0}


def test_navigation_result_depends_on_passenger(deterministic):
    model, graph, h, policies = deterministic
    result = check_result_distribution(model, graph, "Navigate(R)", ("passenger_loc",), policies, compiled=h)
    assert not result.passed and result.discrepancy == pytest.approx(1.0)


def test_result_distribution_with_steps_is_stronger(deterministic):
    model, graph, h, policies = deterministic
    y = ("taxi_row", "taxi_col")
    assert check_result_distribution(model, graph, "Get", y, policies[:2], compiled=h).passed
    with_steps = check_result_distribution(model, graph, "Get", y, policies[:2], compiled=h, compare_steps=True)
    assert not with_steps.passed
    assert "N=" in with_steps.counterexample.what


def test_termination_fails_for_get():
    model = taxi_model()
    graph = taxi_task_graph()
    result = check_termination(graph, model, "Root", "Get")
    assert not result.passed
    s2 = result.counterexample.s2
    assert s2[2] == IN_TAXI


def test_literal_termination_reading_is_stronger():
    model = taxi_model()
    graph = taxi_task_graph()
    result = check_termination(graph, model, "Root", "Put", literal=True)
    assert not result.passed
    assert result.counterexample.s1[2] != IN_TAXI


def test_shielding_against_a_wrong_root_predicate(deterministic):
    model, graph, h, _ = deterministic
    trace = record_trace(model, graph, 10_000, seed=2, compiled=h)
    bad = graph.with_changes(terminations={"Root": lambda s: s[0] == 0})
    result = check_shielding(bad, model, "Get", trace).result
    assert not result.passed
    assert result.counterexample.s1[0] == 0


def test_failed_results_need_counterexamples():
    with pytest.raises(ValueError):
        ConditionResult("termination", "x", False)


# -- the Y = everything identity ------------------------------------------------

def termination_is_state_independent(model, graph, node, policy):
    h = CompiledHierarchy(graph, model)
    k = h.index[node]
    starts = [s for s in range(h.num_states) if not h.term[k][s]]
    dist = absorb(build_chain(h, k, starts, policy), 1.0).distribution.toarray()
    return bool(np.max(np.abs(dist - dist[0])) <= 1e-9)


def test_all_variables_irrelevant_means_fixed_result():
    ring = Ring()
    graph = ring_graph()
    h = CompiledHierarchy(graph, ring)
    # the tag survives termination, so the result does depend on the start
    for policy in audit_policies(h, 3, seed=1):
        fixed = termination_is_state_independent(ring, graph, "Root", policy)
        assert not fixed
        assert check_result_distribution(ring, graph, "Root", ("pos", "tag"), [policy], compiled=h).passed == fixed
        assert check_result_distribution(ring, graph, "Root", ("pos",), [policy], compiled=h).passed


def test_all_variables_identity_on_taxi(deterministic):
    model, graph, h, policies = deterministic
    policy = policies[0]
    for node in ("Navigate(R)", "Get"):
        got = check_result_distribution(model, graph, node, ALL_VARS, [policy], compiled=h).passed
        assert got == termination_is_state_independent(model, graph, node, policy)


def test_random_policies_are_seeded(deterministic):
    _, _, h, _ = deterministic
    a = random_abstract_policy(h, 4)
    b = random_abstract_policy(h, 4)
    c = random_abstract_policy(h, 5)
    node = h.index["Navigate(R)"]
    assert a(node, 7) == b(node, 7)
    assert a(node, 7) != c(node, 7)
    assert sum(p for _, p in a(node, 7)) == pytest.approx(1.0)
    assert min(p for _, p in a(node, 7)) >= 0.2 / 4 - 1e-12


# -- value accounting -----------------------------------------------------------------

@pytest.mark.parametrize("noise", [0.0, 0.2])
def test_counts(noise):
    model = taxi_model(TaxiConfig(noise))
    graph = taxi_task_graph()
    assert count_values(graph, model, "flat").total == 3000
    assert count_values(graph, model, "maxq_plain").total == 14000
    abstracted = count_values(graph, model, "maxq_abstracted")
    items = {label: n for label, n, _ in abstracted.breakdown}
    assert items["C Root->Put"] == 0
    assert items["C Root->Get"] == 12
    assert items["V North"] == 1
    assert items["C Navigate->North"] == 96
    assert items["completion subtotal"] + items["leaf subtotal"] == abstracted.total
    assert abstracted.total < count_values(graph, model, "maxq_plain").total


def test_flat_count_is_states_times_actions():
    assert count_values(ring_graph(), Ring(), "flat").total == 8 * 2


def test_unknown_count_mode():
    with pytest.raises(ValueError):
        count_values(taxi_task_graph(), taxi_model(), "compressed")
