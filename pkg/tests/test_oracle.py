import numpy as np
import pytest

from maxq.mdp import MdpModel, Transition, VariableSchema, enumerate_states
from maxq.oracle import flat_value_iteration, hierarchical_dp_oracle
from maxq.taxi import LANDMARKS, NAVIGATION_ACTIONS, TaxiConfig, grid_distances, landmark_coordinates
from maxq.taxi import taxi_model, taxi_task_graph


class Bandit(MdpModel):
    """One decision, then the episode ends."""

    schemas = (VariableSchema("done", 2),)
    actions = ("a", "b", "c")
    rewards = {"a": 1.0, "b": 3.0, "c": -2.0}

    def transitions(self, state, action):
        if state[0]:
            return [Transition(state, 1.0, 0.0)]
        return [Transition((1,), 1.0, self.rewards[action])]

    def is_terminal(self, state):
        return state[0] == 1

    def start_states(self):
        return [(0,)]


@pytest.fixture(scope="module", params=[0.0, 0.2])
def solved(request):
    model = taxi_model(TaxiConfig(request.param))
    graph = taxi_task_graph()
    return model, graph, flat_value_iteration(model), hierarchical_dp_oracle(model, graph)


def test_single_step_value_is_best_reward():
    sol = flat_value_iteration(Bandit())
    assert sol.values[0] == 3.0 and sol.values[1] == 0.0
    assert sol.policy[0] == 1


def test_flat_solution(solved):
    model, _, flat, _ = solved
    assert flat.residual <= 1e-10
    terminal = np.array(model.tabular.terminal)
    assert np.all(flat.values[terminal] == 0.0)


def test_mean_start_values():
    assert flat_value_iteration(taxi_model()).mean_start_value(taxi_model()) == pytest.approx(6.93, abs=1e-12)
    noisy = taxi_model(TaxiConfig(0.2))
    assert flat_value_iteration(noisy).mean_start_value(noisy) == pytest.approx(2.9546, abs=1e-4)


def test_hierarchical_equals_flat(solved):
    _, _, flat, hier = solved
    assert np.max(np.abs(hier.root_values - flat.values)) <= 1e-6


def test_navigate_values_are_bfs_distances():
    model = taxi_model()
    hier = hierarchical_dp_oracle(model, taxi_task_graph())
    coords = landmark_coordinates()
    for t in LANDMARKS:
        dist = grid_distances(coords[t])
        values = hier.values[f"Navigate({t})"]
        for s, state in enumerate(enumerate_states(model)):
            if model.is_terminal(state):
                continue
            assert values[s] == pytest.approx(-dist[state[:2]], abs=1e-9)


def test_tie_breaking_prefers_declared_order():
    model = taxi_model()
    hier = hierarchical_dp_oracle(model, taxi_task_graph())
    # from the centre both North and West reach R in four moves; North is declared first
    s = model.encode((1, 1, 0, 1))
    assert hier.policy["Navigate(R)"][s] == NAVIGATION_ACTIONS.index("North")


@pytest.mark.parametrize("noise", [0.0, 0.2])
def test_crippled_hierarchy_is_worse_somewhere(noise):
    model = taxi_model(TaxiConfig(noise))
    g = taxi_task_graph()
    no_west = ("North", "South", "East")
    crippled = g.with_changes(children={n: no_west for n in g.table_instances("Navigate")})
    flat = flat_value_iteration(model)
    hier = hierarchical_dp_oracle(model, crippled)
    live = ~np.array(model.tabular.terminal)
    gap = flat.values[live] - hier.root_values[live]
    assert np.all(gap >= -1e-9)
    assert np.any(gap > 1e-6)


def test_discounted_oracles_agree():
    model = taxi_model(TaxiConfig(0.2))
    graph = taxi_task_graph()
    flat = flat_value_iteration(model, 0.95)
    hier = hierarchical_dp_oracle(model, graph, 0.95)
    # recursive optimality can only lose value under discounting
    assert np.all(hier.root_values <= flat.values + 1e-9)
    assert flat.residual <= 1e-10
