import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from maxq.hierarchy import validate_dag
from maxq.mdp import enumerate_states, sample_step
from maxq.taxi import (
    COLS,
    EAST,
    IN_TAXI,
    LANDMARKS,
    ROWS,
    TaxiConfig,
    WEST,
    grid_distances,
    landmark_coordinates,
    move,
    taxi_model,
    taxi_task_graph,
)

cells = st.tuples(st.integers(0, ROWS - 1), st.integers(0, COLS - 1))


def test_state_space():
    model = taxi_model()
    assert model.num_states == 500
    assert model.variable_names == ("taxi_row", "taxi_col", "passenger_loc", "destination")
    assert all(s[3] < 4 for s in enumerate_states(model))
    starts = model.start_states()
    assert len(starts) == 25 * 12
    assert all(s[2] != IN_TAXI and s[2] != s[3] for s in starts)


def test_delivery_reward():
    model = taxi_model()
    r, c = landmark_coordinates()["B"]
    (t,) = model.transitions((r, c, IN_TAXI, LANDMARKS.index("B")), "Putdown")
    assert t.reward == 19.0
    assert model.is_terminal(t.next_state)


def test_illegal_actions():
    model = taxi_model()
    state = (2, 2, 0, 1)
    for action in ("Pickup", "Putdown"):
        (t,) = model.transitions(state, action)
        assert t.reward == -10.0 and t.next_state == state
    # putdown at a landmark other than the destination is illegal too
    r, c = landmark_coordinates()["R"]
    (t,) = model.transitions((r, c, IN_TAXI, 1), "Putdown")
    assert t.reward == -10.0


def test_pickup():
    model = taxi_model()
    r, c = landmark_coordinates()["G"]
    (t,) = model.transitions((r, c, 1, 3), "Pickup")
    assert t.next_state == (r, c, IN_TAXI, 3) and t.reward == -1.0


def test_north_at_top_row_is_noop():
    model = taxi_model()
    (t,) = model.transitions((0, 3, 0, 1), "North")
    assert t.next_state == (0, 3, 0, 1) and t.reward == -1.0


def test_walls_block_moves():
    assert move(0, 1, EAST) == (0, 1)
    assert move(0, 2, WEST) == (0, 2)
    assert move(2, 1, EAST) == (2, 2)
    assert move(4, 0, WEST) == (4, 0)


def test_landmarks():
    coords = landmark_coordinates()
    assert set(coords) == set(LANDMARKS)
    assert len(set(coords.values())) == 4
    assert all(0 <= r < ROWS and 0 <= c < COLS for r, c in coords.values())


def test_bfs_distance_r_to_g():
    coords = landmark_coordinates()
    assert grid_distances(coords["G"])[coords["R"]] == 8


def test_every_cell_reaches_every_landmark():
    for cell in landmark_coordinates().values():
        assert len(grid_distances(cell)) == ROWS * COLS


@given(cells, st.sampled_from(range(4)))
def test_moves_stay_on_grid_and_are_adjacent(cell, direction):
    r, c = move(*cell, direction)
    assert 0 <= r < ROWS and 0 <= c < COLS
    assert abs(r - cell[0]) + abs(c - cell[1]) <= 1


def test_zero_noise_equals_deterministic():
    a = taxi_model()
    b = taxi_model(TaxiConfig(0.0))
    for s in enumerate_states(a):
        for act in a.actions:
            assert a.transitions(s, act) == b.transitions(s, act)


def test_noisy_slip_probabilities():
    model = taxi_model(TaxiConfig(0.2))
    dist = {t.next_state: t.probability for t in model.transitions((2, 2, 0, 1), "North")}
    assert dist == {(1, 2, 0, 1): pytest.approx(0.8), (2, 3, 0, 1): pytest.approx(0.1),
                    (2, 1, 0, 1): pytest.approx(0.1)}
    # slips into walls stay put and merge with the intended outcome if equal
    dist = {t.next_state: t.probability for t in model.transitions((0, 1, 0, 1), "South")}
    assert dist[(0, 1, 0, 1)] == pytest.approx(0.1)


def test_noise_bounds():
    with pytest.raises(ValueError):
        TaxiConfig(-0.1)
    with pytest.raises(ValueError):
        TaxiConfig(1.5)


def test_terminal_states_absorb():
    model = taxi_model(TaxiConfig(0.2))
    state = (1, 1, 2, 2)
    assert model.is_terminal(state)
    rng = random.Random(0)
    for a in model.actions:
        out = sample_step(model, state, a, rng)
        assert out.next_state == state and out.reward == 0.0 and out.terminal_episode


def test_task_graph():
    g = taxi_task_graph()
    assert validate_dag(g) == []
    assert len(g.table_instances("Navigate")) == 4
    assert g.children_of("Get") == ["Navigate(R)", "Navigate(G)", "Navigate(B)", "Navigate(Y)", "Pickup"]
