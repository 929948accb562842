"""The Taxi domain and its MAXQ task hierarchy.

A 5x5 grid with four landmarks. The state is ``(taxi_row, taxi_col,
passenger_loc, destination)`` where ``passenger_loc`` is one of the landmarks
or ``IN_TAXI``. The episode ends once the passenger is put down at the
destination, which leaves ``passenger_loc == destination``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .hierarchy import EdgeAnnotation, SubtaskDef, TaskGraph
from .mdp import MdpModel, StateVector, Transition, VariableSchema

LANDMARKS = ("R", "G", "B", "Y")
IN_TAXI = 4
ROWS = COLS = 5

NORTH, SOUTH, EAST, WEST, PICKUP, PUTDOWN = range(6)
ACTIONS = ("North", "South", "East", "West", "Pickup", "Putdown")
NAVIGATION_ACTIONS = ACTIONS[:4]

STEP_REWARD = -1.0
DELIVERY_BONUS = 20.0
ILLEGAL_REWARD = -10.0

_LANDMARK_CELLS = {"R": (0, 0), "G": (0, 4), "B": (4, 3), "Y": (4, 0)}

# (row, c): wall between column c and column c + 1 in that row
_VERTICAL_WALLS = frozenset({(0, 1), (1, 1), (3, 0), (4, 0), (3, 2), (4, 2)})

_MOVES = {NORTH: (-1, 0), SOUTH: (1, 0), EAST: (0, 1), WEST: (0, -1)}
_PERPENDICULAR = {NORTH: (EAST, WEST), SOUTH: (EAST, WEST), EAST: (NORTH, SOUTH), WEST: (NORTH, SOUTH)}

SCHEMAS = (
    VariableSchema("taxi_row", ROWS),
    VariableSchema("taxi_col", COLS),
    VariableSchema("passenger_loc", 5, LANDMARKS + ("InTaxi",)),
    VariableSchema("destination", 4, LANDMARKS),
)


def landmark_coordinates() -> dict[str, tuple[int, int]]:
    return dict(_LANDMARK_CELLS)


def walls() -> frozenset[tuple[int, int]]:
    """Interior vertical wall segments as ``(row, left_column)`` pairs."""
    return _VERTICAL_WALLS


def move(row: int, col: int, direction: int) -> tuple[int, int]:
    """Cell reached by one navigation move; blocked moves stay put."""
    dr, dc = _MOVES[direction]
    r, c = row + dr, col + dc
    if not (0 <= r < ROWS and 0 <= c < COLS):
        return row, col
    if dc == 1 and (row, col) in _VERTICAL_WALLS:
        return row, col
    if dc == -1 and (row, c) in _VERTICAL_WALLS:
        return row, col
    return r, c


def grid_distances(target: tuple[int, int]) -> dict[tuple[int, int], int]:
    """Breadth-first shortest move counts from every cell to ``target``."""
    dist = {target: 0}
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        for r in range(ROWS):
            for c in range(COLS):
                if (r, c) in dist:
                    continue
                if any(move(r, c, d) == cell for d in _MOVES):
                    dist[(r, c)] = dist[cell] + 1
                    queue.append((r, c))
    return dist


@dataclass(frozen=True)
class TaxiConfig:
    """``noise`` is the probability of slipping sideways on a navigation move."""

    noise: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")


class TaxiModel(MdpModel):
    schemas = SCHEMAS
    actions = ACTIONS

    def __init__(self, config: TaxiConfig = TaxiConfig()) -> None:
        self.config = config

    def __repr__(self) -> str:
        return f"TaxiModel(noise={self.config.noise})"

    def is_terminal(self, state: StateVector) -> bool:
        return state[2] == state[3]

    def start_states(self) -> list[StateVector]:
        return [
            (r, c, p, d)
            for r in range(ROWS)
            for c in range(COLS)
            for p in range(4)
            for d in range(4)
            if p != d
        ]

    def transitions(self, state: StateVector, action: str) -> list[Transition]:
        a = self.action_index(action)
        row, col, passenger, dest = state
        if self.is_terminal(state):
            return [Transition(state, 1.0, 0.0)]
        if a == PICKUP:
            if passenger != IN_TAXI and _LANDMARK_CELLS[LANDMARKS[passenger]] == (row, col):
                return [Transition((row, col, IN_TAXI, dest), 1.0, STEP_REWARD)]
            return [Transition(state, 1.0, ILLEGAL_REWARD)]
        if a == PUTDOWN:
            if passenger == IN_TAXI and _LANDMARK_CELLS[LANDMARKS[dest]] == (row, col):
                return [Transition((row, col, dest, dest), 1.0, STEP_REWARD + DELIVERY_BONUS)]
            return [Transition(state, 1.0, ILLEGAL_REWARD)]
        p = self.config.noise
        side_a, side_b = _PERPENDICULAR[a]
        merged: dict[StateVector, float] = {}
        for direction, prob in ((a, 1.0 - p), (side_a, p / 2), (side_b, p / 2)):
            if prob <= 0.0:
                continue
            r, c = move(row, col, direction)
            ns = (r, c, passenger, dest)
            merged[ns] = merged.get(ns, 0.0) + prob
        return [Transition(ns, prob, STEP_REWARD) for ns, prob in merged.items()]


def taxi_model(config: TaxiConfig = TaxiConfig()) -> TaxiModel:
    return TaxiModel(config)


def _navigate_done(target: int):
    cell = _LANDMARK_CELLS[LANDMARKS[target]]

    def terminated(state: StateVector) -> bool:
        return (state[0], state[1]) == cell

    return terminated


def _get_done(state: StateVector) -> bool:
    return state[2] == IN_TAXI


def _put_done(state: StateVector) -> bool:
    return state[2] != IN_TAXI


def _root_done(state: StateVector) -> bool:
    return False


def _episode_over(state: StateVector) -> bool:
    return state[2] == state[3]


def taxi_termination_predicates() -> dict[str, object]:
    predicates = {"Root": _root_done, "Get": _get_done, "Put": _put_done}
    for t, name in enumerate(LANDMARKS):
        predicates[f"Navigate({name})"] = _navigate_done(t)
    return predicates


def taxi_task_graph() -> TaskGraph:
    """Root -> {Get, Put}; Get -> {Navigate(source), Pickup};
    Put -> {Navigate(destination), Putdown}; Navigate(t) -> compass moves.

    Navigate's four bound instances share the ``Navigate`` table, keyed by the
    taxi cell and the target. ``Navigate[passenger_loc]`` names the instance
    whose target equals the current value of ``passenger_loc``.
    """
    predicates = taxi_termination_predicates()
    subtasks = [
        SubtaskDef("Root", ("Get", "Put"), predicates["Root"],
                   ("taxi_row", "taxi_col", "passenger_loc", "destination")),
        SubtaskDef("Get", ("Navigate[passenger_loc]", "Pickup"), predicates["Get"],
                   ("taxi_row", "taxi_col", "passenger_loc")),
        SubtaskDef("Put", ("Navigate[destination]", "Putdown"), predicates["Put"],
                   ("taxi_row", "taxi_col", "passenger_loc", "destination")),
    ]
    for t, name in enumerate(LANDMARKS):
        subtasks.append(
            SubtaskDef(f"Navigate({name})", NAVIGATION_ACTIONS, predicates[f"Navigate({name})"],
                       ("taxi_row", "taxi_col"), table="Navigate", binding=("t", t))
        )
    edges = {
        ("Root", "Put"): EdgeAnnotation(eliminated=True),
        ("Root", "Get"): EdgeAnnotation(result_vars=("passenger_loc", "destination")),
        ("Get", "Navigate[passenger_loc]"): EdgeAnnotation(result_vars=("passenger_loc",)),
        ("Put", "Navigate[destination]"): EdgeAnnotation(result_vars=("passenger_loc", "destination")),
    }
    leaves = {a: () for a in NAVIGATION_ACTIONS}
    leaves["Pickup"] = ("taxi_row", "taxi_col", "passenger_loc")
    leaves["Putdown"] = ("taxi_row", "taxi_col", "passenger_loc", "destination")
    return TaskGraph(
        SCHEMAS, ACTIONS, subtasks, root="Root", edges=edges,
        leaf_relevant_vars=leaves, episode_terminal=_episode_over,
    )
