"""Integer-indexed view of a task graph over an enumerable model.

Every predicate, resolution and projection the learner and the oracles need
is evaluated once per state through the :class:`TaskGraph` API and stored in
flat lists, so the hot loops never touch state tuples.
"""

from __future__ import annotations

from dataclasses import dataclass

from .hierarchy import TaskGraph, _KeySpec, validate_dag
from .mdp import MdpModel, enumerate_states


@dataclass(frozen=True)
class EdgeInfo:
    table: str
    ref: str
    position: int
    spec: _KeySpec
    eliminated: bool

    @property
    def label(self) -> str:
        return f"{self.table}->{self.ref}"


@dataclass(frozen=True)
class Slot:
    edge: int
    ref: str
    child: list[int]  # node index per state, -1 when the reference does not resolve
    key: list[int]


class CompiledHierarchy:
    def __init__(self, graph: TaskGraph, model: MdpModel) -> None:
        problems = validate_dag(graph)
        if problems:
            raise ValueError("invalid task graph: " + "; ".join(p.message for p in problems))
        if tuple(graph.actions) != tuple(model.actions):
            raise ValueError("graph and model disagree on primitive actions")
        self.graph = graph
        self.model = model
        self.tabular = model.tabular
        states = enumerate_states(model)
        self.states = states
        n = len(states)
        self.num_states = n
        self.names: list[str] = list(graph.subtasks) + list(graph.actions)
        self.index = {name: k for k, name in enumerate(self.names)}
        self.root = self.index[graph.root]
        self.is_primitive = [graph.is_primitive(name) for name in self.names]
        self.action_of = [model.action_index(name) if prim else -1 for name, prim in zip(self.names, self.is_primitive)]

        self.term = [[graph.is_terminated(name, s) for s in states] for name in self.names]
        self.shielded = [[graph.is_shielded(name, s) for s in states] for name in self.names]

        self.edges: list[EdgeInfo] = []
        edge_ids: dict[tuple[str, int], int] = {}
        self.slots: list[list[Slot]] = []
        for name in self.names:
            if graph.is_primitive(name):
                self.slots.append([])
                continue
            sub = graph.subtasks[name]
            slots = []
            for pos, ref in enumerate(sub.children):
                eid = edge_ids.get((sub.table, pos))
                if eid is None:
                    eid = len(self.edges)
                    edge_ids[(sub.table, pos)] = eid
                    ann = graph.edge_annotation(name, ref)
                    self.edges.append(EdgeInfo(sub.table, ref, pos, graph.edge_key_spec(name, ref), ann.eliminated))
                spec = graph.edge_key_spec(name, ref)
                child = []
                for s in states:
                    target = graph.resolve(name, ref, s)
                    child.append(-1 if target is None else self.index[target])
                slots.append(Slot(eid, ref, child, [spec.key(s) for s in states]))
            self.slots.append(slots)

        self.leaf_keys: list[list[int]] = []
        self.leaf_specs: list[_KeySpec | None] = []
        for name, prim in zip(self.names, self.is_primitive):
            if prim:
                spec = graph.leaf_key_spec(name)
                self.leaf_specs.append(spec)
                self.leaf_keys.append([spec.key(s) for s in states])
            else:
                self.leaf_specs.append(None)
                self.leaf_keys.append([])

        order = graph.topological_order()
        self.top_down = [self.index[name] for name in order]

    def available(self, node: int, s: int) -> list[tuple[int, int]]:
        """(slot position, child node) pairs executable from ``node`` in state ``s``.

        Within a running parent a non-terminated child is never shielded, so
        termination is the only filter needed.
        """
        out = []
        for pos, slot in enumerate(self.slots[node]):
            c = slot.child[s]
            if c >= 0 and not self.term[c][s]:
                out.append((pos, c))
        return out

    def describe_key(self, spec: _KeySpec, key: int) -> str:
        if not spec.names:
            return "-"
        values = spec.decode(key)
        parts = []
        for name, value in zip(spec.names, values):
            if name in self.graph._var_pos:
                schema = self.graph.schemas[self.graph._var_pos[name]]
                parts.append(f"{name}={schema.label(value)}")
            else:
                parts.append(f"{name}={value}")
        return ",".join(parts)
