"""MAXQ task graphs: subtasks, child references and abstraction annotations.

A child reference is either the id of a subtask or primitive action, or a
parametric reference ``Table[variable]`` that names the instance of a bound
subtask family whose binding equals the current value of ``variable``. Taxi's
``Navigate[passenger_loc]`` is the canonical example.

Abstraction annotations are declarations; :mod:`maxq.audit` checks them.
"""

from __future__ import annotations

import graphlib
import math
import re
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

from .mdp import StateVector, VariableSchema

Predicate = Callable[[StateVector], bool]

_PARAM_REF = re.compile(r"^(\w+)\[(\w+)\]$")


class InvalidSubtask(KeyError):
    pass


@dataclass(frozen=True)
class SubtaskDef:
    """One subtask M_i.

    ``children`` fixes the tie-breaking order. ``relevant_vars`` is the set X
    the subtask's completion table is keyed by. Instances of a parameterised
    subtask share ``table`` and differ in ``binding``, a ``(name, value)``
    pair folded into every key of that table.
    """

    id: str
    children: tuple[str, ...]
    termination: Predicate
    relevant_vars: tuple[str, ...]
    table: str = ""
    binding: tuple[str, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "relevant_vars", tuple(self.relevant_vars))
        if not self.table:
            object.__setattr__(self, "table", self.id)


@dataclass(frozen=True)
class EdgeAnnotation:
    """Per (parent, child) abstraction flags.

    ``eliminated``: the child always terminates the parent, so the completion
    value is identically zero and never stored. ``result_vars``: the subset of
    the parent's variables that still determine the completion value after
    the child returns (the rest are irrelevant to the child's result
    distribution).
    """

    eliminated: bool = False
    result_vars: tuple[str, ...] | None = None


class AbstractState(NamedTuple):
    variables: tuple[str, ...]
    key: int


class Violation(NamedTuple):
    kind: str
    subjects: tuple[str, ...]
    message: str


@dataclass(frozen=True)
class _KeySpec:
    positions: tuple[int, ...]
    radices: tuple[int, ...]
    binding: int | None
    binding_radix: int
    names: tuple[str, ...]

    @property
    def size(self) -> int:
        return math.prod(self.radices) * self.binding_radix

    def key(self, state: StateVector) -> int:
        k = 0
        for pos, radix in zip(self.positions, self.radices):
            k = k * radix + state[pos]
        if self.binding is not None:
            k = k * self.binding_radix + self.binding
        return k

    def decode(self, key: int) -> tuple[int, ...]:
        values = []
        if self.binding is not None:
            values.append(key % self.binding_radix)
            key //= self.binding_radix
        for radix in reversed(self.radices):
            values.append(key % radix)
            key //= radix
        return tuple(reversed(values))


class TaskGraph:
    """A MAXQ hierarchy over a fixed set of state variables and actions.

    Construction never fails on structural problems; call :func:`validate_dag`
    to list them. Every subtask is also considered terminated in states where
    ``episode_terminal`` holds, so recursion unwinds when an episode ends.
    """

    def __init__(
        self,
        schemas: Sequence[VariableSchema],
        actions: Sequence[str],
        subtasks: Iterable[SubtaskDef],
        root: str,
        edges: Mapping[tuple[str, str], EdgeAnnotation] | None = None,
        leaf_relevant_vars: Mapping[str, Sequence[str]] | None = None,
        episode_terminal: Predicate | None = None,
    ) -> None:
        self.schemas = tuple(schemas)
        self.actions = tuple(actions)
        self.subtasks: dict[str, SubtaskDef] = {}
        for sub in subtasks:
            self.subtasks[sub.id] = sub
        self.root = root
        self.edges = dict(edges or {})
        all_vars = tuple(s.name for s in self.schemas)
        self.leaf_relevant_vars = {a: all_vars for a in self.actions}
        for a, names in (leaf_relevant_vars or {}).items():
            self.leaf_relevant_vars[a] = tuple(names)
        self.episode_terminal = episode_terminal or (lambda state: False)
        self._var_pos = {s.name: k for k, s in enumerate(self.schemas)}
        self._tables: dict[str, list[str]] = {}
        for sub in self.subtasks.values():
            self._tables.setdefault(sub.table, []).append(sub.id)
        self._parents: dict[str, list[tuple[str, str]]] = {}
        for sub in self.subtasks.values():
            for ref in sub.children:
                for child in self.expand_ref(ref):
                    self._parents.setdefault(child, []).append((sub.id, ref))
        self._key_cache: dict[tuple, _KeySpec] = {}

    # -- structure -------------------------------------------------------

    @property
    def variable_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.schemas)

    @property
    def nodes(self) -> list[str]:
        return list(self.subtasks) + list(self.actions)

    def is_primitive(self, node: str) -> bool:
        return node in self.actions and node not in self.subtasks

    def subtask(self, node: str) -> SubtaskDef:
        try:
            return self.subtasks[node]
        except KeyError:
            raise InvalidSubtask(node) from None

    def _check_node(self, node: str) -> None:
        if node not in self.subtasks and node not in self.actions:
            raise InvalidSubtask(node)

    def table_instances(self, table: str) -> list[str]:
        return list(self._tables.get(table, []))

    def expand_ref(self, ref: str) -> list[str]:
        """All nodes a child reference may resolve to."""
        m = _PARAM_REF.match(ref)
        if m:
            return sorted(self._tables.get(m.group(1), []), key=lambda i: self.subtasks[i].binding[1])
        return [ref]

    def children_of(self, node: str) -> list[str]:
        seen: list[str] = []
        for ref in self.subtask(node).children:
            for child in self.expand_ref(ref):
                if child not in seen:
                    seen.append(child)
        return seen

    def parents_of(self, node: str) -> list[tuple[str, str]]:
        return list(self._parents.get(node, []))

    def resolve(self, parent: str, ref: str, state: StateVector) -> str | None:
        """The node ``ref`` denotes in ``state``; None if nothing matches."""
        m = _PARAM_REF.match(ref)
        if not m:
            return ref
        value = state[self._var_pos[m.group(2)]]
        for inst in self._tables.get(m.group(1), []):
            if self.subtasks[inst].binding[1] == value:
                return inst
        return None

    def topological_order(self) -> list[str]:
        """Subtasks and primitives, every parent before its children."""
        sorter = graphlib.TopologicalSorter()
        for node in self.nodes:
            sorter.add(node)
        for sub in self.subtasks.values():
            for child in self.children_of(sub.id):
                sorter.add(child, sub.id)
        return list(sorter.static_order())

    # -- predicates ------------------------------------------------------

    def is_terminated(self, node: str, state: StateVector) -> bool:
        self._check_node(node)
        if self.is_primitive(node):
            return False
        return self.episode_terminal(state) or bool(self.subtasks[node].termination(state))

    def is_shielded(self, node: str, state: StateVector) -> bool:
        """True iff every root-to-node path in ``state`` crosses a terminated subtask.

        The node itself counts as on the path; the root is never shielded.
        Parametric edges only form a path when they resolve to the next node.
        """
        self._check_node(node)
        if node == self.root:
            return False
        return not self._live(node, state, {})

    def _live(self, node: str, state: StateVector, memo: dict[str, bool]) -> bool:
        if node in memo:
            return memo[node]
        memo[node] = False
        if node == self.root:
            alive = not self.is_terminated(node, state)
        elif self.is_terminated(node, state):
            alive = False
        else:
            alive = any(
                self.resolve(parent, ref, state) == node and self._live(parent, state, memo)
                for parent, ref in self._parents.get(node, [])
            )
        memo[node] = alive
        return alive

    # -- projection ------------------------------------------------------

    def _spec(self, names: tuple[str, ...], table: str | None, binding: tuple[str, int] | None) -> _KeySpec:
        cache_key = (names, table, binding)
        spec = self._key_cache.get(cache_key)
        if spec is None:
            positions = tuple(self._var_pos[n] for n in names)
            radices = tuple(self.schemas[p].domain_size for p in positions)
            radix = 1
            full_names = names
            if binding is not None:
                radix = 1 + max(self.subtasks[i].binding[1] for i in self._tables[table])
                full_names = names + (binding[0],)
            spec = _KeySpec(positions, radices, None if binding is None else binding[1], radix, full_names)
            self._key_cache[cache_key] = spec
        return spec

    def variable_spec(self, names: Sequence[str]) -> _KeySpec:
        """Key over an arbitrary subset of variables, in the given order."""
        for n in names:
            if n not in self._var_pos:
                raise KeyError(f"unknown variable {n!r}")
        return self._spec(tuple(names), None, None)

    def key_spec(self, node: str) -> _KeySpec:
        sub = self.subtask(node)
        return self._spec(sub.relevant_vars, sub.table, sub.binding)

    def edge_key_spec(self, parent: str, ref: str) -> _KeySpec:
        sub = self.subtask(parent)
        ann = self.edge_annotation(parent, ref)
        names = sub.relevant_vars if ann.result_vars is None else ann.result_vars
        return self._spec(names, sub.table, sub.binding)

    def leaf_key_spec(self, action: str) -> _KeySpec:
        if not self.is_primitive(action):
            raise InvalidSubtask(action)
        return self._spec(self.leaf_relevant_vars[action], None, None)

    def project(self, node: str, state: StateVector) -> AbstractState:
        """Key of ``state`` restricted to the node's relevant variables (and binding)."""
        spec = self.leaf_key_spec(node) if self.is_primitive(node) else self.key_spec(node)
        return AbstractState(spec.names, spec.key(state))

    def edge_key(self, parent: str, ref: str, state: StateVector) -> AbstractState:
        spec = self.edge_key_spec(parent, ref)
        return AbstractState(spec.names, spec.key(state))

    def edge_annotation(self, parent: str, ref: str) -> EdgeAnnotation:
        return self.edges.get((parent, ref), EdgeAnnotation())

    # -- variants and serialisation -------------------------------------

    def plain(self) -> TaskGraph:
        """Same hierarchy with every variable relevant and no eliminations."""
        names = self.variable_names
        return TaskGraph(
            self.schemas,
            self.actions,
            [replace(sub, relevant_vars=names) for sub in self.subtasks.values()],
            self.root,
            edges={},
            leaf_relevant_vars={a: names for a in self.actions},
            episode_terminal=self.episode_terminal,
        )

    def with_changes(
        self,
        relevant: Mapping[str, Sequence[str]] | None = None,
        children: Mapping[str, Sequence[str]] | None = None,
        edges: Mapping[tuple[str, str], EdgeAnnotation] | None = None,
        leaves: Mapping[str, Sequence[str]] | None = None,
        terminations: Mapping[str, Predicate] | None = None,
    ) -> TaskGraph:
        """Copy with some declarations replaced; used to build mutants."""
        subs = []
        for sub in self.subtasks.values():
            if relevant and sub.id in relevant:
                sub = replace(sub, relevant_vars=tuple(relevant[sub.id]))
            if children and sub.id in children:
                sub = replace(sub, children=tuple(children[sub.id]))
            if terminations and sub.id in terminations:
                sub = replace(sub, termination=terminations[sub.id])
            subs.append(sub)
        new_edges = dict(self.edges)
        new_edges.update(edges or {})
        new_leaves = dict(self.leaf_relevant_vars)
        new_leaves.update({a: tuple(v) for a, v in (leaves or {}).items()})
        return TaskGraph(self.schemas, self.actions, subs, self.root, new_edges, new_leaves, self.episode_terminal)

    def to_text(self) -> str:
        """Line-oriented, order-significant serialisation (predicates excluded)."""
        lines = ["# maxq task graph", f"root\t{self.root}"]
        for s in self.schemas:
            labels = ",".join(s.labels) if s.labels else "-"
            lines.append(f"variable\t{s.name}\t{s.domain_size}\t{labels}")
        lines.append("actions\t" + ",".join(self.actions))
        for sub in self.subtasks.values():
            binding = "-" if sub.binding is None else f"{sub.binding[0]}={sub.binding[1]}"
            lines.append(
                f"subtask\t{sub.id}\tchildren={','.join(sub.children)}"
                f"\trelevant={','.join(sub.relevant_vars)}\ttable={sub.table}\tbinding={binding}"
            )
        for (parent, ref), ann in self.edges.items():
            result = "-" if ann.result_vars is None else ",".join(ann.result_vars)
            lines.append(f"edge\t{parent}\t{ref}\teliminated={int(ann.eliminated)}\tresult={result}")
        for a in self.actions:
            lines.append(f"leaf\t{a}\trelevant={','.join(self.leaf_relevant_vars[a])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(
        cls,
        text: str,
        predicates: Mapping[str, Predicate],
        episode_terminal: Predicate | None = None,
    ) -> TaskGraph:
        root = ""
        schemas: list[VariableSchema] = []
        actions: list[str] = []
        subs: list[SubtaskDef] = []
        edges: dict[tuple[str, str], EdgeAnnotation] = {}
        leaves: dict[str, tuple[str, ...]] = {}

        def split(value: str) -> tuple[str, ...]:
            return tuple(v for v in value.split(",") if v)

        for lineno, line in enumerate(text.splitlines(), 1):
            if not line or line.startswith("#"):
                continue
            kind, *fields = line.split("\t")
            opts = dict(f.split("=", 1) for f in fields if "=" in f)
            if kind == "root":
                root = fields[0]
            elif kind == "variable":
                labels = None if fields[2] == "-" else split(fields[2])
                schemas.append(VariableSchema(fields[0], int(fields[1]), labels))
            elif kind == "actions":
                actions = list(split(fields[0]))
            elif kind == "subtask":
                binding = None
                if opts["binding"] != "-":
                    name, value = opts["binding"].split("=")
                    binding = (name, int(value))
                subs.append(SubtaskDef(fields[0], split(opts["children"]), predicates[fields[0]],
                                       split(opts["relevant"]), opts["table"], binding))
            elif kind == "edge":
                result = None if opts["result"] == "-" else split(opts["result"])
                edges[(fields[0], fields[1])] = EdgeAnnotation(opts["eliminated"] == "1", result)
            elif kind == "leaf":
                leaves[fields[0]] = split(opts["relevant"])
            else:
                raise ValueError(f"line {lineno}: unknown record {kind!r}")
        return cls(schemas, actions, subs, root, edges, leaves, episode_terminal)


def validate_dag(g: TaskGraph) -> list[Violation]:
    """Structural problems of ``g``; an empty list means the graph is usable."""
    problems: list[Violation] = []
    known_vars = set(g.variable_names)
    if g.root not in g.subtasks:
        problems.append(Violation("unknown-root", (g.root,), f"root {g.root!r} is not a subtask"))
    for sub in g.subtasks.values():
        if not sub.children:
            problems.append(Violation("empty-children", (sub.id,), f"{sub.id} has no children"))
        for ref in sub.children:
            m = _PARAM_REF.match(ref)
            if m:
                if m.group(1) not in g._tables or any(g.subtasks[i].binding is None for i in g._tables[m.group(1)]):
                    problems.append(Violation("unknown-child", (sub.id, ref), f"{sub.id}: no bound family {m.group(1)!r}"))
                if m.group(2) not in known_vars:
                    problems.append(Violation("unknown-variable", (sub.id, ref), f"{sub.id}: unknown variable in {ref!r}"))
            elif ref not in g.subtasks and ref not in g.actions:
                problems.append(Violation("unknown-child", (sub.id, ref), f"{sub.id}: unknown child {ref!r}"))
        bad = [v for v in sub.relevant_vars if v not in known_vars]
        if bad:
            problems.append(Violation("unknown-variable", (sub.id,), f"{sub.id}: unknown relevant variables {bad}"))
    for table, members in g._tables.items():
        shapes = {(g.subtasks[m].children, g.subtasks[m].relevant_vars) for m in members}
        if len(shapes) > 1:
            problems.append(Violation("table-mismatch", tuple(members), f"instances of {table!r} disagree on children or variables"))
    for (parent, ref), ann in g.edges.items():
        if parent not in g.subtasks or ref not in g.subtasks[parent].children:
            problems.append(Violation("unknown-edge", (parent, ref), f"annotation on missing edge {parent}->{ref}"))
        elif ann.result_vars is not None:
            extra = [v for v in ann.result_vars if v not in g.subtasks[parent].relevant_vars]
            if extra:
                problems.append(Violation("unknown-variable", (parent, ref), f"result variables {extra} not relevant to {parent}"))
    for a, names in g.leaf_relevant_vars.items():
        bad = [v for v in names if v not in known_vars]
        if bad:
            problems.append(Violation("unknown-variable", (a,), f"leaf {a}: unknown variables {bad}"))
    if any(p.kind in ("unknown-child", "unknown-root") for p in problems):
        return problems

    try:
        g.topological_order()
    except graphlib.CycleError as err:
        cycle = tuple(dict.fromkeys(err.args[1]))
        problems.append(Violation("cycle", cycle, "cycle through " + " -> ".join(err.args[1])))
        return problems

    reached = {g.root}
    frontier = [g.root]
    while frontier:
        node = frontier.pop()
        if node in g.subtasks:
            for child in g.children_of(node):
                if child not in reached:
                    reached.add(child)
                    frontier.append(child)
    for sub in g.subtasks:
        if sub not in reached:
            problems.append(Violation("unreachable", (sub,), f"{sub} is not reachable from {g.root}"))
    return problems
