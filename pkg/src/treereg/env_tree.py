"""Directed rooted trees of environments.

An :class:`EnvTree` describes how data-generating environments are related:
nodes are environments, arcs point from parent to child, and every non-root
environment accumulates the parameter mutations of the arcs on its root path.
Node ids are dense integers with the root fixed at 0; arcs are numbered
breadth-first from the root with children in insertion order, so arc indices
(and therefore mutation-matrix rows) are reproducible across runs and
serializations.

Trees are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import hashlib
from collections import deque
from typing import Iterable, Sequence

import numpy as np

EnvId = int
ArcId = int


class TreeStructureError(ValueError):
    """An edge list does not describe a single rooted tree."""


class EnvTree:
    """Rooted directed tree over environments 0..n_nodes-1.

    ``parents`` must be in canonical breadth-first order: ``parents[0] == -1``
    and ``0 <= parents[i] < i`` for every other node.  Use
    :func:`build_balanced_binary` or :func:`from_edge_list` instead of calling
    this constructor with hand-built arrays.
    """

    def __init__(self, parents: Sequence[int], labels: Sequence[str] | None = None):
        parents = np.asarray(parents, dtype=np.int64)
        if parents.ndim != 1 or parents.size == 0:
            raise TreeStructureError("parents must be a non-empty 1-d sequence")
        if parents[0] != -1:
            raise TreeStructureError("node 0 must be the root (parent -1)")
        for i in range(1, parents.size):
            if not 0 <= parents[i] < i:
                raise TreeStructureError(
                    f"node {i} has parent {parents[i]}; construction requires parent < child"
                )
        if labels is not None:
            labels = tuple(str(s) for s in labels)
            if len(labels) != parents.size:
                raise TreeStructureError("labels length must match node count")
            if len(set(labels)) != len(labels):
                raise TreeStructureError("labels must be unique")

        parents, labels = self._canonicalize(parents, labels)
        self._parents = parents
        self._parents.setflags(write=False)
        self._labels = labels

        n = parents.size
        children: list[list[int]] = [[] for _ in range(n)]
        for child in range(1, n):
            children[parents[child]].append(child)
        self._children = tuple(tuple(c) for c in children)

        depths = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            depths[i] = depths[parents[i]] + 1
        self._node_depths = depths
        self._node_depths.setflags(write=False)

        self._leaves = frozenset(i for i in range(n) if not children[i])

    @staticmethod
    def _canonicalize(parents: np.ndarray, labels: tuple[str, ...] | None):
        """Relabel node ids to breadth-first order, children in id order.

        Makes arc numbering (and hence mutation-row indices) a function of the
        tree's structure alone, independent of how the input was indexed.
        """
        n = parents.size
        children: list[list[int]] = [[] for _ in range(n)]
        for child in range(1, n):
            children[parents[child]].append(child)
        order = []
        queue = deque([0])
        while queue:
            node = queue.popleft()
            order.append(node)
            queue.extend(children[node])
        if order == list(range(n)):
            return parents, labels
        new_id = {old: new for new, old in enumerate(order)}
        new_parents = np.empty(n, dtype=np.int64)
        new_parents[0] = -1
        for old in range(1, n):
            new_parents[new_id[old]] = new_id[parents[old]]
        new_labels = None
        if labels is not None:
            new_labels = tuple(labels[old] for old in order)
        return new_parents, new_labels

    # ------------------------------------------------------------------
    # Basic structure
    # ------------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self._parents.size

    @property
    def n_arcs(self) -> int:
        return self._parents.size - 1

    @property
    def depth(self) -> int:
        """Largest root-to-node distance in arcs."""
        return int(self._node_depths.max())

    @property
    def leaves(self) -> frozenset[EnvId]:
        return self._leaves

    @property
    def labels(self) -> tuple[str, ...] | None:
        return self._labels

    @property
    def parent_map(self) -> dict[EnvId, EnvId]:
        """Parent of every non-root node."""
        return {i: int(self._parents[i]) for i in range(1, self.n_nodes)}

    def parent(self, env: EnvId) -> EnvId:
        self._check_env(env)
        if env == 0:
            raise ValueError("root has no parent")
        return int(self._parents[env])

    def children(self, env: EnvId) -> tuple[EnvId, ...]:
        self._check_env(env)
        return self._children[env]

    def node_depth(self, env: EnvId) -> int:
        self._check_env(env)
        return int(self._node_depths[env])

    def is_leaf(self, env: EnvId) -> bool:
        self._check_env(env)
        return env in self._leaves

    def _check_env(self, env: EnvId) -> None:
        if not 0 <= env < self.n_nodes:
            raise KeyError(f"unknown environment id {env}")

    # ------------------------------------------------------------------
    # Arcs
    # ------------------------------------------------------------------
    # Canonical numbering makes arc a the one entering node a+1, because node
    # ids are already breadth-first with children in insertion order.
    def arc_index(self, parent: EnvId, child: EnvId) -> ArcId:
        self._check_env(child)
        if child == 0 or int(self._parents[child]) != parent:
            raise KeyError(f"({parent}, {child}) is not an arc of this tree")
        return child - 1

    def arc_parent(self, arc: ArcId) -> EnvId:
        self._check_arc(arc)
        return int(self._parents[arc + 1])

    def arc_child(self, arc: ArcId) -> EnvId:
        self._check_arc(arc)
        return arc + 1

    def arcs(self) -> Iterable[tuple[EnvId, EnvId]]:
        """Arcs as (parent, child) pairs in canonical order."""
        for child in range(1, self.n_nodes):
            yield int(self._parents[child]), child

    def _check_arc(self, arc: ArcId) -> None:
        if not 0 <= arc < self.n_arcs:
            raise KeyError(f"unknown arc id {arc}")

    def path_to_root(self, env: EnvId) -> tuple[ArcId, ...]:
        """Arcs on the unique root-to-env path, ordered root-first.

        The root's path is empty.
        """
        self._check_env(env)
        path: list[ArcId] = []
        node = env
        while node != 0:
            path.append(node - 1)
            node = int(self._parents[node])
        path.reverse()
        return tuple(path)

    def path_matrix(self) -> np.ndarray:
        """0/1 matrix P of shape (n_nodes, n_arcs) with P[e, a] = 1 iff arc a
        lies on the root-to-e path."""
        p = np.zeros((self.n_nodes, self.n_arcs))
        for env in range(1, self.n_nodes):
            p[env] = p[int(self._parents[env])]
            p[env, env - 1] = 1.0
        return p

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------
    def node_label(self, env: EnvId) -> str:
        self._check_env(env)
        return self._labels[env] if self._labels is not None else str(env)

    def to_edge_list_text(self) -> str:
        """One ``parent<TAB>child`` line per arc, canonical order, UTF-8."""
        lines = [
            f"{self.node_label(p)}\t{self.node_label(c)}" for p, c in self.arcs()
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def structure_hash(self) -> str:
        """SHA-256 of the canonical dense-id edge list (labels ignored)."""
        text = "\n".join(f"{p}\t{c}" for p, c in self.arcs())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnvTree):
            return NotImplemented
        return np.array_equal(self._parents, other._parents)

    def __hash__(self) -> int:
        return hash(self._parents.tobytes())

    def __repr__(self) -> str:
        return (
            f"EnvTree(n_nodes={self.n_nodes}, depth={self.depth}, "
            f"leaves={len(self._leaves)})"
        )


def build_balanced_binary(depth: int) -> EnvTree:
    """Full balanced binary tree with 2**depth leaves and 2**(depth+1)-1 nodes.

    ``depth`` counts arcs on a root-to-leaf path and must be >= 1; depth 0
    would leave no arcs and therefore no mutation rows.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1 (a tree without arcs has no mutations)")
    n = 2 ** (depth + 1) - 1
    parents = np.empty(n, dtype=np.int64)
    parents[0] = -1
    idx = np.arange(1, n)
    parents[1:] = (idx - 1) // 2
    return EnvTree(parents)


def from_edge_list(edges: Iterable[tuple[str, str]]) -> EnvTree:
    """Build an :class:`EnvTree` from (parent_label, child_label) pairs.

    Labels are remapped to dense ids by breadth-first traversal from the root
    (the unique label never appearing as a child), children kept in edge-list
    order. Raises :class:`TreeStructureError` on cycles, multiple roots,
    duplicate children, or self-loops.
    """
    edges = [(str(p), str(c)) for p, c in edges]
    if not edges:
        raise TreeStructureError("empty edge list")

    children_of: dict[str, list[str]] = {}
    parent_of: dict[str, str] = {}
    nodes: list[str] = []
    seen: set[str] = set()

    def note(label: str) -> None:
        if label not in seen:
            seen.add(label)
            nodes.append(label)

    for parent, child in edges:
        note(parent)
        note(child)
        if parent == child:
            raise TreeStructureError(f"self-loop at {child!r}")
        if child in parent_of:
            raise TreeStructureError(f"duplicate child {child!r}")
        parent_of[child] = parent
        children_of.setdefault(parent, []).append(child)

    roots = [n for n in nodes if n not in parent_of]
    if len(roots) > 1:
        raise TreeStructureError(f"multiple roots: {sorted(roots)}")
    if not roots:
        raise TreeStructureError("cycle detected: every node has a parent")
    root = roots[0]

    order: list[str] = []
    queue = deque([root])
    while queue:
        label = queue.popleft()
        order.append(label)
        queue.extend(children_of.get(label, ()))

    if len(order) != len(nodes):
        # Every node has at most one parent and exactly one root exists, so
        # anything unreachable from the root must sit on a parent cycle.
        missing = sorted(set(nodes) - set(order))
        raise TreeStructureError(f"cycle detected involving {missing}")

    ids = {label: i for i, label in enumerate(order)}
    parents = np.empty(len(order), dtype=np.int64)
    parents[0] = -1
    for label, i in ids.items():
        if i > 0:
            parents[i] = ids[parent_of[label]]
    return EnvTree(parents, labels=order)


def parse_edge_list_text(text: str) -> EnvTree:
    """Parse the ``parent<TAB>child`` line format emitted by
    :meth:`EnvTree.to_edge_list_text`."""
    edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TreeStructureError(
                f"line {lineno}: expected 'parent<TAB>child', got {line!r}"
            )
        edges.append((parts[0], parts[1]))
    return from_edge_list(edges)
