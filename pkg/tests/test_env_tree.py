import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treereg.env_tree import (
    EnvTree,
    TreeStructureError,
    build_balanced_binary,
    from_edge_list,
    parse_edge_list_text,
)


@st.composite
def random_parents(draw):
    """Canonical parent arrays of random trees (parent index < child index)."""
    n = draw(st.integers(min_value=2, max_value=40))
    parents = [-1]
    for i in range(1, n):
        parents.append(draw(st.integers(min_value=0, max_value=i - 1)))
    return parents


class TestBalancedBinary:
    def test_depth_one(self):
        tree = build_balanced_binary(1)
        assert tree.n_nodes == 3
        assert tree.n_arcs == 2
        assert tree.leaves == {1, 2}

    def test_depth_seven_has_128_leaves(self):
        tree = build_balanced_binary(7)
        assert tree.n_nodes == 255
        assert len(tree.leaves) == 128
        assert tree.depth == 7

    def test_depth_three_node_count(self):
        tree = build_balanced_binary(3)
        assert tree.n_nodes == 15
        assert len(tree.leaves) == 8
        assert tree.n_nodes == len(tree.leaves) + 7

    def test_depth_zero_rejected(self):
        with pytest.raises(ValueError):
            build_balanced_binary(0)

    def test_root_is_zero(self):
        tree = build_balanced_binary(2)
        assert tree.parent_map.keys() == set(range(1, 7))
        with pytest.raises(ValueError):
            tree.parent(0)


class TestPaths:
    def test_root_path_empty(self):
        tree = build_balanced_binary(3)
        assert tree.path_to_root(0) == ()

    def test_depth_one_leaf_single_arc(self):
        tree = build_balanced_binary(1)
        assert tree.path_to_root(1) == (0,)
        assert tree.path_to_root(2) == (1,)

    def test_deep_leaf_against_parent_walk_oracle(self):
        tree = build_balanced_binary(7)
        leaf = max(tree.leaves)
        path = tree.path_to_root(leaf)
        assert len(path) == 7
        # independent oracle: chase parents upward, collect arcs, reverse
        arcs = []
        node = leaf
        while node != 0:
            parent = tree.parent(node)
            arcs.append(tree.arc_index(parent, node))
            node = parent
        assert tuple(reversed(arcs)) == path

    def test_unknown_env(self):
        tree = build_balanced_binary(2)
        with pytest.raises(KeyError):
            tree.path_to_root(99)

    @given(random_parents())
    @settings(max_examples=50)
    def test_path_length_is_depth_and_prefix_property(self, parents):
        tree = EnvTree(parents)
        for env in range(tree.n_nodes):
            path = tree.path_to_root(env)
            assert len(path) == tree.node_depth(env)
            if env != 0:
                parent = tree.parent(env)
                assert path == tree.path_to_root(parent) + (
                    tree.arc_index(parent, env),
                )

    @pytest.mark.parametrize("depth", [1, 2, 3, 5])
    def test_leaf_path_length_sum(self, depth):
        tree = build_balanced_binary(depth)
        total = sum(len(tree.path_to_root(leaf)) for leaf in tree.leaves)
        assert total == depth * 2**depth

    def test_path_matrix_matches_paths(self):
        tree = build_balanced_binary(3)
        p = tree.path_matrix()
        for env in range(tree.n_nodes):
            on_path = np.flatnonzero(p[env])
            assert tuple(sorted(tree.path_to_root(env))) == tuple(on_path)


class TestArcNumbering:
    def test_bijection(self):
        tree = build_balanced_binary(3)
        ids = [tree.arc_index(p, c) for p, c in tree.arcs()]
        assert sorted(ids) == list(range(tree.n_arcs))

    def test_breadth_first_order(self):
        tree = build_balanced_binary(2)
        # arcs sorted by child id; children of earlier parents come first
        children = [tree.arc_child(a) for a in range(tree.n_arcs)]
        assert children == sorted(children)

    def test_arc_endpoints(self):
        tree = build_balanced_binary(2)
        for p, c in tree.arcs():
            a = tree.arc_index(p, c)
            assert tree.arc_parent(a) == p
            assert tree.arc_child(a) == c

    def test_non_arc_rejected(self):
        tree = build_balanced_binary(2)
        with pytest.raises(KeyError):
            tree.arc_index(0, 5)


class TestFromEdgeList:
    def test_tiny_tree(self):
        tree = from_edge_list([("r", "a"), ("r", "b")])
        assert tree.n_nodes == 3
        assert tree.labels == ("r", "a", "b")
        assert tree.leaves == {1, 2}

    def test_cycle_rejected(self):
        with pytest.raises(TreeStructureError, match="cycle|root"):
            from_edge_list([("a", "b"), ("b", "c"), ("c", "a")])

    def test_disjoint_cycle_rejected(self):
        with pytest.raises(TreeStructureError, match="cycle"):
            from_edge_list([("r", "a"), ("x", "y"), ("y", "x")])

    def test_multiple_roots_rejected(self):
        with pytest.raises(TreeStructureError, match="multiple roots"):
            from_edge_list([("r", "a"), ("s", "b")])

    def test_duplicate_child_rejected(self):
        with pytest.raises(TreeStructureError, match="duplicate child"):
            from_edge_list([("r", "a"), ("r", "b"), ("b", "a")])

    def test_self_loop_rejected(self):
        with pytest.raises(TreeStructureError, match="self-loop"):
            from_edge_list([("r", "r")])

    def test_empty_rejected(self):
        with pytest.raises(TreeStructureError):
            from_edge_list([])

    def test_arbitrary_arity_supported(self):
        tree = from_edge_list([("r", c) for c in "abcde"])
        assert tree.n_nodes == 6
        assert len(tree.leaves) == 5


class TestSerialization:
    def test_balanced_tree_round_trip(self):
        tree = build_balanced_binary(7)
        text = tree.to_edge_list_text()
        assert len(text.strip().splitlines()) == 254
        again = parse_edge_list_text(text)
        assert again == tree  # structural equality on canonical ids

    @given(random_parents())
    @settings(max_examples=50)
    def test_round_trip_identity_up_to_relabeling(self, parents):
        tree = EnvTree(parents)
        again = parse_edge_list_text(tree.to_edge_list_text())
        assert again == tree
        assert again.structure_hash() == tree.structure_hash()

    def test_labels_survive_round_trip(self):
        tree = from_edge_list([("root", "left"), ("root", "right"), ("left", "tip")])
        again = parse_edge_list_text(tree.to_edge_list_text())
        assert again.labels == tree.labels

    def test_malformed_line_rejected(self):
        with pytest.raises(TreeStructureError, match="parent<TAB>child"):
            parse_edge_list_text("a b c\n")

    def test_blank_lines_ignored(self):
        tree = parse_edge_list_text("r\ta\n\nr\tb\n")
        assert tree.n_nodes == 3


class TestConstructorValidation:
    def test_requires_root_first(self):
        with pytest.raises(TreeStructureError):
            EnvTree([0, -1])

    def test_requires_parent_before_child(self):
        with pytest.raises(TreeStructureError):
            EnvTree([-1, 2, 1])

    def test_duplicate_labels_rejected(self):
        with pytest.raises(TreeStructureError):
            EnvTree([-1, 0], labels=["x", "x"])
