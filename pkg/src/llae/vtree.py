"""Variable trees (vtrees) that scope every circuit node.

A vtree is a full binary tree whose leaves are the boolean variables of the
feature layer.  Every circuit node is normalized for exactly one vtree node,
which is what makes decomposability a structural property rather than
something to discover.

Text format, one node per line::

    c optional comment
    L <id> <var>
    I <id> <left_id> <right_id>
    R <root_id>

Children appear before their parents; variable indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import CircuitFormatError

if TYPE_CHECKING:  # pragma: no cover
    from .learn import BinaryDataset


@dataclass(frozen=True)
class VTreeLeaf:
    id: int
    var: int


@dataclass(frozen=True)
class VTreeInternal:
    id: int
    left_id: int
    right_id: int


class VTree:
    """Immutable full binary tree over variable indices [0, n).

    Safe to share across threads once constructed.
    """

    def __init__(self, nodes: Iterable[VTreeLeaf | VTreeInternal], root_id: int):
        self._nodes = {n.id: n for n in nodes}
        self.root_id = root_id
        self._vars_below: dict[int, frozenset[int]] = {}
        self._check()

    def _check(self):
        if self.root_id not in self._nodes:
            raise ValueError(f"root id {self.root_id} not among nodes")
        seen_vars: list[int] = []
        seen_nodes: set[int] = set()
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            if nid in seen_nodes:
                raise ValueError(f"vtree node {nid} reachable twice; not a tree")
            seen_nodes.add(nid)
            node = self._nodes.get(nid)
            if node is None:
                raise ValueError(f"dangling vtree node reference {nid}")
            if isinstance(node, VTreeLeaf):
                seen_vars.append(node.var)
            else:
                stack.append(node.left_id)
                stack.append(node.right_id)
        if seen_nodes != set(self._nodes):
            raise ValueError("vtree contains nodes unreachable from the root")
        n = len(seen_vars)
        if sorted(seen_vars) != list(range(n)):
            raise ValueError("vtree leaves must cover [0, n) exactly once")
        self._num_vars = n

    # -- accessors ---------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return self._num_vars

    def node(self, nid: int) -> VTreeLeaf | VTreeInternal:
        return self._nodes[nid]

    def node_ids(self) -> list[int]:
        return sorted(self._nodes)

    def is_leaf(self, nid: int) -> bool:
        return isinstance(self._nodes[nid], VTreeLeaf)

    def variables(self, nid: int) -> frozenset[int]:
        """Set of variable indices under vtree node `nid` (memoized)."""
        cached = self._vars_below.get(nid)
        if cached is not None:
            return cached
        node = self._nodes[nid]
        if isinstance(node, VTreeLeaf):
            result = frozenset((node.var,))
        else:
            result = self.variables(node.left_id) | self.variables(node.right_id)
        self._vars_below[nid] = result
        return result

    def inorder_leaf_vars(self, nid: int | None = None) -> list[int]:
        nid = self.root_id if nid is None else nid
        node = self._nodes[nid]
        if isinstance(node, VTreeLeaf):
            return [node.var]
        return self.inorder_leaf_vars(node.left_id) + self.inorder_leaf_vars(node.right_id)

    def height(self, nid: int | None = None) -> int:
        nid = self.root_id if nid is None else nid
        node = self._nodes[nid]
        if isinstance(node, VTreeLeaf):
            return 0
        return 1 + max(self.height(node.left_id), self.height(node.right_id))

    def leaf_of_var(self, var: int) -> int:
        for nid, node in self._nodes.items():
            if isinstance(node, VTreeLeaf) and node.var == var:
                return nid
        raise KeyError(var)

    def subtree_for(self, variables: Iterable[int]) -> int | None:
        """Id of the vtree node whose leaf set equals `variables`, if any."""
        target = frozenset(variables)
        nid = self.root_id
        while True:
            if self.variables(nid) == target:
                return nid
            node = self._nodes[nid]
            if isinstance(node, VTreeLeaf):
                return None
            if target <= self.variables(node.left_id):
                nid = node.left_id
            elif target <= self.variables(node.right_id):
                nid = node.right_id
            else:
                return None

    def __eq__(self, other):
        if not isinstance(other, VTree):
            return NotImplemented
        return self._nodes == other._nodes and self.root_id == other.root_id

    def __repr__(self):
        return f"VTree(num_vars={self.num_vars}, nodes={len(self._nodes)})"


# -- construction ------------------------------------------------------------

def _from_shape(shape) -> VTree:
    """Build a VTree from nested tuples/ints, assigning post-order ids."""
    nodes: list[VTreeLeaf | VTreeInternal] = []

    def rec(s) -> int:
        if isinstance(s, tuple):
            left = rec(s[0])
            right = rec(s[1])
            nid = len(nodes)
            nodes.append(VTreeInternal(nid, left, right))
        else:
            nid = len(nodes)
            nodes.append(VTreeLeaf(nid, int(s)))
        return nid

    root = rec(shape)
    return VTree(nodes, root)


def _check_order(num_vars: int, order: Sequence[int]):
    if num_vars < 1:
        raise ValueError("num_vars must be >= 1")
    if sorted(order) != list(range(num_vars)):
        raise ValueError(f"order must be a permutation of [0, {num_vars})")


def build_balanced(num_vars: int, order: Sequence[int] | None = None) -> VTree:
    """Height-minimal vtree whose in-order leaves equal `order`."""
    order = list(range(num_vars)) if order is None else list(order)
    _check_order(num_vars, order)

    def shape(part):
        if len(part) == 1:
            return part[0]
        mid = (len(part) + 1) // 2
        return (shape(part[:mid]), shape(part[mid:]))

    return _from_shape(shape(order))


def build_rightlinear(num_vars: int, order: Sequence[int] | None = None) -> VTree:
    """Right-linear vtree: every internal node's left child is a leaf."""
    order = list(range(num_vars)) if order is None else list(order)
    _check_order(num_vars, order)

    def shape(part):
        if len(part) == 1:
            return part[0]
        return (part[0], shape(part[1:]))

    return _from_shape(shape(order))


def _pairwise_mi(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Empirical mutual information for every variable pair.

    Uses add-one smoothed joint counts so constant columns are harmless;
    marginals are derived from the smoothed joint, which keeps exactly
    symmetric data at exactly zero MI.
    """
    n = rows.shape[1]
    x = rows.astype(np.float64)
    w = weights.astype(np.float64)
    total = w.sum()
    xw = x * w[:, None]
    c11 = x.T @ xw
    ci = xw.sum(axis=0)
    c10 = ci[:, None] - c11
    c01 = ci[None, :] - c11
    c00 = total - c11 - c10 - c01
    mi = np.zeros((n, n))
    for a, b in ((0, 0), (0, 1), (1, 0), (1, 1)):
        joint = {(0, 0): c00, (0, 1): c01, (1, 0): c10, (1, 1): c11}[(a, b)]
        p = (joint + 1.0) / (total + 4.0)
        if a == 0:
            pa = (c00 + c01 + 2.0) / (total + 4.0)
        else:
            pa = (c10 + c11 + 2.0) / (total + 4.0)
        if b == 0:
            pb = (c00 + c10 + 2.0) / (total + 4.0)
        else:
            pb = (c01 + c11 + 2.0) / (total + 4.0)
        mi += p * (np.log(p) - np.log(pa) - np.log(pb))
    np.fill_diagonal(mi, 0.0)
    return mi


def learn_vtree_mi(data: "BinaryDataset") -> VTree:
    """Greedy bottom-up vtree: repeatedly merge the two clusters with the
    highest average cross-cluster pairwise mutual information.

    Ties break toward the lowest variable indices, making the result
    deterministic for a given dataset.
    """
    rows = np.asarray(data.rows, dtype=np.uint8)
    weights = np.asarray(data.weights, dtype=np.float64)
    if rows.size == 0:
        raise ValueError("dataset must be non-empty")
    n = rows.shape[1]
    if n == 1:
        return _from_shape(0)

    mi = _pairwise_mi(rows, weights)
    clusters: list[tuple[list[int], object]] = [([v], v) for v in range(n)]
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                vi, vj = clusters[i][0], clusters[j][0]
                score = float(np.mean(mi[np.ix_(vi, vj)]))
                lo = min(vi[0], vj[0])
                hi = max(vi[0], vj[0])
                key = (-score, lo, hi)
                if best is None or key < best[0]:
                    best = (key, i, j)
        _, i, j = best
        a, b = clusters[i], clusters[j]
        if b[0][0] < a[0][0]:
            a, b = b, a
        merged = (a[0] + b[0], (a[1], b[1]))
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)
        clusters.sort(key=lambda c: c[0][0])
    return _from_shape(clusters[0][1])


def join(left: VTree, right: VTree) -> VTree:
    """New vtree with `left` and `right` as the root's children.

    Variables of `right` are shifted past those of `left`, so the joined
    tree covers [0, left.num_vars + right.num_vars).
    """
    def shape_of(vt: VTree, nid: int, offset: int):
        node = vt.node(nid)
        if isinstance(node, VTreeLeaf):
            return node.var + offset
        return (shape_of(vt, node.left_id, offset), shape_of(vt, node.right_id, offset))

    return _from_shape(
        (shape_of(left, left.root_id, 0), shape_of(right, right.root_id, left.num_vars))
    )


# -- serialization -----------------------------------------------------------

def to_text(vt: VTree) -> str:
    lines = ["c vtree"]
    order: list[int] = []
    seen: set[int] = set()

    def post(nid: int):
        node = vt.node(nid)
        if isinstance(node, VTreeInternal):
            post(node.left_id)
            post(node.right_id)
        if nid not in seen:
            seen.add(nid)
            order.append(nid)

    post(vt.root_id)
    for nid in order:
        node = vt.node(nid)
        if isinstance(node, VTreeLeaf):
            lines.append(f"L {node.id} {node.var}")
        else:
            lines.append(f"I {node.id} {node.left_id} {node.right_id}")
    lines.append(f"R {vt.root_id}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> VTree:
    nodes: list[VTreeLeaf | VTreeInternal] = []
    root_id = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        try:
            if parts[0] == "L" and len(parts) == 3:
                nodes.append(VTreeLeaf(int(parts[1]), int(parts[2])))
            elif parts[0] == "I" and len(parts) == 4:
                nodes.append(VTreeInternal(int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "R" and len(parts) == 2:
                root_id = int(parts[1])
            else:
                raise ValueError
        except ValueError:
            raise CircuitFormatError(f"bad vtree line {lineno}: {raw!r}") from None
    if root_id is None:
        raise CircuitFormatError("vtree file missing R (root) line")
    try:
        return VTree(nodes, root_id)
    except ValueError as exc:
        raise CircuitFormatError(str(exc)) from None


def save(vt: VTree, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(to_text(vt))


def load(path) -> VTree:
    with open(path, "r", encoding="ascii") as fh:
        return from_text(fh.read())
