"""Shared oracles and reference circuits for the test suite.

The oracles here evaluate circuits by explicit enumeration of complete
worlds with a small recursive linear-space evaluator.  They share no
code with the production bottom-up log-space pass, so agreement between
the two is meaningful evidence of correctness.  Everything is tiny-n
only (<= ~12 variables).
"""

import itertools
import math

import numpy as np

from llae.circuit import (
    Circuit,
    DecisionNode,
    Element,
    LiteralNode,
    TerminalNode,
)
from llae.vtree import VTree, VTreeInternal, VTreeLeaf, build_balanced, build_rightlinear


# -- enumeration oracles -------------------------------------------------------

def oracle_world_prob(circuit: Circuit, world) -> float:
    """Pr of one complete assignment by direct recursion, linear space."""
    memo: dict[int, float] = {}

    def value(nid: int) -> float:
        if nid in memo:
            return memo[nid]
        node = circuit.nodes[nid]
        if isinstance(node, LiteralNode):
            v = 1.0 if bool(world[node.variable]) == node.polarity else 0.0
        elif isinstance(node, TerminalNode):
            t = math.exp(node.log_theta_true)
            v = t if world[node.variable] else 1.0 - t
        else:
            v = sum(
                math.exp(el.log_theta) * value(el.prime) * value(el.sub)
                for el in node.elements
            )
        memo[nid] = v
        return v

    return value(circuit.root_id)


def all_worlds(n: int):
    return itertools.product((0, 1), repeat=n)


def oracle_evidence_prob(circuit: Circuit, evidence) -> float:
    """Pr of partial evidence as an explicit sum over consistent worlds."""
    ev = list(evidence)
    total = 0.0
    for world in all_worlds(circuit.num_vars):
        if all(e == -1 or e == w for e, w in zip(ev, world)):
            total += oracle_world_prob(circuit, world)
    return total


def oracle_joint_table(circuit: Circuit) -> dict[tuple, float]:
    return {w: oracle_world_prob(circuit, w) for w in all_worlds(circuit.num_vars)}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical_table(rows: np.ndarray) -> dict[tuple, float]:
    table: dict[tuple, float] = {}
    for row in np.asarray(rows):
        key = tuple(int(v) for v in row)
        table[key] = table.get(key, 0.0) + 1.0
    return {k: v / len(rows) for k, v in table.items()}


# -- hand-built reference circuits ----------------------------------------------

class _Builder:
    """Tiny id allocator so hand-built circuits stay readable."""

    def __init__(self, vt: VTree):
        self.vt = vt
        self.nodes = []
        self._next = 0

    def _add(self, make):
        node = make(self._next)
        self._next += 1
        self.nodes.append(node)
        return node.id

    def lit(self, vtree_id: int, var: int, polarity: bool) -> int:
        return self._add(lambda i: LiteralNode(i, vtree_id, var, polarity))

    def term(self, vtree_id: int, var: int, theta: float) -> int:
        return self._add(lambda i: TerminalNode(i, vtree_id, var, math.log(theta)))

    def dec(self, vtree_id: int, elements) -> int:
        els = tuple(Element(p, s, math.log(t)) for p, s, t in elements)
        return self._add(lambda i: DecisionNode(i, vtree_id, els))

    def circuit(self, root_id: int) -> Circuit:
        return Circuit(self.vt, self.nodes, root_id)


def xor_circuit() -> Circuit:
    """Uniform over {01, 10} on two variables."""
    vt = build_balanced(2)
    b = _Builder(vt)
    p0 = b.lit(0, 0, True)
    n0 = b.lit(0, 0, False)
    p1 = b.lit(1, 1, True)
    n1 = b.lit(1, 1, False)
    root = b.dec(2, [(p0, n1, 0.5), (n0, p1, 0.5)])
    return b.circuit(root)


def product_circuit(thetas=(0.3, 0.6, 0.9)) -> Circuit:
    """Fully factorized Bernoulli product over len(thetas) variables."""
    vt = build_rightlinear(len(thetas))
    b = _Builder(vt)

    def build(vnid: int) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            return b.term(vnid, node.var, thetas[node.var])
        prime = build(node.left_id)
        sub = build(node.right_id)
        return b.dec(vnid, [(prime, sub, 1.0)])

    return b.circuit(build(vt.root_id))


def exactly_one_circuit(priors=(0.1, 0.2, 0.3, 0.4)) -> Circuit:
    """Support = one-hot assignments of n variables, Pr(onehot j) = priors[j]."""
    assert abs(sum(priors) - 1.0) < 1e-12
    n = len(priors)
    vt = build_rightlinear(n)
    b = _Builder(vt)

    def all_false(vnid: int) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            return b.lit(vnid, node.var, False)
        return b.dec(vnid, [(all_false(node.left_id), all_false(node.right_id), 1.0)])

    def one_hot(vnid: int, mass: float) -> int:
        node = vt.node(vnid)
        first = vt.node(node.left_id).var
        pos = b.lit(node.left_id, first, True)
        neg = b.lit(node.left_id, first, False)
        rest = vt.node(node.right_id)
        if isinstance(rest, VTreeLeaf):
            # base case: exactly one of the last two variables
            last_pos = b.lit(node.right_id, rest.var, True)
            last_neg = b.lit(node.right_id, rest.var, False)
            return b.dec(vnid, [
                (pos, last_neg, priors[first] / mass),
                (neg, last_pos, priors[rest.var] / mass),
            ])
        p_here = priors[first] / mass
        return b.dec(vnid, [
            (pos, all_false(node.right_id), p_here),
            (neg, one_hot(node.right_id, mass - priors[first]), 1.0 - p_here),
        ])

    return b.circuit(one_hot(vt.root_id, 1.0))


def random_psdd(vt: VTree, rng, cube_limit: int = 3) -> Circuit:
    """Random valid PSDD for a vtree.

    Internal nodes either enumerate all assignments of a small left scope
    as cube primes (exhaustive, disjoint) or use a single element, so
    determinism holds by construction while shapes stay varied.
    """
    b = _Builder(vt)

    def cube(vnid: int, bits: dict[int, bool]) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            return b.lit(vnid, node.var, bits[node.var])
        return b.dec(vnid, [(cube(node.left_id, bits), cube(node.right_id, bits), 1.0)])

    def build(vnid: int) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            return b.term(vnid, node.var, float(rng.uniform(0.05, 0.95)))
        left_vars = sorted(vt.variables(node.left_id))
        if len(left_vars) <= cube_limit and rng.random() < 0.7:
            thetas = rng.uniform(0.2, 1.0, size=1 << len(left_vars))
            thetas = thetas / thetas.sum()
            elements = []
            for idx, pattern in enumerate(itertools.product((False, True), repeat=len(left_vars))):
                bits = dict(zip(left_vars, pattern))
                elements.append((cube(node.left_id, bits), build(node.right_id), thetas[idx]))
            return b.dec(vnid, elements)
        return b.dec(vnid, [(build(node.left_id), build(node.right_id), 1.0)])

    return b.circuit(build(vt.root_id))


def random_evidence(n: int, rng) -> np.ndarray:
    """Random int8 evidence row; each variable -1/0/1."""
    return rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=n).astype(np.int8)


# -- per-example count oracle ---------------------------------------------------

def oracle_counts(circuit: Circuit, rows, weights):
    """Element/terminal flow counts by walking each example's support path.

    Independent of the production mask-based counting: recursive
    structural satisfaction plus a per-example node traversal.
    """
    element_counts = {
        n.id: [0.0] * len(n.elements)
        for n in circuit.topo_nodes()
        if isinstance(n, DecisionNode)
    }
    terminal_true = {n.id: 0.0 for n in circuit.topo_nodes() if isinstance(n, TerminalNode)}
    terminal_total = dict(terminal_true)
    unsupported = 0.0

    for row, w in zip(np.asarray(rows), np.asarray(weights, dtype=float)):
        memo: dict[int, bool] = {}

        def sat(nid: int) -> bool:
            if nid in memo:
                return memo[nid]
            node = circuit.nodes[nid]
            if isinstance(node, LiteralNode):
                v = bool(row[node.variable]) == node.polarity
            elif isinstance(node, TerminalNode):
                v = True
            else:
                v = any(sat(el.prime) and sat(el.sub) for el in node.elements)
            memo[nid] = v
            return v

        if not sat(circuit.root_id):
            unsupported += w
            continue
        visited = set()
        stack = [circuit.root_id]
        while stack:
            nid = stack.pop()
            if nid in visited:
                continue
            visited.add(nid)
            node = circuit.nodes[nid]
            if isinstance(node, DecisionNode):
                for i, el in enumerate(node.elements):
                    if sat(el.prime):
                        element_counts[nid][i] += w
                        stack.append(el.prime)
                        stack.append(el.sub)
            elif isinstance(node, TerminalNode):
                terminal_total[nid] += w
                if row[node.variable]:
                    terminal_true[nid] += w
    return element_counts, terminal_true, terminal_total, unsupported
