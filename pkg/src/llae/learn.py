"""Learning PSDDs from complete binary data.

Parameters have a closed form: each decision element's theta is the
(Laplace-smoothed) fraction of examples that reach the node's context
and satisfy the element's prime.  The log-likelihood decomposes into a
sum of per-node count * log(theta) contributions, which must equal the
direct per-example score; both forms are implemented and tested against
each other.

Structure search greedily applies the best of a bounded candidate pool
of element splits and node clones, scored by normalized likelihood
minus a per-parameter size penalty.  A split conjoins an element's
prime with a literal and its negation, giving each branch a private
copy of the sub so their parameters can diverge; a clone duplicates a
multi-parent node for a subset of its parent references.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .circuit import (
    Circuit,
    CompleteAssignment,
    DecisionNode,
    Element,
    LiteralNode,
    TerminalNode,
)
from .errors import RejectedOperationError
from .vtree import VTree, VTreeLeaf

THETA_FLOOR = 1e-6
CONVERGENCE_THRESHOLD = 1e-4


class BinaryDataset:
    """Weighted complete assignments over a fixed variable count."""

    def __init__(self, assignments: Iterable[tuple[CompleteAssignment, int]]):
        rows = []
        weights = []
        for a, mult in assignments:
            if mult <= 0:
                raise ValueError("multiplicities must be positive")
            rows.append(a.values if isinstance(a, CompleteAssignment) else a)
            weights.append(mult)
        if not rows:
            raise ValueError("dataset must be non-empty")
        self.rows = np.asarray(rows, dtype=np.uint8)
        if self.rows.ndim != 2 or not np.isin(self.rows, (0, 1)).all():
            raise ValueError("assignments must be equal-length 0/1 vectors")
        self.weights = np.asarray(weights, dtype=np.float64)

    @classmethod
    def from_rows(cls, rows, weights=None) -> "BinaryDataset":
        rows = np.asarray(rows, dtype=np.uint8)
        if weights is None:
            weights = np.ones(len(rows))
        return cls(zip(rows, np.asarray(weights, dtype=np.float64)))

    @property
    def num_vars(self) -> int:
        return self.rows.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def __len__(self):
        return len(self.rows)

    def compress(self) -> "BinaryDataset":
        """Merge duplicate rows, summing their weights."""
        uniq, inverse = np.unique(self.rows, axis=0, return_inverse=True)
        weights = np.zeros(len(uniq))
        np.add.at(weights, inverse, self.weights)
        return BinaryDataset.from_rows(uniq, weights)


def split_train_valid(data: BinaryDataset, fraction: float,
                      rng=None) -> tuple[BinaryDataset, BinaryDataset]:
    """Row-level split; fraction 0 validates on the training data itself."""
    if not 0 <= fraction <= 0.5:
        raise ValueError("validation fraction must be in [0, 0.5]")
    if fraction == 0 or len(data) < 2:
        return data, data
    rng = np.random.default_rng(rng)
    order = rng.permutation(len(data))
    target = fraction * data.total_weight
    cum = np.cumsum(data.weights[order])
    n_valid = max(1, int(np.searchsorted(cum, target) + 1))
    n_valid = min(n_valid, len(data) - 1)
    valid_idx = np.sort(order[:n_valid])
    train_idx = np.sort(order[n_valid:])
    return (
        BinaryDataset.from_rows(data.rows[train_idx], data.weights[train_idx]),
        BinaryDataset.from_rows(data.rows[valid_idx], data.weights[valid_idx]),
    )


@dataclass
class LearnConfig:
    laplace_alpha: float = 1.0
    size_penalty: float = 0.02
    max_iterations: int = 100
    time_budget_seconds: float | None = None
    validation_fraction: float = 0.1
    split_candidates: int = 20
    clone_candidates: int = 10

    def __post_init__(self):
        if self.laplace_alpha < 0 or self.size_penalty < 0:
            raise ValueError("alpha and size_penalty must be nonnegative")
        if not 0 <= self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must be in [0, 0.5]")


@dataclass
class NodeCounts:
    """Weighted data flow through a circuit on complete examples.

    element_counts[q][i] = weight of examples in node q's context that
    satisfy element i's prime; terminal counts are (true, reached)
    weights.  Examples outside the circuit's support carry no flow and
    are reported in unsupported_weight.
    """

    element_counts: dict[int, np.ndarray] = field(default_factory=dict)
    terminal_true: dict[int, float] = field(default_factory=dict)
    terminal_total: dict[int, float] = field(default_factory=dict)
    unsupported_weight: float = 0.0
    total_weight: float = 0.0


def compute_counts(circuit: Circuit, data: BinaryDataset) -> NodeCounts:
    if data.num_vars != circuit.num_vars:
        raise ValueError(
            f"dataset has {data.num_vars} variables, circuit {circuit.num_vars}"
        )
    rows = data.rows
    w = data.weights
    topo = circuit.topo_nodes()

    sat: dict[int, np.ndarray] = {}
    for node in topo:
        if isinstance(node, LiteralNode):
            sat[node.id] = rows[:, node.variable] == np.uint8(node.polarity)
        elif isinstance(node, TerminalNode):
            sat[node.id] = np.ones(len(rows), dtype=bool)
        else:
            acc = np.zeros(len(rows), dtype=bool)
            for el in node.elements:
                acc |= sat[el.prime] & sat[el.sub]
            sat[node.id] = acc

    counts = NodeCounts(total_weight=data.total_weight)
    reached: dict[int, np.ndarray] = {n.id: np.zeros(len(rows), dtype=bool) for n in topo}
    reached[circuit.root_id] = sat[circuit.root_id]
    counts.unsupported_weight = float(w[~sat[circuit.root_id]].sum())
    for node in reversed(topo):  # parents before children
        if isinstance(node, DecisionNode):
            per_element = np.empty(len(node.elements))
            for i, el in enumerate(node.elements):
                flow = reached[node.id] & sat[el.prime]
                reached[el.prime] |= flow
                reached[el.sub] |= flow
                per_element[i] = float(w[flow].sum())
            counts.element_counts[node.id] = per_element
        elif isinstance(node, TerminalNode):
            mask = reached[node.id]
            counts.terminal_total[node.id] = float(w[mask].sum())
            counts.terminal_true[node.id] = float(
                w[mask & (rows[:, node.variable] == 1)].sum()
            )
    return counts


def _fit_theta(count_vector: np.ndarray, alpha: float) -> np.ndarray:
    k = len(count_vector)
    denom = count_vector.sum() + k * alpha
    if denom <= 0:
        theta = np.full(k, 1.0 / k)
    else:
        theta = (count_vector + alpha) / denom
    theta = np.clip(theta, THETA_FLOOR, 1.0 - THETA_FLOOR)
    return theta / theta.sum()


def _fit_from_counts(circuit: Circuit, counts: NodeCounts,
                     alpha: float) -> tuple[Circuit, float]:
    """Refit thetas from one counts pass; also returns the training LL of
    the refit circuit (counts do not depend on parameters)."""
    replacements: dict[int, object] = {}
    ll = 0.0
    for node in circuit.topo_nodes():
        if isinstance(node, DecisionNode):
            c = counts.element_counts[node.id]
            theta = _fit_theta(c, alpha)
            log_theta = np.log(theta)
            ll += float((c * log_theta).sum())
            replacements[node.id] = DecisionNode(
                node.id,
                node.vtree_id,
                tuple(
                    Element(el.prime, el.sub, lt)
                    for el, lt in zip(node.elements, log_theta)
                ),
            )
        elif isinstance(node, TerminalNode):
            total = counts.terminal_total[node.id]
            true = counts.terminal_true[node.id]
            denom = total + 2 * alpha
            t = (true + alpha) / denom if denom > 0 else 0.5
            t = min(max(t, THETA_FLOOR), 1.0 - THETA_FLOOR)
            ll += true * math.log(t) + (total - true) * math.log1p(-t)
            replacements[node.id] = TerminalNode(node.id, node.vtree_id, node.variable,
                                                 math.log(t))
    if counts.unsupported_weight > 0:
        ll = -math.inf
    return circuit.replace_nodes(replacements), ll


def learn_parameters(circuit: Circuit, data: BinaryDataset,
                     alpha: float = 1.0) -> Circuit:
    """Closed-form (maximum-likelihood when alpha=0) parameter refit.

    Thetas are Laplace-smoothed by alpha, clipped away from {0, 1}, and
    renormalized so every decision node still sums to one.
    """
    if data.total_weight <= 0:
        raise ValueError("dataset has zero total weight")
    fitted, _ = _fit_from_counts(circuit, compute_counts(circuit, data), alpha)
    return fitted


def log_likelihood(circuit: Circuit, data: BinaryDataset) -> float:
    """Node-sum likelihood: sum of count * log(theta) over all elements.

    Equals the per-example sum of log Pr(example); -inf when any example
    falls outside the circuit's support.
    """
    counts = compute_counts(circuit, data)
    if counts.unsupported_weight > 0:
        return -math.inf
    ll = 0.0
    for node in circuit.topo_nodes():
        if isinstance(node, DecisionNode):
            for el, c in zip(node.elements, counts.element_counts[node.id]):
                if c:
                    ll += c * el.log_theta
        elif isinstance(node, TerminalNode):
            true = counts.terminal_true[node.id]
            false = counts.terminal_total[node.id] - true
            if true:
                ll += true * node.log_theta_true
            if false:
                ll += false * node.log_theta_false
    return ll


def score(circuit: Circuit, data: BinaryDataset, config: LearnConfig) -> float:
    """Normalized log-likelihood penalized by model size."""
    ll = log_likelihood(circuit, data)
    if ll == -math.inf:
        return -math.inf
    return ll / data.total_weight - config.size_penalty * circuit.num_parameters


# -- structure operations --------------------------------------------------------

_UNSAT = object()


def _conjoin(circuit: Circuit, nid: int, var: int, value: bool, alloc,
             out: list, memo: dict):
    """Node id for (node AND var=value), or _UNSAT; new nodes go to `out`."""
    key = (nid, var, value)
    if key in memo:
        return memo[key]
    node = circuit.nodes[nid]
    if isinstance(node, LiteralNode):
        result = nid if (node.variable != var or node.polarity == value) else _UNSAT
    elif isinstance(node, TerminalNode):
        if node.variable == var:
            lit = LiteralNode(next(alloc), node.vtree_id, var, value)
            out.append(lit)
            result = lit.id
        else:
            result = nid
    else:
        left_vars = circuit.vtree.variables(circuit.vtree.node(node.vtree_id).left_id)
        into_prime = var in left_vars
        kept: list[tuple[int, int, float]] = []
        for el in node.elements:
            if into_prime:
                child = _conjoin(circuit, el.prime, var, value, alloc, out, memo)
                if child is not _UNSAT:
                    kept.append((child, el.sub, math.exp(el.log_theta)))
            else:
                child = _conjoin(circuit, el.sub, var, value, alloc, out, memo)
                if child is not _UNSAT:
                    kept.append((el.prime, child, math.exp(el.log_theta)))
        if not kept:
            result = _UNSAT
        elif all(k[:2] == (el.prime, el.sub) for k, el in zip(kept, node.elements)) \
                and len(kept) == len(node.elements):
            result = nid  # literal already implied; node unchanged
        else:
            total = sum(t for _, _, t in kept)
            new = DecisionNode(next(alloc), node.vtree_id, tuple(
                Element(p, s, math.log(t / total)) for p, s, t in kept
            ))
            out.append(new)
            result = new.id
    memo[key] = result
    return result


def _copy_node(circuit: Circuit, nid: int, alloc, out: list) -> int:
    """Shallow duplicate (fresh id, shared children); literals are shared."""
    node = circuit.nodes[nid]
    if isinstance(node, LiteralNode):
        return nid
    copy = replace(node, id=next(alloc))
    out.append(copy)
    return copy.id


def _copy_subdag(circuit: Circuit, nid: int, alloc, out: list,
                 memo: dict | None = None) -> int:
    """Recursive copy with fresh ids, keeping the fragment's internal
    sharing; parameterless literals stay shared with the original."""
    if memo is None:
        memo = {}
    if nid in memo:
        return memo[nid]
    node = circuit.nodes[nid]
    if isinstance(node, LiteralNode):
        memo[nid] = nid
        return nid
    if isinstance(node, TerminalNode):
        copy = replace(node, id=next(alloc))
    else:
        copy = DecisionNode(next(alloc), node.vtree_id, tuple(
            Element(
                _copy_subdag(circuit, el.prime, alloc, out, memo),
                _copy_subdag(circuit, el.sub, alloc, out, memo),
                el.log_theta,
            )
            for el in node.elements
        ))
    out.append(copy)
    memo[nid] = copy.id
    return copy.id


def split(circuit: Circuit, decision_node: int, element: int,
          partition_literal: tuple[int, bool],
          data: BinaryDataset | None = None, alpha: float = 1.0) -> Circuit:
    """Split one element on a literal over its prime's scope.

    The element (p, s) becomes (p and lit, s'), (p and not-lit, s'')
    where s', s'' are private recursive copies of s, so each branch can
    fit its own conditional distribution.  With `data` the whole
    parameter set is re-fit in closed form (counts outside the new
    spine are unchanged, so this equals a local refit); otherwise the
    element's mass is halved between the branches.
    """
    var, value = partition_literal
    node = circuit.nodes[decision_node]
    if not isinstance(node, DecisionNode):
        raise ValueError(f"node {decision_node} is not a decision node")
    if not 0 <= element < len(node.elements):
        raise ValueError(f"element index {element} out of range")
    el = node.elements[element]
    prime_scope = circuit.vtree.variables(circuit.nodes[el.prime].vtree_id)
    if var not in prime_scope:
        raise ValueError(f"variable {var} outside the prime scope {sorted(prime_scope)}")

    alloc = itertools.count(circuit.max_id() + 1)
    new_nodes: list = []
    memo: dict = {}
    pos = _conjoin(circuit, el.prime, var, value, alloc, new_nodes, memo)
    neg = _conjoin(circuit, el.prime, var, not value, alloc, new_nodes, memo)
    if pos is _UNSAT or neg is _UNSAT:
        raise RejectedOperationError(
            f"splitting on variable {var} leaves an unsatisfiable branch"
        )
    half = el.log_theta - math.log(2.0)
    elements = list(node.elements)
    elements[element:element + 1] = [
        Element(pos, _copy_subdag(circuit, el.sub, alloc, new_nodes), half),
        Element(neg, _copy_subdag(circuit, el.sub, alloc, new_nodes), half),
    ]
    result = circuit.replace_nodes(
        {decision_node: DecisionNode(decision_node, node.vtree_id, tuple(elements))},
        extra=new_nodes,
    )
    return learn_parameters(result, data, alpha) if data is not None else result


def parent_references(circuit: Circuit, nid: int) -> list[tuple[int, int, str]]:
    """(parent id, element index, "prime"|"sub") triples, deterministic order."""
    refs = []
    for node in circuit.topo_nodes():
        if isinstance(node, DecisionNode):
            for i, el in enumerate(node.elements):
                if el.prime == nid:
                    refs.append((node.id, i, "prime"))
                if el.sub == nid:
                    refs.append((node.id, i, "sub"))
    return sorted(refs)


def clone(circuit: Circuit, nid: int, parent_subset: Sequence[tuple[int, int, str]],
          data: BinaryDataset | None = None, alpha: float = 1.0) -> Circuit:
    """Duplicate a node and redirect a proper subset of its parents.

    The copy shares the original's children; a refit afterwards lets the
    two contexts hold different parameters.
    """
    refs = parent_references(circuit, nid)
    if len(refs) < 2:
        raise RejectedOperationError(f"node {nid} has {len(refs)} parent reference(s)")
    subset = sorted(set(parent_subset))
    if not subset or len(subset) >= len(refs):
        raise RejectedOperationError("parent subset must be proper and non-empty")
    bad = [r for r in subset if r not in refs]
    if bad:
        raise ValueError(f"not parent references of node {nid}: {bad}")

    alloc = itertools.count(circuit.max_id() + 1)
    new_nodes: list = []
    copy_id = _copy_node(circuit, nid, alloc, new_nodes)
    if copy_id == nid:  # literal: nothing to clone
        raise RejectedOperationError("cloning a literal has no effect")
    replacements: dict[int, object] = {}
    for parent_id, element_index, slot in subset:
        parent = replacements.get(parent_id, circuit.nodes[parent_id])
        elements = list(parent.elements)
        el = elements[element_index]
        elements[element_index] = el._replace(**{slot: copy_id})
        replacements[parent_id] = DecisionNode(parent_id, parent.vtree_id, tuple(elements))
    result = circuit.replace_nodes(replacements, extra=new_nodes)
    return learn_parameters(result, data, alpha) if data is not None else result


# -- base circuits -----------------------------------------------------------------

def _exactly_one_nodes(vt: VTree, subtree_id: int, alloc) -> tuple[int, list]:
    """Uniform exactly-one fragment over a vtree subtree's variables."""
    out: list = []

    def all_false(vnid: int) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            lit = LiteralNode(next(alloc), vnid, node.var, False)
            out.append(lit)
            return lit.id
        dec = DecisionNode(next(alloc), vnid, (
            Element(all_false(node.left_id), all_false(node.right_id), 0.0),
        ))
        out.append(dec)
        return dec.id

    def one_hot(vnid: int) -> int:
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            lit = LiteralNode(next(alloc), vnid, node.var, True)
            out.append(lit)
            return lit.id
        n_left = len(vt.variables(node.left_id))
        n_right = len(vt.variables(node.right_id))
        p_left = n_left / (n_left + n_right)
        dec = DecisionNode(next(alloc), vnid, (
            Element(one_hot(node.left_id), all_false(node.right_id), math.log(p_left)),
            Element(all_false(node.left_id), one_hot(node.right_id), math.log(1 - p_left)),
        ))
        out.append(dec)
        return dec.id

    node = vt.node(subtree_id)
    if isinstance(node, VTreeLeaf):
        # a single-variable group: "exactly one" forces the variable true
        lit = LiteralNode(next(alloc), subtree_id, node.var, True)
        out.append(lit)
        return lit.id, out
    return one_hot(subtree_id), out


def compile_exactly_one(vt: VTree, variable_group: Iterable[int]) -> Circuit:
    """PSDD fragment whose support is the one-hot assignments of a group.

    The group must form its own vtree subtree; parameters are uniform
    over the group's members.
    """
    group = set(variable_group)
    subtree_id = vt.subtree_for(group)
    if subtree_id is None:
        raise ValueError(
            f"variables {sorted(group)} do not form a vtree subtree; "
            "build the vtree with the group contiguous"
        )
    alloc = itertools.count(0)
    root, nodes = _exactly_one_nodes(vt, subtree_id, alloc)
    return Circuit(vt, nodes, root)


def factorized_circuit(vt: VTree, constraint_groups: Iterable[Iterable[int]] = ()) -> Circuit:
    """Independent Bernoulli(0.5) circuit, with optional exactly-one
    fragments replacing the factorization over constrained groups."""
    groups = [frozenset(g) for g in constraint_groups]
    roots: dict[frozenset, int] = {}
    for g in groups:
        sid = vt.subtree_for(g)
        if sid is None:
            raise ValueError(f"constraint group {sorted(g)} is not a vtree subtree")
        roots[g] = sid
    by_subtree = {sid: g for g, sid in roots.items()}
    alloc = itertools.count(0)
    nodes: list = []

    def build(vnid: int) -> int:
        if vnid in by_subtree:
            root, fragment = _exactly_one_nodes(vt, vnid, alloc)
            nodes.extend(fragment)
            return root
        node = vt.node(vnid)
        if isinstance(node, VTreeLeaf):
            term = TerminalNode(next(alloc), vnid, node.var, math.log(0.5))
            nodes.append(term)
            return term.id
        dec = DecisionNode(next(alloc), vnid, (
            Element(build(node.left_id), build(node.right_id), 0.0),
        ))
        nodes.append(dec)
        return dec.id

    return Circuit(vt, nodes, build(vt.root_id))


# -- greedy structure search ---------------------------------------------------------

def _candidate_operations(circuit: Circuit, counts: NodeCounts, config: LearnConfig):
    """Bounded candidate pool: splits on the highest-count elements over
    every variable in the prime scope, clones of the most-referenced
    nodes (redirecting the first half of their parent references)."""
    ranked_elements = sorted(
        (
            (-counts.element_counts[node.id][i], node.id, i)
            for node in circuit.topo_nodes()
            if isinstance(node, DecisionNode)
            for i in range(len(node.elements))
        ),
    )[: config.split_candidates]
    for _, nid, i in ranked_elements:
        el = circuit.nodes[nid].elements[i]
        scope = sorted(circuit.vtree.variables(circuit.nodes[el.prime].vtree_id))
        for var in scope:
            yield ("split", nid, i, var)

    ref_counts: dict[int, int] = {}
    for node in circuit.topo_nodes():
        if isinstance(node, DecisionNode):
            for el in node.elements:
                ref_counts[el.prime] = ref_counts.get(el.prime, 0) + 1
                ref_counts[el.sub] = ref_counts.get(el.sub, 0) + 1
    shared = sorted(
        ((-c, nid) for nid, c in ref_counts.items()
         if c >= 2 and not isinstance(circuit.nodes[nid], LiteralNode)),
    )[: config.clone_candidates]
    for _, nid in shared:
        refs = parent_references(circuit, nid)
        yield ("clone", nid, tuple(refs[: len(refs) // 2]))


def _apply_and_score(circuit: Circuit, op, train: BinaryDataset,
                     config: LearnConfig) -> tuple[Circuit, float]:
    """Apply op without refit, then fit and score in one counts pass."""
    if op[0] == "split":
        _, nid, i, var = op
        candidate = split(circuit, nid, i, (var, True))
    else:
        _, nid, subset = op
        candidate = clone(circuit, nid, subset)
    fitted, ll = _fit_from_counts(
        candidate, compute_counts(candidate, train), config.laplace_alpha
    )
    if ll == -math.inf:
        return fitted, -math.inf
    penalized = ll / train.total_weight - config.size_penalty * fitted.num_parameters
    return fitted, penalized


def _describe(op) -> str:
    if op[0] == "split":
        return f"split node {op[1]} element {op[2]} on variable {op[3]}"
    return f"clone node {op[1]} for {len(op[2])} parent reference(s)"


def learn_structure(data: BinaryDataset, vt: VTree, config: LearnConfig,
                    constraint_groups: Iterable[Iterable[int]] = (),
                    rng=None, log_path=None) -> Circuit:
    """Greedy clone/split search from a factorized (or constraint-compiled)
    base circuit.

    Each iteration fits and scores every candidate on the training split
    and applies the best strictly-improving one, so the training score
    never decreases.  The search stops when the validation score gain
    falls below 1e-4, no candidate improves, or a budget runs out; the
    final circuit is re-fit on all data.
    """
    rng = np.random.default_rng(rng)
    train, valid = split_train_valid(data, config.validation_fraction, rng)
    circuit = learn_parameters(
        factorized_circuit(vt, constraint_groups), train, config.laplace_alpha
    )
    train_score = score(circuit, train, config)
    valid_score = score(circuit, valid, config)
    start = time.monotonic()
    log_entries = [{
        "iteration": 0, "operation": "base", "train_score": train_score,
        "valid_score": valid_score, "num_params": circuit.num_parameters,
        "seconds": 0.0,
    }]

    for iteration in range(1, config.max_iterations + 1):
        if config.time_budget_seconds is not None \
                and time.monotonic() - start > config.time_budget_seconds:
            break
        counts = compute_counts(circuit, train)
        best = None
        for op in _candidate_operations(circuit, counts, config):
            try:
                candidate, cand_score = _apply_and_score(circuit, op, train, config)
            except RejectedOperationError:
                continue
            if cand_score > train_score and (best is None or cand_score > best[0]):
                best = (cand_score, op, candidate)
        if best is None:
            break
        train_score, op, circuit = best
        new_valid = score(circuit, valid, config)
        log_entries.append({
            "iteration": iteration, "operation": _describe(op),
            "train_score": train_score, "valid_score": new_valid,
            "num_params": circuit.num_parameters,
            "seconds": round(time.monotonic() - start, 3),
        })
        gain, valid_score = new_valid - valid_score, new_valid
        if gain < CONVERGENCE_THRESHOLD:
            break

    if valid is not train:
        circuit = learn_parameters(circuit, data, config.laplace_alpha)
    if log_path is not None:
        with open(log_path, "w", encoding="ascii") as fh:
            for entry in log_entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return circuit
