"""PSDD circuits: representation, exact inference, and sampling.

A circuit is a DAG of nodes, each normalized for one vtree node:

* ``TerminalNode`` -- a Bernoulli distribution over one variable.
* ``LiteralNode``  -- probability 1 on one polarity of one variable.
* ``DecisionNode`` -- elements ``(prime, sub, log_theta)`` where the prime
  is normalized for the left vtree child and the sub for the right one.

Primes of a decision node are pairwise disjoint (determinism); they need
not be exhaustive, which is how constraint-restricted support (for example
exactly-one label groups) is expressed without explicit false nodes.

All probabilities are kept in log space; evidence evaluation is a single
bottom-up pass, vectorized over a batch of partial assignments encoded as
int8 rows with -1 = unassigned, 0 = false, 1 = true.

Text format (variables 1-based and sign-coded only in the ``L`` line)::

    c psdd
    vtree <filename>
    T <id> <vtree_id> <var> <log_theta_true>
    L <id> <vtree_id> <+/-var1based>
    D <id> <vtree_id> <k> {<prime_id> <sub_id> <log_theta>}*k

Nodes are written in topological order (children first, lowest id first
among ready nodes); the last node line is the root.
"""

from __future__ import annotations

import math
import heapq
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import CircuitFormatError, ZeroEvidenceError
from .vtree import VTree, VTreeInternal, VTreeLeaf
from . import vtree as vtree_io

LOG_ZERO = -np.inf


class Element(NamedTuple):
    prime: int
    sub: int
    log_theta: float


@dataclass(frozen=True)
class TerminalNode:
    id: int
    vtree_id: int
    variable: int
    log_theta_true: float

    @property
    def log_theta_false(self) -> float:
        return math.log1p(-math.exp(self.log_theta_true))


@dataclass(frozen=True)
class LiteralNode:
    id: int
    vtree_id: int
    variable: int
    polarity: bool


@dataclass(frozen=True)
class DecisionNode:
    id: int
    vtree_id: int
    elements: tuple[Element, ...]


PsddNode = TerminalNode | LiteralNode | DecisionNode


class PartialAssignment:
    """A consistent set of (variable, value) literals used as evidence."""

    def __init__(self, literals: Mapping[int, bool] | Iterable[tuple[int, bool]] = ()):
        items = literals.items() if isinstance(literals, Mapping) else literals
        self._literals: dict[int, bool] = {}
        for var, val in items:
            var = int(var)
            val = bool(val)
            if var < 0:
                raise ValueError(f"negative variable index {var}")
            if self._literals.get(var, val) != val:
                raise ValueError(f"variable {var} assigned twice with conflicting values")
            self._literals[var] = val

    def items(self) -> list[tuple[int, bool]]:
        return sorted(self._literals.items())

    def get(self, var: int):
        return self._literals.get(var)

    def __len__(self):
        return len(self._literals)

    def __contains__(self, var: int):
        return var in self._literals

    def __eq__(self, other):
        if not isinstance(other, PartialAssignment):
            return NotImplemented
        return self._literals == other._literals

    def __repr__(self):
        lits = ",".join(f"{'+' if v else '-'}{k}" for k, v in self.items())
        return f"PartialAssignment({lits})"

    def union(self, other: "PartialAssignment") -> "PartialAssignment | None":
        """Combined assignment, or None when the two conflict."""
        merged = dict(self._literals)
        for var, val in other._literals.items():
            if merged.get(var, val) != val:
                return None
            merged[var] = val
        return PartialAssignment(merged)

    def to_evidence(self, num_vars: int) -> np.ndarray:
        """int8 vector with -1 for unassigned variables."""
        ev = np.full(num_vars, -1, dtype=np.int8)
        for var, val in self._literals.items():
            if var >= num_vars:
                raise ValueError(f"variable {var} outside range [0, {num_vars})")
            ev[var] = 1 if val else 0
        return ev


class CompleteAssignment:
    """A full boolean assignment over the circuit's variables."""

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.uint8)
        if arr.ndim != 1 or not np.isin(arr, (0, 1)).all():
            raise ValueError("values must be a flat 0/1 vector")
        self.values = arr

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, CompleteAssignment):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"CompleteAssignment({''.join(map(str, self.values))})"

    def to_partial(self) -> PartialAssignment:
        return PartialAssignment({i: bool(v) for i, v in enumerate(self.values)})


class Circuit:
    """An immutable PSDD: vtree, node table, and root.

    Unreachable nodes are pruned at construction; inference and sampling
    never mutate the circuit, so instances are safe to share across
    threads.
    """

    def __init__(self, vt: VTree, nodes: Iterable[PsddNode], root_id: int):
        self.vtree = vt
        table = {n.id: n for n in nodes}
        if root_id not in table:
            raise ValueError(f"root id {root_id} not among nodes")
        self.root_id = root_id
        self._topo = self._toposort(table, root_id)
        self.nodes: dict[int, PsddNode] = {n.id: n for n in self._topo}

    @staticmethod
    def _toposort(table: dict[int, PsddNode], root_id: int) -> list[PsddNode]:
        order: list[PsddNode] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[int, bool]] = [(root_id, False)]
        while stack:
            nid, processed = stack.pop()
            if processed:
                state[nid] = 2
                order.append(table[nid])
                continue
            if state.get(nid) == 2:
                continue
            if state.get(nid) == 1:
                raise ValueError(f"cycle through node {nid}")
            node = table.get(nid)
            if node is None:
                raise ValueError(f"dangling node reference {nid}")
            state[nid] = 1
            stack.append((nid, True))
            if isinstance(node, DecisionNode):
                for el in reversed(node.elements):
                    if state.get(el.prime) != 2:
                        stack.append((el.prime, False))
                    if state.get(el.sub) != 2:
                        stack.append((el.sub, False))
        return order

    # -- basic measurements --------------------------------------------------

    @property
    def num_vars(self) -> int:
        return self.vtree.num_vars

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def size(self) -> int:
        """Nodes plus element wires; the budget for one evaluation pass."""
        return len(self.nodes) + sum(
            len(n.elements) for n in self._topo if isinstance(n, DecisionNode)
        )

    @property
    def num_parameters(self) -> int:
        """Free parameters: k-1 per decision node, 1 per terminal."""
        count = 0
        for node in self._topo:
            if isinstance(node, DecisionNode):
                count += len(node.elements) - 1
            elif isinstance(node, TerminalNode):
                count += 1
        return count

    def max_id(self) -> int:
        return max(self.nodes)

    def topo_nodes(self) -> list[PsddNode]:
        """Nodes in children-before-parents order; root last."""
        return list(self._topo)

    def replace_nodes(self, replacements: Mapping[int, PsddNode],
                      extra: Iterable[PsddNode] = ()) -> "Circuit":
        """New circuit with some nodes swapped by id plus new nodes added."""
        table = dict(self.nodes)
        table.update({nid: node for nid, node in replacements.items()})
        for node in extra:
            table[node.id] = node
        return Circuit(self.vtree, table.values(), self.root_id)

    # -- evaluation ------------------------------------------------------------

    def evaluate_all(self, evidence: np.ndarray,
                     record: dict | None = None) -> dict[int, np.ndarray]:
        """log value of every node on a batch of evidence rows.

        `evidence` is int8 of shape [B, num_vars] with entries in
        {-1, 0, 1}; -1 marginalizes the variable.  One bottom-up pass;
        if `record` is given, its "visits" entry is set to the number of
        node visits.
        """
        ev = np.asarray(evidence, dtype=np.int8)
        if ev.ndim != 2 or ev.shape[1] != self.num_vars:
            raise ValueError(f"evidence shape {ev.shape} != (B, {self.num_vars})")
        vals: dict[int, np.ndarray] = {}
        visits = 0
        for node in self._topo:
            visits += 1
            if isinstance(node, LiteralNode):
                col = ev[:, node.variable]
                ok = (col == -1) | (col == np.int8(node.polarity))
                v = np.where(ok, 0.0, LOG_ZERO)
            elif isinstance(node, TerminalNode):
                col = ev[:, node.variable]
                v = np.where(
                    col == 1,
                    node.log_theta_true,
                    np.where(col == 0, node.log_theta_false, 0.0),
                )
            else:
                v = None
                for el in node.elements:
                    term = vals[el.prime] + vals[el.sub] + el.log_theta
                    v = term if v is None else np.logaddexp(v, term)
            vals[node.id] = v
        if record is not None:
            record["visits"] = visits
        return vals

    def evaluate(self, evidence: np.ndarray, record: dict | None = None) -> np.ndarray:
        """log Pr of each evidence row (single row or [B, n] batch)."""
        ev = np.asarray(evidence, dtype=np.int8)
        single = ev.ndim == 1
        if single:
            ev = ev[None, :]
        out = self.evaluate_all(ev, record=record)[self.root_id]
        return out[0] if single else out

    def __repr__(self):
        return f"Circuit(vars={self.num_vars}, nodes={self.num_nodes}, params={self.num_parameters})"


# -- queries -----------------------------------------------------------------

def evidence_log_probability(circuit: Circuit, v: PartialAssignment) -> float:
    """log Pr(v) in one bottom-up pass; empty evidence gives log 1 = 0."""
    return float(circuit.evaluate(v.to_evidence(circuit.num_vars)))


def conditional_probability(circuit: Circuit, q: PartialAssignment,
                            v: PartialAssignment) -> float:
    """Pr(q | v) = Pr(q and v) / Pr(v).

    Conflicting q/v literals simply give 0; evidence with zero probability
    raises ZeroEvidenceError.
    """
    log_v = evidence_log_probability(circuit, v)
    if log_v == LOG_ZERO:
        raise ZeroEvidenceError("Pr(evidence) = 0; conditional undefined")
    joint = q.union(v)
    if joint is None:
        return 0.0
    log_qv = evidence_log_probability(circuit, joint)
    return math.exp(log_qv - log_v)


def _default_groups(num_vars: int) -> tuple[tuple[int, ...], ...]:
    return tuple((i,) for i in range(num_vars))


def _group_value_bits(group: tuple[int, ...], j: int) -> np.ndarray:
    """Bit pattern of value j for a sampling group."""
    if len(group) == 1:
        return np.array([j], dtype=np.int8)
    bits = np.zeros(len(group), dtype=np.int8)
    bits[j] = 1
    return bits


def complete_evidence_batch(circuit: Circuit, evidence: np.ndarray,
                            fl_spec=None, rng=None) -> np.ndarray:
    """Complete a batch of identical-pattern evidence rows by sequential
    conditional sampling over categorical variables in random order.

    Every row must assign the same variable subset (values may differ).
    Returns uint8 rows extending the evidence; see `generative_query` for
    the single-assignment wrapper.
    """
    rng = np.random.default_rng(rng)
    ev = np.array(evidence, dtype=np.int8, copy=True)
    if ev.ndim == 1:
        ev = ev[None, :]
    pattern = ev[0] >= 0
    if not ((ev >= 0) == pattern[None, :]).all():
        raise ValueError("evidence rows must share one assigned-variable pattern")
    base_logp = circuit.evaluate(ev)
    if np.isneginf(base_logp).any():
        raise ZeroEvidenceError("Pr(evidence) = 0; cannot sample a completion")

    groups = _default_groups(circuit.num_vars) if fl_spec is None else tuple(
        tuple(g) for g in fl_spec.sampling_groups()
    )
    covered = sorted(v for g in groups for v in g)
    if covered != list(range(circuit.num_vars)):
        raise ValueError("sampling groups must partition the circuit variables")

    pending = [g for g in groups if not pattern[list(g)].all()]
    order = rng.permutation(len(pending))
    for gi in order:
        group = pending[int(gi)]
        k = 2 if len(group) == 1 else len(group)
        cols = list(group)
        log_weights = np.empty((k, ev.shape[0]))
        for j in range(k):
            bits = _group_value_bits(group, j)
            assigned = ev[:, cols] >= 0
            conflict = (assigned & (ev[:, cols] != bits[None, :])).any(axis=1)
            trial = ev.copy()
            trial[:, cols] = bits[None, :]
            log_weights[j] = np.where(conflict, LOG_ZERO, circuit.evaluate(trial))
        top = log_weights.max(axis=0)
        if np.isneginf(top).any():
            raise RuntimeError(
                "no group value has positive conditional probability; "
                "circuit support violates the sampling invariant"
            )
        probs = np.exp(log_weights - top[None, :])
        probs /= probs.sum(axis=0)[None, :]
        u = rng.random(ev.shape[0])
        choice = (u[None, :] > np.cumsum(probs, axis=0)).sum(axis=0)
        choice = np.minimum(choice, k - 1)
        for j in range(k):
            rows = choice == j
            if rows.any():
                ev[np.ix_(rows, cols)] = _group_value_bits(group, j)[None, :]
    return ev.astype(np.uint8)


def generative_query(circuit: Circuit, v: PartialAssignment,
                     fl_spec=None, rng=None) -> CompleteAssignment:
    """Complete `v` by sampling each unassigned categorical variable from
    its exact conditional given the evidence accumulated so far.

    Variables are visited in a seeded random order; for indicator groups
    the k candidate values are the one-hot patterns, for plain booleans
    they are false/true.  The result extends `v` and has Pr > 0.
    """
    ev = v.to_evidence(circuit.num_vars)
    out = complete_evidence_batch(circuit, ev[None, :], fl_spec=fl_spec, rng=rng)
    return CompleteAssignment(out[0])


def sample_joint_batch(circuit: Circuit, count: int, rng=None) -> np.ndarray:
    """Ancestral top-down samples from the joint; uint8 [count, n]."""
    rng = np.random.default_rng(rng)
    out = np.zeros((count, circuit.num_vars), dtype=np.uint8)

    def descend(nid: int, idx: np.ndarray):
        node = circuit.nodes[nid]
        if isinstance(node, LiteralNode):
            out[idx, node.variable] = 1 if node.polarity else 0
        elif isinstance(node, TerminalNode):
            theta = math.exp(node.log_theta_true)
            out[idx, node.variable] = rng.random(len(idx)) < theta
        else:
            probs = np.array([math.exp(el.log_theta) for el in node.elements])
            probs = probs / probs.sum()
            u = rng.random(len(idx))
            choice = (u[:, None] > np.cumsum(probs)[None, :]).sum(axis=1)
            choice = np.minimum(choice, len(node.elements) - 1)
            for e, el in enumerate(node.elements):
                sub_idx = idx[choice == e]
                if len(sub_idx):
                    descend(el.prime, sub_idx)
                    descend(el.sub, sub_idx)

    if count:
        descend(circuit.root_id, np.arange(count))
    return out


def sample_joint(circuit: Circuit, rng=None) -> CompleteAssignment:
    """One exact sample from Pr(FL) by top-down ancestral sampling."""
    return CompleteAssignment(sample_joint_batch(circuit, 1, rng=rng)[0])


# -- validation ----------------------------------------------------------------

_DETERMINISM_ENUM_LIMIT = 20  # max prime variables enumerated per decision node

NORMALIZATION_TOL = 1e-9


def validate(circuit: Circuit) -> list[str]:
    """Check the PSDD invariants; an empty list means the circuit is valid.

    Covers parameter normalization, vtree respect (decomposability by
    scope), determinism (prime disjointness, by enumeration for decision
    nodes with at most 20 prime variables), and reference/acyclicity
    problems surface when the circuit is constructed.
    """
    violations: list[str] = []
    vt = circuit.vtree
    if circuit.nodes[circuit.root_id].vtree_id != vt.root_id:
        violations.append(
            f"root node {circuit.root_id} is not normalized for the vtree root"
        )
    # full-circuit node values per enumerated left scope, keyed by vtree id
    vals_cache: dict[int, dict[int, np.ndarray]] = {}

    def prime_values(left_vtree_id: int) -> dict[int, np.ndarray]:
        cached = vals_cache.get(left_vtree_id)
        if cached is None:
            prime_vars = sorted(vt.variables(left_vtree_id))
            worlds = np.full((1 << len(prime_vars), circuit.num_vars), -1, dtype=np.int8)
            grid = (np.arange(worlds.shape[0])[:, None] >> np.arange(len(prime_vars))) & 1
            worlds[:, prime_vars] = grid.astype(np.int8)
            cached = circuit.evaluate_all(worlds)
            vals_cache[left_vtree_id] = cached
        return cached

    for node in circuit.topo_nodes():
        nid = node.id
        try:
            vnode = vt.node(node.vtree_id)
        except KeyError:
            violations.append(f"node {nid}: unknown vtree node {node.vtree_id}")
            continue
        if isinstance(node, (TerminalNode, LiteralNode)):
            if not isinstance(vnode, VTreeLeaf):
                violations.append(f"node {nid}: leaf distribution on internal vtree node")
            elif vnode.var != node.variable:
                violations.append(
                    f"node {nid}: variable {node.variable} does not match vtree leaf {vnode.var}"
                )
            if isinstance(node, TerminalNode):
                if not (node.log_theta_true < 0.0 and math.isfinite(node.log_theta_true)):
                    violations.append(f"node {nid}: terminal theta must lie in (0,1)")
            continue
        # decision node
        if not isinstance(vnode, VTreeInternal):
            violations.append(f"node {nid}: decision node on vtree leaf")
            continue
        if not node.elements:
            violations.append(f"node {nid}: decision node with no elements")
            continue
        for e, el in enumerate(node.elements):
            prime = circuit.nodes.get(el.prime)
            sub = circuit.nodes.get(el.sub)
            if prime is None or sub is None:
                violations.append(f"node {nid} element {e}: dangling child reference")
                continue
            if prime.vtree_id != vnode.left_id:
                violations.append(
                    f"node {nid} element {e}: prime not normalized for left vtree child"
                )
            if sub.vtree_id != vnode.right_id:
                violations.append(
                    f"node {nid} element {e}: sub not normalized for right vtree child"
                )
        total = sum(math.exp(el.log_theta) for el in node.elements)
        if abs(total - 1.0) > NORMALIZATION_TOL:
            violations.append(
                f"node {nid}: element parameters sum to {total:.12f}, not 1"
            )
        num_prime_vars = len(vt.variables(vnode.left_id))
        if len(node.elements) > 1 and num_prime_vars <= _DETERMINISM_ENUM_LIMIT:
            vals = prime_values(vnode.left_id)
            overlap = np.zeros(1 << num_prime_vars, dtype=np.int32)
            for el in node.elements:
                if el.prime in circuit.nodes:
                    overlap += ~np.isneginf(vals[el.prime])
            if (overlap > 1).any():
                violations.append(
                    f"node {nid}: primes overlap on {int((overlap > 1).sum())} assignments"
                )
    return violations


# -- serialization -------------------------------------------------------------

def to_text(circuit: Circuit, vtree_name: str = "vtree.txt") -> str:
    """Serialize in topological order with lowest-id-first tie breaking."""
    indeg: dict[int, int] = {nid: 0 for nid in circuit.nodes}
    dependents: dict[int, list[int]] = {nid: [] for nid in circuit.nodes}
    for node in circuit.topo_nodes():
        if isinstance(node, DecisionNode):
            for el in node.elements:
                for child in (el.prime, el.sub):
                    indeg[node.id] += 1
                    dependents[child].append(node.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    lines = ["c psdd", f"vtree {vtree_name}"]
    emitted = []
    while ready:
        nid = heapq.heappop(ready)
        emitted.append(nid)
        node = circuit.nodes[nid]
        if isinstance(node, TerminalNode):
            lines.append(f"T {node.id} {node.vtree_id} {node.variable} {float(node.log_theta_true)!r}")
        elif isinstance(node, LiteralNode):
            signed = (node.variable + 1) * (1 if node.polarity else -1)
            lines.append(f"L {node.id} {node.vtree_id} {signed}")
        else:
            parts = [f"D {node.id} {node.vtree_id} {len(node.elements)}"]
            for el in node.elements:
                parts.append(f"{el.prime} {el.sub} {float(el.log_theta)!r}")
            lines.append(" ".join(parts))
        for parent in dependents[nid]:
            indeg[parent] -= 1
            if indeg[parent] == 0:
                heapq.heappush(ready, parent)
    if len(emitted) != len(circuit.nodes):
        raise CircuitFormatError("circuit contains a reference cycle")
    if emitted[-1] != circuit.root_id:
        # root must come last: it is the unique node nothing depends on
        raise CircuitFormatError("internal error: root not last in topological order")
    return "\n".join(lines) + "\n"


def from_text(text: str, vt: VTree) -> tuple[Circuit, str | None]:
    """Parse a circuit file; returns the circuit and the vtree reference."""
    nodes: list[PsddNode] = []
    vtree_ref: str | None = None
    last_id: int | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        parts = line.split()
        try:
            if parts[0] == "vtree":
                vtree_ref = parts[1]
                continue
            if parts[0] == "T" and len(parts) == 5:
                node = TerminalNode(int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]))
            elif parts[0] == "L" and len(parts) == 4:
                signed = int(parts[3])
                if signed == 0:
                    raise ValueError
                node = LiteralNode(int(parts[1]), int(parts[2]), abs(signed) - 1, signed > 0)
            elif parts[0] == "D" and len(parts) >= 4:
                k = int(parts[3])
                if len(parts) != 4 + 3 * k:
                    raise ValueError
                elements = tuple(
                    Element(int(parts[4 + 3 * i]), int(parts[5 + 3 * i]), float(parts[6 + 3 * i]))
                    for i in range(k)
                )
                node = DecisionNode(int(parts[1]), int(parts[2]), elements)
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise CircuitFormatError(f"bad circuit line {lineno}: {raw!r}") from None
        nodes.append(node)
        last_id = node.id
    if last_id is None:
        raise CircuitFormatError("circuit file contains no nodes")
    try:
        return Circuit(vt, nodes, last_id), vtree_ref
    except ValueError as exc:
        raise CircuitFormatError(str(exc)) from None


def save(circuit: Circuit, path, vtree_path=None) -> None:
    """Write the circuit and (optionally) its vtree next to it."""
    path = os.fspath(path)
    if vtree_path is None:
        vtree_path = os.path.splitext(path)[0] + ".vtree"
        vtree_io.save(circuit.vtree, vtree_path)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(to_text(circuit, vtree_name=os.path.basename(os.fspath(vtree_path))))


def load(path, vt: VTree | None = None) -> Circuit:
    path = os.fspath(path)
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    if vt is None:
        ref = None
        for line in text.splitlines():
            if line.startswith("vtree "):
                ref = line.split()[1]
                break
        if ref is None:
            raise CircuitFormatError("circuit file has no vtree reference; pass one")
        vt = vtree_io.load(os.path.join(os.path.dirname(path) or ".", ref))
    circuit, _ = from_text(text, vt)
    return circuit
