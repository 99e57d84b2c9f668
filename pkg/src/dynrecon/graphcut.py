"""Generic pairwise-MRF minimizer: max-flow/min-cut core plus expansion moves.

The solver is independent of any vision semantics: nodes carry per-node
admissible label lists, unary costs come as an array and pairwise costs as a
callback.  Expansion moves reduce to binary s-t min cuts; the max-flow kernel
is a Dinic implementation over float64 capacities (JIT-compiled, single
threaded; run one solver instance per thread).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit


@njit(cache=True)
def _dinic(n, head, nxt, to, cap, s, t):  # pragma: no cover - jitted
    level = np.empty(n, np.int32)
    iters = np.empty(n, np.int64)
    queue = np.empty(n, np.int32)
    stack_node = np.empty(n + 1, np.int32)
    stack_edge = np.empty(n + 1, np.int64)
    flow = 0.0
    while True:
        level[:] = -1
        level[s] = 0
        qh, qt = 0, 0
        queue[qt] = s
        qt += 1
        while qh < qt:
            u = queue[qh]
            qh += 1
            e = head[u]
            while e != -1:
                v = to[e]
                if cap[e] > 0.0 and level[v] < 0:
                    level[v] = level[u] + 1
                    queue[qt] = v
                    qt += 1
                e = nxt[e]
        if level[t] < 0:
            break
        iters[:] = head
        while True:
            depth = 0
            stack_node[0] = s
            pushed = 0.0
            while True:
                u = stack_node[depth]
                if u == t:
                    bottleneck = np.inf
                    for i in range(depth):
                        e = stack_edge[i]
                        if cap[e] < bottleneck:
                            bottleneck = cap[e]
                    for i in range(depth):
                        e = stack_edge[i]
                        cap[e] -= bottleneck
                        cap[e ^ 1] += bottleneck
                    pushed = bottleneck
                    break
                e = iters[u]
                advanced = False
                while e != -1:
                    v = to[e]
                    if cap[e] > 0.0 and level[v] == level[u] + 1:
                        iters[u] = e
                        stack_edge[depth] = e
                        depth += 1
                        stack_node[depth] = v
                        advanced = True
                        break
                    e = nxt[e]
                if advanced:
                    continue
                iters[u] = -1
                level[u] = -1
                if depth == 0:
                    break
                depth -= 1
                iters[stack_node[depth]] = nxt[stack_edge[depth]]
            if pushed <= 0.0:
                break
            flow += pushed
    # min-cut source side = nodes reachable in the residual graph
    reachable = np.zeros(n, np.bool_)
    reachable[s] = True
    qh, qt = 0, 0
    queue[qt] = s
    qt += 1
    while qh < qt:
        u = queue[qh]
        qh += 1
        e = head[u]
        while e != -1:
            v = to[e]
            if cap[e] > 0.0 and not reachable[v]:
                reachable[v] = True
                queue[qt] = v
                qt += 1
            e = nxt[e]
    return flow, reachable


class FlowNetwork:
    """Directed capacitated network with designated source and sink."""

    def __init__(self, n_nodes: int, source: int, sink: int):
        if not (0 <= source < n_nodes and 0 <= sink < n_nodes):
            raise ValueError("source/sink out of range")
        if source == sink:
            raise ValueError("source and sink must differ")
        self.n_nodes = n_nodes
        self.source = source
        self.sink = sink
        self._us: list[np.ndarray] = []
        self._vs: list[np.ndarray] = []
        self._caps: list[np.ndarray] = []
        self._rcaps: list[np.ndarray] = []

    def add_edge(self, u: int, v: int, capacity: float, reverse_capacity: float = 0.0) -> None:
        self.add_edges([u], [v], [capacity], [reverse_capacity])

    def add_edges(self, us, vs, capacities, reverse_capacities=None) -> None:
        us = np.asarray(us, dtype=np.int32)
        vs = np.asarray(vs, dtype=np.int32)
        caps = np.asarray(capacities, dtype=np.float64)
        rcaps = (
            np.zeros_like(caps)
            if reverse_capacities is None
            else np.asarray(reverse_capacities, dtype=np.float64)
        )
        if np.any(caps < 0) or np.any(rcaps < 0):
            raise ValueError("capacities must be non-negative")
        if np.any(us == vs):
            raise ValueError("self loops are not allowed")
        self._us.append(us)
        self._vs.append(vs)
        self._caps.append(caps)
        self._rcaps.append(rcaps)

    def _arrays(self):
        if not self._us:
            return (np.empty(0, np.int32),) * 2 + (np.empty(0, np.float64),) * 2
        return (
            np.concatenate(self._us),
            np.concatenate(self._vs),
            np.concatenate(self._caps),
            np.concatenate(self._rcaps),
        )


def max_flow(network: FlowNetwork) -> tuple[float, np.ndarray]:
    """Maximum s-t flow; returns ``(flow_value, source_side)``.

    ``source_side`` is a boolean mask over nodes marking the source side of a
    minimum cut; the flow value equals the capacity of that cut.
    """
    us, vs, caps, rcaps = network._arrays()
    n = network.n_nodes
    m = len(us)
    to = np.empty(2 * m, np.int32)
    cap = np.empty(2 * m, np.float64)
    nxt = np.full(2 * m, -1, np.int64)
    head = np.full(n, -1, np.int64)
    idx = np.arange(m)
    to[2 * idx] = vs
    to[2 * idx + 1] = us
    cap[2 * idx] = caps
    cap[2 * idx + 1] = rcaps
    # linked adjacency built in reverse so traversal order follows insertion
    for i in range(m - 1, -1, -1):
        e = 2 * i
        nxt[e] = head[us[i]]
        head[us[i]] = e
        nxt[e + 1] = head[vs[i]]
        head[vs[i]] = e + 1
    flow, reachable = _dinic(n, head, nxt, to, cap, network.source, network.sink)
    return float(flow), reachable


class MrfError(ValueError):
    """Invalid MRF problem or labeling."""


PairwiseFn = Callable[[int, int, int, int], float]
PairwiseBatchFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class MrfProblem:
    """Node/unary/pairwise description of a discrete pairwise MRF.

    ``unary`` is an ``(n_nodes, n_labels)`` array (or a callable materialized
    into one).  ``pairwise(p, q, lp, lq)`` returns the cost of labels
    ``lp, lq`` on edge ``(p, q)``; it must be symmetric, zero on the diagonal
    and metric over each node pair's admissible labels for expansion moves to
    be exact (violations are truncated and counted instead of failing).
    ``pairwise_batch(edge_ids, lp, lq)`` is an optional vectorized override
    used in the hot path.
    """

    def __init__(
        self,
        n_nodes: int,
        n_labels: int,
        unary,
        edges,
        pairwise: PairwiseFn | None = None,
        pairwise_batch: PairwiseBatchFn | None = None,
        admissible: np.ndarray | None = None,
    ):
        if pairwise is None and pairwise_batch is None:
            raise MrfError("need a pairwise cost function")
        self.n_nodes = n_nodes
        self.n_labels = n_labels
        if callable(unary):
            self.unary = np.array(
                [[float(unary(p, l)) for l in range(n_labels)] for p in range(n_nodes)]
            )
        else:
            self.unary = np.asarray(unary, dtype=np.float64)
        if self.unary.shape != (n_nodes, n_labels):
            raise MrfError("unary must be (n_nodes, n_labels)")
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n_nodes):
            raise MrfError("edge endpoint out of range")
        self.pairwise = pairwise
        self._batch = pairwise_batch
        if admissible is None:
            admissible = np.ones((n_nodes, n_labels), dtype=bool)
        self.admissible = np.asarray(admissible, dtype=bool)
        if self.admissible.shape != (n_nodes, n_labels):
            raise MrfError("admissible must be (n_nodes, n_labels)")
        if not self.admissible.any(axis=1).all():
            raise MrfError("every node needs at least one admissible label")

    def pairwise_batch(self, edge_ids: np.ndarray, lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
        if self._batch is not None:
            return np.asarray(self._batch(edge_ids, lp, lq), dtype=np.float64)
        out = np.empty(len(edge_ids), dtype=np.float64)
        for i, e in enumerate(edge_ids):
            p, q = self.edges[e]
            out[i] = self.pairwise(int(p), int(q), int(lp[i]), int(lq[i]))
        return out

    def energy(self, labels: np.ndarray) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (self.n_nodes,):
            raise MrfError("labeling has wrong shape")
        if not self.admissible[np.arange(self.n_nodes), labels].all():
            raise MrfError("labeling uses an inadmissible label")
        total = float(self.unary[np.arange(self.n_nodes), labels].sum())
        if len(self.edges):
            eids = np.arange(len(self.edges))
            total += float(
                self.pairwise_batch(eids, labels[self.edges[:, 0]], labels[self.edges[:, 1]]).sum()
            )
        return total

    def validate_metric(self) -> None:
        """Exhaustively check symmetry/zero-diagonal/triangle on every edge.

        Only feasible for small problems; intended for tests.
        """
        for e, (p, q) in enumerate(self.edges):
            lp = np.flatnonzero(self.admissible[p])
            lq = np.flatnonzero(self.admissible[q])
            for a in lp:
                for b in lq:
                    v_ab = self.pairwise(int(p), int(q), int(a), int(b))
                    v_ba = self.pairwise(int(p), int(q), int(b), int(a))
                    if abs(v_ab - v_ba) > 1e-9:
                        raise MrfError(f"pairwise not symmetric on edge {e}")
                    if a == b and abs(v_ab) > 1e-12:
                        raise MrfError(f"pairwise diagonal not zero on edge {e}")
            for a in lp:
                for b in lq:
                    for c in np.intersect1d(lp, lq):
                        lhs = self.pairwise(int(p), int(q), int(a), int(b))
                        rhs = self.pairwise(int(p), int(q), int(a), int(c)) + self.pairwise(
                            int(p), int(q), int(c), int(b)
                        )
                        if lhs > rhs + 1e-9:
                            raise MrfError(f"triangle inequality violated on edge {e}")


@dataclass
class Labeling:
    """Per-node label assignment with its cached total energy."""

    labels: np.ndarray
    energy: float

    @classmethod
    def from_labels(cls, problem: MrfProblem, labels) -> "Labeling":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels=labels, energy=problem.energy(labels))


def expansion_move(
    problem: MrfProblem, labeling: Labeling, alpha: int
) -> tuple[Labeling, int]:
    """One alpha-expansion: every node keeps its label or switches to ``alpha``.

    The binary subproblem is solved exactly by a min cut; non-submodular
    pairwise combinations (metric violations) are truncated and counted in the
    second return value.  The returned labeling never has higher energy than
    the input.
    """
    cur = labeling.labels
    movable = problem.admissible[:, alpha] & (cur != alpha)
    n_mov = int(movable.sum())
    if n_mov == 0:
        return labeling, 0
    node_id = np.full(problem.n_nodes, -1, dtype=np.int64)
    node_id[movable] = np.arange(n_mov)

    theta0 = problem.unary[movable, cur[movable]].copy()
    theta1 = problem.unary[movable, alpha].copy()

    truncated = 0
    pair_us = pair_vs = pair_caps = None
    if len(problem.edges):
        ep, eq = problem.edges[:, 0], problem.edges[:, 1]
        mp, mq = movable[ep], movable[eq]
        eids = np.arange(len(problem.edges))
        alpha_arr = np.full(len(eids), alpha, dtype=np.int64)

        # edges with exactly one movable endpoint fold into that node's unary
        for flip in (False, True):
            sel = (mp & ~mq) if not flip else (~mp & mq)
            if not sel.any():
                continue
            ids = eids[sel]
            mov_lab = cur[ep[sel]] if not flip else cur[eq[sel]]
            fix_lab = cur[eq[sel]] if not flip else cur[ep[sel]]
            mov_nodes = node_id[ep[sel]] if not flip else node_id[eq[sel]]
            if not flip:
                keep = problem.pairwise_batch(ids, mov_lab, fix_lab)
                take = problem.pairwise_batch(ids, alpha_arr[: len(ids)], fix_lab)
            else:
                keep = problem.pairwise_batch(ids, fix_lab, mov_lab)
                take = problem.pairwise_batch(ids, fix_lab, alpha_arr[: len(ids)])
            np.add.at(theta0, mov_nodes, keep)
            np.add.at(theta1, mov_nodes, take)

        both = mp & mq
        if both.any():
            ids = eids[both]
            lp, lq = cur[ep[both]], cur[eq[both]]
            al = alpha_arr[: len(ids)]
            e00 = problem.pairwise_batch(ids, lp, lq)
            e01 = problem.pairwise_batch(ids, lp, al)
            e10 = problem.pairwise_batch(ids, al, lq)
            e11 = problem.pairwise_batch(ids, al, al)
            slack = e01 + e10 - e00 - e11
            bad = slack < 0
            if bad.any():
                truncated = int(bad.sum())
                # standard truncation: lower the keep-keep cost until submodular
                e00 = np.where(bad, e01 + e10 - e11, e00)
                slack = np.where(bad, 0.0, slack)
            p_ids = node_id[ep[both]]
            q_ids = node_id[eq[both]]
            np.add.at(theta1, p_ids, e10 - e00)
            np.add.at(theta1, q_ids, e11 - e10)
            keep_edge = slack > 0
            pair_us, pair_vs, pair_caps = p_ids[keep_edge], q_ids[keep_edge], slack[keep_edge]

    source, sink = n_mov, n_mov + 1
    net = FlowNetwork(n_mov + 2, source, sink)
    delta = theta1 - theta0
    pos = delta > 0
    if pos.any():
        # cut pays delta when the node ends on the sink (alpha) side
        net.add_edges(np.full(pos.sum(), source), np.flatnonzero(pos), delta[pos])
    neg = delta < 0
    if neg.any():
        net.add_edges(np.flatnonzero(neg), np.full(neg.sum(), sink), -delta[neg])
    if pair_caps is not None and len(pair_caps):
        net.add_edges(pair_us, pair_vs, pair_caps)

    _, source_side = max_flow(net)
    new_labels = cur.copy()
    mov_idx = np.flatnonzero(movable)
    new_labels[mov_idx[~source_side[:n_mov]]] = alpha
    new_energy = problem.energy(new_labels)
    # strict improvement only: ties keep the current labeling (which is then
    # itself a minimizer of the move), and truncation can never push uphill
    if new_energy < labeling.energy:
        return Labeling(new_labels, new_energy), truncated
    return labeling, truncated


@dataclass
class MinimizeResult:
    labeling: Labeling
    sweeps: int
    converged: bool
    energy_trace: list[float] = field(default_factory=list)
    truncations: int = 0


def minimize(problem: MrfProblem, initial, max_sweeps: int = 8) -> MinimizeResult:
    """Expansion-move minimization until a full sweep changes nothing.

    Sweeps iterate labels in ascending index order (pipelines put the unknown
    label last), so results are deterministic.  The energy trace records the
    energy after every move and is non-increasing.
    """
    if isinstance(initial, Labeling):
        labeling = initial
    else:
        labeling = Labeling.from_labels(problem, initial)
    trace = [labeling.energy]
    truncations = 0
    sweeps = 0
    converged = False
    for _ in range(max_sweeps):
        sweeps += 1
        changed = False
        for alpha in range(problem.n_labels):
            new_labeling, trunc = expansion_move(problem, labeling, alpha)
            truncations += trunc
            if not np.array_equal(new_labeling.labels, labeling.labels):
                changed = True
            labeling = new_labeling
            trace.append(labeling.energy)
        if not changed:
            converged = True
            break
    return MinimizeResult(
        labeling=labeling,
        sweeps=sweeps,
        converged=converged,
        energy_trace=trace,
        truncations=truncations,
    )


def exhaustive_minimum(problem: MrfProblem) -> tuple[np.ndarray, float]:
    """Brute-force global optimum by enumerating all admissible labelings.

    Exponential; only for small test instances.
    """
    choices = [np.flatnonzero(problem.admissible[p]) for p in range(problem.n_nodes)]
    best_labels, best_energy = None, np.inf
    for combo in itertools.product(*choices):
        labels = np.array(combo, dtype=np.int64)
        e = problem.energy(labels)
        if e < best_energy:
            best_energy = e
            best_labels = labels
    return best_labels, best_energy
