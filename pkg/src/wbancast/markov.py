"""Absorbing, acyclic CTMC of a single broadcast.

Each node is in ``L`` (listening), ``T`` (holding the packet, waiting to
forward it) or ``R`` (forwarded). A transition finishes exactly one ``T``
node; each listener then independently decodes it or not. Every transition
adds one ``R``, so the state graph is a DAG and all metrics come out of one
forward or backward sweep.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from graphlib import TopologicalSorter
from typing import Callable, Iterable, Mapping

import numpy as np

from .channel import NO_INTERFERENCE, AttenuationMatrix, LinkModel, RadioConfig

L, T, R = 0, 1, 2
SYMBOLS = "LTR"
MAX_NODES = 12

LinkProb = Callable[[int, int, frozenset], float]


class ConditioningError(ValueError):
    """The conditioning event (full coverage) has probability zero."""


@dataclass(frozen=True, order=True)
class SystemState:
    symbols: tuple[int, ...]

    @classmethod
    def parse(cls, text: str) -> "SystemState":
        return cls(tuple(SYMBOLS.index(c) for c in text))

    @classmethod
    def initial(cls, n: int, sink: int) -> "SystemState":
        return cls(tuple(T if k == sink else L for k in range(n)))

    def __str__(self) -> str:
        return "".join(SYMBOLS[s] for s in self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def code(self) -> int:
        """Base-3 index, node 0 as the least significant digit."""
        return sum(s * 3 ** k for k, s in enumerate(self.symbols))

    def nodes_in(self, symbol: int) -> tuple[int, ...]:
        return tuple(k for k, s in enumerate(self.symbols) if s == symbol)

    @property
    def listening(self) -> tuple[int, ...]:
        return self.nodes_in(L)

    @property
    def transmitting(self) -> tuple[int, ...]:
        return self.nodes_in(T)

    @property
    def received(self) -> tuple[int, ...]:
        return self.nodes_in(R)

    @property
    def is_absorbing(self) -> bool:
        return T not in self.symbols


def enumerate_successors(state: SystemState, link_prob: LinkProb) -> list[tuple[SystemState, float]]:
    """Embedded-chain successors of a non-absorbing state with their probabilities.

    The finishing transmitter is uniform over ``T`` nodes; ``link_prob(i, j, others)``
    receives the other ``T`` nodes as potential interferers.
    """
    tx = state.transmitting
    if not tx:
        raise ValueError(f"state {state} is absorbing")
    listeners = state.listening
    weight = 1.0 / len(tx)
    merged: dict[SystemState, float] = {}
    for i in tx:
        others = frozenset(tx) - {i}
        p = [link_prob(i, j, others) for j in listeners]
        base = list(state.symbols)
        base[i] = R
        for outcome in itertools.product((False, True), repeat=len(listeners)):
            prob = weight
            sym = list(base)
            for j, pj, ok in zip(listeners, p, outcome):
                if ok:
                    sym[j] = T
                    prob *= pj
                else:
                    prob *= 1.0 - pj
            succ = SystemState(tuple(sym))
            merged[succ] = merged.get(succ, 0.0) + prob
    return list(merged.items())


@dataclass(frozen=True)
class BroadcastChain:
    """Reachable states, sparse jump probabilities and exit rates."""

    states: tuple[SystemState, ...]
    jump_prob: tuple[Mapping[int, float], ...]
    exit_rate: np.ndarray
    initial: int
    mu: float
    sink: int
    index: Mapping[SystemState, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.index is None:
            object.__setattr__(self, "index", {s: k for k, s in enumerate(self.states)})

    @property
    def n_nodes(self) -> int:
        return len(self.states[self.initial])

    def __len__(self) -> int:
        return len(self.states)

    def absorbing(self) -> list[int]:
        return [k for k, s in enumerate(self.states) if s.is_absorbing]

    def topological_order(self) -> list[int]:
        """Predecessors first. Raises ``graphlib.CycleError`` on a cycle."""
        ts = TopologicalSorter()
        for u in range(len(self.states)):
            ts.add(u)
        for s, row in enumerate(self.jump_prob):
            for u in row:
                ts.add(u, s)
        return list(ts.static_order())

    def to_dict(self) -> dict:
        return {
            "states": [str(s) for s in self.states],
            "edges": [[s, u, p] for s, row in enumerate(self.jump_prob) for u, p in sorted(row.items())],
            "exit_rates": [float(x) for x in self.exit_rate],
            "initial": self.initial,
            "mu": self.mu,
            "sink": self.sink,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def build_chain_from_links(n: int, sink: int, link_prob: LinkProb, mu: float = 1.0) -> BroadcastChain:
    """Breadth-first enumeration from the state where only ``sink`` holds the packet."""
    if not 2 <= n <= MAX_NODES:
        raise ValueError(f"n must be in [2, {MAX_NODES}], got {n}")
    if not 0 <= sink < n:
        raise ValueError(f"sink {sink} out of range for {n} nodes")
    if not mu > 0:
        raise ValueError("mu must be positive")
    start = SystemState.initial(n, sink)
    index = {start: 0}
    states = [start]
    rows: list[dict[int, float]] = []
    queue = deque([start])
    while queue:
        s = queue.popleft()
        row: dict[int, float] = {}
        if not s.is_absorbing:
            for u, p in enumerate_successors(s, link_prob):
                if u not in index:
                    index[u] = len(states)
                    states.append(u)
                    queue.append(u)
                row[index[u]] = row.get(index[u], 0.0) + p
        rows.append(row)
    exit_rate = np.array([len(s.transmitting) * mu for s in states])
    return BroadcastChain(tuple(states), tuple(rows), exit_rate, 0, mu, sink, index)


def build_chain(matrix: AttenuationMatrix, radio: RadioConfig, sink: int,
                mean_tx_state_time: float, mode: str = NO_INTERFERENCE) -> BroadcastChain:
    links = LinkModel(matrix, radio, mode, mean_tx_state_time)
    return build_chain_from_links(matrix.n_nodes, sink, links, 1.0 / mean_tx_state_time)


def expected_tx_state_time(radio: RadioConfig, csma, n_backoffs: float = 1.5) -> float:
    """Mean time a node spends holding the packet: backoffs, setup, CCA and airtime.

    One backoff lasts ``(2**w_init - 1) / 2`` units on average.
    """
    single_backoff = (2 ** csma.w_init - 1) / 2.0 * csma.tu_seconds
    return n_backoffs * single_backoff + csma.t_setup + csma.t_cca + radio.airtime


@dataclass(frozen=True)
class OutcomeDistribution:
    """Probability of each covered set (non-sink nodes in ``R`` at absorption)."""

    mass: Mapping[frozenset, float]
    n_nodes: int
    sink: int

    @property
    def non_sink(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.n_nodes) if k != self.sink)

    def total(self) -> float:
        return float(sum(self.mass.values()))

    def as_bitmask_array(self) -> np.ndarray:
        """Masses indexed by a bitmask over ``non_sink`` positions."""
        pos = {k: b for b, k in enumerate(self.non_sink)}
        arr = np.zeros(2 ** len(pos))
        for c, p in self.mass.items():
            arr[sum(1 << pos[k] for k in c)] += p
        return arr


def absorption_distribution(chain: BroadcastChain) -> OutcomeDistribution:
    prob = np.zeros(len(chain))
    prob[chain.initial] = 1.0
    for s in chain.topological_order():
        ps = prob[s]
        if ps == 0.0:
            continue
        for u, p in chain.jump_prob[s].items():
            prob[u] += ps * p
    mass: dict[frozenset, float] = {}
    for k in chain.absorbing():
        if prob[k] > 0.0:
            c = frozenset(chain.states[k].received) - {chain.sink}
            mass[c] = mass.get(c, 0.0) + float(prob[k])
    return OutcomeDistribution(mass, chain.n_nodes, chain.sink)


def cover_probability(dist: OutcomeDistribution) -> float:
    return float(dist.mass.get(frozenset(dist.non_sink), 0.0))


def average_cover_number(dist: OutcomeDistribution) -> float:
    return float(sum(p * len(c) for c, p in dist.mass.items()))


def hitting_probability(dist: OutcomeDistribution, j: int) -> float:
    if j == dist.sink or not 0 <= j < dist.n_nodes:
        raise ValueError(f"node {j} is not a non-sink node")
    return float(sum(p for c, p in dist.mass.items() if j in c))


def average_cover_time(chain: BroadcastChain) -> float:
    """Expected time to reach the all-``R`` state, conditioned on reaching it.

    Works backwards with ``h(s) = P(full cover | s)`` and the h-transformed
    jump probabilities ``p(s, u) h(u) / h(s)``.
    """
    order = chain.topological_order()
    full = SystemState(tuple(R for _ in range(chain.n_nodes)))
    h = np.zeros(len(chain))
    t = np.zeros(len(chain))
    target = chain.index.get(full)
    if target is not None:
        h[target] = 1.0
    for s in reversed(order):
        row = chain.jump_prob[s]
        if not row:
            continue
        hs = sum(p * h[u] for u, p in row.items())
        h[s] = hs
        if hs > 0.0:
            t[s] = 1.0 / chain.exit_rate[s] + sum(p * h[u] * t[u] for u, p in row.items()) / hs
    if h[chain.initial] <= 0.0:
        raise ConditioningError("cover probability is zero; conditional cover time undefined")
    return float(t[chain.initial])


@dataclass(frozen=True)
class Metrics:
    cover_probability: float
    average_cover_number: float
    hitting: dict[int, float]
    average_cover_time: float | None


def analyze(chain: BroadcastChain) -> Metrics:
    dist = absorption_distribution(chain)
    try:
        act = average_cover_time(chain)
    except ConditioningError:
        act = None
    return Metrics(
        cover_probability(dist),
        average_cover_number(dist),
        {j: hitting_probability(dist, j) for j in dist.non_sink},
        act,
    )


def matrix_links(p: np.ndarray | Iterable[Iterable[float]]) -> LinkProb:
    """Wrap a fixed ``P[i][j]`` table as an interference-free link source."""
    arr = np.asarray(p, dtype=float)
    return lambda i, j, others=frozenset(): float(arr[i, j])
