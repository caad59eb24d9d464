"""Event-driven simulation of the broadcast over unslotted CSMA/CA.

A node that decodes the packet for the first time forwards it once. Receivers
lock onto the first audible transmission that starts while they are idle;
every other audible transmission overlapping it counts as interference,
segment by segment.
"""
from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from .channel import AttenuationMatrix, RadioConfig, ber_qpsk_awgn, dbm_to_mw, packet_decode_prob

TX_END, TX_START, CCA_CHECK, BACKOFF_EXPIRY = "tx_end", "tx_start", "cca_check", "backoff_expiry"
# same-time events: finished transmissions first, so CCA sees new ones as busy
KIND_PRIORITY = {TX_END: 0, TX_START: 1, CCA_CHECK: 2, BACKOFF_EXPIRY: 3}


@dataclass(frozen=True)
class CsmaConfig:
    tu_seconds: float = 0.32e-3
    w_init: int = 3
    max_attempts: int = 5
    t_setup: float = 0.1e-3
    t_cca: float = 0.1e-3

    def __post_init__(self):
        if self.w_init < 1 or self.max_attempts < 1:
            raise ValueError("w_init and max_attempts must be >= 1")
        if min(self.tu_seconds, self.t_setup, self.t_cca) < 0:
            raise ValueError("CSMA times must be non-negative")


@dataclass(order=True)
class SimEvent:
    time: float
    priority: int
    node: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


@dataclass
class TransmissionRecord:
    sender: int
    start: float
    end: float
    attenuation_draw: dict[int, float]


@dataclass
class RunResult:
    covered: frozenset
    success: bool
    cover_time: float | None
    completion_time: float
    transmissions: int
    backoffs: list[int]
    dropped: list[int]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covered"] = sorted(self.covered)
        return d


def _segment_bits(breaks: Sequence[float], start: float, n_bit: int, bitrate: float) -> list[int]:
    """Bits per segment from cumulative rounding; always sums to ``n_bit``."""
    marks = [0] + [min(n_bit, max(0, round((t - start) * bitrate))) for t in breaks[1:-1]] + [n_bit]
    return [b - a for a, b in zip(marks, marks[1:])]


class _Run:
    def __init__(self, matrix, radio, csma, sink, rng, trace):
        self.m = matrix
        self.radio = radio
        self.csma = csma
        self.sink = sink
        self.rng = rng
        self.trace = trace
        self.n = matrix.n_nodes
        self.queue: list[SimEvent] = []
        self.seq = 0
        self.now = 0.0
        self.state = ["L"] * self.n
        self.window = [csma.w_init] * self.n
        self.nb = [0] * self.n
        self.backoff_count = [0] * self.n
        self.first_rx: dict[int, float] = {}
        self.active: dict[int, TransmissionRecord] = {}
        self.history: list[TransmissionRecord] = []
        self.lock: dict[int, TransmissionRecord] = {}
        self.transmitted: list[int] = []
        self.dropped: list[int] = []
        self.pn_mw = float(dbm_to_mw(radio.pn_dbm))

    def log(self, kind, node, **details):
        if self.trace is not None:
            self.trace.append({"time": self.now, "kind": kind, "node": node, **details})

    def push(self, t, kind, node, **payload):
        self.seq += 1
        heapq.heappush(self.queue, SimEvent(t, KIND_PRIORITY[kind], node, self.seq, kind, payload))

    def audible(self, rec: TransmissionRecord, j: int) -> bool:
        return self.radio.pt_dbm - rec.attenuation_draw[j] >= self.radio.sn_dbm

    def start_csma(self, node):
        self.state[node] = "T"
        self.window[node] = self.csma.w_init
        self.nb[node] = 0
        self.arm_backoff(node)

    def arm_backoff(self, node):
        r = int(self.rng.integers(0, 2 ** self.window[node]))
        self.backoff_count[node] += 1
        self.push(self.now + r * self.csma.tu_seconds, BACKOFF_EXPIRY, node, slots=r)

    def run(self):
        self.start_csma(self.sink)
        while self.queue:
            ev = heapq.heappop(self.queue)
            assert ev.time >= self.now
            self.now = ev.time
            getattr(self, "on_" + ev.kind)(ev)

    def on_backoff_expiry(self, ev):
        self.log(BACKOFF_EXPIRY, ev.node, **ev.payload)
        self.push(self.now + self.csma.t_setup, CCA_CHECK, ev.node)

    def on_cca_check(self, ev):
        node = ev.node
        busy = [rec.sender for rec in self.active.values() if self.audible(rec, node)]
        self.log(CCA_CHECK, node, busy=busy)
        if not busy:
            self.push(self.now + self.csma.t_cca, TX_START, node)
            return
        self.nb[node] += 1
        if self.nb[node] > self.csma.max_attempts:
            self.state[node] = "R"
            self.dropped.append(node)
            self.log("drop", node)
            return
        self.window[node] += 1
        self.arm_backoff(node)

    def on_tx_start(self, ev):
        i = ev.node
        draws = {}
        for j in range(self.n):
            if j != i:
                d = self.m.std_db[i, j]
                draws[j] = float(self.m.mean_db[i, j] + (d * self.rng.standard_normal() if d > 0 else 0.0))
        rec = TransmissionRecord(i, self.now, self.now + self.radio.airtime, draws)
        self.active[i] = rec
        self.history.append(rec)
        self.state[i] = "X"
        self.transmitted.append(i)
        locked = []
        for j in range(self.n):
            if self.state[j] == "L" and j not in self.lock and self.audible(rec, j):
                self.lock[j] = rec
                locked.append(j)
        self.log(TX_START, i, locked=locked, attenuation={str(k): v for k, v in draws.items()})
        self.push(rec.end, TX_END, i)

    def on_tx_end(self, ev):
        i = ev.node
        rec = self.active.pop(i)
        self.state[i] = "R"
        receivers = sorted(j for j, r in self.lock.items() if r is rec)
        decoded = []
        bits = {}
        for j in receivers:
            del self.lock[j]
            segs = self.segments(rec, j)
            bits[str(j)] = [nb for _, nb in segs]
            if self.rng.random() < self.reception_probability(rec, j, segs):
                decoded.append(j)
        self.log(TX_END, i, receivers=receivers, decoded=decoded, segment_bits=bits)
        for j in decoded:
            self.first_rx[j] = self.now
            self.start_csma(j)

    def segments(self, rec: TransmissionRecord, j: int):
        # sub-sensitivity signals are discarded by the receiver, as targets and as interference
        others = [o for o in self.history
                  if o is not rec and o.start < rec.end and o.end > rec.start and self.audible(o, j)]
        cuts = {rec.start, rec.end}
        for o in others:
            cuts.update(t for t in (o.start, o.end) if rec.start < t < rec.end)
        breaks = sorted(cuts)
        bits = _segment_bits(breaks, rec.start, self.radio.n_bit, self.radio.bitrate_bps)
        out = []
        for a, b, nb in zip(breaks, breaks[1:], bits):
            pi = sum(float(dbm_to_mw(self.radio.pt_dbm - o.attenuation_draw[j]))
                     for o in others if o.start < b and o.end > a)
            out.append((pi, nb))
        return out

    def reception_probability(self, rec: TransmissionRecord, j: int, segments=None) -> float:
        pr = self.radio.pt_dbm - rec.attenuation_draw[j]
        if segments is None:
            segments = self.segments(rec, j)
        segs = [(ber_qpsk_awgn(pr, self.pn_mw + pi), nb) for pi, nb in segments]
        return packet_decode_prob(segs, self.radio.n_bit)


def run_once(matrix: AttenuationMatrix, radio: RadioConfig, csma: CsmaConfig, sink: int,
             seed: int | Sequence[int], trace: list | None = None) -> RunResult:
    """One broadcast; identical seed and configs give identical results.

    Pass a list as ``trace`` to collect one dict per processed event.
    """
    run = _Run(matrix, radio, csma, sink, np.random.default_rng(seed), trace)
    run.run()
    non_sink = [k for k in range(matrix.n_nodes) if k != sink]
    covered = frozenset(run.first_rx)
    success = covered == frozenset(non_sink)
    completion = max((r.end for r in run.history), default=0.0)
    return RunResult(
        covered=covered,
        success=success,
        cover_time=max(run.first_rx.values()) if success else None,
        completion_time=completion,
        transmissions=len(run.transmitted),
        backoffs=[run.backoff_count[k] for k in run.transmitted],
        dropped=sorted(run.dropped),
    )


def write_trace(trace: list[dict], fh: IO[str]) -> None:
    for rec in trace:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float | None

    def as_tuple(self):
        return self.mean, self.stderr


@dataclass(frozen=True)
class BatchResult:
    n_runs: int
    cover_probability: Estimate
    cover_number: Estimate
    hitting: dict[int, Estimate]
    cover_time: Estimate | None
    mean_backoff_count: float
    stderr_defined: bool


def _mean_se(values) -> Estimate:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return Estimate(math.nan, None)
    if x.size < 2:
        return Estimate(float(x.mean()), None)
    return Estimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)))


def _run_chunk(args):
    matrix, radio, csma, sink, base_seed, indices = args
    return [run_once(matrix, radio, csma, sink, (base_seed, k)) for k in indices]


def run_batch(matrix: AttenuationMatrix, radio: RadioConfig, csma: CsmaConfig, sink: int,
              n_runs: int, base_seed: int = 0, workers: int = 1) -> BatchResult:
    """Independent replications, run ``k`` seeded with ``(base_seed, k)``.

    Standard errors are ``None`` when ``n_runs == 1``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if workers > 1:
        chunks = [list(range(n_runs))[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, [(matrix, radio, csma, sink, base_seed, c) for c in chunks]))
        by_index = {}
        for c, part in zip(chunks, parts):
            by_index.update(zip(c, part))
        results = [by_index[k] for k in range(n_runs)]
    else:
        results = _run_chunk((matrix, radio, csma, sink, base_seed, range(n_runs)))

    non_sink = [k for k in range(matrix.n_nodes) if k != sink]
    times = [r.cover_time for r in results if r.success]
    backoffs = [b for r in results for b in r.backoffs]
    return BatchResult(
        n_runs=n_runs,
        cover_probability=_mean_se([r.success for r in results]),
        cover_number=_mean_se([len(r.covered) for r in results]),
        hitting={j: _mean_se([j in r.covered for r in results]) for j in non_sink},
        cover_time=_mean_se(times) if times else None,
        mean_backoff_count=float(np.mean(backoffs)) if backoffs else math.nan,
        stderr_defined=n_runs > 1,
    )
