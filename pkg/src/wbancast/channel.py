"""Link-level channel model: normal path loss, QPSK/AWGN bit errors, interference.

Powers are carried in dBm at the interface and converted to milliwatts before
any ratio or sum is formed.
"""
from __future__ import annotations

import csv
import itertools
import math
import threading
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erfc

NO_INTERFERENCE = "no_interference"
GENERAL = "general"
MODES = (NO_INTERFERENCE, GENERAL)

QUAD_TOL = 1e-8
SIGMA_SPAN = 8.0


class DatasetError(ValueError):
    """Malformed or inconsistent attenuation dataset."""


class QuadratureError(RuntimeError):
    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


def dbm_to_mw(p_dbm):
    return np.power(10.0, np.asarray(p_dbm, dtype=float) / 10.0)


def mw_to_dbm(p_mw):
    return 10.0 * np.log10(p_mw)


@dataclass(frozen=True)
class AttenuationMatrix:
    """Per-link path loss ``A[i, j] ~ N(mean_db[i, j], std_db[i, j]**2)``.

    Both matrices are symmetric; diagonals are ignored.
    """

    mean_db: np.ndarray
    std_db: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        mean = np.array(self.mean_db, dtype=float)
        std = np.array(self.std_db, dtype=float)
        if mean.ndim != 2 or mean.shape[0] != mean.shape[1] or mean.shape != std.shape:
            raise DatasetError("mean_db and std_db must be square matrices of equal shape")
        off = ~np.eye(mean.shape[0], dtype=bool)
        if not np.all(np.isfinite(mean[off])) or not np.all(np.isfinite(std[off])):
            raise DatasetError("every off-diagonal pair needs a finite mean and std")
        if np.any(std[off] < 0):
            raise DatasetError("standard deviations must be non-negative")
        if not (np.array_equal(mean[off], mean.T[off]) and np.array_equal(std[off], std.T[off])):
            raise DatasetError("attenuation matrix must be symmetric")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean_db", mean)
        object.__setattr__(self, "std_db", std)

    @property
    def n_nodes(self) -> int:
        return self.mean_db.shape[0]

    @classmethod
    def from_pairs(cls, n_nodes: int, rows: Iterable[tuple[int, int, float, float]],
                   labels: Sequence[str] | None = None) -> "AttenuationMatrix":
        mean = np.full((n_nodes, n_nodes), np.nan)
        std = np.full((n_nodes, n_nodes), np.nan)
        for i, j, m, d in rows:
            if not (0 <= i < n_nodes and 0 <= j < n_nodes) or i == j:
                raise DatasetError(f"invalid pair ({i}, {j}) for {n_nodes} nodes")
            if not np.isnan(mean[i, j]):
                raise DatasetError(f"duplicate pair ({i}, {j})")
            mean[i, j] = mean[j, i] = m
            std[i, j] = std[j, i] = d
        np.fill_diagonal(mean, 0.0)
        np.fill_diagonal(std, 0.0)
        missing = [(i, j) for i, j in itertools.combinations(range(n_nodes), 2) if np.isnan(mean[i, j])]
        if missing:
            raise DatasetError(f"missing pairs: {missing}")
        return cls(mean, std, tuple(labels) if labels else None)

    @classmethod
    def load_csv(cls, path: str | Path, n_nodes: int | None = None) -> "AttenuationMatrix":
        """Read a ``node_i,node_j,mean_db,std_db`` file, one row per unordered pair."""
        with open(path, newline="", encoding="utf-8") as fh:
            return cls._from_csv_lines(fh, n_nodes, str(path))

    @classmethod
    def _from_csv_lines(cls, lines, n_nodes, source):
        reader = csv.reader(line for line in lines if not line.lstrip().startswith("#"))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_i", "node_j", "mean_db", "std_db"]:
            raise DatasetError(f"{source}: expected header node_i,node_j,mean_db,std_db, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise DatasetError(f"{source}:{lineno}: expected 4 fields, got {len(rec)}")
            try:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3])))
            except ValueError as exc:
                raise DatasetError(f"{source}:{lineno}: {exc}") from None
        if not rows:
            raise DatasetError(f"{source}: no rows")
        inferred = max(max(i, j) for i, j, _, _ in rows) + 1
        n = inferred if n_nodes is None else n_nodes
        if n * (n - 1) // 2 != len(rows):
            raise DatasetError(f"{source}: {len(rows)} rows, expected {n * (n - 1) // 2} pairs for {n} nodes")
        return cls.from_pairs(n, rows)

    def to_csv_rows(self) -> list[tuple[int, int, float, float]]:
        return [(i, j, float(self.mean_db[i, j]), float(self.std_db[i, j]))
                for i, j in itertools.combinations(range(self.n_nodes), 2)]


POSTURE2_LABELS = ("navel", "chest", "head", "upper_arm", "ankle", "thigh", "wrist")


def posture2_running() -> AttenuationMatrix:
    """Path-loss statistics for the running posture, 7 on-body nodes (sink = chest, node 1)."""
    text = resources.files("wbancast.data").joinpath("posture2_running.csv").read_text(encoding="utf-8")
    m = AttenuationMatrix._from_csv_lines(text.splitlines(), 7, "posture2_running.csv")
    return replace(m, labels=POSTURE2_LABELS)


@dataclass(frozen=True)
class RadioConfig:
    """Common radio parameters; all nodes share PT and SN.

    ``pn_dbm`` is the total in-band noise power. ``bitrate_bps`` fixes the
    packet airtime ``n_bit / bitrate_bps``.
    """

    pt_dbm: float = -55.0
    sn_dbm: float = -100.0
    pn_dbm: float = -110.0
    n_bit: int = 1016
    bitrate_bps: float = 250_000.0

    def __post_init__(self):
        if not self.pt_dbm > self.sn_dbm:
            raise ValueError(f"pt_dbm ({self.pt_dbm}) must exceed sn_dbm ({self.sn_dbm})")
        if int(self.n_bit) != self.n_bit or self.n_bit < 1:
            raise ValueError("n_bit must be a positive integer")
        if not self.bitrate_bps > 0:
            raise ValueError("bitrate_bps must be positive")

    @property
    def a_max(self) -> float:
        """Largest attenuation (dB) that still leaves the signal audible."""
        return self.pt_dbm - self.sn_dbm

    @property
    def airtime(self) -> float:
        return self.n_bit / self.bitrate_bps

    def with_pt(self, pt_dbm: float) -> "RadioConfig":
        return replace(self, pt_dbm=pt_dbm)


def received_power(pt_dbm, attenuation_db):
    return pt_dbm - attenuation_db


def ber_qpsk_awgn(pr_dbm, noise_plus_interference_mw):
    """Bit error rate ``erfc(sqrt(PR / (PN + PI))) / 2`` with PR in dBm, PN+PI in mW."""
    npi = np.asarray(noise_plus_interference_mw, dtype=float)
    if np.any(~(npi > 0)):
        raise ValueError("noise_plus_interference must be positive")
    snr = dbm_to_mw(pr_dbm) / npi
    out = 0.5 * erfc(np.sqrt(snr))
    return float(out) if np.ndim(out) == 0 else out


def packet_decode_prob(segments: Sequence[tuple[float, int]], n_bit: int | None = None) -> float:
    """Probability that every bit survives, given ``(ber, n_bits)`` segments."""
    total = 0
    log_p = 0.0
    for ber, bits in segments:
        if not 0.0 <= ber <= 1.0:
            raise ValueError(f"ber {ber} outside [0, 1]")
        if bits < 0:
            raise ValueError("segment bit count must be non-negative")
        total += bits
        if bits == 0:
            continue
        if ber == 1.0:
            return 0.0
        log_p += bits * math.log1p(-ber)
    if n_bit is not None and total != n_bit:
        raise ValueError(f"segment bits sum to {total}, packet has {n_bit}")
    return math.exp(log_p)


def overlap_probability(packet_airtime: float, mean_tx_state_time: float) -> float:
    """Chance that another transmitter overlaps a packet: ``1 - exp(-airtime / E[t_T])``."""
    if packet_airtime <= 0 or mean_tx_state_time <= 0:
        raise ValueError("airtime and mean T-state time must be positive")
    return -math.expm1(-packet_airtime / mean_tx_state_time)


def interferer_subset_masses(p_i: float, n_candidates: int) -> dict[tuple[int, ...], float]:
    """Mass of each subset (as a tuple of candidate positions) of overlapping transmitters."""
    out = {}
    for r in range(n_candidates + 1):
        for sub in itertools.combinations(range(n_candidates), r):
            out[sub] = p_i ** r * (1.0 - p_i) ** (n_candidates - r)
    return out


def adaptive_simpson(f, a: float, b: float, tol: float = QUAD_TOL,
                     initial_panels: int = 16, max_depth: int = 40) -> tuple[float, float]:
    """Integrate a vectorised ``f`` over ``[a, b]``; returns ``(value, error_estimate)``.

    Panels are refined breadth-first so each level is a single call to ``f``.
    Raises :class:`QuadratureError` if some panel still fails after ``max_depth`` halvings.
    """
    if b <= a:
        return 0.0, 0.0
    edges = np.linspace(a, b, initial_panels + 1)
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    vals = f(np.concatenate([lo, mid, hi]))
    flo, fmid, fhi = np.split(vals, 3)
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
    ptol = np.full(lo.shape, tol / initial_panels)

    total = 0.0
    err = 0.0
    for _ in range(max_depth):
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        flm, frm = np.split(f(np.concatenate([lm, rm])), 2)
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        diff = left + right - whole
        ok = np.abs(diff) <= 15.0 * ptol
        total += float(np.sum(left[ok] + right[ok] + diff[ok] / 15.0))
        err += float(np.sum(np.abs(diff[ok]))) / 15.0
        bad = ~ok
        if not bad.any():
            return total, err
        lo, mid, hi = lo[bad], mid[bad], hi[bad]
        flo, fmid, fhi = flo[bad], fmid[bad], fhi[bad]
        lm, rm, flm, frm = lm[bad], rm[bad], flm[bad], frm[bad]
        left, right = left[bad], right[bad]
        ptol = ptol[bad] / 2.0
        lo, mid, hi, flo, fmid, fhi, whole = (
            np.concatenate([lo, mid]), np.concatenate([lm, rm]), np.concatenate([mid, hi]),
            np.concatenate([flo, fmid]), np.concatenate([flm, frm]), np.concatenate([fmid, fhi]),
            np.concatenate([left, right]),
        )
        ptol = np.concatenate([ptol, ptol])
    raise QuadratureError("adaptive Simpson did not converge", err + float(np.sum(np.abs(whole))))


def _decode_prob_given_attenuation(x, radio: RadioConfig, interference_mw: np.ndarray,
                                   subset_mass: np.ndarray):
    """``Pd`` as a function of the target-link attenuation ``x`` (array, dB).

    ``interference_mw[s]`` / ``subset_mass[s]`` describe each interferer subset;
    entry 0 is the empty subset. Subsets with interference use the half/half split.
    """
    x = np.asarray(x, dtype=float)
    pr = radio.pt_dbm - x
    pn = float(dbm_to_mw(radio.pn_dbm))
    half_int = radio.n_bit // 2
    half_clean = radio.n_bit - half_int
    log_clean = np.log1p(-ber_qpsk_awgn(pr, pn))
    pd = subset_mass[0] * np.exp(radio.n_bit * log_clean)
    for mass, pi in zip(subset_mass[1:], interference_mw[1:]):
        log_int = np.log1p(-ber_qpsk_awgn(pr, pn + pi))
        pd = pd + mass * np.exp(half_int * log_int + half_clean * log_clean)
    return pd


def _interference_table(j: int, candidates: Sequence[int], matrix: AttenuationMatrix,
                        radio: RadioConfig, p_i: float):
    cand = sorted(candidates)
    per_node = dbm_to_mw(radio.pt_dbm - np.array([matrix.mean_db[k, j] for k in cand]))
    masses = interferer_subset_masses(p_i, len(cand))
    subs = sorted(masses, key=lambda s: (len(s), s))
    pi = np.array([float(np.sum(per_node[list(s)])) for s in subs])
    mass = np.array([masses[s] for s in subs])
    return pi, mass


def link_success_probability(i: int, j: int, interferer_candidates: Iterable[int],
                             matrix: AttenuationMatrix, radio: RadioConfig,
                             mode: str = NO_INTERFERENCE, mean_tx_state_time: float | None = None,
                             tol: float = QUAD_TOL) -> float:
    """Probability that ``j`` decodes a packet sent by ``i``, averaged over the attenuation.

    In ``general`` mode every candidate overlaps independently with probability
    ``overlap_probability(airtime, mean_tx_state_time)``; overlapping interferers
    contribute ``PT - mean attenuation`` each, summed in milliwatts.
    """
    if i == j:
        raise ValueError("transmitter and receiver must differ")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cand = tuple(sorted(set(interferer_candidates))) if mode == GENERAL else ()
    if i in cand or j in cand:
        raise ValueError("interferers must exclude transmitter and receiver")
    if cand:
        if mean_tx_state_time is None:
            raise ValueError("general mode needs mean_tx_state_time")
        p_i = overlap_probability(radio.airtime, mean_tx_state_time)
        pi, mass = _interference_table(j, cand, matrix, radio, p_i)
    else:
        pi, mass = np.zeros(1), np.ones(1)

    m = float(matrix.mean_db[i, j])
    d = float(matrix.std_db[i, j])
    a_max = radio.a_max
    if d == 0.0:
        if m >= a_max:
            return 0.0
        return float(_decode_prob_given_attenuation(m, radio, pi, mass))

    lo = m - SIGMA_SPAN * d
    hi = min(m + SIGMA_SPAN * d, a_max)
    if hi <= lo:
        return 0.0
    norm = 1.0 / (d * math.sqrt(2.0 * math.pi))

    def integrand(x):
        z = (x - m) / d
        return _decode_prob_given_attenuation(x, radio, pi, mass) * norm * np.exp(-0.5 * z * z)

    value, _ = adaptive_simpson(integrand, lo, hi, tol)
    return min(max(value, 0.0), 1.0)


class LinkModel:
    """Cached ``P[i, j]`` source keyed by ``(i, j, interferer candidates)``.

    Callable as ``link(i, j, interferers)``; safe to share between threads.
    """

    def __init__(self, matrix: AttenuationMatrix, radio: RadioConfig, mode: str = NO_INTERFERENCE,
                 mean_tx_state_time: float | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == GENERAL and mean_tx_state_time is None:
            raise ValueError("general mode needs mean_tx_state_time")
        self.matrix = matrix
        self.radio = radio
        self.mode = mode
        self.mean_tx_state_time = mean_tx_state_time
        self._cache: dict[tuple[int, int, frozenset], float] = {}
        self._lock = threading.Lock()

    @property
    def n_nodes(self) -> int:
        return self.matrix.n_nodes

    def __call__(self, i: int, j: int, interferers: Iterable[int] = ()) -> float:
        key = (i, j, frozenset(interferers) if self.mode == GENERAL else frozenset())
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        p = link_success_probability(i, j, key[2], self.matrix, self.radio, self.mode,
                                     self.mean_tx_state_time)
        with self._lock:
            self._cache[key] = p
        return p
