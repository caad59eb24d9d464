"""Acceptance criteria 1-9, each reported as one PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest

from wbancast.channel import (
    GENERAL,
    NO_INTERFERENCE,
    LinkModel,
    RadioConfig,
    link_success_probability,
    posture2_running,
)
from wbancast.cli import main, pt_grid
from wbancast.markov import (
    absorption_distribution,
    analyze,
    average_cover_number,
    average_cover_time,
    build_chain,
    build_chain_from_links,
    cover_probability,
    expected_tx_state_time,
    hitting_probability,
    matrix_links,
)
from wbancast.multibroadcast import k_cover_probability
from wbancast.sim import CsmaConfig, run_batch

from oracles import mc_k_cover, mc_link_probability, path_enumeration

SINK = 1
SWEEP = pt_grid(-60.0, -50.0, 0.5)


def _chain(pt, mode):
    radio = RadioConfig(pt_dbm=pt)
    ett = expected_tx_state_time(radio, CsmaConfig(), 1.5)
    return build_chain(posture2_running(), radio, SINK, ett, mode)


@pytest.fixture(scope="module")
def sweep():
    """Chains for both modes over the full transmit-power sweep."""
    return {(mode, pt): _chain(pt, mode) for mode in (GENERAL, NO_INTERFERENCE) for pt in SWEEP}


def test_criterion_1_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(120):
        n = int(rng.integers(2, 5))
        sink = int(rng.integers(0, n))
        p = rng.random((n, n))
        damp = rng.random((n, n)) if case % 2 else np.ones((n, n))
        links = lambda i, j, others=frozenset(), p=p, d=damp: float(p[i, j] * np.prod([d[k, j] for k in others]))
        dist = absorption_distribution(build_chain_from_links(n, sink, links))
        ref = path_enumeration(n, sink, links)
        for c in set(dist.mass) | set(ref):
            worst = max(worst, abs(dist.mass.get(c, 0.0) - ref.get(c, 0.0)))
    elapsed = time.perf_counter() - t0
    report(1, "oracle equivalence", worst <= 1e-12 and elapsed < 10.0,
           f"120 networks, max diff {worst:.2e}, {elapsed:.2f} s")


def test_criterion_2_model_vs_simulation(report):
    t0 = time.perf_counter()
    errors = {GENERAL: [], NO_INTERFERENCE: []}
    m = posture2_running()
    for pt in pt_grid(-60.0, -50.0, 2.0):
        sim = run_batch(m, RadioConfig(pt_dbm=pt), CsmaConfig(), SINK, 1000, 0).cover_probability.mean
        for mode in errors:
            model = analyze(_chain(pt, mode)).cover_probability
            errors[mode].append(abs(model - sim) / sim)
    elapsed = time.perf_counter() - t0
    gen, noi = (float(np.mean(errors[k])) for k in (GENERAL, NO_INTERFERENCE))
    report(2, "model vs simulator", gen <= 0.10 and gen < noi and elapsed < 300.0,
           f"general {gen:.2%}, no-interference {noi:.2%}, {elapsed:.1f} s")


def test_criterion_3_state_space_bound(report):
    n_states = len(_chain(-55.0, NO_INTERFERENCE))
    report(3, "state-space bound", n_states <= 730, f"{n_states} states")


def test_criterion_4_metric_identities(report, sweep):
    worst, ordered = 0.0, True
    for chain in sweep.values():
        dist = absorption_distribution(chain)
        hits = [hitting_probability(dist, j) for j in dist.non_sink]
        worst = max(worst, abs(average_cover_number(dist) - sum(hits)))
        ordered &= cover_probability(dist) <= min(hits)
    report(4, "metric identities", worst <= 1e-12 and ordered,
           f"{len(sweep)} configurations, max diff {worst:.2e}")


def test_criterion_5_monotonicity(report, sweep):
    ok = True
    for mode in (GENERAL, NO_INTERFERENCE):
        dists = [absorption_distribution(sweep[(mode, pt)]) for pt in SWEEP]
        covers = [cover_probability(d) for d in dists]
        ok &= all(b >= a for a, b in zip(covers, covers[1:]))
        for d in dists:
            ks = [k_cover_probability(d, k) for k in range(1, 11)]
            ok &= all(b >= a for a, b in zip(ks, ks[1:]))
            ok &= ks[0] == cover_probability(d)
    report(5, "monotonicity", ok, f"{len(SWEEP)} powers x 2 modes, K = 1..10")


def test_criterion_6_multibroadcast_vs_monte_carlo(report):
    t0 = time.perf_counter()
    dist = absorption_distribution(_chain(-58.0, GENERAL))
    rng = np.random.default_rng(6)
    n = 10 ** 5
    zs = []
    for k in (2, 4, 8):
        p = k_cover_probability(dist, k)
        est = mc_k_cover(dist.mass, frozenset(dist.non_sink), k, n, rng)
        zs.append(abs(p - est) / math.sqrt(p * (1 - p) / n))
    elapsed = time.perf_counter() - t0
    report(6, "multi-broadcast vs Monte-Carlo", max(zs) <= 3.0 and elapsed < 30.0,
           f"max |z| {max(zs):.2f}, {elapsed:.1f} s")


def test_criterion_7_quadrature_vs_monte_carlo(report):
    t0 = time.perf_counter()
    m = posture2_running()
    radio = RadioConfig(pt_dbm=-55.0)
    rng = np.random.default_rng(7)
    worst, symmetric = 0.0, True
    for i in range(m.n_nodes):
        for j in range(i + 1, m.n_nodes):
            x = link_success_probability(i, j, (), m, radio)
            symmetric &= x == link_success_probability(j, i, (), m, radio)
            est, se = mc_link_probability(i, j, (), m.mean_db, m.std_db, radio.pt_dbm, radio.sn_dbm,
                                          radio.pn_dbm, radio.n_bit, 0.0, 10 ** 6, rng)
            worst = max(worst, abs(x - est) / max(se, 1e-8 / 3))
    elapsed = time.perf_counter() - t0
    report(7, "quadrature vs Monte-Carlo", worst <= 3.0 and symmetric and elapsed < 120.0,
           f"21 links both directions, max |diff|/se {worst:.2f}, {elapsed:.1f} s")


def test_criterion_8_cover_time(report):
    ett = expected_tx_state_time(RadioConfig(), CsmaConfig(), 1.5)
    two = build_chain_from_links(2, 0, matrix_links(np.array([[0, 0.7], [0, 0]])), mu=1 / ett)
    rel2 = abs(average_cover_time(two) - 2 * ett) / (2 * ett)
    lm = LinkModel(posture2_running(), RadioConfig(), GENERAL, ett)
    base = average_cover_time(build_chain_from_links(7, SINK, lm, mu=1 / ett))
    rel7 = max(abs(average_cover_time(build_chain_from_links(7, SINK, lm, mu=1 / (a * ett))) - a * base) / (a * base)
               for a in (0.25, 2.0, 10.0))
    report(8, "average cover time", rel2 <= 1e-12 and rel7 <= 1e-9,
           f"2-node rel err {rel2:.1e}, N=7 scaling rel err {rel7:.1e}")


def test_criterion_9_determinism(report, tmp_path, capsys):
    args = ["simulate", "--pt_start", "-60", "--pt_stop", "-50", "--pt_step", "2", "--n_runs", "200", "--seed", "42"]
    outs = []
    for name in ("a.csv", "b.csv"):
        path = tmp_path / name
        assert main([*args, "-o", str(path)]) == 0
        outs.append(path.read_bytes())
    capsys.readouterr()
    json_outs = []
    for _ in range(2):
        assert main([*args, "--format", "json"]) == 0
        json_outs.append(capsys.readouterr().out)
    json.loads(json_outs[0])
    report(9, "determinism", outs[0] == outs[1] and json_outs[0] == json_outs[1],
           f"{len(outs[0])} bytes CSV, {len(json_outs[0])} bytes JSON")
