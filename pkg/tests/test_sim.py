import io
import json
import math

import pytest

from wbancast.channel import AttenuationMatrix, RadioConfig, link_success_probability, posture2_running
from wbancast.sim import CsmaConfig, _segment_bits, run_batch, run_once, write_trace


def flat_matrix(n, mean, std=0.0):
    return AttenuationMatrix.from_pairs(n, [(i, j, mean, std) for i in range(n) for j in range(i + 1, n)])


def two_node_posture2():
    m = posture2_running()
    return AttenuationMatrix.from_pairs(2, [(0, 1, m.mean_db[0, 1], m.std_db[0, 1])])


def test_perfect_channel_covers_everyone():
    res = run_once(flat_matrix(5, 10.0), RadioConfig(pt_dbm=-55.0), CsmaConfig(), 1, 123)
    assert res.success
    assert res.covered == frozenset({0, 2, 3, 4})
    assert res.cover_time is not None and res.cover_time > 0


def test_unheard_sink_covers_nobody():
    res = run_once(flat_matrix(4, 80.0), RadioConfig(pt_dbm=-55.0), CsmaConfig(), 0, 1)
    assert not res.success
    assert res.covered == frozenset()
    assert res.cover_time is None
    assert res.transmissions == 1


def test_two_node_hit_rate_matches_link_probability():
    m = two_node_posture2()
    radio = RadioConfig(pt_dbm=-69.0)
    p = link_success_probability(1, 0, (), m, radio)
    assert 0.2 < p < 0.8
    b = run_batch(m, radio, CsmaConfig(), 1, 10_000, base_seed=5)
    se = math.sqrt(p * (1 - p) / 10_000)
    assert abs(b.hitting[0].mean - p) <= 3 * se


def test_determinism():
    m, radio, csma = posture2_running(), RadioConfig(pt_dbm=-56.0), CsmaConfig()
    t1, t2 = [], []
    a = run_once(m, radio, csma, 1, (9, 4), t1)
    b = run_once(m, radio, csma, 1, (9, 4), t2)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    s1, s2 = io.StringIO(), io.StringIO()
    write_trace(t1, s1)
    write_trace(t2, s2)
    assert s1.getvalue() == s2.getvalue()


def test_trace_is_json_lines():
    trace = []
    run_once(posture2_running(), RadioConfig(), CsmaConfig(), 1, 0, trace)
    buf = io.StringIO()
    write_trace(trace, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(trace)
    assert {"time", "kind", "node"} <= set(json.loads(lines[0]))


def _check_invariants(m, radio, sink, trace, res):
    times = [e["time"] for e in trace]
    assert times[0] >= 0 and times == sorted(times)
    starts = [e for e in trace if e["kind"] == "tx_start"]
    senders = [e["node"] for e in starts]
    assert len(senders) == len(set(senders))
    assert sink in senders
    # CCA: nothing audible on the air when the check says idle
    on_air = []
    for e in trace:
        if e["kind"] == "tx_start":
            on_air.append((e["node"], e["time"], e["time"] + radio.airtime, e["attenuation"]))
        if e["kind"] == "cca_check" and not e["busy"]:
            n = str(e["node"])
            for sender, t0, t1, att in on_air:
                if t0 <= e["time"] < t1:
                    assert radio.pt_dbm - att[n] < radio.sn_dbm
        if e["kind"] == "tx_end":
            for bits in e["segment_bits"].values():
                assert sum(bits) == radio.n_bit and min(bits) >= 0
    assert res.transmissions == len(senders)


@pytest.mark.parametrize("pt", [-60.0, -55.0, -50.0])
def test_run_invariants(pt):
    m, radio, csma = posture2_running(), RadioConfig(pt_dbm=pt), CsmaConfig()
    for seed in range(60):
        trace = []
        res = run_once(m, radio, csma, 1, seed, trace)
        _check_invariants(m, radio, 1, trace, res)


def test_segment_bits():
    assert _segment_bits([0.0, 1e-3], 0.0, 250, 250e3) == [250]
    bits = _segment_bits([1.0, 1.0 + 1.3e-6, 1.0 + 2e-3, 1.0 + 4e-3], 1.0, 1000, 250e3)
    assert sum(bits) == 1000 and bits[0] == 0
    assert _segment_bits([0.0, 1.5e-3, 4e-3], 0.0, 1000, 250e3) == [375, 625]


def test_drop_after_max_attempts():
    # both relays wake together; a 10 s packet keeps the loser's channel busy past its retries
    m = flat_matrix(3, 10.0)
    radio = RadioConfig(pt_dbm=-55.0, n_bit=10_000, bitrate_bps=1_000.0)
    csma = CsmaConfig(tu_seconds=1e-3, max_attempts=1)
    dropped = 0
    for seed in range(20):
        res = run_once(m, radio, csma, 0, seed)
        dropped += len(res.dropped)
        assert res.transmissions + len(res.dropped) == 3
    assert dropped > 0


def test_batch_statistics():
    m = flat_matrix(4, 10.0)
    b = run_batch(m, RadioConfig(), CsmaConfig(), 0, 50, 3)
    assert b.cover_probability.mean == 1.0 and b.cover_probability.stderr == 0.0
    assert b.cover_number.mean == 3.0
    assert b.mean_backoff_count >= 1.0
    one = run_batch(m, RadioConfig(), CsmaConfig(), 0, 1, 3)
    assert not one.stderr_defined and one.cover_probability.stderr is None
    with pytest.raises(ValueError):
        run_batch(m, RadioConfig(), CsmaConfig(), 0, 0)


def test_batch_workers_do_not_change_results():
    m, radio = posture2_running(), RadioConfig(pt_dbm=-56.0)
    a = run_batch(m, radio, CsmaConfig(), 1, 40, 2, workers=1)
    b = run_batch(m, radio, CsmaConfig(), 1, 40, 2, workers=2)
    assert a == b


def test_csma_config_validation():
    with pytest.raises(ValueError):
        CsmaConfig(w_init=0)
    with pytest.raises(ValueError):
        CsmaConfig(t_cca=-1)
