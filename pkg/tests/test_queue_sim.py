import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgecast.channel import LinkProfile, dbm_to_watt
from edgecast.delay import DelayConstraint, sustainable_rate
from edgecast.queue_sim import QueueTrace, dvp_sweep, run_queue, simulate_queue

LINK = LinkProfile(bandwidth=0.5e6, power=dbm_to_watt(20), distance=20)


def lindley(arrival, service):
    q = [0.0]
    for s in service:
        q.append(max(0.0, q[-1] + arrival - s))
    return np.array(q)


def brute_delays(arrival, service):
    """Delay of block k: blocks after k until cumulative service (FIFO) clears
    the arrivals up to and including k, via the min-plus departure formula."""
    n = len(service)
    A = arrival * np.arange(n + 1)
    S = np.concatenate(([0.0], np.cumsum(service)))
    # departures D(t) = min_{s <= t} (A(s) + S(t) - S(s))
    D = np.array([min(A[s] + S[t] - S[s] for s in range(t + 1)) for t in range(n + 1)])
    out = []
    for k in range(n):
        d = -1
        for t in range(k + 1, n + 1):
            if D[t] >= A[k + 1] - 1e-9:
                d = t - (k + 1)
                break
        out.append(d)
    return np.array(out)


def test_reflected_walk_matches_lindley_loop():
    rng = np.random.default_rng(0)
    service = rng.exponential(1.0, 1000)
    tr = run_queue(0.9, service)
    np.testing.assert_allclose(tr.backlog, lindley(0.9, service), atol=1e-9)


def test_delays_match_min_plus_oracle():
    rng = np.random.default_rng(1)
    service = rng.exponential(1.0, 300)
    tr = run_queue(0.95, service)
    np.testing.assert_array_equal(tr.delays(), brute_delays(0.95, service))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=5, max_size=60), st.floats(0.1, 2.0), st.integers(0, 4))
def test_violations_agree_with_delays(service, arrival, b):
    tr = run_queue(arrival, np.array(service))
    if tr.blocks - 1 - b < 0:
        return
    v = tr.violations(b)
    d = tr.delays()[: v.size]
    # a block still queued at the end must also be flagged
    expected = (d > b) | (d < 0)
    np.testing.assert_array_equal(v, expected)


def test_no_arrivals_never_violate():
    tr = run_queue(0.0, np.ones(50))
    assert not tr.violations(1).any()
    assert tr.dvp(1)[0] == 0.0


def test_overloaded_queue_always_violates():
    tr = run_queue(2.0, np.ones(200), warmup=10)
    assert tr.violations(3).all()


def test_warmup_excluded_and_short_trace():
    tr = run_queue(1.0, np.ones(20), warmup=5)
    assert tr.violations(2).size == 20 - 1 - 2 - 5 + 1
    with pytest.raises(ValueError):
        tr.violations(30)


def test_batch_stderr_matches_binomial_for_independent_blocks():
    rng = np.random.default_rng(2)
    flags = rng.random(200_000) < 0.05
    tr = QueueTrace(arrival=1.0, service=np.zeros(flags.size + 1), backlog=np.zeros(flags.size + 2), warmup=0, unstable=False)
    tr.violations = lambda b: flags  # independent by construction
    p, se, _ = tr.dvp(0)
    assert tr.batch_stderr(0) == pytest.approx(se, rel=0.3)


def test_batch_stderr_exceeds_binomial_for_a_loaded_queue():
    c = DelayConstraint(0.5, 0.1)
    v = sustainable_rate(LINK, c)
    tr = simulate_queue(LINK, v, blocks=200_000, warmup=1000, seed=3)
    _, se, _ = tr.dvp(5)
    assert tr.batch_stderr(5) > 2 * se


def test_simulation_seeded():
    a = simulate_queue(LINK, 1e6, blocks=2000, warmup=10, seed=7)
    b = simulate_queue(LINK, 1e6, blocks=2000, warmup=10, seed=7)
    np.testing.assert_array_equal(a.backlog, b.backlog)


def test_simulation_argument_checks():
    with pytest.raises(ValueError):
        simulate_queue(LINK, -1.0, blocks=10, warmup=0)
    with pytest.raises(ValueError):
        simulate_queue(LINK, 1.0, blocks=10, warmup=10)


def test_sweep_empirical_below_bound():
    rows = dvp_sweep(LINK, [(0.2, 0.1), (0.5, 0.01)], blocks=100_000, seed=0, warmup=1000)
    for r in rows:
        assert r.bound == pytest.approx(r.violation, rel=1e-6)
        assert r.empirical <= r.bound + 3 * max(r.stderr, r.batch_stderr)
        assert r.ci_low <= r.empirical <= r.ci_high
        assert r.measured > 0


def test_unstable_flag():
    tr = run_queue(1e10, np.zeros(1000), cap=1e12)
    assert tr.unstable
