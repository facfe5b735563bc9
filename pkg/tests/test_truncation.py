import numpy as np
import pytest

from ipeps_ntu.ctmrg import converge, expect_one_site_sublattice
from ipeps_ntu.errors import DegenerateMetricError, StaleEnvironmentError
from ipeps_ntu.gates import BOND_SWEEP, SZ, GateKind, ModelParams, TrotterGate, quench_gate, second_order_schedule, thermal_gate
from ipeps_ntu.lattice import IpepsState, apply_gate_and_reduce, canonical_pair
from ipeps_ntu.truncation import (
    MetricTensor,
    TruncationConfig,
    als_optimize,
    evolve_step,
    ftu_metric,
    identity_metric,
    ntu_metric,
    psd_repair,
    svdu_truncate,
    truncation_error,
)
from conftest import random_state


def ntu_metric_oracle(state, pair):
    """Contract the full 16-tensor double-layer cluster in one einsum.

    Integer labels: every bond of the cluster gets one ket and one bra label,
    every outer leg a single label shared by ket and bra (i.e. traced).
    """
    left, right = canonical_pair(state, pair.bond)
    qa, qb = pair.q_a, pair.q_b
    lab = iter(range(100))
    L = {k: next(lab) for k in [
        "m", "m'", "n", "n'", "tA", "tA'", "lA", "lA'", "bA", "bA'", "tB", "tB'", "bB", "bB'", "rB", "rB'",
        "x", "x'", "y", "y'", "p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8",
        "t3", "l3", "b3", "t4", "b4", "r4", "t5", "l5", "t6", "r6", "l7", "b7", "b8", "r8",
    ]}
    c = np.conj
    ops = [
        qa, [L["p1"], L["tA"], L["lA"], L["bA"], L["m"]],
        c(qa), [L["p1"], L["tA'"], L["lA'"], L["bA'"], L["m'"]],
        qb, [L["p2"], L["tB"], L["bB"], L["rB"], L["n"]],
        c(qb), [L["p2"], L["tB'"], L["bB'"], L["rB'"], L["n'"]],
        # NL: right-type tensor left of A, its right leg meets A.left
        right, [L["p3"], L["t3"], L["l3"], L["b3"], L["lA"]],
        c(right), [L["p3"], L["t3"], L["l3"], L["b3"], L["lA'"]],
        # NR: left-type tensor right of B, its left leg meets B.right
        left, [L["p4"], L["t4"], L["rB"], L["b4"], L["r4"]],
        c(left), [L["p4"], L["t4"], L["rB'"], L["b4"], L["r4"]],
        # TL above A (right-type), TR above B (left-type), joined by x
        right, [L["p5"], L["t5"], L["l5"], L["tA"], L["x"]],
        c(right), [L["p5"], L["t5"], L["l5"], L["tA'"], L["x'"]],
        left, [L["p6"], L["t6"], L["x"], L["tB"], L["r6"]],
        c(left), [L["p6"], L["t6"], L["x'"], L["tB'"], L["r6"]],
        # BL below A (right-type), BR below B (left-type), joined by y
        right, [L["p7"], L["bA"], L["l7"], L["b7"], L["y"]],
        c(right), [L["p7"], L["bA'"], L["l7"], L["b7"], L["y'"]],
        left, [L["p8"], L["bB"], L["y"], L["b8"], L["r8"]],
        c(left), [L["p8"], L["bB'"], L["y'"], L["b8"], L["r8"]],
    ]
    g = np.einsum(*ops, [L["m'"], L["n'"], L["m"], L["n"]], optimize="greedy")
    mn = pair.m * pair.n
    return g.reshape(mn, mn)


def _random_pair(rng, p, bond, complex_=True, dims=(2, 2, 2, 2)):
    state = random_state(rng, p=p, dims=dims, complex_=complex_ and p == 2)
    if p == 2:
        gate = quench_gate(ModelParams(hx=1.1, hz=0.2), 0.1)
    else:
        gate = thermal_gate(ModelParams(hx=1.1, hz=0.2), 0.1)
    return state, apply_gate_and_reduce(state, gate, bond)


@pytest.mark.parametrize("p", [2, 4])
def test_ntu_metric_matches_full_contraction(rng, p):
    for trial in range(10):
        bond = BOND_SWEEP[trial % 4]
        state, pair = _random_pair(rng, p, bond)
        g = ntu_metric(state, pair).g
        ref = ntu_metric_oracle(state, pair)
        scale = np.max(np.abs(ref))
        assert np.max(np.abs(g - ref)) <= 1e-11 * scale
        assert np.max(np.abs(ref - ref.conj().T)) <= 1e-12 * scale
        w = np.linalg.eigvalsh(0.5 * (ref + ref.conj().T))
        assert w[0] >= -1e-12 * w[-1]


def test_ntu_metric_with_unequal_bond_dimensions(rng):
    state, pair = _random_pair(rng, 2, BOND_SWEEP[2], dims=(1, 2, 3, 2))
    ref = ntu_metric_oracle(state, pair)
    np.testing.assert_allclose(ntu_metric(state, pair).g, ref, atol=1e-11 * np.max(np.abs(ref)))


def test_ntu_metric_of_product_state_is_identity():
    v = np.array([0.6, 0.8])
    t = v.reshape(2, 1, 1, 1, 1)
    state = IpepsState(t, t.copy())
    pair = apply_gate_and_reduce(state, quench_gate(ModelParams(hx=1.0), 0.2), BOND_SWEEP[0])
    g = ntu_metric(state, pair).g
    np.testing.assert_allclose(g / g[0, 0], np.eye(g.shape[0]), atol=1e-12)


def test_svdu_error_is_truncation_weight(rng):
    _, pair = _random_pair(rng, 2, BOND_SWEEP[0])
    m_a, m_b, rep = svdu_truncate(pair, 2)
    p = pair.product()
    frob = np.linalg.norm(m_a @ m_b.T - p) ** 2 / np.linalg.norm(p) ** 2
    assert rep.epsilon_final == pytest.approx(frob, rel=1e-10)
    assert truncation_error(identity_metric(pair), pair, m_a, m_b) == pytest.approx(frob, rel=1e-10)


def _singular_values(m_a, m_b):
    return np.linalg.svd(m_a @ m_b.T, compute_uv=False)


def test_als_with_identity_metric_reproduces_svd(rng):
    cfg = TruncationConfig("ntu", 2)
    for _ in range(5):
        _, pair = _random_pair(rng, 2, BOND_SWEEP[1])
        ref = _singular_values(*svdu_truncate(pair, 2)[:2])
        m_a, m_b, rep = als_optimize(pair, identity_metric(pair), cfg)
        np.testing.assert_allclose(_singular_values(m_a, m_b), ref, atol=1e-10 * ref[0])
        # same optimum from a random starting point
        seed = (rng.standard_normal((pair.m, 2)) + 0j, rng.standard_normal((pair.n, 2)) + 0j)
        m_a, m_b, rep = als_optimize(pair, identity_metric(pair), TruncationConfig("ntu", 2, als_max_sweeps=2000), seed=seed)
        np.testing.assert_allclose(_singular_values(m_a, m_b), ref, atol=1e-10 * ref[0])


def _best_random_trial(rng, pair, g, n_trials=10_000, k=2):
    p = pair.product().reshape(-1)
    m_a = rng.standard_normal((n_trials, pair.m, k)) + 1j * rng.standard_normal((n_trials, pair.m, k))
    m_b = rng.standard_normal((n_trials, pair.n, k)) + 1j * rng.standard_normal((n_trials, pair.n, k))
    x = np.einsum("tik,tjk->tij", m_a, m_b).reshape(n_trials, -1)
    gx = x @ g.T
    xgx = np.real(np.sum(x.conj() * gx, 1))
    xgp = np.sum(gx.conj() * p, 1)
    pgp = np.real(np.vdot(p, g @ p))
    # optimal complex rescaling of every trial
    eps = (pgp - np.abs(xgp) ** 2 / xgx) / pgp
    return float(np.min(eps))


def test_als_beats_random_trials_and_is_monotone(rng):
    cfg = TruncationConfig("ntu", 2)
    for trial in range(6):
        _, pair = _random_pair(rng, 2, BOND_SWEEP[trial % 4])
        mn = pair.m * pair.n
        w = rng.standard_normal((mn, mn - 3 * trial)) + 1j * rng.standard_normal((mn, mn - 3 * trial))
        g = w @ w.conj().T
        metric = MetricTensor(g, "ntu-exact")
        m_a, m_b, rep = als_optimize(pair, metric, cfg)
        hist = np.array(rep.history)
        assert np.all(np.diff(hist) <= 1e-12)
        assert rep.epsilon_final <= hist[-1] + 1e-12
        assert rep.epsilon_final <= _best_random_trial(rng, pair, g) + 1e-12


def test_als_rejects_degenerate_metric(rng):
    _, pair = _random_pair(rng, 2, BOND_SWEEP[0])
    metric = MetricTensor(-np.eye(pair.m * pair.n), "ntu-exact")
    with pytest.raises(DegenerateMetricError):
        als_optimize(pair, metric, TruncationConfig("ntu", 2))


def test_als_skips_when_no_truncation_needed(rng):
    _, pair = _random_pair(rng, 2, BOND_SWEEP[0], dims=(1, 1, 1, 1))
    m_a, m_b, rep = als_optimize(pair, identity_metric(pair), TruncationConfig("ntu", 4))
    assert rep.sweeps_used == 0
    np.testing.assert_allclose(m_a @ m_b.T, pair.product(), atol=1e-12)


def test_truncation_config_validation():
    with pytest.raises(ValueError):
        TruncationConfig("bogus", 2)
    with pytest.raises(ValueError):
        TruncationConfig("ntu", 0)
    with pytest.raises(ValueError):
        TruncationConfig("ntu", 2, pinv_tol_grid=(1e-8, 1e-12))


def _weak_state(rng, p=2):
    s = random_state(rng, p=p, dims=(2, 2, 2, 2))
    a, b = 0.15 * s.a, 0.15 * s.b
    a[:, 0, 0, 0, 0] += np.linspace(1.0, 0.4, p)
    b[:, 0, 0, 0, 0] += np.linspace(0.9, 0.5, p)
    return IpepsState(a, b)


@pytest.mark.parametrize("bond", BOND_SWEEP)
def test_ftu_metric_reproduces_ctmrg_expectation(rng, bond):
    """<P_proj| g |P_proj> / <P_1| g |P_1> must equal (1 + <Z>) / 2 on the first site."""
    state = _weak_state(rng)
    env = converge(state, 16)
    proj = np.array([[1.0, 0.0], [0.0, 0.0]])
    g_proj = TrotterGate(proj.reshape(2, 2, 1), np.eye(2).reshape(2, 2, 1), np.eye(2), 0.0, GateKind.QUENCH)
    g_one = TrotterGate(np.eye(2).reshape(2, 2, 1), np.eye(2).reshape(2, 2, 1), np.eye(2), 0.0, GateKind.QUENCH)
    vals = []
    for gate in (g_proj, g_one):
        pair = apply_gate_and_reduce(state, gate, bond)
        g = ftu_metric(env, pair, state).g
        p = pair.product().reshape(-1)
        vals.append(np.real(np.vdot(p, g @ p)))
    sub = 0 if bond.a_first else 1
    z = expect_one_site_sublattice(env, state, SZ, sub).real
    assert vals[0] / vals[1] == pytest.approx((1 + z) / 2, abs=1e-8)


def test_ftu_metric_is_psd_and_flags_clamping(rng):
    state = _weak_state(rng)
    env = converge(state, 16)
    pair = apply_gate_and_reduce(state, quench_gate(ModelParams(hx=1.0), 0.1), BOND_SWEEP[0])
    m = ftu_metric(env, pair, state)
    assert np.linalg.eigvalsh(m.g)[0] >= -1e-12 * np.max(np.abs(m.g))
    assert 0.0 <= m.clamped_weight < 0.05 and not m.warning


def test_ftu_requires_compatible_converged_environment(rng):
    state = _weak_state(rng)
    env = converge(state, 8)
    pair = apply_gate_and_reduce(state, quench_gate(ModelParams(hx=1.0), 0.1), BOND_SWEEP[0])
    stale = env.copy()
    stale.converged = False
    with pytest.raises(StaleEnvironmentError):
        ftu_metric(stale, pair, state)
    other = IpepsState(state.a[:, :1], state.b[:, :, :, :1])
    with pytest.raises(StaleEnvironmentError):
        ftu_metric(env, pair, other)
    sched = second_order_schedule(lambda s: quench_gate(ModelParams(hx=1.0), s), 0.01)
    with pytest.raises(StaleEnvironmentError):
        evolve_step(state, sched, TruncationConfig("ftu", 2))


def test_evolve_step_debug_mode_and_trace(rng):
    state = _weak_state(rng)
    sched = second_order_schedule(lambda s: quench_gate(ModelParams(hx=1.0), s), 0.05)
    new, rep = evolve_step(state, sched, TruncationConfig("ntu", 2, debug=True))
    assert new.a.shape == state.a.shape
    assert len(rep.bonds) == 7
    line = rep.to_json(step=1)
    assert '"max_eps"' in line and '"step": 1' in line


def _identity_gate():
    e = np.eye(2).reshape(2, 2, 1)
    return TrotterGate(e, e.copy(), np.eye(2), 0.0, GateKind.QUENCH)


def test_svdu_edge_cases(rng):
    _, pair = _random_pair(rng, 2, BOND_SWEEP[0], dims=(2, 1, 2, 1))  # rD = 2
    m_a, m_b, rep = svdu_truncate(pair, 2)
    assert rep.svd_truncation_weight == 0.0
    state = random_state(rng, dims=(2, 2, 2, 2), complex_=True)
    pair = apply_gate_and_reduce(state, _identity_gate(), BOND_SWEEP[1])
    m_a, m_b, _ = svdu_truncate(pair, 2)
    np.testing.assert_allclose(m_a @ m_b.T, pair.product(), atol=1e-12 * np.max(np.abs(pair.product())))
    zero = type(pair)(pair.q_a, pair.q_b, pair.r_a, np.zeros_like(pair.r_b), pair.bond)
    m_a, m_b, rep = svdu_truncate(zero, 2)
    assert np.all(m_a @ m_b.T == 0) and np.isfinite(rep.epsilon_final)


def test_ntu_metric_hermitian_psd_at_d3(rng):
    for trial in range(50):
        state, pair = _random_pair(rng, 2, BOND_SWEEP[trial % 4], dims=(3, 3, 3, 3))
        g = ntu_metric(state, pair).g
        w = np.linalg.eigvalsh(g)
        assert w[0] >= -1e-12 * w[-1]
        if trial == 0:
            ref = ntu_metric_oracle(state, pair)
            assert np.max(np.abs(ref - ref.conj().T)) <= 1e-12 * np.max(np.abs(ref))
            assert np.max(np.abs(g - ref)) <= 1e-11 * np.max(np.abs(ref))


def test_ftu_metric_of_product_state_matches_ntu():
    v = np.array([0.6, 0.8])
    t = v.reshape(2, 1, 1, 1, 1)
    state = IpepsState(t, t.copy())
    env = converge(state, 1)
    for bond in BOND_SWEEP:
        pair = apply_gate_and_reduce(state, quench_gate(ModelParams(hx=1.0), 0.2), bond)
        g_f = ftu_metric(env, pair, state).g
        g_n = ntu_metric(state, pair).g
        np.testing.assert_allclose(g_f / np.trace(g_f), g_n / np.trace(g_n), atol=1e-8)


def test_psd_repair_flags_large_clamp():
    g = np.diag([1.0, 0.5, -0.2])
    m = psd_repair(g)
    assert m.clamped_weight == pytest.approx(0.2 / 1.7)
    assert m.warning
    np.testing.assert_allclose(np.linalg.eigvalsh(m.g), [0.0, 0.5, 1.0], atol=1e-15)
    small = psd_repair(-np.diag([1.0, 0.5, -0.01]))  # negative trace: sign flipped first
    assert not small.warning and small.clamped_weight == pytest.approx(0.01 / 1.51)


def test_als_without_truncation_is_exact(rng):
    _, pair = _random_pair(rng, 2, BOND_SWEEP[0], dims=(2, 1, 2, 1))
    g = np.eye(pair.m * pair.n)
    m_a, m_b, rep = als_optimize(pair, MetricTensor(g, "ntu-exact"), TruncationConfig("ntu", pair.bond_leg_dim))
    assert rep.sweeps_used == 0 and rep.epsilon_final < 1e-24


def test_error_is_gauge_invariant_at_fixed_point(rng):
    state, pair = _random_pair(rng, 2, BOND_SWEEP[2])
    metric = ntu_metric(state, pair)
    m_a, m_b, rep = als_optimize(pair, metric, TruncationConfig("ntu", 2))
    x = np.eye(2) + 0.3 * (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
    eps = truncation_error(metric, pair, m_a @ x, m_b @ np.linalg.inv(x).T)
    assert eps == pytest.approx(rep.epsilon_final, abs=1e-10)


def test_ntu_beats_svdu_in_ntu_metric(rng):
    cfg = TruncationConfig("ntu", 2)
    eps_ntu, eps_svdu = [], []
    for trial in range(20):
        state, pair = _random_pair(rng, 2, BOND_SWEEP[trial % 4], dims=(3, 3, 3, 3))
        metric = ntu_metric(state, pair)
        eps_svdu.append(truncation_error(metric, pair, *svdu_truncate(pair, 2)[:2]))
        eps_ntu.append(als_optimize(pair, metric, cfg)[2].epsilon_final)
    assert np.mean(eps_ntu) <= np.mean(eps_svdu)


def test_evolve_step_exact_cases(rng):
    state = _weak_state(rng)
    sched = second_order_schedule(lambda s: _identity_gate(), 0.1)
    for scheme in ("svdu", "ntu"):
        _, rep = evolve_step(state, sched, TruncationConfig(scheme, 2))
        assert rep.max_eps < 1e-20
    plus = IpepsState(np.full((2, 1, 1, 1, 1), 2**-0.5, dtype=complex), np.full((2, 1, 1, 1, 1), 2**-0.5, dtype=complex))
    sched = second_order_schedule(lambda s: quench_gate(ModelParams(hx=0.0), s), 0.01)
    st = plus
    for _ in range(3):
        st, rep = evolve_step(st, sched, TruncationConfig("ntu", 2))
        assert rep.max_eps < 1e-20 and max(r.epsilon_final for _, r in rep.bonds) < 1e-20


def test_svdu_equals_identity_metric_als_step(rng):
    state = _weak_state(rng)
    pair = apply_gate_and_reduce(state, quench_gate(ModelParams(hx=1.0), 0.3), BOND_SWEEP[0])
    s1 = _singular_values(*svdu_truncate(pair, 2)[:2])
    s2 = _singular_values(*als_optimize(pair, identity_metric(pair), TruncationConfig("ntu", 2))[:2])
    np.testing.assert_allclose(s1, s2, atol=1e-10 * s1[0])
