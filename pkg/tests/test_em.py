import numpy as np
import pytest

import epprobit.em as em
from epprobit.constraints import build_constraints, marginalize_model
from epprobit.em import EmConfig, e_step, fit, initialize, lower_bound, m_step, prepare
from epprobit.ep import EpConfig, ep_moments
from epprobit.errors import DimensionMismatch, InvalidOutcome, NoProgress, NotConverged, NotPositiveDefinite
from epprobit.model import ChoiceObservation, ModelKind, ProbitModel
from epprobit.simulate import CompoundSymmetric, SimSpec, generate
from oracles import random_spd


@pytest.fixture(scope="module")
def outside_data():
    return generate(SimSpec(n=300, m=3, p=2, seed=11))


def test_initialize_examples(outside_data):
    obs = outside_data.observations
    kind = ModelKind.outside()
    m0 = initialize(obs, kind, EmConfig())
    np.testing.assert_array_equal(m0.sigma, np.eye(3))
    np.testing.assert_array_equal(m0.beta, np.zeros(2))
    m1 = initialize(obs, kind, EmConfig(trace_target=6.0))
    np.testing.assert_array_equal(m1.sigma, 0.5 * np.eye(3))
    ref = initialize(obs_reference(), ModelKind.reference(0), EmConfig())
    assert ref.sigma.shape == (2, 2) and ref.beta.shape == (3,)


def obs_reference():
    return generate(SimSpec(n=40, m=3, p=3, seed=2, kind=ModelKind.reference(0))).observations


def test_lower_bound_examples(rng):
    assert lower_bound(np.eye(4), np.eye(4)) == pytest.approx(-4.0, abs=1e-14)
    s = random_spd(rng, 3)
    assert lower_bound(s, s) == pytest.approx(-np.linalg.slogdet(s)[1] - 3.0, abs=1e-12)
    with pytest.raises(NotPositiveDefinite):
        lower_bound(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))


def test_m_step_beats_random_feasible_points(rng, outside_data):
    prep = prepare(outside_data.observations, ModelKind.outside())
    model = initialize(outside_data.observations, ModelKind.outside(), EmConfig())
    moments = e_step(prep, model, EmConfig())
    _, sigma, summary = m_step(prep, model, moments, 3.0)
    best = lower_bound(sigma, summary.s_hat)
    for _ in range(200):
        s = random_spd(rng, 3)
        s *= np.trace(np.linalg.inv(s)) / 3.0
        assert lower_bound(s, summary.s_hat) <= best + 1e-12


def test_m_step_improves_surrogate(outside_data):
    kind = ModelKind.outside()
    prep = prepare(outside_data.observations, kind)
    cfg = EmConfig()
    model = initialize(outside_data.observations, kind, cfg)
    for _ in range(4):
        moments = e_step(prep, model, cfg)
        beta, sigma, summary = m_step(prep, model, moments, 3.0)
        assert lower_bound(sigma, summary.s_hat) >= lower_bound(model.sigma, summary.s_hat) - 1e-12
        model = ProbitModel(beta, sigma, kind)


def test_m_step_is_idempotent_with_fixed_moments(outside_data):
    # beta is weighted by the current Sigma, so repeated M-steps with fixed
    # moments settle on a joint fixed point that a further step leaves alone
    kind = ModelKind.outside()
    prep = prepare(outside_data.observations, kind)
    model = initialize(outside_data.observations, kind, EmConfig())
    moments = e_step(prep, model, EmConfig())
    for _ in range(60):
        beta, sigma, _ = m_step(prep, model, moments, 3.0)
        model = ProbitModel(beta, sigma, kind)
    beta2, sigma2, _ = m_step(prep, model, moments, 3.0)
    np.testing.assert_allclose(sigma2, model.sigma, rtol=0, atol=1e-12)
    np.testing.assert_allclose(beta2, model.beta, rtol=0, atol=1e-12)


def test_trace_constraint_every_iteration(outside_data):
    for target in (None, 6.0):
        cfg = EmConfig(max_iters=6, trace_target=target)
        _, trace = fit(outside_data.observations, ModelKind.outside(), cfg)
        c = 3.0 if target is None else target
        for rec in trace:
            assert np.trace(np.linalg.inv(rec.sigma)) == pytest.approx(c, abs=1e-6 * 3)
            assert np.linalg.eigvalsh(rec.sigma).min() > 0
        assert len(trace) <= cfg.max_iters


def test_fixed_point_restart():
    data = generate(SimSpec(n=400, m=3, p=2, beta_true=np.zeros(2),
                            sigma_kind=CompoundSymmetric(1.0, 0.0), seed=4))
    kind = ModelKind.outside()
    cfg = EmConfig(tol_sigma=1e-6, max_iters=500)
    model, trace = fit(data.observations, kind, cfg)
    assert trace.converged
    again, trace2 = fit(data.observations, kind, EmConfig(tol_sigma=1e-4), init=model)
    assert trace2.converged and len(trace2) <= 3
    np.testing.assert_allclose(again.sigma, model.sigma, atol=1e-4)


def test_step_from_truth_is_statistical():
    # starting at the truth, the first move is sampling noise of order 1/sqrt(n)
    kind = ModelKind.outside()
    first = []
    for n in (250, 4000):
        data = generate(SimSpec(n=n, m=3, p=2, beta_true=np.zeros(2),
                                sigma_kind=CompoundSymmetric(1.0, 0.0), seed=5))
        _, trace = fit(data.observations, kind, EmConfig(max_iters=1),
                       init=ProbitModel(np.zeros(2), np.eye(3), kind))
        first.append(trace[0].max_abs_sigma_change)
        assert first[-1] < 2.0 / np.sqrt(n)


def test_reproducible_and_thread_independent(outside_data):
    obs = outside_data.observations
    kind = ModelKind.outside()
    cfg = EmConfig(max_iters=5, chunk_size=64)
    _, a = fit(obs, kind, cfg)
    _, b = fit(obs, kind, cfg)
    _, c = fit(obs, kind, EmConfig(max_iters=5, chunk_size=64, thread_count=4))
    assert a.fingerprint() == b.fingerprint() == c.fingerprint()
    assert a[0].e_step_ms >= 0 and a[0].m_step_ms >= 0


def test_subsampling(outside_data):
    obs = outside_data.observations
    kind = ModelKind.outside()
    cfg = EmConfig(max_iters=4, subsample_fraction=0.5, seed=3)
    _, a = fit(obs, kind, cfg)
    _, b = fit(obs, kind, cfg)
    _, c = fit(obs, kind, EmConfig(max_iters=4, subsample_fraction=0.5, seed=4))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert all(r.n_used == 150 for r in a)


def test_subsampled_convergence_uses_window(outside_data):
    _, trace = fit(outside_data.observations, ModelKind.outside(),
                   EmConfig(subsample_fraction=0.9, tol_sigma=0.05, max_iters=50))
    assert trace.converged and len(trace) >= 3
    assert max(r.max_abs_sigma_change for r in trace.records[-3:]) < 0.05


def test_failure_policies(outside_data):
    obs = outside_data.observations
    kind = ModelKind.outside()
    ep = EpConfig(max_sweeps=2, tol=1e-6)
    _, reuse = fit(obs, kind, EmConfig(max_iters=1, ep=ep))
    assert reuse[0].n_ep_nonconverged > 0 and reuse[0].n_used == len(obs)
    _, drop = fit(obs, kind, EmConfig(max_iters=1, ep=ep, ep_failure_policy="drop"))
    assert 0 < drop[0].n_used == len(obs) - drop[0].n_ep_nonconverged
    with pytest.raises(NotConverged):
        fit(obs, kind, EmConfig(max_iters=1, ep=ep, ep_failure_policy="abort"))


def test_variable_choice_sets_marginalize(rng):
    kind = ModelKind.outside()
    m, p = 4, 2
    obs = []
    for i in range(200):
        pos = [0, 1, 2, 3] if i % 3 == 0 else sorted(rng.choice(m, size=2, replace=False).tolist())
        x = rng.uniform(-0.5, 0.5, size=(len(pos), p))
        j = int(rng.integers(-1, len(pos)))
        obs.append(ChoiceObservation(x, None if j < 0 else j, positions=pos if len(pos) < m else None))
    model = ProbitModel(np.array([0.3, -0.2]), random_spd(rng, m), kind)
    prep = prepare(obs, kind, m)
    moments = e_step(prep, model, EmConfig())
    for g, mom in zip(prep.groups, moments):
        sub = marginalize_model(model, g.positions)
        for row, mu in zip(mom.keep[:3], mom.mu[:3]):
            o = obs[g.index[row]]
            ref = ep_moments(o.x @ model.beta, sub.sigma, build_constraints(kind, o.outcome, len(g.positions)))
            np.testing.assert_allclose(mu, ref.mean, atol=1e-8)
    fitted, trace = fit(obs, kind, EmConfig(max_iters=5), m=m)
    assert fitted.sigma.shape == (m, m)
    assert np.trace(np.linalg.inv(fitted.sigma)) == pytest.approx(m, abs=1e-6 * m)


def test_reference_kind_runs():
    obs = obs_reference()
    model, trace = fit(obs, ModelKind.reference(0), EmConfig(max_iters=3))
    assert model.sigma.shape == (2, 2) and len(trace) == 3


def test_bad_inputs(outside_data):
    kind = ModelKind.outside()
    with pytest.raises(InvalidOutcome):
        fit([], kind)
    with pytest.raises(DimensionMismatch):
        fit(outside_data.observations, kind, init=ProbitModel(np.zeros(2), np.eye(4), kind))
    with pytest.raises(ValueError):
        EmConfig(tol_sigma=0.0)
    with pytest.raises(ValueError):
        EmConfig(subsample_fraction=0.0)
    with pytest.raises(ValueError):
        EmConfig(ep_failure_policy="retry")


def test_no_progress_is_reported(monkeypatch, outside_data):
    real = em.e_step
    calls = {"n": 0}

    def worsening(*args, **kwargs):
        out = real(*args, **kwargs)
        calls["n"] += 1
        for mom in out:
            mom.log_lik -= calls["n"] * mom.keep.size
        return out

    monkeypatch.setattr(em, "e_step", worsening)
    with pytest.raises(NoProgress) as exc:
        fit(outside_data.observations, ModelKind.outside(), EmConfig(tol_sigma=1e-12, max_iters=50))
    assert len(exc.value.trace) == 11
