import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covquant.exceptions import BlowUpError, ConfigError
from covquant.formal_rep import check_rep, poincare_structure_constants
from covquant.functional_algebra import free_hamiltonian
from covquant.kleingordon import (
    FieldOperators,
    Potential,
    SpectralInteraction,
    WaveOperatorEstimate,
    build_free_rep,
    build_interaction,
    check_linearization,
    energy,
    evolve,
    evolve_modes,
    free_flow,
    interaction_tensor,
    momentum,
    probe_residual,
    scattering_operator,
    spectral_images,
    wave_operator,
)
from covquant.modes import CauchyData, ModeGrid, ModeVector, decompose, energy_norm, gaussian_cauchy, reconstruct
from covquant.pushforward import NumericPullbackGradient, hamiltonian_field, stacked_poisson


def random_modes(grid, rng, scale=0.1, real=True, batch=()):
    a = scale * (rng.normal(size=batch + (grid.size,)) + 1j * rng.normal(size=batch + (grid.size,)))
    abar = np.conj(a) if real else scale * (rng.normal(size=a.shape) + 1j * rng.normal(size=a.shape))
    return ModeVector(grid, abar, a)


def band_limited(grid, rng, kmax, scale=0.1):
    """Real mode vector supported on |z| <= kmax."""
    v = random_modes(grid, rng, scale)
    mask = np.all(np.abs(grid.z) <= kmax, axis=1)
    return ModeVector(grid, v.abar * mask, v.a * mask)


# -- potential ----------------------------------------------------------------------------

@pytest.mark.parametrize("power", [0, 1, 2])
def test_potential_rejects_low_powers(power):
    with pytest.raises(ConfigError, match="V\\(0\\)=V′\\(0\\)=V″\\(0\\)=0"):
        Potential({power: 0.5, 4: 1.0})


def test_potential_config_forms_agree():
    a = Potential.from_config({"coeffs": [0.0, 0.1]})
    b = Potential.from_config({"coeffs": {"4": 0.1}})
    assert a == b == Potential.phi4(0.1)
    assert Potential.from_config(a.to_config()) == a
    assert a.degree == 4 and Potential().is_zero


def test_potential_derivatives_match_finite_differences():
    V = Potential({3: 0.3, 4: -0.2, 6: 0.05})
    s, h = np.linspace(-1.5, 1.5, 7), 1e-6
    assert np.allclose(V.derivative(s), (V(s + h) - V(s - h)) / (2 * h), atol=1e-8)
    assert np.allclose(V.second_derivative(s), (V.derivative(s + h) - V.derivative(s - h)) / (2 * h), atol=1e-8)


def test_positivity_certificate():
    assert Potential.phi4(0.1).certify_positive(1.0)
    assert Potential().certify_positive(1.0)
    with pytest.raises(ConfigError, match="positivity"):
        Potential({3: 0.1}).certify_positive(1.0)
    with pytest.raises(ConfigError, match="positivity"):
        Potential({4: -0.1}).certify_positive(1.0)
    # quartic well deeper than the mass term
    with pytest.raises(ConfigError, match="positivity"):
        Potential({4: -3.0, 6: 1.0}).certify_positive(1.0)


# -- free generators -------------------------------------------------------------------------

@pytest.mark.parametrize("d,n", [(1, 8), (2, 4)])
def test_free_translations_commute_exactly(d, n):
    free = build_free_rep(ModeGrid(d, n, 2 * np.pi, 1.0))
    keys = ["P0"] + [f"P{j}" for j in range(1, d + 1)]
    for x in keys:
        for y in keys:
            A, B = free.matrices[x], free.matrices[y]
            assert np.abs(A @ B - B @ A).max() == 0
        assert free.hamiltonian_defect[x] < 1e-15


def test_free_energy_functional_is_free_hamiltonian(grid8):
    free = build_free_rep(grid8, max_degree=4)
    assert free.functionals["P0"].allclose(free_hamiltonian(grid8, 4), atol=1e-14)


def test_free_functionals_generate_their_matrices(grid8):
    free = build_free_rep(grid8, max_degree=4)
    for label in ("P0", "P1"):
        X = hamiltonian_field(free.functionals[label], 1)
        assert np.abs(X.terms[1] - free.matrices[label]).max() < 1e-13


# -- interaction -------------------------------------------------------------------------------

def test_zero_potential_reduces_to_free(grid4):
    gs = build_interaction(grid4, Potential(), degree_cap=3)
    free = build_free_rep(grid4)
    for label, s in gs.series.items():
        assert set(s.terms) == {1}
        assert np.array_equal(s.terms[1], free.matrices[label])


def test_degree_cap_below_force_degree_raises(grid4):
    with pytest.raises(Exception, match="degree"):
        build_interaction(grid4, Potential.phi4(0.1), degree_cap=2)


@pytest.mark.parametrize("power", [3, 4])
def test_dense_tensor_matches_spectral_evaluation(grid8, rng, power):
    V = Potential({power: 0.7})
    ops = FieldOperators(grid8, V.degree)
    spec = SpectralInteraction(grid8, V, ops)
    p = power - 1
    T = interaction_tensor(ops, V, p)
    args = [random_modes(grid8, rng, 1.0, real=False).stacked() for _ in range(p)]
    dense = T
    for x in args:
        dense = np.tensordot(dense, x, axes=([1], [0]))
    fast = spec.multilinear(p, args)
    assert np.abs(dense - fast).max() < 1e-13 * max(1.0, np.abs(dense).max())


@pytest.mark.parametrize("kmax", [0, 1, 2])
def test_interaction_matches_position_space_force(rng, kmax):
    grid = ModeGrid(1, 16, 2 * np.pi * 2, 1.0)
    g = 0.3
    V = Potential.phi4(g)
    v = band_limited(grid, rng, kmax, 0.5)
    out = SpectralInteraction(grid, V)(v.stacked())
    phi = reconstruct(v).phi
    force = reconstruct(ModeVector.from_stacked(grid, out), real=True, atol=1e-12)
    assert np.abs(force.phi).max() < 1e-13
    assert np.abs(force.pi - (-g * phi**3)).max() < 1e-12


def test_interaction_single_mode_position_space():
    grid = ModeGrid(1, 16, 2 * np.pi, 1.0)
    i = int(np.flatnonzero(grid.z[:, 0] == 1)[0])
    v = ModeVector.zeros(grid)
    v.a[i], v.abar[i] = 0.4 + 0.2j, 0.4 - 0.2j
    data = reconstruct(v)
    out = ModeVector.from_stacked(grid, SpectralInteraction(grid, Potential.phi4(1.0))(v.stacked()))
    kick = decompose(CauchyData(grid, np.zeros(grid.shape), -data.phi**3))
    assert np.abs(out.stacked() - kick.stacked()).max() < 1e-14


def test_interacting_hamiltonian_generates_time_translation(grid4):
    gs = build_interaction(grid4, Potential.phi4(0.3), degree_cap=3, max_degree=4)
    X = hamiltonian_field(gs.functionals["P0"], 3)
    assert (X - gs.rep().images["P0"]).max_abs() < 1e-14


def test_boost_functional_field_converges_under_refinement():
    errs = []
    for n in (4, 8):
        grid = ModeGrid(1, n, 2 * np.pi, 1.0)
        gs = build_interaction(grid, Potential.phi4(0.3), degree_cap=3, max_degree=4)
        X = hamiltonian_field(gs.functionals["M01"], 3)
        errs.append((X - gs.rep().images["M01"]).max_abs(3))
    assert errs[1] < 0.6 * errs[0]


def test_assembled_rep_closes_on_non_boost_pairs():
    grid = ModeGrid(1, 8, 2 * np.pi * 2, 1.0)
    rep = build_interaction(grid, Potential.phi4(0.1), degree_cap=3, functionals=False).rep()
    report = check_rep(rep, tol=1e-12, pairs=[("P0", "P1")])
    assert report.max_residual < 1e-12


@pytest.mark.parametrize("pair", [("P0", "M01"), ("P1", "M01")])
@pytest.mark.parametrize("degree", [1, 3])
def test_boost_probe_residual_decreases_under_refinement(pair, degree):
    # entrywise boost commutators do not converge (the sawtooth is unbounded
    # in the Fourier basis); closure is measured on a smooth probe instead
    V = Potential.phi4(0.1)
    sc = poincare_structure_constants(1)
    res = []
    for n in (16, 32):
        grid = ModeGrid(1, n, 2 * np.pi * 4, 1.0)
        images = spectral_images(grid, V, 3)
        psi = decompose(gaussian_cauchy(grid, 1.0, 1.5)).stacked()
        r = probe_residual(images, sc, *pair, psi, degree)
        res.append(energy_norm(ModeVector.from_stacked(grid, r)))
    assert np.log2(res[0] / res[1]) >= 1.8


# -- flows --------------------------------------------------------------------------------------

def test_free_flow_at_zero_is_identity(grid8, rng):
    v = random_modes(grid8, rng)
    assert np.array_equal(free_flow(v, 0.0).stacked(), v.stacked())


@settings(max_examples=25, deadline=None)
@given(s=st.floats(-20, 20), t=st.floats(-20, 20), seed=st.integers(0, 2**31))
def test_free_flow_group_and_isometry(s, t, seed):
    grid = ModeGrid(2, 4, 2 * np.pi, 1.3)
    v = random_modes(grid, np.random.default_rng(seed))
    lhs = free_flow(free_flow(v, s), t).stacked()
    assert np.abs(lhs - free_flow(v, s + t).stacked()).max() < 1e-12
    h0 = energy(v, Potential())
    assert abs(energy(free_flow(v, t), Potential()) - h0) < 1e-12 * max(1.0, abs(h0))


def test_evolve_without_potential_is_free_flow(rng):
    grid = ModeGrid(2, 8, 2 * np.pi * 2, 1.0)
    data = gaussian_cauchy(grid, 0.1, 2.0, momentum=0.5)
    out = evolve(data, Potential(), 3.0, 0.05)
    ref = reconstruct(free_flow(decompose(data), 3.0))
    assert np.abs(out.phi - ref.phi).max() < 1e-10
    assert np.abs(out.pi - ref.pi).max() < 1e-10


def test_evolve_is_reversible():
    grid = ModeGrid(2, 16, 2 * np.pi * 2, 1.0)
    data = gaussian_cauchy(grid, 0.3, 1.5, momentum=0.7)
    V = Potential.phi4(0.5)
    back = evolve(evolve(data, V, 5.0, 0.02), V, -5.0, 0.02)
    assert np.abs(back.phi - data.phi).max() < 1e-8
    assert np.abs(back.pi - data.pi).max() < 1e-8


def test_evolve_conserves_momentum_exactly():
    grid = ModeGrid(1, 32, 2 * np.pi * 4, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.5, 2.0, momentum=1.0))
    V = Potential({3: 0.2, 4: 0.5})
    P0 = momentum(v)
    w = evolve_modes(v, V, 100.0, 0.01)
    assert np.abs(momentum(w) - P0).max() < 1e-12


def test_energy_drift_is_second_order():
    grid = ModeGrid(1, 32, 2 * np.pi * 4, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.8, 2.0, momentum=0.5))
    V = Potential.phi4(1.0)
    E0 = float(np.real(energy(v, V)))
    drifts = []
    for dt in (0.04, 0.02):
        worst = [0.0]

        def track(t, z):
            e = float(np.real(energy(ModeVector.from_stacked(grid, z), V)))
            worst[0] = max(worst[0], abs(e - E0))

        evolve_modes(v, V, 4.0, dt, callback=track)
        drifts.append(worst[0])
    assert 4 * 0.8 < drifts[0] / drifts[1] < 4 * 1.2


def test_blow_up_is_reported_with_time():
    grid = ModeGrid(1, 16, 2 * np.pi, 1.0)
    v = decompose(gaussian_cauchy(grid, 3.0, 1.0))
    with pytest.raises(BlowUpError) as info:
        evolve_modes(v, Potential({4: -5.0}), 20.0, 0.01)
    assert 0 < info.value.time <= 20.0


def test_step_validation():
    grid = ModeGrid(1, 16, 2 * np.pi, 1.0)
    v = ModeVector.zeros(grid)
    with pytest.raises(ValueError, match="integer"):
        evolve_modes(v, Potential(), 1.0, 0.3)
    with pytest.raises(ValueError, match="pi"):
        evolve_modes(v, Potential(), 1.0, 0.5)


# -- wave and scattering operators --------------------------------------------------------------

def test_wave_operator_without_potential_is_identity(grid8, rng):
    v = random_modes(grid8, rng)
    for direction in ("+", "-"):
        out, est = wave_operator(direction, Potential(), 4.0, 0.1, v)
        assert np.abs(out.stacked() - v.stacked()).max() < 1e-14
        assert est.convergence_log[0][1] < 1e-14


def test_wave_operator_small_data_ball():
    grid = ModeGrid(1, 16, 2 * np.pi, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.5, 1.0))
    with pytest.raises(ValueError, match="small-data"):
        wave_operator("+", Potential.phi4(0.1), 1.0, 0.1, v, rho=0.1)


def test_wave_operator_round_trip():
    grid = ModeGrid(2, 16, 2 * np.pi * 2, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.1, 2.0))
    est = WaveOperatorEstimate("-", 4.0, 0.02, Potential.phi4(0.1), grid)
    assert np.abs(est.inverse(est(v)).stacked() - v.stacked()).max() < 1e-12


def test_wave_operator_preserves_poisson_bracket(rng):
    grid = ModeGrid(1, 16, 2 * np.pi * 2, 1.0)
    dim = 2 * grid.size
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    B = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    A, B = A + A.T, B + B.T

    def quad(M):
        return lambda z: (z @ M @ z, 2 * M @ z)

    v = decompose(gaussian_cauchy(grid, 0.3, 1.5, momentum=0.4)).stacked()
    for T in (2.0, 4.0):
        est = WaveOperatorEstimate("+", T, 0.02, Potential.phi4(1.0), grid)
        pb = NumericPullbackGradient(est)
        _, gF = pb.value_and_grad(v, quad(A))
        _, gG = pb.value_and_grad(v, quad(B))
        w = est.apply_stacked(v)
        lhs = stacked_poisson(grid, gF, gG)
        rhs = stacked_poisson(grid, 2 * A @ w, 2 * B @ w)
        assert abs(lhs - rhs) < 1e-10 * abs(rhs)


def test_pullback_gradient_matches_finite_differences(rng):
    grid = ModeGrid(1, 8, 2 * np.pi, 1.0)
    est = WaveOperatorEstimate("+", 1.0, 0.05, Potential({3: 0.4, 4: 1.0}), grid)
    v = decompose(gaussian_cauchy(grid, 0.3, 1.0)).stacked()
    val, grad = NumericPullbackGradient(est).value_and_grad(v)
    dz = rng.normal(size=v.shape) + 1j * rng.normal(size=v.shape)
    h = 1e-6

    def H(z):
        return energy(ModeVector.from_stacked(grid, est.apply_stacked(z)), est.potential)

    fd = (H(v + h * dz) - H(v - h * dz)) / (2 * h)
    assert abs(fd - grad @ dz) < 1e-7 * max(1.0, abs(fd))


def test_scattering_without_potential_is_identity(grid8, rng):
    v = random_modes(grid8, rng)
    assert np.abs(scattering_operator(Potential(), 3.0, 0.1, v).stacked() - v.stacked()).max() < 1e-14


def test_scattering_conserves_free_energy():
    grid = ModeGrid(2, 32, 2 * np.pi * 4, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.1, 2.0))
    h0 = energy(v, Potential())
    errs = []
    for T in (4.0, 12.0):
        s = scattering_operator(Potential.phi4(1.0), T, 0.02, v)
        errs.append(abs(energy(s, Potential()) - h0) / h0)
    assert errs[1] < errs[0] < 1e-3


def test_scattering_is_linear_in_small_coupling():
    grid = ModeGrid(1, 32, 2 * np.pi * 4, 1.0)
    v = decompose(gaussian_cauchy(grid, 0.1, 2.0))
    dev = [np.max(energy_norm(ModeVector.from_stacked(grid, scattering_operator(Potential.phi4(g), 5.0, 0.05, v).stacked() - v.stacked()))) for g in (1e-3, 2e-3)]
    assert dev[1] / dev[0] == pytest.approx(2.0, rel=0.01)


def test_check_linearization_zero_potential(grid8, rng):
    samples = random_modes(grid8, rng, batch=(3,))
    rep = check_linearization(Potential(), [1.0, 2.0], 0.1, samples)
    for key in ("H", "P", "K"):
        assert max(rep[key]) < 1e-13


def test_check_linearization_momentum_is_exact():
    grid = ModeGrid(2, 16, 2 * np.pi * 2, 1.0)
    samples = decompose(gaussian_cauchy(grid, 0.1, 2.0, momentum=0.5))
    rep = check_linearization(Potential.phi4(0.1), [2.0, 4.0], 0.02, samples, boosts=False)
    assert max(rep["P"]) < 1e-12
