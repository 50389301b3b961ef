import json
from itertools import product

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from covquant.exceptions import NotInvertibleError, ResonanceError
from covquant.formal_rep import (
    FormalSeries,
    NonlinearRep,
    bullet,
    check_rep,
    compose,
    formal_flow,
    invert,
    lie_bracket,
    linearize,
    poincare_basis,
    poincare_structure_constants,
    probe_bracket,
)


def random_series(dim, cap, rng, degrees=None, scale=0.5, linear="random"):
    terms = {}
    for n in degrees or range(1, cap + 1):
        terms[n] = scale * (rng.normal(size=(dim,) * (n + 1)) + 1j * rng.normal(size=(dim,) * (n + 1)))
    if linear == "identity":
        terms[1] = np.eye(dim)
    elif linear == "near_identity":
        terms[1] = np.eye(dim) + 0.2 * rng.normal(size=(dim, dim))
    return FormalSeries(dim, terms, cap)


# -- sympy coordinate oracle ------------------------------------------------------------

def to_sympy(F, xs):
    comps = []
    for o in range(F.dim):
        expr = 0
        for n, t in F.terms.items():
            for idx in product(range(F.dim), repeat=n):
                c = t[(o,) + idx]
                if c != 0:
                    expr += complex(c) * sp.Mul(*[xs[i] for i in idx])
        comps.append(sp.expand(expr))
    return comps


def truncate_expr(expr, xs, cap):
    poly = sp.Poly(expr, *xs)
    return {m: complex(c) for m, c in poly.terms() if sum(m) <= cap}


def assert_poly_equal(exprs_a, exprs_b, xs, cap, tol):
    for ea, eb in zip(exprs_a, exprs_b):
        da, db = truncate_expr(ea, xs, cap), truncate_expr(eb, xs, cap)
        for m in set(da) | set(db):
            assert abs(da.get(m, 0) - db.get(m, 0)) < tol, (m, da.get(m, 0), db.get(m, 0))


def test_compose_unit(rng):
    F = random_series(3, 3, rng)
    I = FormalSeries.identity(3, 3)
    assert (compose(I, F) - F).max_abs() < 1e-13
    assert (compose(F, I) - F).max_abs() < 1e-13


def test_compose_single_partition(rng):
    F = random_series(3, 3, rng, degrees=[1])
    H = random_series(3, 3, rng, degrees=[2])
    C = compose(F, H)
    assert set(C.terms) == {2}
    assert np.allclose(C.terms[2], np.tensordot(F.terms[1], H.terms[2], axes=([1], [0])))


def test_compose_matches_coordinate_substitution(rng):
    xs = sp.symbols("x0:2")
    F = random_series(2, 3, rng)
    H = random_series(2, 3, rng)
    fs, hs = to_sympy(F, xs), to_sympy(H, xs)
    sub = [sp.expand(f.subs(dict(zip(xs, hs)), simultaneous=True)) for f in fs]
    assert_poly_equal(to_sympy(compose(F, H), xs), sub, xs, 3, 1e-12)


def test_bullet_examples(rng):
    F = random_series(3, 4, rng)
    B = bullet(F, FormalSeries.identity(3, 4))
    for n in range(1, 5):
        assert np.allclose(B.terms[n], n * F.terms[n])
    f2 = random_series(3, 3, rng, degrees=[2])
    h1 = random_series(3, 3, rng, degrees=[1])
    got = bullet(f2, h1).terms[2]
    t = f2.terms[2]
    h = h1.terms[1]
    expected = np.einsum("oab,ai->oib", t, h) + np.einsum("oab,bj->oaj", t, h)
    assert np.allclose(got, 0.5 * (expected + expected.transpose(0, 2, 1)))


def test_bullet_is_jacobian_times_field(rng):
    xs = sp.symbols("x0:2")
    F, H = random_series(2, 3, rng), random_series(2, 3, rng)
    fs, hs = to_sympy(F, xs), to_sympy(H, xs)
    J = sp.Matrix(fs).jacobian(xs)
    ref = [sp.expand(e) for e in J * sp.Matrix(hs)]
    assert_poly_equal(to_sympy(bullet(F, H), xs), ref, xs, 3, 1e-12)


def test_lie_bracket_linear_and_vector_field_sign(rng):
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 3))
    L = lie_bracket(FormalSeries.linear(A), FormalSeries.linear(B))
    assert np.allclose(L.terms[1], A @ B - B @ A)
    # vector-field oracle: classical bracket [X_F, X_H] = DH F - DF H is the negative
    xs = sp.symbols("x0:2")
    F, H = random_series(2, 3, rng), random_series(2, 3, rng)
    fs, hs = sp.Matrix(to_sympy(F, xs)), sp.Matrix(to_sympy(H, xs))
    classical = hs.jacobian(xs) * fs - fs.jacobian(xs) * hs
    assert_poly_equal(to_sympy(lie_bracket(F, H), xs), [-sp.expand(e) for e in classical], xs, 3, 1e-11)
    assert lie_bracket(F, F).max_abs() < 1e-13


def test_jacobi(rng):
    F, G, H = (random_series(4, 4, rng) for _ in range(3))
    jac = lie_bracket(F, lie_bracket(G, H)) + lie_bracket(G, lie_bracket(H, F)) + lie_bracket(H, lie_bracket(F, G))
    assert jac.max_abs() < 1e-11


def test_compose_associative(rng):
    F, G, H = (random_series(4, 4, rng) for _ in range(3))
    assert (compose(compose(F, G), H) - compose(F, compose(G, H))).max_abs() < 1e-11


def test_invert(rng):
    I = FormalSeries.identity(3, 4)
    assert (invert(I) - I).max_abs() == 0
    F = random_series(3, 3, rng, degrees=[2])
    F.terms[1] = np.eye(3)
    G = invert(F)
    assert np.allclose(G.terms[2], -F.terms[2])
    # degree 3 of the inverse: 2 f2(f2(x), x) symmetrized
    f2 = F.terms[2]
    corr = 2 * np.einsum("oab,aij->oijb", f2, f2)
    corr = (corr + corr.transpose(0, 1, 3, 2) + corr.transpose(0, 3, 2, 1)) / 3
    assert np.allclose(G.terms[3], corr)
    for S in (compose(F, G), compose(G, F)):
        assert (S - I.with_cap(3)).max_abs() < 1e-12
    with pytest.raises(NotInvertibleError):
        invert(FormalSeries(3, {1: np.zeros((3, 3))}, 3))


def test_invert_random(rng):
    F = random_series(5, 4, rng, linear="near_identity")
    G = invert(F)
    I = FormalSeries.identity(5, 4)
    for S in (compose(F, G), compose(G, F)):
        assert max((S - I).residual_by_degree().values()) < 1e-10


def test_prefix_stability(rng):
    F, H = random_series(3, 4, rng), random_series(3, 4, rng)
    full = compose(F, H).truncate(2)
    short = compose(F.truncate(2), H.truncate(2))
    assert (full - short).max_abs() < 1e-13
    full = bullet(F, H).truncate(3)
    short = bullet(F.truncate(3), H.truncate(3))
    assert (full - short).max_abs() < 1e-13


def test_evaluation_and_multilinear(rng):
    F = random_series(3, 3, rng)
    x = rng.normal(size=(5, 3)) + 0j
    vals = F(x)
    for b in range(5):
        ref = sum(np.einsum("o" + "abc"[:n] + "," + ",".join("abc"[:n]) + "->o", F.terms[n], *([x[b]] * n)) for n in F.terms)
        assert np.allclose(vals[b], ref)


def test_formal_flow_of_hamiltonian_field_is_exact_flow():
    # 1 degree of freedom, X = (y^2, 0): flow (x + t y^2, y)
    t = np.zeros((2, 2, 2))
    t[0, 1, 1] = 1.0
    X = FormalSeries(2, {2: t}, 3)
    phi = formal_flow(X, 0.3)
    assert np.allclose(phi.terms[1], np.eye(2))
    assert np.isclose(phi.terms[2][0, 1, 1], 0.3)
    assert 3 not in phi.terms or np.abs(phi.terms[3]).max() < 1e-15


def test_json_round_trip(rng):
    F = random_series(3, 3, rng)
    back = FormalSeries.from_json(json.loads(json.dumps(F.to_json())))
    assert (back - F).max_abs() < 1e-15


# -- Poincare structure constants via differential operators ----------------------------

def _operators(d):
    t = sp.Symbol("t")
    xs = sp.symbols(f"x1:{d + 1}")
    X = (t,) + xs
    f = sp.Function("f")(*X)
    ops = {"P0": lambda g: sp.diff(g, t)}
    for j in range(1, d + 1):
        ops[f"P{j}"] = lambda g, j=j: sp.diff(g, X[j])
        ops[f"M0{j}"] = lambda g, j=j: t * sp.diff(g, X[j]) + X[j] * sp.diff(g, t)
        for i in range(1, j):
            ops[f"M{i}{j}"] = lambda g, i=i, j=j: X[i] * sp.diff(g, X[j]) - X[j] * sp.diff(g, X[i])
    return ops, f


@pytest.mark.parametrize("d", [1, 2, 3])
def test_structure_constants_match_differential_operators(d):
    ops, f = _operators(d)
    table = poincare_structure_constants(d)
    basis = poincare_basis(d)
    assert len(basis) == (d + 1) * (d + 2) // 2
    for X, Y in product(basis, repeat=2):
        comm = sp.expand(ops[X](ops[Y](f)) - ops[Y](ops[X](f)))
        rhs = sp.expand(sum(c * ops[Z](f) for Z, c in table.get((X, Y), {}).items()))
        assert sp.simplify(comm - rhs) == 0, (X, Y)


def test_structure_constants_jacobi():
    d = 3
    basis = poincare_basis(d)
    table = poincare_structure_constants(d)

    def br(u, v):
        out = {}
        for x, cx in u.items():
            for y, cy in v.items():
                for z, c in table.get((x, y), {}).items():
                    out[z] = out.get(z, 0) + cx * cy * c
        return out

    for X, Y, Z in product(basis, repeat=3):
        tot = {}
        for a, b, c in ((X, Y, Z), (Y, Z, X), (Z, X, Y)):
            for k, v in br({a: 1}, br({b: 1}, {c: 1})).items():
                tot[k] = tot.get(k, 0) + v
        assert all(v == 0 for v in tot.values())


# -- representations ---------------------------------------------------------------------

def _so2_rep():
    # translations in the plane: P1, P2 commute; acting linearly on C^2
    I2 = FormalSeries.linear(np.zeros((2, 2)))
    return NonlinearRep(["A", "B"], {"A": I2, "B": I2}, {})


def test_check_rep_trivial():
    rep = _so2_rep()
    assert check_rep(rep).max_residual == 0 and check_rep(rep).flagged == []


def test_check_rep_detects_wrong_sign(rng):
    # linear rep of sl2-like pair with [X, Y] = Y realized by diagonal/nilpotent matrices
    X = FormalSeries.linear(np.diag([1.0, 0.0]))
    Y = FormalSeries.linear(np.array([[0.0, 1.0], [0.0, 0.0]]))
    rep = NonlinearRep(["X", "Y"], {"X": X, "Y": Y}, {("X", "Y"): {"Y": 1}, ("Y", "X"): {"Y": -1}})
    assert check_rep(rep).flagged == []
    rep.images["X"] = X * -1
    rep2 = check_rep(rep)
    assert ("X", "Y") in rep2.flagged and rep2.residuals[("X", "Y")][1] > 1


def test_probe_bracket_matches_dense(rng):
    F, H = random_series(4, 3, rng), random_series(4, 3, rng)
    psi = rng.normal(size=4) + 1j * rng.normal(size=4)
    L = lie_bracket(F, H)
    for n in (1, 2, 3):
        assert np.allclose(probe_bracket(F, H, psi, n), L.homogeneous(n, psi))


def _toy_rep(g, omega=1.0, cap=2):
    # one mode: coordinates (abar, a), eigenvalues (+i w, -i w), T2[a; abar, abar] = g
    t1 = np.diag([1j * omega, -1j * omega])
    t2 = np.zeros((2, 2, 2), complex)
    t2[1, 0, 0] = g
    T = FormalSeries(2, {1: t1, 2: t2}, cap)
    return NonlinearRep(["P0"], {"P0": T}, {}, {"mass": omega})


def test_linearize_one_mode_closed_form():
    # hand solution: (lambda_a - 2 lambda_abar) W = -g  ->  W = -g / (-3 i w) = -i g / (3 w)
    g, w = 0.37, 1.3
    omega, report = linearize(_toy_rep(g, w), resonance_tol=w / 100)
    assert abs(omega.terms[2][1, 0, 0] - (-1j * g / (3 * w))) < 1e-12
    assert report.intertwining["P0"][2] < 1e-14


def test_linearize_one_mode_sympy_oracle():
    g, w = sp.Rational(3, 7), sp.Rational(5, 4)
    W = sp.Symbol("W")
    lam_a, lam_b = -sp.I * w, sp.I * w
    sol = sp.solve(sp.Eq((lam_a - 2 * lam_b) * W, -g), W)[0]
    omega, _ = linearize(_toy_rep(float(g), float(w)))
    assert abs(omega.terms[2][1, 0, 0] - complex(sol)) < 1e-12


def test_linearize_zero_interaction():
    t1 = np.diag([1j, 2j, -1j, -2j])
    rep = NonlinearRep(["P0"], {"P0": FormalSeries(4, {1: t1}, 3)}, {}, {"mass": 1.0})
    omega, report = linearize(rep)
    assert (omega - FormalSeries.identity(4, 3)).max_abs() == 0
    assert max(report.intertwining["P0"].values()) == 0


def test_linearize_detects_resonance():
    # cubic source hitting lambda_abar - (lambda_abar + lambda_abar - lambda_abar)... use degree 2 with
    # out eigenvalue equal to the sum of the inputs
    t1 = np.diag([1j, 2j])
    t2 = np.zeros((2, 2, 2), complex)
    t2[1, 0, 0] = 1.0
    rep = NonlinearRep(["P0"], {"P0": FormalSeries(2, {1: t1, 2: t2}, 2)}, {}, {"mass": 1.0})
    with pytest.raises(ResonanceError) as exc:
        linearize(rep)
    assert exc.value.degree == 2 and exc.value.tuples[0][:2] == [1, [0, 0]]
    omega, report = linearize(rep, on_resonance="skip")
    assert report.resonant_skipped[2] and report.intertwining["P0"][2] > 0.5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_bracket_antisymmetric_bilinear(seed):
    rng = np.random.default_rng(seed)
    F, G, H = (random_series(3, 3, rng) for _ in range(3))
    a, b = rng.normal(size=2)
    lhs = lie_bracket(F * a + G * b, H)
    rhs = lie_bracket(F, H) * a + lie_bracket(G, H) * b
    assert (lhs - rhs).max_abs() < 1e-11
    assert (lie_bracket(F, G) + lie_bracket(G, F)).max_abs() < 1e-12
