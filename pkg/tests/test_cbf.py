import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull

from caffnet.cbf import (
    FixedAlpha,
    HalfspaceBarrier,
    InputPolytope,
    LearnedAlpha,
    SmoothUnionCBF,
    assemble_constraints,
    box_barriers,
    cbf_terms,
    lie_derivatives,
    polygon_barrier,
    smooth_union_gradient,
    smooth_union_value,
)
from caffnet.dynamics import CustomDynamics, LinearDynamics, SingleIntegrator
from oracles import central_diff, rel_err

SQUARE = [[-1, -1], [1, -1], [1, 1], [-1, 1]]


def random_polygon(rng, scale=2.0):
    P = rng.uniform(-scale, scale, size=(rng.integers(3, 9), 2))
    hull = ConvexHull(P)
    return P[hull.vertices]


def test_halfspace_and_validation():
    h = HalfspaceBarrier([1.0, 2.0], 3.0)
    assert h.value([1.0, 1.0]) == 0.0
    np.testing.assert_array_equal(h.gradient(np.zeros((4, 2))), np.tile([1.0, 2.0], (4, 1)))
    with pytest.raises(ValueError):
        HalfspaceBarrier([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        SmoothUnionCBF((), 10.0)
    with pytest.raises(ValueError):
        SmoothUnionCBF((h,), kappa=0.0)
    with pytest.raises(ValueError):
        SmoothUnionCBF((h,), gradient_mode="bogus")


def test_equal_edges_give_exact_value():
    # all edge values equal to c at x -> value c
    edges = tuple(HalfspaceBarrier(a, 0.0) for a in ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]))
    cbf = SmoothUnionCBF(edges, 10.0)
    assert smooth_union_value(cbf, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
    edges = tuple(HalfspaceBarrier([1.0, 0.0], c) for c in (0.5, 0.5))
    assert smooth_union_value(SmoothUnionCBF(edges, 3.0), [2.0, 7.0]) == pytest.approx(1.5, abs=1e-15)


def test_single_edge_is_exact():
    e = HalfspaceBarrier([0.6, -0.8], 0.3)
    cbf = SmoothUnionCBF((e,), 10.0)
    x = np.array([1.7, -0.4])
    assert smooth_union_value(cbf, x) == pytest.approx(e.value(x), abs=1e-15)
    np.testing.assert_allclose(smooth_union_gradient(cbf, x), e.a)
    np.testing.assert_allclose(SmoothUnionCBF((e,), 10.0, "paper").gradient(x), e.a)


def test_square_far_outside_one_face():
    cbf = polygon_barrier(SQUARE, kappa=10.0)
    x = np.array([5.0, 0.0])
    hmax = cbf.edge_values(x).max()
    v = cbf.value(x)
    assert hmax - np.log(4) / 10 <= v <= hmax
    assert v == pytest.approx(hmax - np.log(4) / 10, abs=1e-6)  # other edges negligible


def test_polygon_orientation_and_sign():
    for verts in (SQUARE, SQUARE[::-1]):
        cbf = polygon_barrier(verts)
        assert cbf.value([0.0, 0.0]) < 0       # inside the obstacle
        assert cbf.value([3.0, 0.5]) > 0       # outside
        assert np.all(cbf.edge_values([0.0, 0.0]) < 0)
    with pytest.raises(ValueError):
        polygon_barrier([[0, 0], [1, 1]])


def test_symmetric_point_has_zero_gradient():
    edges = (HalfspaceBarrier([1.0, 0.0], 1.0), HalfspaceBarrier([-1.0, 0.0], 1.0))
    for mode in ("analytic", "paper"):
        g = SmoothUnionCBF(edges, 10.0, mode).gradient(np.array([0.0, 0.3]))
        np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_large_kappa_does_not_overflow():
    cbf = polygon_barrier(SQUARE, kappa=1e3)
    x = np.array([40.0, -3.0])
    v = cbf.value(x)
    assert np.isfinite(v) and np.all(np.isfinite(cbf.gradient(x)))
    assert np.isfinite(cbf.lambdas(x)).all()


def test_sandwich_and_lambda_sum(rng):
    for _ in range(300):
        kappa = rng.uniform(0.5, 50)
        cbf = polygon_barrier(random_polygon(rng), kappa)
        X = rng.uniform(-6, 6, size=(30, 2))
        hi = cbf.edge_values(X)
        v = cbf.value(X)
        n = cbf.n_edges
        assert np.all(hi.max(axis=1) - np.log(n) / kappa <= v + 1e-12)
        assert np.all(v <= hi.max(axis=1) + 1e-12)
        np.testing.assert_allclose(cbf.lambdas(X).sum(axis=1), n, rtol=1e-10)


def test_gradient_modes_differ_by_edge_count(rng):
    verts = random_polygon(rng)
    a = polygon_barrier(verts, 10.0, "analytic")
    p = polygon_barrier(verts, 10.0, "paper")
    x = rng.uniform(-4, 4, 2)
    np.testing.assert_allclose(p.gradient(x), a.n_edges * a.gradient(x), rtol=1e-10)


def test_analytic_gradient_matches_fd(rng):
    worst = 0.0
    for _ in range(200):
        cbf = polygon_barrier(random_polygon(rng), rng.uniform(1, 20))
        x = rng.uniform(-4, 4, 2)
        fd = central_diff(lambda z: float(cbf.value(z)), x)
        worst = max(worst, rel_err(cbf.gradient(x), fd))
    assert worst < 1e-5


@given(st.integers(0, 2**31 - 1))
def test_gradient_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    cbf = polygon_barrier(random_polygon(rng), rng.uniform(0.5, 30))
    x = rng.uniform(-5, 5, 2)
    g = cbf.gradient(x)
    # every edge normal is unit length, so a convex combination lies in the unit disk
    assert np.linalg.norm(g) <= 1 + 1e-12


def test_box_barriers():
    bs = box_barriers([-5, -4], [1, 2])
    assert len(bs) == 4
    vals = [b.value(np.array([0.0, 0.0])) for b in bs]
    np.testing.assert_allclose(vals, [5, 1, 4, 2])


def test_input_polytope():
    U = InputPolytope.box([-1, -1], [1, 1])
    assert U.P.shape == (4, 2) and U.is_box
    np.testing.assert_array_equal(U.saturate([2.0, -0.5]), [1.0, -0.5])
    with pytest.raises(ValueError):
        InputPolytope.box([1.0], [0.0])
    simplex = InputPolytope(np.array([[1.0, 1.0]]), [1.0])
    assert not simplex.is_box
    with pytest.raises(NotImplementedError):
        simplex.saturate([0.0, 0.0])


# --------------------------------------------------------------- Lie derivatives


def test_single_integrator_lie_derivatives(rng):
    dyn = SingleIntegrator(2)
    cbf = polygon_barrier(random_polygon(rng))
    x = rng.uniform(-3, 3, 2)
    Lf, Lg = lie_derivatives(cbf, dyn, x)
    assert Lf == 0.0
    np.testing.assert_allclose(Lg, cbf.gradient(x))


def test_linear_dynamics_lie_derivatives(rng):
    B = rng.standard_normal((3, 3))
    C = rng.standard_normal((3, 2))
    a = rng.standard_normal(3)
    x = rng.standard_normal(3)
    Lf, Lg = lie_derivatives(HalfspaceBarrier(a, 0.0), LinearDynamics(B, C), x)
    assert Lf == pytest.approx(a @ B @ x)
    np.testing.assert_allclose(Lg, a @ C)


def test_custom_dynamics():
    dyn = CustomDynamics(lambda x: -np.asarray(x), lambda x: np.eye(2), 2, 2)
    np.testing.assert_allclose(dyn.xdot(np.array([1.0, 2.0]), np.array([0.5, 0.5])), [-0.5, -1.5])


# --------------------------------------------------------------- assembly


def test_assembly_row_count_and_layout(si_scenario):
    s = si_scenario
    x = np.array([-3.0, -2.0])
    cs = assemble_constraints(x, s.obstacles, FixedAlpha(1.0), s.U, s.dynamics)
    assert cs.A.shape == (3 + 4, 2)
    np.testing.assert_array_equal(cs.A[3:], s.U.P)
    np.testing.assert_array_equal(cs.b[3:], s.U.q)
    full = assemble_constraints(x, s.cbfs, FixedAlpha(1.0), s.U, s.dynamics)
    assert full.A.shape == (s.n_cbf + 4, 2) == (11, 2)


def test_zero_barrier_row_ignores_alpha():
    h = HalfspaceBarrier([1.0, 0.0], 1.0)
    U = InputPolytope.box([-1, -1], [1, 1])
    x = np.array([1.0, 0.4])  # h(x) = 0
    net = lambda z: np.full(np.shape(z)[:-1] + (1,), 7.0)
    for alpha in (FixedAlpha(10.0), LearnedAlpha(net, 2.0), LearnedAlpha(net, 2.0, softplus=True)):
        cs = assemble_constraints(x, [h], alpha, U, SingleIntegrator(2))
        np.testing.assert_allclose(cs.A[0], [-1.0, 0.0])
        assert cs.b[0] == 0.0


def test_larger_omega_relaxes_rows(si_scenario):
    s = si_scenario
    x = np.array([-3.0, -2.0])
    assert np.all(s.barrier_values(x) > 0)
    lo = assemble_constraints(x, s.cbfs, FixedAlpha(0.1), s.U, s.dynamics)
    hi = assemble_constraints(x, s.cbfs, FixedAlpha(10.0), s.U, s.dynamics)
    assert np.all(hi.b[:s.n_cbf] > lo.b[:s.n_cbf])
    np.testing.assert_array_equal(hi.A, lo.A)


def test_learned_alpha_scales_rows():
    h = HalfspaceBarrier([1.0, 0.0], 0.0)
    U = InputPolytope.box([-1, -1], [1, 1])
    x = np.array([2.0, 0.0])
    net = lambda z: np.full(np.shape(z)[:-1] + (1,), 3.0)
    cs = assemble_constraints(x, [h], LearnedAlpha(net, 0.5), U, SingleIntegrator(2))
    assert cs.b[0] == pytest.approx(3.0 * 0.5 * 2.0)
    sp = assemble_constraints(x, [h], LearnedAlpha(net, 0.5, softplus=True), U, SingleIntegrator(2))
    assert sp.b[0] == pytest.approx(np.log1p(np.exp(3.0)) * 0.5 * 2.0)
    with pytest.raises(ValueError):
        LearnedAlpha(net).gains(x, 2)


def test_batched_terms_match_single(si_scenario, rng):
    s = si_scenario
    X = rng.uniform(s.sample_lower, s.sample_upper, size=(20, 2))
    T = cbf_terms(X, s.cbfs, s.U, s.dynamics)
    for i in range(20):
        t = cbf_terms(X[i], s.cbfs, s.U, s.dynamics)
        np.testing.assert_allclose(T.A[i], t.A)
        np.testing.assert_allclose(T.b(np.ones((20, s.n_cbf)))[i], t.b(np.ones(s.n_cbf)))


def test_empty_cbf_list():
    U = InputPolytope.box([-1], [1])
    t = cbf_terms(np.zeros(1), [], U, SingleIntegrator(1))
    assert t.n_cbf == 0
    np.testing.assert_array_equal(t.A, U.P)


def test_fixed_alpha_constraints_are_continuous(si_scenario, rng):
    """Lipschitz estimate of A(x), b(x) on nearby pairs stays bounded."""
    s = si_scenario
    X = rng.uniform(s.sample_lower, s.sample_upper, size=(200, 2))
    alpha = FixedAlpha(1.0)
    ratios = []
    for x in X:
        d = rng.standard_normal(2)
        d *= 1e-6 / np.linalg.norm(d)
        c0 = assemble_constraints(x, s.cbfs, alpha, s.U, s.dynamics)
        c1 = assemble_constraints(x + d, s.cbfs, alpha, s.U, s.dynamics)
        ratios.append(max(np.abs(c1.A - c0.A).max(), np.abs(c1.b - c0.b).max()) / 1e-6)
    # gradient of a kappa-smooth union changes at rate <= kappa; b adds |grad h| <= 1
    assert max(ratios) < 2 * s.kappa + 2
