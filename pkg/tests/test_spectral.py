"""Spectral module: assembly exactness, eigensolve certificates, heat flow.

Rectangle eigenvalues are checked against closed-form discrete sine/cosine
spectra (oracles.py), which the finite-volume assembly must reproduce to
rounding, not merely to discretization accuracy.  Continuum pins
(2*pi^2, pi^2, j_{0,1}^2) then only measure the h^2 discretization gap.
"""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from eigenwalk.geometry import DomainSpec, GridDomain, build_domain, diameter
from eigenwalk.spectral import (
    ClassicalBounds,
    SpectralError,
    assemble_laplacian,
    classical_bounds,
    grid_hash,
    heat_semigroup,
    result_metadata,
    solve_eigs,
    survival_profile,
    write_field_csv,
    write_field_pgm,
    write_result_json,
    zeta_bound,
)

J01_SQ = 5.783185962946785  # square of the first zero of J_0


def rect(width=1.0, height=1.0, resolution=64, bc="dirichlet", **kw):
    return build_domain(DomainSpec(family="rectangle",
                                   params={"width": width, "height": height},
                                   resolution=resolution, bc_default=bc, **kw))


@pytest.fixture(scope="module")
def sq128d():
    dom = rect(resolution=128)
    return solve_eigs(assemble_laplacian(dom, "dirichlet"), k=20, seed=0)


@pytest.fixture(scope="module")
def dumbbell_n():
    spec = DomainSpec(family="dumbbell",
                      params={"lobe_width": 1.0, "lobe_height": 1.0,
                              "neck_width": 0.3, "neck_length": 0.5},
                      resolution=128, bc_default="neumann")
    dom = build_domain(spec)
    return solve_eigs(assemble_laplacian(dom, "neumann"), k=20, seed=0)


# ---------------------------------------------------------------------------
# assembly


def tiny_domain(n=3, h=1.0, labels=0):
    mask = np.ones((n, n), dtype=bool)
    lab = np.full((4, n, n), labels, dtype=np.int8)
    return GridDomain("tiny", h, (0.0, 0.0), mask, lab)


class TestAssembly:
    def test_unit_spacing_dirichlet_stencil(self):
        op = assemble_laplacian(tiny_domain(3, 1.0), "dirichlet")
        A = op.matrix.toarray()
        assert A.shape == (9, 9)
        assert np.all(A.diagonal() == 4.0)
        off = A[~np.eye(9, dtype=bool)]
        assert set(np.unique(off)) == {-1.0, 0.0}
        assert np.abs(A - A.T).max() == 0.0

    def test_positive_semidefinite(self):
        for bc in ("dirichlet", "neumann"):
            op = assemble_laplacian(rect(resolution=16, bc=bc), bc)
            w = np.linalg.eigvalsh(op.matrix.toarray())
            assert w.min() > -1e-12 * w.max()

    def test_exact_symmetry_on_mixed_dumbbell(self):
        spec = DomainSpec(family="dumbbell",
                          params={"lobe_width": 1.0, "lobe_height": 1.0,
                                  "neck_width": 0.3, "neck_length": 0.5},
                          resolution=64, bc_default="neumann")
        op = assemble_laplacian(build_domain(spec), "mixed")
        d = op.matrix - op.matrix.T
        assert abs(d).max() == 0.0

    def test_neumann_kernel_is_weighted_constant(self):
        op = assemble_laplacian(rect(resolution=48, bc="neumann"), "neumann")
        v = op.sqrt_mass / np.linalg.norm(op.sqrt_mass)
        resid = np.abs(op.matrix @ v).max()
        assert resid < 1e-12 * float(op.matrix.diagonal().max())

    def test_mixed_mode_reads_domain_labels(self):
        dom = rect(resolution=24, bc="dirichlet")
        a = assemble_laplacian(dom, "mixed").matrix
        b = assemble_laplacian(dom, "dirichlet").matrix
        assert (a != b).nnz == 0

    def test_unknown_bc_mode_rejected(self):
        with pytest.raises(ValueError, match="bc_mode"):
            assemble_laplacian(rect(resolution=16), "robin")

    def test_unlabeled_wall_rejected(self):
        mask = np.ones((4, 4), dtype=bool)
        lab = np.full((4, 4, 4), 7, dtype=np.int8)  # nonsense label
        dom = GridDomain("bad", 0.25, (0.0, 0.0), mask, lab)
        with pytest.raises(SpectralError, match="label"):
            assemble_laplacian(dom, "mixed")


# ---------------------------------------------------------------------------
# eigensolve against exact discrete spectra


class TestEigsExactDiscrete:
    def test_dirichlet_square_matches_discrete_sines(self):
        dom = rect(resolution=64)
        r = solve_eigs(assemble_laplacian(dom, "dirichlet"), k=3, seed=0)
        h = dom.h
        n_int = 63
        lam = lambda kx, ky: (
            oracles.discrete_rectangle_dirichlet_eigenvalue(h, n_int, kx)
            + oracles.discrete_rectangle_dirichlet_eigenvalue(h, n_int, ky))
        want = sorted([lam(1, 1), lam(1, 2), lam(2, 1)])
        assert np.allclose(r.eigenvalues, want, rtol=1e-10, atol=1e-9)

    def test_neumann_square_matches_discrete_cosines(self):
        dom = rect(resolution=64, bc="neumann")
        r = solve_eigs(assemble_laplacian(dom, "neumann"), k=3, seed=0)
        n_nodes = dom.mask.shape[1]
        mu2 = oracles.discrete_rectangle_neumann_eigenvalue(dom.h, n_nodes, 1)
        assert r.eigenvalues[0] == 0.0
        assert np.allclose(r.eigenvalues[1:3], [mu2, mu2], rtol=1e-10)

    def test_neumann_ground_field_constant(self):
        dom = rect(resolution=64, bc="neumann")
        r = solve_eigs(assemble_laplacian(dom, "neumann"), k=2, seed=0)
        g = r.eigenfields[0][dom.mask]
        assert g.min() > 0
        assert (g.max() - g.min()) / g.max() < 1e-6

    def test_mixed_rectangle_matches_tensor_spectrum(self):
        # Dirichlet across the long axis, Neumann top and bottom: the
        # low modes are purely one-dimensional discrete sines.
        dom = rect(2.0, 1.0, resolution=64, bc="dirichlet",
                   bc_overrides={"top": "neumann", "bottom": "neumann"})
        r = solve_eigs(assemble_laplacian(dom, "mixed"), k=2, seed=0)
        n_int = int(dom.mask[dom.mask.shape[0] // 2].sum())
        want = [oracles.discrete_rectangle_dirichlet_eigenvalue(dom.h, n_int, k)
                for k in (1, 2)]
        assert np.allclose(r.eigenvalues, want, rtol=1e-10)

    def test_dense_path_agrees_with_oracle(self):
        dom = rect(resolution=16)  # 225 nodes: solved densely
        r = solve_eigs(assemble_laplacian(dom, "dirichlet"), k=2, seed=0)
        lam1 = 2 * oracles.discrete_rectangle_dirichlet_eigenvalue(dom.h, 15, 1)
        assert r.eigenvalues[0] == pytest.approx(lam1, rel=1e-12)


class TestEigsContinuum:
    def test_square_lambda1_res256(self):
        r = solve_eigs(assemble_laplacian(rect(resolution=256), "dirichlet"),
                       k=1, seed=0)
        assert r.eigenvalues[0] == pytest.approx(2 * math.pi ** 2, rel=5e-3)

    def test_neumann_mu2_res256(self):
        dom = rect(resolution=256, bc="neumann")
        r = solve_eigs(assemble_laplacian(dom, "neumann"), k=2, seed=0)
        assert r.eigenvalues[1] == pytest.approx(math.pi ** 2, rel=5e-3)

    def test_disk_lambda1_res256(self):
        dom = build_domain(DomainSpec(family="disk", params={"radius": 1.0},
                                      resolution=256, bc_default="dirichlet"))
        r = solve_eigs(assemble_laplacian(dom, "dirichlet"), k=1, seed=0)
        assert r.eigenvalues[0] == pytest.approx(J01_SQ, rel=1e-2)

    def test_grid_convergence_order(self):
        errs = []
        for res in (64, 128, 256):
            r = solve_eigs(assemble_laplacian(rect(resolution=res),
                                              "dirichlet"), k=1, seed=0)
            errs.append(abs(r.eigenvalues[0] - 2 * math.pi ** 2))
        assert math.log2(errs[0] / errs[1]) > 1.9
        assert math.log2(errs[1] / errs[2]) > 1.9

    def test_domain_monotonicity(self):
        big = solve_eigs(assemble_laplacian(rect(1.0, 1.0, 64), "dirichlet"),
                         k=1, seed=0)
        small = solve_eigs(assemble_laplacian(rect(1.0, 0.5, 64), "dirichlet"),
                           k=1, seed=0)
        assert big.eigenvalues[0] < small.eigenvalues[0]


class TestEigsContract:
    def test_residual_certificate(self, sq128d, dumbbell_n):
        for r in (sq128d, dumbbell_n):
            assert np.all(r.residuals <= 1e-8 * (1 + np.abs(r.eigenvalues)))

    def test_rayleigh_quotient_matches(self, sq128d):
        op = sq128d.operator
        for lam, g in zip(sq128d.eigenvalues, sq128d.eigenfields):
            u = op.field_to_vector(g) * op.sqrt_mass
            rq = float(u @ (op.matrix @ u)) / float(u @ u)
            assert abs(rq - lam) <= 1e-10 * (1 + lam)

    def test_ascending_and_nonnegative(self, sq128d, dumbbell_n):
        for r in (sq128d, dumbbell_n):
            assert np.all(np.diff(r.eigenvalues) >= -1e-12)
            assert r.eigenvalues[0] >= 0.0

    def test_normalization(self, sq128d):
        h = sq128d.dom.h
        for g in sq128d.eigenfields:
            assert h * h * float((g * g).sum()) == pytest.approx(1.0, abs=1e-10)

    def test_determinism(self):
        spec = DomainSpec(family="rectangle",
                          params={"width": 1.0, "height": 1.0},
                          resolution=32, bc_default="dirichlet")
        a = solve_eigs(assemble_laplacian(build_domain(spec), "dirichlet"),
                       k=4, seed=7)
        b = solve_eigs(assemble_laplacian(build_domain(spec), "dirichlet"),
                       k=4, seed=7)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)
        assert all(np.array_equal(x, y)
                   for x, y in zip(a.eigenfields, b.eigenfields))

    def test_ground_state_one_signed(self, sq128d):
        g = sq128d.eigenfields[0][sq128d.dom.mask]
        assert g.min() > 0

    def test_second_neumann_sign(self, dumbbell_n):
        op = dumbbell_n.operator
        v = op.field_to_vector(dumbbell_n.eigenfields[1])
        leftmost = np.lexsort((op.iy, op.ix))[0]
        assert v[leftmost] < 0

    def test_bad_k(self):
        op = assemble_laplacian(rect(resolution=16), "dirichlet")
        with pytest.raises(ValueError):
            solve_eigs(op, k=0)
        with pytest.raises(ValueError):
            solve_eigs(op, k=10 ** 6)

    def test_unreachable_residual_reports_residual(self):
        op = assemble_laplacian(rect(resolution=32), "dirichlet")
        with pytest.raises(SpectralError, match="residual"):
            solve_eigs(op, k=3, seed=0, residual_tol=1e-30)


# ---------------------------------------------------------------------------
# heat flow


class TestHeat:
    def test_eigenfield_decays_at_its_own_rate(self, sq128d):
        phi1 = sq128d.eigenfields[0]
        hs = heat_semigroup(sq128d, phi1, 0.1)
        want = math.exp(-sq128d.eigenvalues[0] * 0.1) * phi1
        assert np.abs(hs.field - want).max() < 1e-10

    def test_zero_stays_zero(self, sq128d):
        hs = heat_semigroup(sq128d, np.zeros(sq128d.dom.mask.shape), 0.5)
        assert np.abs(hs.field).max() == 0.0
        assert hs.truncation_bound == 0.0

    def test_time_zero_is_basis_projection(self, sq128d):
        op = sq128d.operator
        f0 = op.field_to_vector(np.ones(sq128d.dom.mask.shape))
        proj = np.zeros_like(f0)
        for g in sq128d.eigenfields:
            v = op.field_to_vector(g)
            c = float((op.masses * v * f0).sum() / (op.masses * v * v).sum())
            proj += c * v
        hs = heat_semigroup(sq128d, np.ones(sq128d.dom.mask.shape), 0.0)
        assert np.abs(op.field_to_vector(hs.field) - proj).max() < 1e-12

    def test_survival_in_unit_range_up_to_truncation(self, sq128d):
        for t in (0.01, 0.05, 0.1):
            q = survival_profile(sq128d, t)
            vals = q.field[sq128d.dom.mask]
            slack = q.truncation_bound + 1e-12
            assert vals.min() >= -slack
            assert vals.max() <= 1.0 + slack

    def test_survival_mass_decreasing(self, sq128d):
        m = sq128d.operator.masses
        totals = []
        for t in (0.01, 0.05, 0.1, 0.5):
            q = survival_profile(sq128d, t)
            totals.append(float((m * sq128d.operator.field_to_vector(q.field)).sum()))
        assert all(a > b for a, b in zip(totals, totals[1:]))
        assert totals[-1] > 0

    def test_survival_requires_dirichlet(self, dumbbell_n):
        with pytest.raises(ValueError, match="[Dd]irichlet"):
            survival_profile(dumbbell_n, 0.1)

    def test_truncation_guard_raises(self, sq128d):
        with pytest.raises(SpectralError, match="truncation"):
            heat_semigroup(sq128d, np.ones(sq128d.dom.mask.shape), 0.0,
                           max_truncation=1e-12)

    def test_negative_time_rejected(self, sq128d):
        with pytest.raises(ValueError):
            heat_semigroup(sq128d, np.ones(sq128d.dom.mask.shape), -0.1)

    def test_equilibration_limit(self, dumbbell_n):
        dom = dumbbell_n.dom
        left = dom.regions["left_lobe"]
        m = dom.masses
        share = float((m * left).sum() / m.sum())
        hs = heat_semigroup(dumbbell_n, left.astype(float), 50.0)
        assert np.abs(hs.field[dom.mask] - share).max() < 1e-9

    def test_equilibration_rate(self, dumbbell_n):
        # Fit the deviation constant at one time, then the fitted envelope
        # C * exp(-mu2 t) must dominate later deviations: higher modes only
        # die faster.
        dom = dumbbell_n.dom
        left = dom.regions["left_lobe"]
        m = dom.masses
        share = float((m * left).sum() / m.sum())
        mu2 = dumbbell_n.eigenvalues[1]
        iy, ix = np.nonzero(left)
        xs, ys = dom.node_xy(iy, ix)
        j = np.argmin((xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2)
        probe = (iy[j], ix[j])
        dev = {t: abs(heat_semigroup(dumbbell_n, left.astype(float), t)
                      .field[probe] - share)
               for t in (0.5, 1.0, 2.0)}
        C = dev[0.5] / math.exp(-mu2 * 0.5)
        assert C > 0.01  # the probe actually sees the slow mode
        for t in (1.0, 2.0):
            assert dev[t] <= C * math.exp(-mu2 * t) * (1 + 1e-9)

    def test_dumbbell_gap_structure(self, dumbbell_n):
        mu = dumbbell_n.eigenvalues
        assert mu[0] == 0.0
        assert mu[1] < 1.0       # neck bottleneck keeps the gap small
        assert mu[2] > 5 * mu[1]  # and well separated from the rest


class TestSurvivalEnvelope:
    def test_uniform_bound_at_three_times(self, sq128d):
        lam1 = sq128d.eigenvalues[0]
        eps_grid = np.geomspace(0.02, 2.0, 60)
        for t in (0.01, 0.05, 0.1):
            q = survival_profile(sq128d, t)
            lhs = q.field[sq128d.dom.mask].max() + q.truncation_bound
            rhs = min(zeta_bound(2, e) * math.exp(-(1 - e) * lam1 * t)
                      for e in eps_grid)
            assert lhs <= rhs


# ---------------------------------------------------------------------------
# closed-form companions


class TestClosedForms:
    def test_zeta_values(self):
        assert zeta_bound(2, 1.0) == pytest.approx(1.1658219907985623, rel=1e-12)
        assert zeta_bound(2, 0.25) == pytest.approx(1.7487329861978433, rel=1e-12)

    def test_zeta_large_eps_limit(self):
        # (1 + 1/sqrt(eps))^{n/2} -> 1, leaving the dimensional prefactor
        want = math.exp(0.5) * math.sqrt(2.0) / 4.0
        assert zeta_bound(2, 1e12) == pytest.approx(want, rel=1e-5)

    def test_zeta_errors(self):
        with pytest.raises(ValueError):
            zeta_bound(0, 1.0)
        with pytest.raises(ValueError):
            zeta_bound(2, 0.0)

    @given(st.floats(min_value=0.01, max_value=100.0),
           st.floats(min_value=1.001, max_value=10.0))
    @settings(max_examples=50, deadline=None)
    def test_zeta_decreasing_in_eps(self, eps, factor):
        assert zeta_bound(2, eps * factor) < zeta_bound(2, eps)

    def test_classical_bounds_square(self):
        dom = rect(resolution=128, bc="neumann")
        cb = classical_bounds(dom)
        assert isinstance(cb, ClassicalBounds)
        assert cb.area == pytest.approx(1.0, abs=1e-12)
        assert cb.mu2_upper == pytest.approx(4 * math.pi, rel=1e-12)
        assert cb.mu2_lower == pytest.approx(0.5, abs=2 * dom.h)
        assert cb.mu2_lower <= math.pi ** 2 <= cb.mu2_upper
        assert cb.diameter == pytest.approx(diameter(dom), rel=0)


# ---------------------------------------------------------------------------
# exports


class TestExports:
    def test_csv_has_one_row_per_active_node(self, tmp_path, sq128d):
        p = tmp_path / "field.csv"
        write_field_csv(p, sq128d.dom, sq128d.eigenfields[0])
        lines = p.read_text().splitlines()
        assert lines[0] == "x,y,value"
        assert len(lines) - 1 == sq128d.dom.n_active
        x, y, v = lines[1].split(",")
        assert float(v) == sq128d.eigenfields[0][
            sq128d.operator.iy[0], sq128d.operator.ix[0]]

    def test_pgm_shape_and_range(self, tmp_path, sq128d):
        p = tmp_path / "field.pgm"
        write_field_pgm(p, sq128d.dom, sq128d.eigenfields[0])
        raw = p.read_bytes()
        header, rest = raw.split(b"\n", 1)
        assert header == b"P5"
        dims, rest = rest.split(b"\n", 1)
        nx, ny = map(int, dims.split())
        assert (ny, nx) == sq128d.dom.mask.shape
        _, pixels = rest.split(b"\n", 1)
        img = np.frombuffer(pixels, dtype=np.uint8).reshape(ny, nx)[::-1]
        assert np.all(img[~sq128d.dom.mask] == 0)
        assert img[sq128d.dom.mask].min() >= 1

    def test_json_metadata_deterministic(self, tmp_path):
        spec = DomainSpec(family="rectangle",
                          params={"width": 1.0, "height": 1.0},
                          resolution=24, bc_default="dirichlet")
        outs = []
        for tag in ("a", "b"):
            r = solve_eigs(assemble_laplacian(build_domain(spec), "dirichlet"),
                           k=3, seed=0)
            p = tmp_path / f"{tag}.json"
            write_result_json(p, r)
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]
        meta = json.loads(outs[0])
        assert sorted(meta) == ["bc_mode", "eigenvalues", "grid", "k",
                                "residuals"]
        assert len(meta["eigenvalues"]) == 3
        assert len(meta["grid"]["hash"]) == 16

    def test_grid_hash_sensitive_to_mask(self):
        a = rect(resolution=24)
        b = rect(resolution=25)
        assert grid_hash(a) != grid_hash(b)
        assert grid_hash(a) == grid_hash(rect(resolution=24))

    def test_metadata_matches_result(self, dumbbell_n):
        meta = result_metadata(dumbbell_n)
        assert meta["bc_mode"] == "neumann"
        assert meta["k"] == 20
        assert meta["eigenvalues"] == [float(x)
                                       for x in dumbbell_n.eigenvalues]


# ---------------------------------------------------------------------------
# properties


@given(w=st.floats(min_value=0.5, max_value=2.0),
       h=st.floats(min_value=0.5, max_value=2.0),
       bc=st.sampled_from(["dirichlet", "neumann"]))
@settings(max_examples=10, deadline=None)
def test_random_rectangle_spectrum_contract(w, h, bc):
    dom = build_domain(DomainSpec(family="rectangle",
                                  params={"width": w, "height": h},
                                  resolution=16, bc_default=bc))
    r = solve_eigs(assemble_laplacian(dom, bc), k=4, seed=0)
    assert np.all(np.diff(r.eigenvalues) >= -1e-12)
    assert r.eigenvalues[0] >= 0.0
    assert np.all(r.residuals <= 1e-8 * (1 + np.abs(r.eigenvalues)))
    if bc == "neumann":
        assert r.eigenvalues[0] == 0.0
    else:
        assert r.eigenvalues[0] > 1.0


_HEAT_CACHE = {}


@given(t1=st.floats(min_value=0.0, max_value=1.0),
       dt=st.floats(min_value=0.01, max_value=2.0),
       seed=st.integers(min_value=0, max_value=2 ** 16))
@settings(max_examples=20, deadline=None)
def test_heat_mass_norm_contracts(t1, dt, seed):
    if "r" not in _HEAT_CACHE:
        dom = rect(resolution=24)
        _HEAT_CACHE["r"] = solve_eigs(assemble_laplacian(dom, "dirichlet"),
                                      k=6, seed=0)
    r = _HEAT_CACHE["r"]
    rng = np.random.default_rng(seed)
    f0 = rng.standard_normal(r.dom.mask.shape)
    m = r.operator.masses

    def mass_norm(state):
        v = r.operator.field_to_vector(state.field)
        return float((m * v * v).sum())

    early = heat_semigroup(r, f0, t1)
    late = heat_semigroup(r, f0, t1 + dt)
    assert mass_norm(late) <= mass_norm(early) * (1 + 1e-12)
