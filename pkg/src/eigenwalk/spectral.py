"""Discrete Laplace spectra on rasterized domains.

The operator is assembled as a finite-volume pair (stiffness K, mass M)
on the active lattice nodes and then standardized once and for all:

    B = M^{-1/2} K M^{-1/2},

so every consumer sees an ordinary symmetric positive-semidefinite sparse
matrix whose eigenpairs (lam, u) map to physical eigenfields v = M^{-1/2} u.
Edge conductances and node masses come from the same quarter-cell bookkeeping
(geometry._quarter_presence), which is what makes rectangle eigenvalues exact
discrete sines/cosines under every wall-label combination.

Eigenvalue convention: B approximates -Laplace, so eigenvalues are >= 0 and
heat flow damps mode j by exp(-lam_j * t).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, splu

from .geometry import DIRICHLET, NEUMANN, GridDomain, _quarter_presence

__all__ = [
    "SpectralError",
    "LaplaceOperator",
    "SpectralResult",
    "HeatState",
    "ClassicalBounds",
    "assemble_laplacian",
    "solve_eigs",
    "heat_semigroup",
    "survival_profile",
    "classical_bounds",
    "zeta_bound",
    "write_field_csv",
    "write_field_pgm",
    "result_metadata",
    "write_result_json",
    "grid_hash",
]

_BC_CODES = {"dirichlet": DIRICHLET, "neumann": NEUMANN}


class SpectralError(RuntimeError):
    """Eigensolve failed to reach the requested residual, or an operator
    could not be assembled from the given domain."""


@dataclass(frozen=True)
class LaplaceOperator:
    """Standardized symmetric discretization of -Laplace on a domain.

    ``matrix`` acts on mass-weighted coordinates u = M^{1/2} v where v is
    the physical node field; ``sqrt_mass`` converts back.  ``iy``/``ix``
    give the lattice position of each matrix row (row-major active order).
    """

    matrix: sparse.csr_matrix
    sqrt_mass: np.ndarray
    masses: np.ndarray
    iy: np.ndarray
    ix: np.ndarray
    dom: GridDomain
    bc_mode: str

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def field_to_vector(self, f):
        """Restrict a (ny, nx) grid array to active nodes (physical v)."""
        f = np.asarray(f, dtype=float)
        if f.shape != self.dom.mask.shape:
            raise ValueError(f"field shape {f.shape} does not match grid "
                             f"{self.dom.mask.shape}")
        return f[self.iy, self.ix]

    def vector_to_field(self, v) -> np.ndarray:
        """Embed an active-node vector into a (ny, nx) array, zero outside."""
        out = np.zeros(self.dom.mask.shape)
        out[self.iy, self.ix] = v
        return out


@dataclass(frozen=True)
class SpectralResult:
    """Eigenpairs of a LaplaceOperator, ascending.

    Eigenfields are (ny, nx) arrays, zero off-domain, normalized to
    h^2 * sum(f^2) = 1, with deterministic sign conventions (ground field
    max positive; second Neumann field negative at the leftmost active
    node).  ``residuals[j]`` is ||B u - lam u||_2 / ||u||_2 in standardized
    coordinates.
    """

    eigenvalues: np.ndarray
    eigenfields: tuple
    residuals: np.ndarray
    bc_mode: str
    operator: LaplaceOperator = field(repr=False)

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def dom(self) -> GridDomain:
        return self.operator.dom


@dataclass(frozen=True)
class HeatState:
    """Heat evolution snapshot: field approximates exp(t * Laplace) f0.

    ``truncation_bound`` dominates the dropped tail: the component of f0
    outside the computed eigenbasis evolves with norm at most this value
    (it uses the last computed eigenvalue in place of the first dropped
    one, which can only overstate the bound).
    """

    t: float
    field: np.ndarray
    bc_mode: str
    truncation_bound: float


@dataclass(frozen=True)
class ClassicalBounds:
    """Planar spectral-gap bracket from diameter and area alone:
    1/diam^2 <= mu_2 <= 4*pi/area (Szego-Weinberger on the right)."""

    diameter: float
    area: float
    mu2_lower: float
    mu2_upper: float


# ---------------------------------------------------------------------------
# assembly


def _effective_labels(dom: GridDomain, bc_mode: str) -> np.ndarray:
    if bc_mode == "mixed":
        labels = dom.labels_by_dir
        on_walls = dom.walls["label"]
        bad = ~np.isin(on_walls, (DIRICHLET, NEUMANN))
        if bad.any():
            j = int(np.argmax(bad))
            raise SpectralError(
                f"mixed mode found a wall with unknown label "
                f"{int(on_walls[j])} at node "
                f"({int(dom.walls['iy'][j])}, {int(dom.walls['ix'][j])})")
        return labels
    try:
        code = _BC_CODES[bc_mode]
    except KeyError:
        raise ValueError(f"bc_mode must be 'dirichlet', 'neumann' or "
                         f"'mixed', got {bc_mode!r}") from None
    return np.full((4, *dom.mask.shape), code, dtype=np.int8)


def assemble_laplacian(dom: GridDomain, bc_mode: str = "mixed") -> LaplaceOperator:
    """Build the standardized symmetric -Laplace matrix for a domain.

    ``bc_mode='dirichlet'`` or ``'neumann'`` force that condition on every
    wall; ``'mixed'`` (default) uses the per-wall labels the domain was
    built with.  The matrix is exactly symmetric and positive semidefinite;
    pure-Neumann operators annihilate the constant weighted by sqrt-mass.

    Entries: a lattice edge between active nodes contributes conductance
    w in {1/2, 1} (one half per backing quarter cell), a Dirichlet wall
    adds w to the diagonal of its node, and a Neumann wall contributes
    nothing.  Masses are the quarter-cell areas; for an all-Dirichlet
    domain they are exactly h^2, reducing B to the textbook 5-point
    stencil with diagonal 4/h^2.
    """
    labels = _effective_labels(dom, bc_mode)
    mask = dom.mask
    ny, nx = mask.shape
    h = dom.h
    quarters = _quarter_presence(mask, labels)
    masses = np.zeros(mask.shape)
    for present in quarters.values():
        masses += present * (h * h / 4.0)

    idx = np.full(mask.shape, -1, dtype=np.int64)
    iy, ix = np.nonzero(mask)
    n = iy.size
    idx[iy, ix] = np.arange(n)

    rows, cols, vals = [], [], []

    def add_edges(a_idx, b_idx, w):
        keep = w > 0
        a, b, w = a_idx[keep], b_idx[keep], w[keep]
        rows.extend((a, b, a, b))
        cols.extend((b, a, a, b))
        vals.extend((-w, -w, w, w))

    # x-edges: both endpoints active, conductance from the two half-faces
    pa = mask[:, :-1] & mask[:, 1:]
    ay, ax = np.nonzero(pa)
    if ay.size:
        up = (quarters[(1, 1)][ay, ax] & quarters[(-1, 1)][ay, ax + 1])
        dn = (quarters[(1, -1)][ay, ax] & quarters[(-1, -1)][ay, ax + 1])
        w = 0.5 * up + 0.5 * dn
        add_edges(idx[ay, ax], idx[ay, ax + 1], w)

    # y-edges
    pa = mask[:-1, :] & mask[1:, :]
    ay, ax = np.nonzero(pa)
    if ay.size:
        rt = (quarters[(1, 1)][ay, ax] & quarters[(1, -1)][ay + 1, ax])
        lt = (quarters[(-1, 1)][ay, ax] & quarters[(-1, -1)][ay + 1, ax])
        w = 0.5 * rt + 0.5 * lt
        add_edges(idx[ay, ax], idx[ay + 1, ax], w)

    # Dirichlet walls pin a ghost value of zero one lattice step out; the
    # ghost edge keeps its diagonal contribution.  Quarter pairs flanking
    # each direction: +x, -x, +y, -y.
    flank = {0: ((1, 1), (1, -1)), 1: ((-1, 1), (-1, -1)),
             2: ((1, 1), (-1, 1)), 3: ((1, -1), (-1, -1))}
    nbr_dir = np.zeros((4, ny, nx), dtype=bool)
    nbr_dir[0, :, :-1] = mask[:, 1:]
    nbr_dir[1, :, 1:] = mask[:, :-1]
    nbr_dir[2, :-1, :] = mask[1:, :]
    nbr_dir[3, 1:, :] = mask[:-1, :]
    for d in range(4):
        on_wall = mask & ~nbr_dir[d] & (labels[d] == DIRICHLET)
        wy, wx = np.nonzero(on_wall)
        if not wy.size:
            continue
        qa, qb = flank[d]
        w = 0.5 * quarters[qa][wy, wx] + 0.5 * quarters[qb][wy, wx]
        keep = w > 0
        rows.append(idx[wy, wx][keep])
        cols.append(idx[wy, wx][keep])
        vals.append(w[keep])

    K = sparse.coo_matrix(
        (np.concatenate(vals) if vals else np.empty(0),
         (np.concatenate(rows) if rows else np.empty(0, dtype=np.int64),
          np.concatenate(cols) if cols else np.empty(0, dtype=np.int64))),
        shape=(n, n)).tocsr()

    m = masses[iy, ix]
    if (m <= 0).any():
        raise SpectralError("active node with zero finite-volume mass; "
                            "domain is under-resolved at its boundary")
    s = 1.0 / np.sqrt(m)
    B = sparse.diags(s) @ K @ sparse.diags(s)
    B = ((B + B.T) * 0.5).tocsr()  # exact symmetry against summation order
    return LaplaceOperator(matrix=B, sqrt_mass=np.sqrt(m), masses=m,
                           iy=iy, ix=ix, dom=dom, bc_mode=bc_mode)


# ---------------------------------------------------------------------------
# eigensolve


def _rayleigh_ritz(B, V):
    """Project B onto span(V) and return ascending eigenpairs there."""
    Q, _ = np.linalg.qr(V)
    H = Q.T @ (B @ Q)
    H = 0.5 * (H + H.T)
    theta, S = scipy.linalg.eigh(H)
    return theta, Q @ S


def _residuals(B, lam, U):
    R = B @ U - U * lam[np.newaxis, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(U, axis=0)


def solve_eigs(op: LaplaceOperator, k: int = 12, seed: int = 0,
               residual_tol: float = 1e-8) -> SpectralResult:
    """Lowest k eigenpairs of the operator, residual-certified.

    Deterministic for a fixed seed (it only sets the start vector).  Small
    problems are solved densely; larger ones use shift-inverted Lanczos
    with a Rayleigh-Ritz cleanup, plus per-pair inverse-iteration polish
    for any pair whose residual misses residual_tol * (1 + lam).  If a
    residual still misses after polish, raises SpectralError quoting it.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    B = op.matrix
    n = op.n
    if k > n:
        raise ValueError(f"asked for {k} eigenpairs of a {n}-node operator")

    if n <= max(4 * k, 256):
        lam_all, U_all = scipy.linalg.eigh(B.toarray())
        lam, U = lam_all[:k], U_all[:, :k]
    else:
        scale = float(B.diagonal().max())
        sigma = -1e-3 * scale
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(n)
        try:
            lam, U = eigsh(B, k=k, sigma=sigma, which="LM", v0=v0,
                           maxiter=max(1000, 20 * k))
        except ArpackNoConvergence as exc:
            got = len(exc.eigenvalues)
            raise SpectralError(
                f"Lanczos converged only {got}/{k} eigenpairs on "
                f"{op.dom.name!r} (n={n}); try fewer pairs or a coarser "
                f"grid") from exc
        lam, U = _rayleigh_ritz(B, U)

    order = np.argsort(lam)
    lam, U = lam[order], U[:, order]
    lam = np.where(np.abs(lam) < 1e-12 * max(1.0, abs(lam[-1])), 0.0, lam)

    res = _residuals(B, lam, U)
    bad = np.nonzero(res > 0.5 * residual_tol * (1.0 + np.abs(lam)))[0]
    if bad.size:
        eye = sparse.identity(n, format="csr")
        for j in bad:
            shift = lam[j] - 1e-3 * (1.0 + abs(lam[j]))
            lu = splu((B - shift * eye).tocsc())
            u = U[:, j]
            for _ in range(3):
                u = lu.solve(u)
                u /= np.linalg.norm(u)
            U[:, j] = u
        lam, U = _rayleigh_ritz(B, U)
        res = _residuals(B, lam, U)

    worst = float(np.max(res / (1.0 + np.abs(lam))))
    if worst > residual_tol:
        j = int(np.argmax(res / (1.0 + np.abs(lam))))
        raise SpectralError(
            f"eigensolve residual {res[j]:.3e} at eigenvalue {lam[j]:.6g} "
            f"exceeds {residual_tol:g}*(1+lam) on {op.dom.name!r}")

    h = op.dom.h
    fields = []
    for j in range(k):
        v = U[:, j] / op.sqrt_mass
        v /= math.sqrt(h * h * float(v @ v))
        fields.append(v)

    _fix_signs(op, lam, fields)
    grids = []
    for v in fields:
        g = op.vector_to_field(v)
        g.setflags(write=False)
        grids.append(g)
    lam.setflags(write=False)
    res.setflags(write=False)
    return SpectralResult(eigenvalues=lam, eigenfields=tuple(grids),
                          residuals=res, bc_mode=op.bc_mode, operator=op)


def _fix_signs(op, lam, fields):
    """Deterministic orientation: ground field has positive max; the
    second pure-Neumann field is negative at the leftmost active node
    (bottom-most on ties); every other field makes its first significant
    active-order component positive."""
    for j, v in enumerate(fields):
        if j == 0:
            if v.max() < -v.min():
                v *= -1.0
        elif j == 1 and op.bc_mode == "neumann":
            left = np.lexsort((op.iy, op.ix))
            ref = 0.0
            for p in left:
                if abs(v[p]) > 1e-10 * np.abs(v).max():
                    ref = v[p]
                    break
            if ref > 0:
                v *= -1.0
        else:
            big = np.abs(v).max()
            for x in v:
                if abs(x) > 1e-8 * big:
                    if x < 0:
                        v *= -1.0
                    break


# ---------------------------------------------------------------------------
# heat flow


def _project(result: SpectralResult, f0_vec: np.ndarray):
    """Mass-weighted coefficients of f0 on the computed fields, plus the
    mass-norm of what the basis cannot represent."""
    op = result.operator
    m = op.masses
    coeffs = np.empty(result.k)
    recon = np.zeros_like(f0_vec)
    for j, g in enumerate(result.eigenfields):
        v = g[op.iy, op.ix]
        coeffs[j] = float(np.sum(m * v * f0_vec)) / float(np.sum(m * v * v))
        recon += coeffs[j] * v
    tail = f0_vec - recon
    tail_norm = math.sqrt(float(np.sum(m * tail * tail)))
    return coeffs, tail_norm


def heat_semigroup(result: SpectralResult, f0, t: float,
                   max_truncation: float | None = None) -> HeatState:
    """Evolve f0 by the heat semigroup using the computed eigenbasis.

    f0 is a (ny, nx) array (values off-domain are ignored).  The dropped
    component is bounded by exp(-lam_k * t) * ||f0 - proj f0||, reported
    as HeatState.truncation_bound; pass max_truncation to make a sloppy
    basis an error instead of a silent approximation.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    op = result.operator
    f0_vec = op.field_to_vector(f0)
    coeffs, tail_norm = _project(result, f0_vec)
    lam = result.eigenvalues
    bound = math.exp(-float(lam[-1]) * t) * tail_norm
    if max_truncation is not None and bound > max_truncation:
        raise SpectralError(
            f"heat truncation bound {bound:.3e} exceeds {max_truncation:g} "
            f"at t={t:g}; compute more eigenpairs or evolve longer")
    u = np.zeros(op.n)
    for j in range(result.k):
        v = result.eigenfields[j][op.iy, op.ix]
        u += coeffs[j] * math.exp(-float(lam[j]) * t) * v
    g = op.vector_to_field(u)
    g.setflags(write=False)
    return HeatState(t=float(t), field=g, bc_mode=result.bc_mode,
                     truncation_bound=bound)


def survival_profile(result: SpectralResult, t: float,
                     max_truncation: float | None = None) -> HeatState:
    """Probability that heat started uniformly has not yet left: the heat
    evolution of the constant 1 under absorbing walls.  Requires a
    Dirichlet solve; values live in [0, 1] up to truncation error."""
    if result.bc_mode != "dirichlet":
        raise ValueError("survival profile needs a Dirichlet spectrum, "
                         f"got bc_mode={result.bc_mode!r}")
    ones = np.ones(result.dom.mask.shape)
    return heat_semigroup(result, ones, t, max_truncation=max_truncation)


# ---------------------------------------------------------------------------
# closed-form companions


def classical_bounds(dom: GridDomain) -> ClassicalBounds:
    """Bracket the planar Neumann spectral gap by geometry alone."""
    from .geometry import diameter

    d = diameter(dom)
    a = dom.area()
    return ClassicalBounds(diameter=d, area=a,
                           mu2_lower=1.0 / (d * d),
                           mu2_upper=4.0 * math.pi / a)


def zeta_bound(n: int, eps: float) -> float:
    """Dimensional constant zeta_n(eps) multiplying exp(-(1-eps)*lam_1*t)
    in the uniform survival upper bound:

    zeta_n(s) = e^{n/4} * (sqrt(2) / (8n)^{n/4})
                * sqrt(Gamma(n) / Gamma(n/2)) * (1 + 1/sqrt(s))^{n/2}

    so zeta_2(1) ~= 1.1658 and smaller eps buys a slower certified decay
    rate at the price of a larger constant.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    if not (0.0 < eps < math.inf):
        raise ValueError("eps must be positive and finite")
    lg = math.lgamma(n) - math.lgamma(n / 2.0)
    return (math.exp(n / 4.0) * math.sqrt(2.0) / (8.0 * n) ** (n / 4.0)
            * math.exp(0.5 * lg) * (1.0 + 1.0 / math.sqrt(eps)) ** (n / 2.0))


# ---------------------------------------------------------------------------
# exports


def grid_hash(dom: GridDomain) -> str:
    """Stable fingerprint of the lattice a result lives on."""
    hsh = hashlib.sha256()
    hsh.update(f"{dom.h!r};{dom.origin!r};{dom.mask.shape!r};".encode())
    hsh.update(np.packbits(dom.mask).tobytes())
    return hsh.hexdigest()[:16]


def write_field_csv(path, dom: GridDomain, field_grid) -> None:
    """Write active-node samples as x,y,value rows (repr round-trippable)."""
    f = np.asarray(field_grid, dtype=float)
    iy, ix = np.nonzero(dom.mask)
    xs, ys = dom.node_xy(iy, ix)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,y,value\n")
        for x, y, val in zip(xs, ys, f[iy, ix]):
            fh.write(f"{float(x)!r},{float(y)!r},{float(val)!r}\n")


def write_field_pgm(path, dom: GridDomain, field_grid) -> None:
    """8-bit heatmap of a node field: active range mapped to 1..255,
    off-domain pixels 0, top row = largest y (image convention)."""
    f = np.asarray(field_grid, dtype=float)
    lo = float(f[dom.mask].min()) if dom.mask.any() else 0.0
    hi = float(f[dom.mask].max()) if dom.mask.any() else 0.0
    span = hi - lo
    if span <= 0:
        levels = np.full(f.shape, 128.0)
    else:
        levels = 1.0 + 254.0 * (f - lo) / span
    img = np.where(dom.mask, np.clip(np.rint(levels), 1, 255), 0)
    img = img.astype(np.uint8)[::-1]
    ny, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def result_metadata(result: SpectralResult) -> dict:
    """JSON-ready summary: eigenvalues, residuals, bc mode, grid identity."""
    dom = result.dom
    return {
        "bc_mode": result.bc_mode,
        "k": result.k,
        "eigenvalues": [float(x) for x in result.eigenvalues],
        "residuals": [float(x) for x in result.residuals],
        "grid": {
            "name": dom.name,
            "h": dom.h,
            "shape": list(dom.mask.shape),
            "n_active": dom.n_active,
            "hash": grid_hash(dom),
        },
    }


def write_result_json(path, result: SpectralResult) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(result_metadata(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
