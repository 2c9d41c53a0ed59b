"""Killed, reflected, and mixed Brownian paths on grid domains.

Increments are Euler steps with per-coordinate variance 2*dt, matching the
heat semigroup convention used by the spectral module (mode j decays like
exp(-lam_j t)).  Boundary geometry is derived from the same lattice model
as the finite-volume operator so Monte Carlo and eigensolve answers are
comparable without calibration fudges:

* a Dirichlet wall kills on the ghost-node line, one full lattice step
  beyond the last active node (where the discrete eigenfields vanish);
* a Neumann wall reflects specularly about the node line through the
  boundary nodes (whose finite-volume cells are half-width).

Each step resolves the proposed displacement by walking the lattice cell
by cell: cross into an active neighbor and keep going, fold about a
Neumann wall line (x before y, the documented tie-break), die beyond a
Dirichlet ghost line.  Between-step absorption is recovered by the
Brownian bridge correction: a step ending at distances d1, d2 from a kill
line registers a crossing with probability exp(-d1*d2/dt).  One uniform
per path per step is always drawn, whether or not the correction is on,
so runs with and without it see identical trajectories and the corrected
kill set contains the uncorrected one path by path.

Randomness is organized in fixed-size path batches keyed by
(seed, stream, batch), reduced in batch order: estimates are pure
functions of (seed, config, domain) regardless of thread count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._rng import NormalChunks, batch_rng
from .geometry import DIRICHLET, NEUMANN, GridDomain, _neighbor_active
from .spectral import SpectralResult, _effective_labels, grid_hash

__all__ = [
    "BrownianError",
    "PathConfig",
    "PathEstimate",
    "StoppingSample",
    "FeynmanKacReport",
    "HeatContentEstimate",
    "MixedDecayReport",
    "hit_probability",
    "survival_probability",
    "feynman_kac",
    "reflect_step",
    "stopping_time_to_set",
    "heat_content",
    "mixed_eigenvalue_via_decay",
]

BATCH_PATHS = 16384
_WALK_STREAM = 0x57414C4B  # distinct stream tag; theta's oracle uses its own
_MAX_FOLDS = 8
_BRIDGE_CUTOFF = 45.0  # exp(-45) ~ 3e-20: beyond this the bridge cannot fire


class BrownianError(RuntimeError):
    """Bad path configuration, start point, or target."""


@dataclass(frozen=True)
class PathConfig:
    """Simulation budget for one estimator call.

    dt=None resolves per domain to min(h^2/4, horizon/1000), keeping the
    spatial step below the lattice resolution.  The horizon is divided
    into an integer number of steps, so the effective dt is the requested
    one rounded to land exactly on the final time.
    """

    t_max: float
    n_paths: int
    dt: float | None = None
    seed: int = 0
    bridge_correction: bool = True
    start: tuple | None = None

    def __post_init__(self):
        if not (self.t_max > 0):
            raise BrownianError("t_max must be positive")
        if self.n_paths < 100:
            raise BrownianError("n_paths must be >= 100")
        if self.dt is not None:
            if not (self.dt > 0):
                raise BrownianError("dt must be positive")
            if self.dt > self.t_max / 10:
                raise BrownianError("dt must be <= t_max/10")

    def resolve_steps(self, h: float, horizon: float | None = None):
        """(n_steps, dt) for a grid of spacing h; dt snaps to the horizon."""
        t = self.t_max if horizon is None else horizon
        if t == 0:
            return 0, 0.0
        want = self.dt if self.dt is not None else min(h * h / 4, t / 1000)
        if want > t / 10:
            want = t / 10
        n_steps = max(10, int(round(t / want)))
        return n_steps, t / n_steps


@dataclass(frozen=True)
class PathEstimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int
    bias_note: str


@dataclass(frozen=True)
class StoppingSample:
    hit: bool
    T: float | None
    exit_reason: str  # hit_target | killed | horizon


@dataclass(frozen=True)
class FeynmanKacReport:
    mean: float
    stderr: float
    exact: float
    z_score: float
    n_paths: int
    seed: int
    bias_note: str


@dataclass(frozen=True)
class HeatContentEstimate:
    value: float
    stderr: float
    spectral_value: float | None
    n_starts: int
    t: float
    seed: int
    bias_note: str


@dataclass(frozen=True)
class MixedDecayReport:
    lambda_hat: float
    stderr: float
    fit_residual: float
    t_grid: tuple
    survival: tuple
    seed: int
    bias_note: str


# ---------------------------------------------------------------------------
# lattice kernel


class _Kernel:
    """Immutable per-(domain, bc_mode) tables the step loop reads."""

    def __init__(self, dom: GridDomain, bc_mode: str):
        labels = _effective_labels(dom, bc_mode)
        self.dom = dom
        self.bc_mode = bc_mode
        self.h = dom.h
        self.ox, self.oy = dom.origin
        mask = dom.mask
        self.ny, self.nx = mask.shape
        nbr = _neighbor_active(mask)
        wall = mask & ~nbr
        self.dwall = wall & (labels == DIRICHLET)   # (4, ny, nx)
        self.nwall = wall & (labels == NEUMANN)
        self.nbr = nbr
        self.mask = mask
        self.any_dirichlet = bool(self.dwall.any())
        # nearest active node per lattice cell, for the projection fallback
        _, (jy, jx) = ndimage.distance_transform_edt(~mask,
                                                     return_indices=True)
        self.near_iy = jy.astype(np.int32)
        self.near_ix = jx.astype(np.int32)

    def to_frac(self, x, y):
        return (np.asarray(x, dtype=float) - self.ox) / self.h, \
               (np.asarray(y, dtype=float) - self.oy) / self.h

    def cell_of(self, fx, fy):
        cx = np.clip(np.rint(fx).astype(np.int64), 0, self.nx - 1)
        cy = np.clip(np.rint(fy).astype(np.int64), 0, self.ny - 1)
        return cx, cy

    def start_state(self, x, y, n: int):
        fx, fy = self.to_frac(x, y)
        cx, cy = self.cell_of(fx, fy)
        if not self.mask[cy, cx]:
            raise BrownianError(f"start point ({float(x):g}, {float(y):g}) "
                                f"is outside the domain")
        return (np.full(n, float(fx)), np.full(n, float(fy)),
                np.full(n, int(cx), dtype=np.int64),
                np.full(n, int(cy), dtype=np.int64))

    def kill_distance(self, fx, fy, cx, cy):
        """Distance (physical units) to the nearest Dirichlet ghost line
        bordering each path's cell; inf where the cell has no kill wall."""
        d = np.full(fx.shape, np.inf)
        sides = ((0, 1.0, fx, cx), (1, -1.0, fx, cx),
                 (2, 1.0, fy, cy), (3, -1.0, fy, cy))
        for dir_, sgn, f, c in sides:
            has = self.dwall[dir_, cy, cx]
            dist = (c + sgn) - f if sgn > 0 else f - (c + sgn)
            np.minimum(d, np.where(has, dist, np.inf), out=d)
        return d * self.h


def _resolve_step(kern: _Kernel, fx, fy, cx, cy, alive):
    """Walk each proposed position to its resolved state.

    fx, fy hold the proposals (fractional lattice units); cx, cy the cell
    each path occupied before the step (active).  Mutates all four in
    place plus `alive` for ghost-line kills; returns a boolean array
    marking paths killed during resolution.
    """
    killed = np.zeros(fx.shape, dtype=bool)
    todo = alive.copy()
    for _ in range(_MAX_FOLDS):
        if not todo.any():
            break
        j = np.nonzero(todo)[0]
        jcx, jcy = cx[j], cy[j]
        jfx, jfy = fx[j], fy[j]
        acted = np.zeros(j.size, dtype=bool)

        for axis in (0, 1):  # x first: the documented tie-break
            f = jfx if axis == 0 else jfy
            c = jcx if axis == 0 else jcy
            d = f - c
            for sgn, dir_ in (((1.0), (0 if axis == 0 else 2)),
                              ((-1.0), (1 if axis == 0 else 3))):
                sd = d * sgn
                dwall = kern.dwall[dir_, jcy, jcx]
                nwall = kern.nwall[dir_, jcy, jcx]
                open_ = kern.nbr[dir_, jcy, jcx]
                # Dirichlet: dead past the ghost line at c + sgn
                kill = dwall & (sd > 1.0)
                # Neumann: fold about the node line at c
                fold = nwall & (sd > 0.0)
                # open neighbor: walk one cell over
                walk = open_ & (sd > 0.5)
                if kill.any():
                    kj = j[kill]
                    killed[kj] = True
                    alive[kj] = False
                    todo[kj] = False
                    acted |= kill
                if fold.any():
                    f[fold] = 2.0 * c[fold] - f[fold]
                    acted |= fold
                if walk.any():
                    c[walk] += int(sgn)
                    acted |= walk
                d = f - c

        live = ~killed[j]
        fx[j], fy[j] = jfx, jfy
        cx[j], cy[j] = jcx, jcy
        settled = live & ~acted
        todo[j[settled]] = False

    # stragglers (pathological folds): project to the nearest active node
    if todo.any():
        k = np.nonzero(todo)[0]
        gy = np.clip(np.rint(fy[k]).astype(np.int64), 0, kern.ny - 1)
        gx = np.clip(np.rint(fx[k]).astype(np.int64), 0, kern.nx - 1)
        ny_, nx_ = kern.near_iy[gy, gx], kern.near_ix[gy, gx]
        fx[k] = nx_
        fy[k] = ny_
        cx[k] = nx_
        cy[k] = ny_
    return killed


def _walk_batch(kern: _Kernel, batch_index: int, size: int, start,
                n_steps: int, dt: float, seed: int, bridge: bool,
                checkpoints=None, target_mask=None, fk_grid=None,
                want_paths: bool = False):
    """Simulate one batch; the only RNG consumer in the module.

    Per step and path: two normal increments and one uniform, always in
    that order, so every estimator mode sees identical trajectories.
    Returns a dict of the requested accumulators.
    """
    rng = batch_rng(seed, _WALK_STREAM, batch_index)
    chunks = NormalChunks()
    sigma = math.sqrt(2.0 * dt) / kern.h  # per-coordinate, lattice units
    fx, fy, cx, cy = kern.start_state(start[0], start[1], size)
    alive = np.ones(size, dtype=bool)
    reason = np.full(size, "horizon", dtype=object)
    hit_step = np.full(size, -1, dtype=np.int64)

    out = {}
    if checkpoints is not None:
        ckset = {int(s): i for i, s in enumerate(checkpoints)}
        surv = np.zeros(len(checkpoints))
    else:
        ckset = {}
        surv = None
    if target_mask is not None:
        in_target = target_mask[cy, cx] & alive
        if in_target.any():
            hit_step[in_target] = 0
            alive[in_target] = False
            reason[in_target] = "hit_target"
    if want_paths:
        track = np.empty((size, n_steps + 1, 2))
        track[:, 0, 0] = kern.ox + fx * kern.h
        track[:, 0, 1] = kern.oy + fy * kern.h

    if 0 in ckset:
        surv[ckset[0]] = float(alive.sum())

    bridge_scale = kern.h * kern.h / dt if dt > 0 else 0.0  # unused marker
    for step in range(1, n_steps + 1):
        z = chunks.draw(rng, 2, size, 1, 1.0)[:, :, 0].astype(float)
        u = rng.random(size)  # always drawn: keeps kill modes aligned
        if not alive.any():
            if surv is not None and step in ckset:
                surv[ckset[step]] = 0.0
            if want_paths:
                track[:, step] = track[:, step - 1]
            continue
        d1 = kern.kill_distance(fx, fy, cx, cy) if (bridge and
                                                    kern.any_dirichlet) else None
        px, py = fx.copy(), fy.copy()
        fx[alive] += sigma * z[0, alive]
        fy[alive] += sigma * z[1, alive]
        killed = _resolve_step(kern, fx, fy, cx, cy, alive)
        if killed.any():
            reason[killed] = "killed"
            hit_step[killed & (hit_step < 0)] = step
        if d1 is not None and alive.any():
            d2 = kern.kill_distance(fx, fy, cx, cy)
            prod = d1 * d2
            cand = alive & np.isfinite(prod) & (prod < _BRIDGE_CUTOFF * dt)
            if cand.any():
                p_cross = np.exp(-prod[cand] / dt)
                snuffed = np.zeros(fx.shape, dtype=bool)
                snuffed[cand] = u[cand] < p_cross
                if snuffed.any():
                    alive[snuffed] = False
                    reason[snuffed] = "killed"
                    hit_step[snuffed & (hit_step < 0)] = step
                    fx[snuffed], fy[snuffed] = px[snuffed], py[snuffed]
        if target_mask is not None and alive.any():
            arrived = alive & target_mask[cy, cx]
            if arrived.any():
                hit_step[arrived] = step
                alive[arrived] = False
                reason[arrived] = "hit_target"
        if surv is not None and step in ckset:
            surv[ckset[step]] = float(alive.sum())
        if want_paths:
            track[:, step, 0] = kern.ox + fx * kern.h
            track[:, step, 1] = kern.oy + fy * kern.h

    del bridge_scale
    if surv is not None:
        out["surv_count"] = surv
    if target_mask is not None:
        hit = reason == "hit_target"
        out["hit_count"] = float(hit.sum())
        out["hit_step"] = hit_step
        out["reason"] = reason
    else:
        out["reason"] = reason
    if fk_grid is not None:
        vals = _bilinear(kern, fk_grid, fx, fy)
        vals = np.where(alive, vals, 0.0)
        out["fk_sum"] = float(vals.sum())
        out["fk_sumsq"] = float((vals * vals).sum())
    out["alive_count"] = float(alive.sum())
    if want_paths:
        out["paths"] = track
    return out


def _bilinear(kern: _Kernel, grid, fx, fy):
    """Interpolate a node field at fractional positions; off-grid clamps.

    Fields are zero on inactive nodes, which is exactly the Dirichlet
    extension; reflected paths never leave the all-active quad."""
    x0 = np.clip(np.floor(fx).astype(np.int64), 0, kern.nx - 2)
    y0 = np.clip(np.floor(fy).astype(np.int64), 0, kern.ny - 2)
    tx = np.clip(fx - x0, 0.0, 1.0)
    ty = np.clip(fy - y0, 0.0, 1.0)
    g = grid
    return ((1 - tx) * (1 - ty) * g[y0, x0] + tx * (1 - ty) * g[y0, x0 + 1]
            + (1 - tx) * ty * g[y0 + 1, x0] + tx * ty * g[y0 + 1, x0 + 1])


def _run_batches(kern, cfg: PathConfig, start, n_steps, dt, threads=1,
                 **kw):
    sizes = [min(BATCH_PATHS, cfg.n_paths - lo)
             for lo in range(0, cfg.n_paths, BATCH_PATHS)]

    def job(i):
        return _walk_batch(kern, i, sizes[i], start, n_steps, dt,
                           cfg.seed, cfg.bridge_correction, **kw)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(sizes))))
    else:
        results = [job(i) for i in range(len(sizes))]
    return sizes, results


def _bias_note(kern: _Kernel, dt: float) -> str:
    return (f"Euler absorption bias O(sqrt(dt)): sqrt(2*dt)="
            f"{math.sqrt(2 * dt):.3e}; lattice wall placement within "
            f"h/2={kern.h / 2:.3e}")


def _mean_stderr(total, total_sq, n):
    mean = total / n
    var = max(0.0, (total_sq - n * mean * mean) / max(1, n - 1))
    return mean, math.sqrt(var / n)


def _start_point(dom: GridDomain, cfg: PathConfig, x=None):
    pt = x if x is not None else cfg.start
    if pt is None:
        raise BrownianError("no start point: pass x or set PathConfig.start")
    pt = np.asarray(pt, dtype=float)
    if pt.shape != (2,):
        raise BrownianError("start must be a single (x, y) point")
    return float(pt[0]), float(pt[1])


def _target_mask(dom: GridDomain, target):
    """Normalize a target spec to a node mask, or None for 'boundary'."""
    if isinstance(target, str):
        if target == "boundary":
            return None
        raise BrownianError(f"unknown target string {target!r}")
    if isinstance(target, np.ndarray) and target.dtype == bool:
        if target.shape != dom.mask.shape:
            raise BrownianError("target mask shape does not match the grid")
        tm = target & dom.mask
    else:
        pts = np.atleast_2d(np.asarray(target, dtype=float))
        if pts.size == 0 or pts.shape[1] != 2:
            raise BrownianError("target must be 'boundary', a bool mask, "
                                "or a list of (x, y) points")
        tm = np.zeros(dom.mask.shape, dtype=bool)
        iy, ix = dom.nearest_node(pts[:, 0], pts[:, 1])
        tm[np.clip(iy, 0, dom.mask.shape[0] - 1),
           np.clip(ix, 0, dom.mask.shape[1] - 1)] = True
        tm &= dom.mask
    if not tm.any():
        warnings.warn("target does not overlap the domain; the estimate "
                      "will be zero", stacklevel=3)
    return tm


# ---------------------------------------------------------------------------
# public estimators


def hit_probability(dom: GridDomain, target, cfg: PathConfig,
                    bc_mode: str = "mixed", threads: int = 1) -> PathEstimate:
    """Probability of reaching the target before absorption or horizon.

    target: 'boundary' (absorption itself is the event), a boolean node
    mask, or a list of points (their cells).  Paths move under the
    domain's wall labels unless bc_mode forces dirichlet/neumann.
    """
    kern = _Kernel(dom, bc_mode)
    start = _start_point(dom, cfg)
    n_steps, dt = cfg.resolve_steps(kern.h)
    tm = _target_mask(dom, target)
    if tm is None:
        sizes, res = _run_batches(kern, cfg, start, n_steps, dt,
                                  threads=threads,
                                  checkpoints=[n_steps])
        hits = sum(s - r["surv_count"][0] for s, r in zip(sizes, res))
    else:
        sizes, res = _run_batches(kern, cfg, start, n_steps, dt,
                                  threads=threads, target_mask=tm)
        hits = sum(r["hit_count"] for r in res)
    n = cfg.n_paths
    mean, stderr = _mean_stderr(hits, hits, n)  # indicator: sq == value
    return PathEstimate(mean=mean, stderr=stderr, n_paths=n, seed=cfg.seed,
                        bias_note=_bias_note(kern, dt))


def survival_probability(dom: GridDomain, x, t: float, cfg: PathConfig,
                         threads: int = 1) -> PathEstimate:
    """P(path from x not absorbed by time t) under the domain's labels."""
    if t < 0:
        raise BrownianError("t must be >= 0")
    kern = _Kernel(dom, "mixed")
    start = _start_point(dom, cfg, x)
    if t == 0:
        return PathEstimate(mean=1.0, stderr=0.0, n_paths=cfg.n_paths,
                            seed=cfg.seed, bias_note="t=0: survival is 1")
    n_steps, dt = cfg.resolve_steps(kern.h, horizon=t)
    sizes, res = _run_batches(kern, cfg, start, n_steps, dt, threads=threads,
                              checkpoints=[n_steps])
    alive = sum(r["surv_count"][0] for r in res)
    mean, stderr = _mean_stderr(alive, alive, cfg.n_paths)
    return PathEstimate(mean=mean, stderr=stderr, n_paths=cfg.n_paths,
                        seed=cfg.seed, bias_note=_bias_note(kern, dt))


def feynman_kac(dom: GridDomain, result: SpectralResult, x, t: float,
                cfg: PathConfig, mode_index: int = 0,
                threads: int = 1) -> FeynmanKacReport:
    """Monte Carlo check of E_x[phi(path_t) * alive] = exp(-lam t) phi(x).

    Path behavior follows result.bc_mode: killed paths for a Dirichlet
    spectrum, reflected (never killed) for Neumann, per-label for mixed.
    The eigenfield is bilinearly interpolated; t=0 returns phi(x) exactly.
    """
    if grid_hash(result.dom) != grid_hash(dom):
        raise BrownianError("eigenfield grid does not match the domain")
    if t < 0:
        raise BrownianError("t must be >= 0")
    kern = _Kernel(dom, result.bc_mode)
    start = _start_point(dom, cfg, x)
    grid = result.eigenfields[mode_index]
    lam = float(result.eigenvalues[mode_index])
    fx, fy = kern.to_frac(start[0], start[1])
    phi_x = float(_bilinear(kern, grid, np.asarray([fx]),
                            np.asarray([fy]))[0])
    exact = math.exp(-lam * t) * phi_x
    if t == 0:
        return FeynmanKacReport(mean=phi_x, stderr=0.0, exact=phi_x,
                                z_score=0.0, n_paths=cfg.n_paths,
                                seed=cfg.seed, bias_note="t=0: degenerate")
    n_steps, dt = cfg.resolve_steps(kern.h, horizon=t)
    sizes, res = _run_batches(kern, cfg, start, n_steps, dt, threads=threads,
                              fk_grid=grid)
    tot = sum(r["fk_sum"] for r in res)
    tot_sq = sum(r["fk_sumsq"] for r in res)
    mean, stderr = _mean_stderr(tot, tot_sq, cfg.n_paths)
    z = (mean - exact) / stderr if stderr > 0 else 0.0
    return FeynmanKacReport(mean=mean, stderr=stderr, exact=exact, z_score=z,
                            n_paths=cfg.n_paths, seed=cfg.seed,
                            bias_note=_bias_note(kern, dt))


def reflect_step(pos, proposed, dom: GridDomain):
    """Resolve one proposed displacement under all-reflecting walls.

    Specular folds about violated wall lines, x before y, at most 8
    alternations, then projection to the nearest active node center.
    Deterministic; a proposal already inside comes back unchanged.
    """
    kern = _Kernel(dom, "neumann")
    fx0, fy0 = kern.to_frac(pos[0], pos[1])
    cx, cy = kern.cell_of(fx0, fy0)
    if not kern.mask[int(cy), int(cx)]:
        raise BrownianError("pos is outside the domain")
    fx, fy = kern.to_frac(proposed[0], proposed[1])
    fx = np.atleast_1d(np.asarray(fx, dtype=float))
    fy = np.atleast_1d(np.asarray(fy, dtype=float))
    cxa = np.atleast_1d(np.asarray(cx, dtype=np.int64)).copy()
    cya = np.atleast_1d(np.asarray(cy, dtype=np.int64)).copy()
    alive = np.ones(1, dtype=bool)
    _resolve_step(kern, fx, fy, cxa, cya, alive)
    return (kern.ox + float(fx[0]) * kern.h,
            kern.oy + float(fy[0]) * kern.h)


def stopping_time_to_set(dom: GridDomain, target, bc: str,
                         cfg: PathConfig, threads: int = 1):
    """Per-path first-hit records for a target set.

    bc is 'kill', 'reflect', or 'mixed' (aliases 'dirichlet'/'neumann'
    accepted).  Returns a list of StoppingSample in path order.
    """
    modes = {"kill": "dirichlet", "dirichlet": "dirichlet",
             "reflect": "neumann", "neumann": "neumann", "mixed": "mixed"}
    if bc not in modes:
        raise BrownianError(f"bc must be kill, reflect or mixed, got {bc!r}")
    kern = _Kernel(dom, modes[bc])
    start = _start_point(dom, cfg)
    tm = _target_mask(dom, target)
    if tm is None:
        raise BrownianError("stopping_time_to_set needs an explicit target "
                            "set, not 'boundary'")
    n_steps, dt = cfg.resolve_steps(kern.h)
    sizes, res = _run_batches(kern, cfg, start, n_steps, dt, threads=threads,
                              target_mask=tm)
    samples = []
    for r in res:
        for step, why in zip(r["hit_step"], r["reason"]):
            hit = why == "hit_target"
            samples.append(StoppingSample(
                hit=bool(hit),
                T=float(step * dt) if step >= 0 else None,
                exit_reason=str(why)))
    return samples


def heat_content(dom: GridDomain, t: float, cfg: PathConfig,
                 result: SpectralResult | None = None,
                 max_starts: int = 144, threads: int = 1) -> HeatContentEstimate:
    """Integral over the domain of the absorption probability by time t.

    Estimated as a lattice-subsampled quadrature: every stride-th active
    node launches cfg.n_paths killed paths, contributing its cell weight
    (stride*h)^2 times the absorption fraction.  A Dirichlet spectral
    result, if given, supplies the cross-check value
    sum(m * (1 - q_t)).
    """
    if not (t > 0):
        raise BrownianError("t must be positive")
    kern = _Kernel(dom, "mixed")
    iy, ix = np.nonzero(dom.mask)
    stride = 1
    while (iy % stride == 0).sum() and \
            ((iy % stride == 0) & (ix % stride == 0)).sum() > max_starts:
        stride += 1
    pick = (iy % stride == 0) & (ix % stride == 0)
    sy, sx = iy[pick], ix[pick]
    xs, ys = dom.node_xy(sy, sx)
    w = (stride * dom.h) ** 2
    n_steps, dt = cfg.resolve_steps(kern.h, horizon=t)
    total = 0.0
    var = 0.0
    for x0, y0 in zip(xs, ys):
        sizes, res = _run_batches(kern, cfg, (float(x0), float(y0)),
                                  n_steps, dt, threads=threads,
                                  checkpoints=[n_steps])
        alive = sum(r["surv_count"][0] for r in res)
        p_hit = 1.0 - alive / cfg.n_paths
        total += w * p_hit
        var += (w ** 2) * p_hit * (1 - p_hit) / max(1, cfg.n_paths - 1)
    spectral_value = None
    if result is not None:
        from .spectral import survival_profile
        q = survival_profile(result, t)
        m = result.operator.masses
        qv = result.operator.field_to_vector(q.field)
        spectral_value = float((m * (1.0 - qv)).sum())
    return HeatContentEstimate(value=total, stderr=math.sqrt(var),
                               spectral_value=spectral_value,
                               n_starts=int(len(xs)), t=t, seed=cfg.seed,
                               bias_note=_bias_note(kern, dt)
                               + f"; quadrature stride {stride}")


def mixed_eigenvalue_via_decay(dom: GridDomain, cfg: PathConfig, t_grid,
                               max_starts: int = 64,
                               fit_tol: float = 0.05,
                               threads: int = 1) -> MixedDecayReport:
    """Estimate the principal eigenvalue from survival decay.

    Runs killed/reflected paths (per the domain's labels) from a
    subsampled start grid, forms S(t) ~ integral of survival, and fits
    -d log S / dt by least squares over t_grid.  If the log-survival
    curve bends more than fit_tol (rms, relative to its drop), the decay
    is not yet single-mode: raises with advice to extend t_grid.
    """
    t_grid = np.asarray(sorted(float(t) for t in t_grid))
    if t_grid.size < 3:
        raise BrownianError("t_grid needs at least 3 times")
    if t_grid[0] <= 0:
        raise BrownianError("t_grid times must be positive")
    kern = _Kernel(dom, "mixed")
    if not kern.any_dirichlet:
        raise BrownianError("decay estimation needs at least one "
                            "Dirichlet-labeled wall")
    horizon = float(t_grid[-1])
    n_steps, dt = cfg.resolve_steps(kern.h, horizon=horizon)
    steps = sorted({max(1, int(round(tt / dt))) for tt in t_grid})
    times = np.array([s * dt for s in steps])

    iy, ix = np.nonzero(dom.mask)
    stride = 1
    while ((iy % stride == 0) & (ix % stride == 0)).sum() > max_starts:
        stride += 1
    pick = (iy % stride == 0) & (ix % stride == 0)
    xs, ys = dom.node_xy(iy[pick], ix[pick])

    counts = np.zeros(len(steps))
    csq = np.zeros(len(steps))
    for x0, y0 in zip(xs, ys):
        sizes, res = _run_batches(kern, cfg, (float(x0), float(y0)),
                                  n_steps, dt, threads=threads,
                                  checkpoints=steps)
        frac = sum(r["surv_count"] for r in res) / cfg.n_paths
        counts += frac
        csq += frac * (1 - frac) / max(1, cfg.n_paths - 1)
    S = counts / len(xs)
    if (S <= 0).any():
        raise BrownianError("survival hit zero inside t_grid; use more "
                            "paths or earlier times")
    sigma_lnS = np.sqrt(csq) / counts
    y = np.log(S)
    tbar = times.mean()
    denom = float(((times - tbar) ** 2).sum())
    slope = float(((times - tbar) * (y - y.mean())).sum()) / denom
    lam = -slope
    stderr = math.sqrt(float((((times - tbar) / denom) ** 2
                              * sigma_lnS ** 2).sum()))
    fit = y.mean() + slope * (times - tbar)
    drop = max(1e-12, float(y.max() - y.min()))
    resid = float(np.sqrt(np.mean((y - fit) ** 2))) / drop
    if resid > fit_tol:
        raise BrownianError(
            f"log-survival is not linear yet (relative rms residual "
            f"{resid:.3f} > {fit_tol}); extend t_grid to later times")
    return MixedDecayReport(lambda_hat=lam, stderr=stderr,
                            fit_residual=resid,
                            t_grid=tuple(float(x) for x in times),
                            survival=tuple(float(x) for x in S),
                            seed=cfg.seed,
                            bias_note=_bias_note(kern, dt)
                            + f"; {len(xs)} start nodes")
