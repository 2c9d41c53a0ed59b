"""Planar grid domains with labeled walls, and level-set geometry on them.

A domain is a boolean mask over a uniform vertex lattice: node (iy, ix) sits
at physical point (x0 + ix*h, y0 + iy*h).  The physical boundary is the
cell-edge polygon around the union of h-by-h cells centered on active nodes;
it is stored as the flat list of unit walls between an active node and an
inactive (or out-of-grid) 4-neighbor, each carrying a Dirichlet or Neumann
label.  Everything downstream (Laplacian assembly, Brownian collision tests,
distances) measures against this one polygon.

Active-node rule: for a Dirichlet side the lattice nodes lying on the ideal
shape's boundary are excluded (their value is pinned to zero and eliminated),
while for a Neumann side they are included and receive fractional cell masses
so that discrete eigenvalues of the reflecting Laplacian converge at O(h^2).

Parametric families: rectangle, disk, dumbbell (two lobes joined by a
centered neck), octopus (disk body with protruding rectangular tentacles),
annulus, l_shape, plus custom_mask for user-supplied rasters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

DIRICHLET = 0
NEUMANN = 1

_BC_NAMES = {"dirichlet": DIRICHLET, "neumann": NEUMANN}
_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# wall directions: index into offsets, (diy, dix)
_DIRS = ((0, 1), (0, -1), (1, 0), (-1, 0))  # +x, -x, +y, -y


class DomainError(ValueError):
    """Raised when a spec cannot be realized as a valid grid domain."""


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for a grid domain: family, numeric parameters, resolution
    (grid spacings across the longest bounding-box side), and boundary
    labels.  bc_overrides maps named parts (rectangle: left, right, bottom,
    top) to labels that replace bc_default there."""

    family: str
    params: Mapping[str, object] = field(default_factory=dict)
    resolution: int = 128
    bc_default: str = "dirichlet"
    bc_overrides: Mapping[str, str] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise DomainError(f"unknown family {self.family!r}; "
                              f"have {sorted(_FAMILIES)}")
        if self.resolution < 16:
            raise DomainError("resolution must be >= 16")
        if self.bc_default not in _BC_NAMES:
            raise DomainError(f"bc_default must be one of {sorted(_BC_NAMES)}")
        for part, bc in self.bc_overrides.items():
            if bc not in _BC_NAMES:
                raise DomainError(f"bc override {part}={bc!r} not recognized")
        for key, val in self.params.items():
            if isinstance(val, (int, float)) and not val > 0:
                raise DomainError(f"param {key} must be positive, got {val}")
        p = self.params
        if (self.family == "dumbbell"
                and p.get("neck_width", 0.0) >= p.get("lobe_height", math.inf)):
            raise DomainError("dumbbell needs neck_width < lobe_height")
        if (self.family == "octopus"
                and p.get("tentacle_width", 0.0) >= p.get("body_radius", math.inf)):
            raise DomainError("octopus needs tentacle_width < body_radius")

    @staticmethod
    def from_json(text: str) -> "DomainSpec":
        doc = json.loads(text)
        return DomainSpec(
            family=doc["family"],
            params=doc.get("params", {}),
            resolution=int(doc.get("resolution", 128)),
            bc_default=doc.get("bc_default", "dirichlet"),
            bc_overrides=doc.get("bc_overrides", {}),
            name=doc.get("name", ""),
        )

    def to_json(self) -> str:
        return json.dumps({
            "family": self.family,
            "params": dict(self.params),
            "resolution": self.resolution,
            "bc_default": self.bc_default,
            "bc_overrides": dict(self.bc_overrides),
            "name": self.name,
        }, indent=2)


class GridDomain:
    """Immutable rasterized domain.

    Attributes
    ----------
    name : str
    h : float
        lattice spacing.
    origin : (float, float)
        physical coordinates of node (0, 0).
    mask : (ny, nx) bool, read-only
        True at active nodes.
    masses : (ny, nx) float, read-only
        finite-volume cell area attached to each node (0 off-domain).
    walls : structured array, fields iy, ix, dir, label
        one record per boundary wall; ``dir`` indexes (+x, -x, +y, -y) and
        the wall is the cell edge between node (iy, ix) and that neighbor.
    labels_by_dir : (4, ny, nx) int8, read-only
        condition label a wall in that direction would carry; only entries
        where a wall actually exists are meaningful.
    regions : dict of named sub-masks (dumbbell: left_lobe, neck,
        right_lobe; octopus: body, tentacle_<k>).
    """

    def __init__(self, name: str, h: float, origin: tuple[float, float],
                 mask: np.ndarray, wall_labels_by_dir: np.ndarray,
                 regions: dict[str, np.ndarray] | None = None,
                 spec: DomainSpec | None = None):
        self.name = name
        self.h = float(h)
        self.origin = (float(origin[0]), float(origin[1]))
        self.mask = mask.astype(bool)
        self.mask.setflags(write=False)
        self.spec = spec
        self.regions = {}
        for key, sub in (regions or {}).items():
            sub = sub & self.mask
            sub.setflags(write=False)
            self.regions[key] = sub
        self._validate_connected()
        self.labels_by_dir = np.asarray(wall_labels_by_dir, dtype=np.int8).copy()
        self.labels_by_dir.setflags(write=False)
        self.walls = _extract_walls(self.mask, self.labels_by_dir)
        self.masses = _quarter_cell_masses(self.mask, self.labels_by_dir) * self.h ** 2
        self.masses.setflags(write=False)

    # -- basic measurements ------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        ny, nx = self.mask.shape
        x0, y0 = self.origin
        return (x0, y0, x0 + (nx - 1) * self.h, y0 + (ny - 1) * self.h)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def area(self) -> float:
        """Mass-weighted area; equals count * h^2 on pure-Dirichlet grids."""
        if (self.walls["label"] == DIRICHLET).all():
            return self.n_active * self.h * self.h
        return float(self.masses.sum())

    def node_xy(self, iy, ix):
        """Physical coordinates of lattice indices (arrays ok)."""
        x0, y0 = self.origin
        return x0 + np.asarray(ix) * self.h, y0 + np.asarray(iy) * self.h

    def nearest_node(self, x, y):
        """Lattice indices of the node whose cell contains (x, y)."""
        x0, y0 = self.origin
        ix = np.rint((np.asarray(x) - x0) / self.h).astype(int)
        iy = np.rint((np.asarray(y) - y0) / self.h).astype(int)
        return iy, ix

    def contains(self, x, y):
        """True where (x, y) lies in the cell of an active node (i.e.
        inside the cell-edge boundary polygon), elementwise."""
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0
        iy, ix = self.nearest_node(x, y)
        iy, ix = np.atleast_1d(iy), np.atleast_1d(ix)
        ny, nx = self.mask.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.zeros(ok.shape, dtype=bool)
        out[ok] = self.mask[iy[ok], ix[ok]]
        if scalar:
            return bool(out[0])
        return out.reshape(np.shape(x))

    def active_coordinates(self) -> np.ndarray:
        """(m, 2) physical coordinates of active nodes, lattice order."""
        iy, ix = np.nonzero(self.mask)
        x, y = self.node_xy(iy, ix)
        return np.column_stack([x, y])

    def wall_segments(self) -> np.ndarray:
        """(m, 4) array of wall endpoints (x1, y1, x2, y2), one per wall."""
        return _wall_segments(self)

    @property
    def bc_labels(self) -> np.ndarray:
        """Per-node label over boundary nodes: -1 off-boundary, else the
        label shared by the node's walls (a node adjacent to walls of both
        kinds reports the Dirichlet label, the kill condition dominating
        locally)."""
        lab = np.full(self.mask.shape, -1, dtype=np.int8)
        iy, ix = self.walls["iy"], self.walls["ix"]
        for want in (NEUMANN, DIRICHLET):  # dirichlet written last, wins
            sel = self.walls["label"] == want
            lab[iy[sel], ix[sel]] = want
        return lab

    def _validate_connected(self):
        if not self.mask.any():
            raise DomainError("empty mask")
        _, count = ndimage.label(self.mask, structure=_FOUR_CONN)
        if count != 1:
            raise DomainError(f"mask has {count} 4-connected components; "
                              "domains must be connected")


# ---------------------------------------------------------------------------
# wall extraction and finite-volume masses


def _neighbor_active(mask: np.ndarray) -> np.ndarray:
    """(4, ny, nx) activity of the (+x, -x, +y, -y) neighbor, False off-grid."""
    ny, nx = mask.shape
    out = np.zeros((4, ny, nx), dtype=bool)
    out[0, :, : nx - 1] = mask[:, 1:]
    out[1, :, 1:] = mask[:, : nx - 1]
    out[2, : ny - 1, :] = mask[1:, :]
    out[3, 1:, :] = mask[: ny - 1, :]
    return out


def _extract_walls(mask: np.ndarray, labels_by_dir: np.ndarray) -> np.ndarray:
    nbr = _neighbor_active(mask)
    recs = []
    for d in range(4):
        iy, ix = np.nonzero(mask & ~nbr[d])
        lab = labels_by_dir[d, iy, ix]
        recs.append((iy, ix, np.full(iy.size, d, dtype=np.int8), lab))
    dtype = np.dtype([("iy", np.int32), ("ix", np.int32),
                      ("dir", np.int8), ("label", np.int8)])
    total = sum(r[0].size for r in recs)
    walls = np.empty(total, dtype=dtype)
    pos = 0
    for iy, ix, dd, lab in recs:
        sl = slice(pos, pos + iy.size)
        walls["iy"][sl] = iy
        walls["ix"][sl] = ix
        walls["dir"][sl] = dd
        walls["label"][sl] = lab
        pos += iy.size
    walls.setflags(write=False)
    return walls


def _wall_segments(dom: GridDomain) -> np.ndarray:
    h = dom.h
    x, y = dom.node_xy(dom.walls["iy"], dom.walls["ix"])
    d = dom.walls["dir"]
    segs = np.empty((d.size, 4))
    for dd, (diy, dix) in enumerate(_DIRS):
        sel = d == dd
        if dix != 0:  # vertical wall at x + dix*h/2
            wx = x[sel] + dix * h / 2.0
            segs[sel, 0], segs[sel, 1] = wx, y[sel] - h / 2.0
            segs[sel, 2], segs[sel, 3] = wx, y[sel] + h / 2.0
        else:  # horizontal wall at y + diy*h/2
            wy = y[sel] + diy * h / 2.0
            segs[sel, 0], segs[sel, 1] = x[sel] - h / 2.0, wy
            segs[sel, 2], segs[sel, 3] = x[sel] + h / 2.0, wy
    return segs


def _quarter_presence(mask: np.ndarray, labels_by_dir: np.ndarray) -> dict:
    """Per-node quarter-cell presence, keyed by quadrant sign pair (sx, sy).

    A node owns up to four quarter cells.  The (sx, sy) quarter is present
    when both axis directions are covered (neighbor active, or the wall
    there is Dirichlet, in which case the cell runs to the pinned wall;
    that choice keeps mixed-rectangle discrete eigenfunctions exact) and
    the quarter is not cut off by a missing diagonal between two active
    axis neighbors (re-entrant corner)."""
    nbr = _neighbor_active(mask)
    dir_of = {(0, 1): 0, (0, -1): 1, (1, 0): 2, (-1, 0): 3}
    covered = np.empty((4, *mask.shape), dtype=bool)
    for d in range(4):
        covered[d] = nbr[d] | (labels_by_dir[d] == DIRICHLET)
    ny, nx = mask.shape
    out = {}
    for sx in (1, -1):
        for sy in (1, -1):
            dx = dir_of[(0, sx)]
            dy = dir_of[(sy, 0)]
            diag = np.zeros(mask.shape, dtype=bool)
            src_y = slice(1, ny) if sy > 0 else slice(0, ny - 1)
            dst_y = slice(0, ny - 1) if sy > 0 else slice(1, ny)
            src_x = slice(1, nx) if sx > 0 else slice(0, nx - 1)
            dst_x = slice(0, nx - 1) if sx > 0 else slice(1, nx)
            diag[dst_y, dst_x] = mask[src_y, src_x]
            out[(sx, sy)] = mask & covered[dx] & covered[dy] \
                & (diag | ~nbr[dx] | ~nbr[dy])
    return out


def _quarter_cell_masses(mask: np.ndarray, labels_by_dir: np.ndarray) -> np.ndarray:
    """Finite-volume cell fraction per node, in units of h^2 (see
    _quarter_presence for which quarters count)."""
    quarters = _quarter_presence(mask, labels_by_dir)
    total = np.zeros(mask.shape, dtype=np.int8)
    for present in quarters.values():
        total += present.astype(np.int8)
    return np.where(mask, total / 4.0, 0.0)


# ---------------------------------------------------------------------------
# family rasterizers

def _lattice(width: float, height: float, resolution: int,
             origin: tuple[float, float]) -> tuple[float, np.ndarray, np.ndarray]:
    """Vertex lattice of spacing h = longest_side/resolution, floored so it
    never overshoots the bounding box (commensurate sides stay exact)."""
    h = max(width, height) / resolution
    nx = int(math.floor(width / h + 1e-9)) + 1
    ny = int(math.floor(height / h + 1e-9)) + 1
    x = origin[0] + np.arange(nx) * h
    y = origin[1] + np.arange(ny) * h
    return h, *np.meshgrid(x, y)  # X, Y shaped (ny, nx)


def _probe_interior(closed, X, Y, h):
    """Interior test for a closed-containment predicate: a point is interior
    when the predicate holds at the point and at 8 probes a tiny step away
    (axis and diagonal; diagonals catch re-entrant corners).  Exact for
    boundaries made of lines and circles once h >> delta."""
    delta = 1e-9 * h
    out = closed(X, Y)
    for dx in (-delta, 0.0, delta):
        for dy in (-delta, 0.0, delta):
            if dx or dy:
                out &= closed(X + dx, Y + dy)
    return out


def _uniform_labels(shape, bc: int) -> np.ndarray:
    return np.full((4, *shape), bc, dtype=np.int8)


def _build_rectangle(spec: DomainSpec):
    p = dict(spec.params)
    w = float(p.pop("width", 1.0))
    ht = float(p.pop("height", 1.0))
    if p:
        raise DomainError(f"rectangle: unknown params {sorted(p)}")
    h, X, Y = _lattice(w, ht, spec.resolution, (0.0, 0.0))
    side_bc = {s: _BC_NAMES[spec.bc_overrides.get(s, spec.bc_default)]
               for s in ("left", "right", "bottom", "top")}
    on_l, on_r = np.isclose(X, 0.0), np.isclose(X, w)
    on_b, on_t = np.isclose(Y, 0.0), np.isclose(Y, ht)
    mask = np.ones(X.shape, dtype=bool)
    for on, side in ((on_l, "left"), (on_r, "right"),
                     (on_b, "bottom"), (on_t, "top")):
        if side_bc[side] == DIRICHLET:
            mask &= ~on
    # a boundary wall in the +x/-x direction always realizes the right/left
    # ideal side (a missing x-neighbor is missing because of that side),
    # and likewise for y, so per-direction labels are constant fields
    labels = np.empty((4, *X.shape), dtype=np.int8)
    labels[0] = side_bc["right"]
    labels[1] = side_bc["left"]
    labels[2] = side_bc["top"]
    labels[3] = side_bc["bottom"]
    return h, (0.0, 0.0), mask, labels, {}


def _build_disk(spec: DomainSpec):
    p = dict(spec.params)
    r = float(p.pop("radius", 1.0))
    if p:
        raise DomainError(f"disk: unknown params {sorted(p)}")
    h, X, Y = _lattice(2 * r, 2 * r, spec.resolution, (-r, -r))
    r2 = X * X + Y * Y
    bc = _BC_NAMES[spec.bc_default]
    mask = r2 < r * r if bc == DIRICHLET else r2 <= r * r
    return h, (-r, -r), mask, _uniform_labels(X.shape, bc), {}


def _build_annulus(spec: DomainSpec):
    p = dict(spec.params)
    ro = float(p.pop("outer_radius", 1.0))
    ri = float(p.pop("inner_radius", 0.5))
    if p:
        raise DomainError(f"annulus: unknown params {sorted(p)}")
    if ri >= ro:
        raise DomainError("annulus needs inner_radius < outer_radius")
    h, X, Y = _lattice(2 * ro, 2 * ro, spec.resolution, (-ro, -ro))
    r2 = X * X + Y * Y
    bc = _BC_NAMES[spec.bc_default]
    if bc == DIRICHLET:
        mask = (r2 > ri * ri) & (r2 < ro * ro)
    else:
        mask = (r2 >= ri * ri) & (r2 <= ro * ro)
    return h, (-ro, -ro), mask, _uniform_labels(X.shape, bc), {}


def _build_dumbbell(spec: DomainSpec):
    p = dict(spec.params)
    lw = float(p.pop("lobe_width", 1.0))
    lh = float(p.pop("lobe_height", 1.0))
    nw = float(p.pop("neck_width", 0.1))
    nl = float(p.pop("neck_length", 0.5))
    if p:
        raise DomainError(f"dumbbell: unknown params {sorted(p)}")
    if nw >= lh:
        raise DomainError("dumbbell needs neck_width < lobe_height")
    width = 2 * lw + nl
    y_lo, y_hi = (lh - nw) / 2.0, (lh + nw) / 2.0
    x_l, x_r = lw, lw + nl

    def closed(X, Y):
        in_y = (Y >= 0) & (Y <= lh)
        left = (X >= 0) & (X <= x_l) & in_y
        right = (X >= x_r) & (X <= width) & in_y
        neck = (X >= x_l) & (X <= x_r) & (Y >= y_lo) & (Y <= y_hi)
        return left | right | neck

    h, X, Y = _lattice(width, lh, spec.resolution, (0.0, 0.0))
    if nw / h < 4:
        raise DomainError(
            f"dumbbell neck resolves to {nw / h:.1f} < 4 nodes across; "
            "raise resolution or widen the neck")
    bc = _BC_NAMES[spec.bc_default]
    mask = closed(X, Y) if bc == NEUMANN else _probe_interior(closed, X, Y, h)
    regions = {
        "left_lobe": mask & (X <= x_l),
        "neck": mask & (X > x_l) & (X < x_r),
        "right_lobe": mask & (X >= x_r),
    }
    return h, (0.0, 0.0), mask, _uniform_labels(X.shape, bc), regions


def _build_octopus(spec: DomainSpec):
    p = dict(spec.params)
    rb = float(p.pop("body_radius", 1.0))
    tw = float(p.pop("tentacle_width", 0.2))
    tl = float(p.pop("tentacle_length", 1.0))
    tc = int(p.pop("tentacle_count", 4))
    if p:
        raise DomainError(f"octopus: unknown params {sorted(p)}")
    if tw >= rb:
        raise DomainError("octopus needs tentacle_width < body_radius")
    if tc < 1:
        raise DomainError("octopus needs tentacle_count >= 1")
    angles = [2.0 * math.pi * k / tc for k in range(tc)]
    reach = rb + tl

    def tentacle_closed(X, Y, th):
        xi = X * math.cos(th) + Y * math.sin(th)
        psi = -X * math.sin(th) + Y * math.cos(th)
        return (xi >= 0) & (xi <= reach) & (np.abs(psi) <= tw / 2.0)

    def closed(X, Y):
        out = X * X + Y * Y <= rb * rb
        for th in angles:
            out |= tentacle_closed(X, Y, th)
        return out

    xs = [-rb, rb]
    ys = [-rb, rb]
    for th in angles:
        tip = np.array([math.cos(th), math.sin(th)]) * reach
        perp = np.array([-math.sin(th), math.cos(th)]) * (tw / 2.0)
        for corner in (tip + perp, tip - perp):
            xs.append(corner[0])
            ys.append(corner[1])
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    h, X, Y = _lattice(x1 - x0, y1 - y0, spec.resolution, (x0, y0))
    if tw / h < 4:
        raise DomainError(
            f"octopus tentacle resolves to {tw / h:.1f} < 4 nodes across; "
            "raise resolution or widen the tentacle")
    bc = _BC_NAMES[spec.bc_default]
    mask = closed(X, Y) if bc == NEUMANN else _probe_interior(closed, X, Y, h)
    body = X * X + Y * Y <= rb * rb
    regions = {"body": mask & body}
    for k, th in enumerate(angles):
        regions[f"tentacle_{k}"] = mask & tentacle_closed(X, Y, th) & ~body
    return h, (x0, y0), mask, _uniform_labels(X.shape, bc), regions


def _build_l_shape(spec: DomainSpec):
    p = dict(spec.params)
    w = float(p.pop("width", 1.0))
    ht = float(p.pop("height", 1.0))
    nw = float(p.pop("notch_width", w / 2.0))
    nh = float(p.pop("notch_height", ht / 2.0))
    if p:
        raise DomainError(f"l_shape: unknown params {sorted(p)}")
    if nw >= w or nh >= ht:
        raise DomainError("l_shape notch must be smaller than the rectangle")

    def closed(X, Y):
        rect = (X >= 0) & (X <= w) & (Y >= 0) & (Y <= ht)
        notch = (X > w - nw) & (Y > ht - nh)
        return rect & ~notch

    h, X, Y = _lattice(w, ht, spec.resolution, (0.0, 0.0))
    bc = _BC_NAMES[spec.bc_default]
    if bc == NEUMANN:
        # closure of the open L: keep nodes on the notch edges
        def closed_n(X, Y):
            rect = (X >= 0) & (X <= w) & (Y >= 0) & (Y <= ht)
            notch = (X >= w - nw) & (Y >= ht - nh)
            edge = (np.isclose(X, w - nw) & (Y >= ht - nh)) | \
                   (np.isclose(Y, ht - nh) & (X >= w - nw))
            return rect & (~notch | edge)
        mask = closed_n(X, Y)
    else:
        mask = _probe_interior(closed, X, Y, h)
    return h, (0.0, 0.0), mask, _uniform_labels(X.shape, bc), {}


def _build_custom(spec: DomainSpec):
    p = dict(spec.params)
    rows = p.pop("rows", None)
    pgm = p.pop("pgm", None)
    cell = float(p.pop("cell_size", 1.0 / 64))
    if p:
        raise DomainError(f"custom_mask: unknown params {sorted(p)}")
    if (rows is None) == (pgm is None):
        raise DomainError("custom_mask needs exactly one of 'rows' or 'pgm'")
    if pgm is not None:
        mask = read_pgm(pgm)
    else:
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise DomainError("custom_mask rows must be nonempty, equal length")
        grid = [[ch in "1#xX" for ch in r] for r in reversed(rows)]
        mask = np.array(grid, dtype=bool)
    bc = _BC_NAMES[spec.bc_default]
    return cell, (0.0, 0.0), mask, _uniform_labels(mask.shape, bc), {}


_FAMILIES = {
    "rectangle": _build_rectangle,
    "disk": _build_disk,
    "annulus": _build_annulus,
    "dumbbell": _build_dumbbell,
    "octopus": _build_octopus,
    "l_shape": _build_l_shape,
    "custom_mask": _build_custom,
}


def build_domain(spec: DomainSpec) -> GridDomain:
    """Rasterize a DomainSpec; deterministic (identical spec, identical bits).

    Raises DomainError for disconnected masks or under-resolved features.
    """
    if spec.bc_overrides and spec.family != "rectangle":
        raise DomainError("bc_overrides are only supported for the "
                          "rectangle family (named sides)")
    h, origin, mask, labels, regions = _FAMILIES[spec.family](spec)
    name = spec.name or spec.family
    return GridDomain(name, h, origin, mask, labels, regions, spec=spec)


# ---------------------------------------------------------------------------
# measurements

def diameter(dom: GridDomain) -> float:
    """Max pairwise distance between boundary-wall vertices, via convex hull.

    Wall vertices sit half a cell beyond the outermost active nodes, so this
    tracks the continuum outline to within about one cell; measuring active
    nodes instead would understate every Dirichlet side by a full cell.
    """
    segs = dom.wall_segments()
    pts = segs.reshape(-1, 2)
    hull = _convex_hull(pts)
    best = 0.0
    for i in range(len(hull)):
        d2 = np.einsum("ij,ij->i", hull[i + 1:] - hull[i], hull[i + 1:] - hull[i])
        if d2.size:
            best = max(best, float(d2.max()))
    return math.sqrt(best)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices, counterclockwise."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[order]
    # drop duplicates
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = (np.diff(p, axis=0) != 0).any(axis=1)
    p = p[keep]
    if len(p) <= 2:
        return p

    def half(points):
        out = []
        for q in points:
            while len(out) >= 2 and _cross(out[-2], out[-1], q) <= 0:
                out.pop()
            out.append(q)
        return out

    lower = half(p)
    upper = half(p[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def dist_to_boundary(point: Sequence[float], dom: GridDomain) -> float:
    """Euclidean distance from an inside point to the boundary polygon."""
    x, y = float(point[0]), float(point[1])
    if not dom.contains(x, y):
        raise DomainError(f"point ({x}, {y}) is outside the domain")
    segs = dom.wall_segments()
    return float(np.min(_point_segment_dist(np.array([[x, y]]), segs)))


def _point_segment_dist(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """(npts, nsegs) distances from points to segments."""
    a = segs[:, 0:2][None, :, :]
    b = segs[:, 2:4][None, :, :]
    p = pts[:, None, :]
    ab = b - a
    denom = np.einsum("ijk,ijk->ij", ab, ab)
    denom = np.where(denom == 0, 1.0, denom)
    t = np.clip(np.einsum("ijk,ijk->ij", p - a, ab) / denom, 0.0, 1.0)
    proj = a + t[:, :, None] * ab
    d = p - proj
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


# ---------------------------------------------------------------------------
# level sets

@dataclass(frozen=True)
class LevelSetGeometry:
    """Marching-squares geometry of one normalized level eta in (0, 1]."""

    level_eta: float
    polylines: list  # list of (m_i, 2) float arrays, physical coordinates
    superlevel_mask: np.ndarray  # |field|/max >= eta, active nodes only
    sublevel_mask: np.ndarray  # |field|/max <= eta, active nodes only
    components: np.ndarray  # 4-connected labeling of superlevel_mask, 0 = off

    @property
    def n_components(self) -> int:
        return int(self.components.max())

    @property
    def is_empty(self) -> bool:
        return not self.polylines


# marching-squares edges: for each of the 16 corner sign patterns, the cell
# edges crossed.  Corners indexed 0=(0,0) 1=(1,0) 2=(1,1) 3=(0,1) in (x,y)
# cell units; edges 0=bottom 1=right 2=top 3=left.
_MS_SEGMENTS: dict[int, tuple[tuple[int, int], ...]] = {
    0: (), 15: (),
    1: ((3, 0),), 14: ((3, 0),),
    2: ((0, 1),), 13: ((0, 1),),
    4: ((1, 2),), 11: ((1, 2),),
    8: ((2, 3),), 7: ((2, 3),),
    3: ((3, 1),), 12: ((3, 1),),
    6: ((0, 2),), 9: ((0, 2),),
    # saddles 5 and 10 resolved by the average-of-corners rule at call time
}


def extract_level_set(dom: GridDomain, field: np.ndarray, eta: float) -> LevelSetGeometry:
    """Level-set geometry of |field| / max|field| at level eta in (0, 1].

    Marching squares with linear interpolation on cells whose four corners
    are all active; saddle cells are split by comparing the cell's average
    corner value against eta.  Vertices come out in physical coordinates.
    """
    if not (0.0 < eta <= 1.0):
        raise ValueError("eta must be in (0, 1]")
    field = np.asarray(field, dtype=float)
    if field.shape != dom.mask.shape:
        raise ValueError("field shape must match the domain lattice")
    if not np.isfinite(field[dom.mask]).all():
        raise ValueError("field has non-finite values on the domain")
    peak = float(np.abs(field[dom.mask]).max())
    if peak == 0.0:
        raise ValueError("field is identically zero on the domain")
    g = np.where(dom.mask, np.abs(field) / peak, 0.0)

    superlevel = dom.mask & (g >= eta)
    sublevel = dom.mask & (g <= eta)
    components, _ = ndimage.label(superlevel, structure=_FOUR_CONN)

    segments = _march_cells(dom, g, eta)
    polylines = _chain_segments(segments, tol=1e-9 * dom.h)
    if not polylines:
        # A level that only touches isolated nodes (the peak at eta = 1)
        # produces no cell crossings; report those nodes as degenerate
        # one-point polylines.  A plateau hitting many nodes (a constant
        # field) is not point-like and stays empty.
        hits = dom.mask & (g == eta)
        count = int(hits.sum())
        if 0 < count <= 64:
            iy, ix = np.nonzero(hits)
            xs, ys = dom.node_xy(iy, ix)
            polylines = [np.array([[xs[i], ys[i]]]) for i in range(count)]
    return LevelSetGeometry(level_eta=eta, polylines=polylines,
                            superlevel_mask=superlevel, sublevel_mask=sublevel,
                            components=components)


def _march_cells(dom: GridDomain, g: np.ndarray, eta: float) -> list[tuple]:
    ny, nx = g.shape
    act = dom.mask
    cell_ok = act[:-1, :-1] & act[:-1, 1:] & act[1:, 1:] & act[1:, :-1]
    v00 = g[:-1, :-1]
    v10 = g[:-1, 1:]
    v11 = g[1:, 1:]
    v01 = g[1:, :-1]
    code = ((v00 >= eta).astype(np.int8)
            | ((v10 >= eta).astype(np.int8) << 1)
            | ((v11 >= eta).astype(np.int8) << 2)
            | ((v01 >= eta).astype(np.int8) << 3))
    code = np.where(cell_ok, code, 0)
    iy, ix = np.nonzero((code != 0) & (code != 15))
    segs = []
    x0g, y0g = dom.origin
    h = dom.h
    for cy, cx in zip(iy, ix):
        c = int(code[cy, cx])
        vals = (float(v00[cy, cx]), float(v10[cy, cx]),
                float(v11[cy, cx]), float(v01[cy, cx]))
        if c in (5, 10):
            center_high = (sum(vals) / 4.0) >= eta
            if c == 5:  # corners 0 and 2 high
                pairs = (((3, 0), (1, 2)) if not center_high
                         else ((3, 2), (1, 0)))
            else:  # corners 1 and 3 high
                pairs = (((0, 1), (2, 3)) if not center_high
                         else ((0, 3), (2, 1)))
        else:
            pairs = _MS_SEGMENTS[c]
        for e1, e2 in pairs:
            p1 = _edge_point(e1, vals, eta)
            p2 = _edge_point(e2, vals, eta)
            # a corner value exactly equal to eta collapses both crossings
            # onto that corner; such zero-length segments carry no geometry
            # and would litter the output as degenerate fragments
            if abs(p1[0] - p2[0]) < 1e-9 and abs(p1[1] - p2[1]) < 1e-9:
                continue
            segs.append((x0g + (cx + p1[0]) * h, y0g + (cy + p1[1]) * h,
                         x0g + (cx + p2[0]) * h, y0g + (cy + p2[1]) * h))
    return segs


def _edge_point(edge: int, vals: tuple, eta: float) -> tuple[float, float]:
    # edge endpoints in cell units and corner indices
    ends = {0: ((0.0, 0.0), (1.0, 0.0), 0, 1),
            1: ((1.0, 0.0), (1.0, 1.0), 1, 2),
            2: ((1.0, 1.0), (0.0, 1.0), 2, 3),
            3: ((0.0, 1.0), (0.0, 0.0), 3, 0)}[edge]
    (ax, ay), (bx, by), ia, ib = ends
    va, vb = vals[ia], vals[ib]
    t = 0.5 if vb == va else (eta - va) / (vb - va)
    t = min(1.0, max(0.0, t))
    return ax + t * (bx - ax), ay + t * (by - ay)


def _chain_segments(segs: list[tuple], tol: float) -> list[np.ndarray]:
    """Join raw marching-squares segments into polylines by shared endpoints."""
    if not segs:
        return []
    key = lambda x, y: (round(x / tol / 16), round(y / tol / 16))
    links: dict[tuple, list[int]] = {}
    for i, (x1, y1, x2, y2) in enumerate(segs):
        links.setdefault(key(x1, y1), []).append(i)
        links.setdefault(key(x2, y2), []).append(i)
    used = [False] * len(segs)
    chains = []
    for start in range(len(segs)):
        if used[start]:
            continue
        used[start] = True
        x1, y1, x2, y2 = segs[start]
        chain = [(x1, y1), (x2, y2)]
        # grow forward from the tail, then backward from the head
        for flip in (False, True):
            if flip:
                chain.reverse()
            while True:
                cx, cy = chain[-1]
                nxt = None
                for j in links.get(key(cx, cy), ()):  # at most a few
                    if not used[j]:
                        nxt = j
                        break
                if nxt is None:
                    break
                used[nxt] = True
                a1, b1, a2, b2 = segs[nxt]
                if abs(a1 - cx) <= 16 * tol and abs(b1 - cy) <= 16 * tol:
                    chain.append((a2, b2))
                else:
                    chain.append((a1, b1))
        chains.append(np.array(chain))
    return chains


# ---------------------------------------------------------------------------
# distances between point sets / polylines

def set_distance(a, b) -> float:
    """Min Euclidean distance between two geometric sets.

    Accepts LevelSetGeometry (its polylines), a list of polylines, or an
    (m, 2) point array.  Polyline inputs measure segment-to-segment
    distance, not vertex samples.  Returns inf when either side is empty.
    """
    segs_a, pts_a = _as_segments(a)
    segs_b, pts_b = _as_segments(b)
    if (segs_a.size == 0 and pts_a.size == 0) or \
       (segs_b.size == 0 and pts_b.size == 0):
        return math.inf
    best = math.inf
    if segs_a.size and segs_b.size:
        best = min(best, _seg_seg_min(segs_a, segs_b))
    if pts_a.size and segs_b.size:
        best = min(best, float(_point_segment_dist(pts_a, segs_b).min()))
    if segs_a.size and pts_b.size:
        best = min(best, float(_point_segment_dist(pts_b, segs_a).min()))
    if pts_a.size and pts_b.size:
        d = pts_a[:, None, :] - pts_b[None, :, :]
        best = min(best, math.sqrt(float(np.einsum("ijk,ijk->ij", d, d).min())))
    return best


def _as_segments(obj) -> tuple[np.ndarray, np.ndarray]:
    """Normalize input to (segments (m,4), loose points (k,2))."""
    if isinstance(obj, LevelSetGeometry):
        polys = obj.polylines
    elif isinstance(obj, np.ndarray) and obj.ndim == 3 and obj.shape[-1] == 2:
        polys = list(obj)
    elif isinstance(obj, np.ndarray):
        arr = np.atleast_2d(np.asarray(obj, dtype=float))
        return np.empty((0, 4)), arr.reshape(-1, 2)
    elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], np.ndarray):
        polys = obj
    elif isinstance(obj, (list, tuple)):
        return np.empty((0, 4)), np.asarray(obj, dtype=float).reshape(-1, 2)
    else:
        raise TypeError(f"cannot interpret {type(obj).__name__} as geometry")
    segs = []
    pts = []
    for poly in polys:
        poly = np.asarray(poly, dtype=float)
        if len(poly) == 1:
            pts.append(poly[0])
        else:
            segs.append(np.hstack([poly[:-1], poly[1:]]))
    seg_arr = np.vstack(segs) if segs else np.empty((0, 4))
    pt_arr = np.array(pts) if pts else np.empty((0, 2))
    return seg_arr, pt_arr


def _seg_seg_min(sa: np.ndarray, sb: np.ndarray) -> float:
    """Min distance between two segment sets, blockwise to bound memory."""
    best = math.inf
    block = 512
    for i in range(0, len(sa), block):
        ai = sa[i:i + block]
        for j in range(0, len(sb), block):
            bj = sb[j:j + block]
            best = min(best, _seg_block(ai, bj))
            if best == 0.0:
                return 0.0
    return best


def _seg_block(sa: np.ndarray, sb: np.ndarray) -> float:
    # endpoint-to-opposite-segment distances cover all non-crossing cases;
    # crossings are caught by an orientation test and give distance 0
    d1 = _point_segment_dist(sa[:, 0:2], sb).min()
    d2 = _point_segment_dist(sa[:, 2:4], sb).min()
    d3 = _point_segment_dist(sb[:, 0:2], sa).min()
    d4 = _point_segment_dist(sb[:, 2:4], sa).min()
    best = float(min(d1, d2, d3, d4))
    if best > 0.0 and _any_crossing(sa, sb):
        return 0.0
    return best


def _any_crossing(sa: np.ndarray, sb: np.ndarray) -> bool:
    a1 = sa[:, None, 0:2]
    a2 = sa[:, None, 2:4]
    b1 = sb[None, :, 0:2]
    b2 = sb[None, :, 2:4]

    def orient(p, q, r):
        return ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    o1 = orient(a1, a2, b1)
    o2 = orient(a1, a2, b2)
    o3 = orient(b1, b2, a1)
    o4 = orient(b1, b2, a2)
    return bool(((o1 * o2 < 0) & (o3 * o4 < 0)).any())


# ---------------------------------------------------------------------------
# raster I/O

def write_pgm(path: str, mask: np.ndarray) -> None:
    """Binary PGM (P5), one byte per node, 255 = active.  Rows are written
    image-style: the top file row is the largest y."""
    data = np.where(mask[::-1], 255, 0).astype(np.uint8)
    ny, nx = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary (P5) or ascii (P2) PGM mask written by write_pgm.

    Returns a boolean lattice-ordered array (row 0 is the smallest y);
    values above 127 count as active.  Inverse of write_pgm.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4 and i < len(blob):
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        fields.append(blob[i:j])
        i = j
    magic, w, hgt, maxv = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic == b"P5":
        i += 1  # single whitespace after maxval
        raw = np.frombuffer(blob, dtype=np.uint8, count=w * hgt, offset=i)
    elif magic == b"P2":
        raw = np.array(blob[i:].split(), dtype=np.uint16).astype(np.uint8)[: w * hgt]
    else:
        raise ValueError(f"not a PGM file: magic {magic!r}")
    if maxv > 255:
        raise ValueError("16-bit PGM not supported")
    return (raw.reshape(hgt, w) > 127)[::-1]


def write_polylines_csv(path: str, geom: LevelSetGeometry) -> None:
    """CSV with columns component_id, vertex_index, x, y."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("component_id,vertex_index,x,y\n")
        for ci, poly in enumerate(geom.polylines):
            for vi, (x, y) in enumerate(np.asarray(poly)):
                fh.write(f"{ci},{vi},{float(x)!r},{float(y)!r}\n")
