"""Explicit local-time-stepping finite-volume solver for steady Euler flow.

The domain is a body-fitted quarter annulus around the unit cylinder,
``r in [1, r_outer]`` and ``theta in [90, 180]`` degrees, so the inflow
arrives from ``-x``.  Cells are indexed ``(i, j)`` with ``i`` along the
radius (``i = 0`` touches the wall) and ``j`` along theta (``j = 0`` at
the top, ``theta = 90``).

Internally the solver works in reference units (density by ``rho_inf``,
velocities by the freestream sound speed, energy by ``rho_inf a_inf^2``,
lengths by the cylinder radius).  :func:`solve_steady` accepts and returns
fields in SI units; :func:`time_step` operates on reference-unit fields.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import euler
from .errors import DivergenceError, NumericalError, UsageError

log = logging.getLogger(__name__)

GAMMA = euler.AIR.gamma
_G1 = GAMMA - 1.0


# ---------------------------------------------------------------- grid


@dataclass
class StructuredGrid:
    nr: int
    ntheta: int
    r_inner: float
    r_outer: float
    node_x: np.ndarray
    node_y: np.ndarray
    centroids: np.ndarray
    volumes: np.ndarray
    # length-weighted face normals; r-faces point toward +i, theta-faces toward +j
    normals_r: np.ndarray
    normals_t: np.ndarray
    boundary_tags: dict = field(default_factory=dict)

    @property
    def n_cells(self):
        return self.nr * self.ntheta

    @property
    def points(self):
        """Cell centroids flattened ``i``-major, shape ``(n_cells, 2)``."""
        return self.centroids.reshape(-1, 2)

    @property
    def spacing(self):
        """Per-cell minimum face-normal spacing ``V / max(face length)``."""
        lengths = np.stack([
            np.linalg.norm(self.normals_r[:-1], axis=-1), np.linalg.norm(self.normals_r[1:], axis=-1),
            np.linalg.norm(self.normals_t[:, :-1], axis=-1), np.linalg.norm(self.normals_t[:, 1:], axis=-1),
        ])
        return self.volumes / lengths.max(axis=0)

    def boundary_faces(self):
        """Midpoints, outward unit normals and tags of every boundary face.

        Returns ``(points (m, 2), normals (m, 2), tags list)``.
        """
        pts, nrm, tags = [], [], []
        sides = {
            "r_min": (self._face_mid("r", 0), -self.normals_r[0]),
            "r_max": (self._face_mid("r", self.nr), self.normals_r[-1]),
            "t_min": (self._face_mid("t", 0), -self.normals_t[:, 0]),
            "t_max": (self._face_mid("t", self.ntheta), self.normals_t[:, -1]),
        }
        for side, (mid, n) in sides.items():
            unit = n / np.linalg.norm(n, axis=-1, keepdims=True)
            pts.append(mid)
            nrm.append(unit)
            tags.extend([self.boundary_tags[side]] * len(mid))
        return np.concatenate(pts), np.concatenate(nrm), tags

    def _face_mid(self, kind, index):
        if kind == "r":
            xs, ys = self.node_x[index], self.node_y[index]
        else:
            xs, ys = self.node_x[:, index], self.node_y[:, index]
        return np.stack([0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:])], axis=-1)


def build_grid(nr, ntheta, r_outer=4.0, farfield_only=False):
    """Uniform ``(r, theta)`` quarter-annulus grid with straight-edged cells.

    ``farfield_only`` tags every boundary as freestream inflow; it exists for
    freestream-preservation checks.
    """
    if int(nr) < 4 or int(ntheta) < 4:
        raise UsageError("grid needs nr, ntheta >= 4")
    if not r_outer > 1.0:
        raise UsageError("r_outer must exceed the cylinder radius 1")
    nr, ntheta = int(nr), int(ntheta)
    r = np.linspace(1.0, float(r_outer), nr + 1)
    theta = np.linspace(0.5 * np.pi, np.pi, ntheta + 1)
    node_x = r[:, None] * np.cos(theta)[None, :]
    node_y = r[:, None] * np.sin(theta)[None, :]
    node_y[:, -1] = 0.0
    node_x[:, 0] = 0.0

    # cell corners counter-clockwise: (i,j) (i+1,j) (i+1,j+1) (i,j+1)
    cx = np.stack([node_x[:-1, :-1], node_x[1:, :-1], node_x[1:, 1:], node_x[:-1, 1:]], axis=-1)
    cy = np.stack([node_y[:-1, :-1], node_y[1:, :-1], node_y[1:, 1:], node_y[:-1, 1:]], axis=-1)
    cross = cx * np.roll(cy, -1, axis=-1) - np.roll(cx, -1, axis=-1) * cy
    area = 0.5 * cross.sum(axis=-1)
    gx = ((cx + np.roll(cx, -1, axis=-1)) * cross).sum(axis=-1) / (6.0 * area)
    gy = ((cy + np.roll(cy, -1, axis=-1)) * cross).sum(axis=-1) / (6.0 * area)

    # r-face from node (i, j) to (i, j+1): normal (dy, -dx) points to +r
    dx_r = node_x[:, 1:] - node_x[:, :-1]
    dy_r = node_y[:, 1:] - node_y[:, :-1]
    normals_r = np.stack([dy_r, -dx_r], axis=-1)
    # theta-face from node (i, j) to (i+1, j): normal (-dy, dx) points to +theta
    dx_t = node_x[1:, :] - node_x[:-1, :]
    dy_t = node_y[1:, :] - node_y[:-1, :]
    normals_t = np.stack([-dy_t, dx_t], axis=-1)

    if farfield_only:
        tags = dict.fromkeys(("r_min", "r_max", "t_min", "t_max"), "inflow")
    else:
        tags = {"r_min": "wall", "r_max": "inflow", "t_min": "outflow", "t_max": "symmetry"}
    return StructuredGrid(nr, ntheta, 1.0, float(r_outer), node_x, node_y,
                          np.stack([gx, gy], axis=-1), area, normals_r, normals_t, tags)


# ---------------------------------------------------------------- numerics


def minmod(a, b):
    return 0.5 * (np.sign(a) + np.sign(b)) * np.minimum(np.abs(a), np.abs(b))


def minmod_reconstruct(values, axis=0, blend=1.0):
    """MUSCL face states from cell values along ``axis``.

    Returns ``(left, right)`` states at the ``n - 1`` faces between
    consecutive cells.  Slopes are minmod-limited; the two end cells use zero
    slope.  ``blend`` scales the slope (0 gives first order).
    """
    q = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    if q.shape[0] < 3:
        raise UsageError("reconstruction needs at least 3 cells along the line")
    d = np.diff(q, axis=0)
    slope = np.zeros_like(q)
    slope[1:-1] = minmod(d[:-1], d[1:])
    half = 0.5 * blend * slope
    left = q[:-1] + half[:-1]
    right = q[1:] - half[1:]
    return np.moveaxis(left, 0, axis), np.moveaxis(right, 0, axis)


def _flux_from_pressure_states(ql, qr, nx, ny):
    # q = [rho, u, v, P]; unit normal components nx, ny; returns Rusanov flux
    rl, ul, vl, pl = ql[..., 0], ql[..., 1], ql[..., 2], ql[..., 3]
    rr, ur, vr, pr = qr[..., 0], qr[..., 1], qr[..., 2], qr[..., 3]
    unl = ul * nx + vl * ny
    unr = ur * nx + vr * ny
    el = pl / _G1 + 0.5 * rl * (ul * ul + vl * vl)
    er = pr / _G1 + 0.5 * rr * (ur * ur + vr * vr)
    smax = np.maximum(np.abs(unl) + np.sqrt(GAMMA * pl / rl), np.abs(unr) + np.sqrt(GAMMA * pr / rr))
    mfl, mfr = rl * unl, rr * unr
    out = np.empty(ql.shape)
    out[..., 0] = 0.5 * (mfl + mfr - smax * (rr - rl))
    out[..., 1] = 0.5 * (mfl * ul + pl * nx + mfr * ur + pr * nx - smax * (rr * ur - rl * ul))
    out[..., 2] = 0.5 * (mfl * vl + pl * ny + mfr * vr + pr * ny - smax * (rr * vr - rl * vl))
    out[..., 3] = 0.5 * ((el + pl) * unl + (er + pr) * unr - smax * (er - el))
    return out


def _to_pressure_form(w):
    q = np.array(w, dtype=np.float64, copy=True)
    q[..., 3] = euler.pressure(w)
    return q


def rusanov_flux(w_left, w_right, normal):
    """Local Lax-Friedrichs flux for states ``[rho, u, v, E]`` and a unit normal."""
    n = np.asarray(normal, dtype=np.float64)
    if not np.allclose(np.linalg.norm(n, axis=-1), 1.0, rtol=0, atol=1e-12):
        raise UsageError("rusanov_flux needs a unit normal")
    ql, qr = _to_pressure_form(w_left), _to_pressure_form(w_right)
    if np.any(ql[..., 3] <= 0) or np.any(qr[..., 3] <= 0):
        raise NumericalError("non-positive pressure in Rusanov flux input")
    return _flux_from_pressure_states(ql, qr, n[..., 0], n[..., 1])


@dataclass(frozen=True)
class SolverConfig:
    cfl_start: float = 0.01
    cfl_end: float = 0.25
    cfl_ramp_iters: int = 1000
    first_order_until: int = 250
    blend_until: int = 750
    max_iters: int = 20000
    residual_drop_target: float = 6.0
    reference_iter: int = 10
    # freeze the limiter once past blend_until and this many orders below the reference
    limiter_freeze_drop: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.cfl_start <= self.cfl_end:
            raise UsageError("need 0 < cfl_start <= cfl_end")
        if self.first_order_until > self.blend_until:
            raise UsageError("first_order_until must not exceed blend_until")
        if self.max_iters < 1 or self.residual_drop_target <= 0:
            raise UsageError("max_iters and residual_drop_target must be positive")

    def digest(self):
        """Stable hash of every field, used to prove two runs shared a config."""
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


def cfl_schedule(iteration, cfg):
    if iteration >= cfg.cfl_ramp_iters:
        return cfg.cfl_end
    return cfg.cfl_start + (cfg.cfl_end - cfg.cfl_start) * iteration / cfg.cfl_ramp_iters


def blend_schedule(iteration, cfg):
    if iteration <= cfg.first_order_until:
        return 0.0
    if iteration >= cfg.blend_until:
        return 1.0
    return (iteration - cfg.first_order_until) / (cfg.blend_until - cfg.first_order_until)


def residual_metric(residuals, volumes):
    """Mean over cells of ``|R| / V``, then mean over the equations."""
    r = np.asarray(residuals, dtype=np.float64)
    v = np.asarray(volumes, dtype=np.float64)
    if r.size == 0:
        raise UsageError("residual_metric needs at least one cell")
    per_eq = np.abs(r).reshape(-1, r.shape[-1]) / v.reshape(-1, 1)
    return float(per_eq.mean(axis=0).mean())


# ---------------------------------------------------------------- operator


class _Operator:
    """Precomputed geometry and boundary handling for one grid and Mach number."""

    def __init__(self, grid, mach):
        self.grid = grid
        self.mach = float(mach)
        nr, nt = grid.nr, grid.ntheta
        len_r = np.linalg.norm(grid.normals_r, axis=-1)
        len_t = np.linalg.norm(grid.normals_t, axis=-1)
        self.len_r, self.len_t = len_r, len_t
        self.nrx, self.nry = grid.normals_r[..., 0] / len_r, grid.normals_r[..., 1] / len_r
        self.ntx, self.nty = grid.normals_t[..., 0] / len_t, grid.normals_t[..., 1] / len_t
        self.volumes = grid.volumes
        self.spacing = grid.spacing
        self.free_q = _to_pressure_form(euler.nondim_freestream(self.mach))
        # freestream face fluxes; they sum to zero around every closed cell, so
        # subtracting them leaves the residual unchanged except that a uniform
        # freestream now cancels exactly instead of to roundoff in the flux size
        free_r = np.broadcast_to(self.free_q, (nr + 1, nt, 4))
        free_t = np.broadcast_to(self.free_q, (nr, nt + 1, 4))
        self.free_fr = _flux_from_pressure_states(free_r, free_r, self.nrx, self.nry) * len_r[..., None]
        self.free_ft = _flux_from_pressure_states(free_t, free_t, self.ntx, self.nty) * len_t[..., None]
        self.pad_r = np.empty((nr + 4, nt, 4))
        self.pad_t = np.empty((nr, nt + 4, 4))
        self.frozen = None

    def _fill_side(self, ghost, mirror, tag, nx, ny):
        # ghost/mirror: views of shape (2, m, 4); nx, ny: (m,) unit normals of the boundary face
        if tag == "inflow":
            ghost[...] = self.free_q
        elif tag == "outflow":
            ghost[...] = mirror[0]
        else:
            ghost[...] = mirror
            un = mirror[..., 1] * nx + mirror[..., 2] * ny
            ghost[..., 1] -= 2.0 * un * nx
            ghost[..., 2] -= 2.0 * un * ny

    def padded(self, q):
        tags = self.grid.boundary_tags
        pr, pt = self.pad_r, self.pad_t
        pr[2:-2] = q
        pt[:, 2:-2] = q
        # ghost order is outward: index 1 mirrors the first interior cell, 0 the second
        self._fill_side(pr[1::-1], pr[2:4], tags["r_min"], self.nrx[0], self.nry[0])
        self._fill_side(pr[-2:], pr[-3:-5:-1], tags["r_max"], self.nrx[-1], self.nry[-1])
        self._fill_side(np.swapaxes(pt[:, 1::-1], 0, 1), np.swapaxes(pt[:, 2:4], 0, 1),
                        tags["t_min"], self.ntx[:, 0], self.nty[:, 0])
        self._fill_side(np.swapaxes(pt[:, -2:], 0, 1), np.swapaxes(pt[:, -3:-5:-1], 0, 1),
                        tags["t_max"], self.ntx[:, -1], self.nty[:, -1])
        return pr, pt

    def freeze_limiter(self, q):
        """Pin the minmod branch chosen at every face for the current state.

        Afterwards each slope is the frozen choice of the backward difference,
        the forward difference, or zero, applied to the live data.  This keeps
        the reconstruction differentiable so the residual can keep falling
        instead of stalling on limiter switching.
        """
        pr, pt = self.padded(q)
        self.frozen = {"r": self._selection(pr), "t": self._selection(np.swapaxes(pt, 0, 1))}

    @staticmethod
    def _selection(padded):
        n = padded.shape[0] - 4
        d = padded[1:] - padded[:-1]
        a, b = d[:n + 2], d[1:n + 3]
        same = a * b > 0
        pick_a = same & (np.abs(a) <= np.abs(b))
        return pick_a.astype(np.float64), (same & ~pick_a).astype(np.float64)

    def _faces(self, padded, blend, key):
        # direction on axis 0; faces between padded cells k and k+1 for k = 1 .. n+1
        n = padded.shape[0] - 4
        first_l, first_r = padded[1:n + 2], padded[2:n + 3]
        if blend == 0.0:
            return first_l, first_r
        d = padded[1:] - padded[:-1]
        if self.frozen is None:
            slope = minmod(d[:n + 2], d[1:n + 3])
        else:
            pick_a, pick_b = self.frozen[key]
            slope = pick_a * d[:n + 2] + pick_b * d[1:n + 3]
        half = (0.5 * blend) * slope
        left = first_l + half[:n + 1]
        right = first_r - half[1:n + 2]
        bad = (left[..., 0] <= 0) | (left[..., 3] <= 0) | (right[..., 0] <= 0) | (right[..., 3] <= 0)
        if bad.any():
            left[bad] = first_l[bad]
            right[bad] = first_r[bad]
        return left, right

    def face_fluxes(self, q, blend):
        """Length-weighted fluxes through r-faces ``(nr+1, nt, 4)`` and theta-faces ``(nr, nt+1, 4)``."""
        pr, pt = self.padded(q)
        lr, rr = self._faces(pr, blend, "r")
        lt, rt = self._faces(np.swapaxes(pt, 0, 1), blend, "t")
        lt, rt = np.swapaxes(lt, 0, 1), np.swapaxes(rt, 0, 1)
        fr = _flux_from_pressure_states(lr, rr, self.nrx, self.nry) * self.len_r[..., None]
        ft = _flux_from_pressure_states(lt, rt, self.ntx, self.nty) * self.len_t[..., None]
        return fr, ft

    def residual(self, q, blend):
        """Net outward flux per cell, reference units, shape ``(nr, nt, 4)``."""
        fr, ft = self.face_fluxes(q, blend)
        fr -= self.free_fr
        ft -= self.free_ft
        return (fr[1:] - fr[:-1]) + (ft[:, 1:] - ft[:, :-1])


def time_step(field, grid, iteration, cfg, mach, operator=None):
    """One forward-Euler pseudo-time update with local time steps.

    ``field`` holds reference-unit states ``[rho, u, v, E]`` of shape
    ``(nr, ntheta, 4)``.  Returns ``(new_field, residual)`` where the
    residual is :func:`residual_metric` of the pre-update flux balance.
    """
    op = operator or _Operator(grid, mach)
    q = _to_pressure_form(field)
    _check_physical(q, iteration, "input")
    res = op.residual(q, blend_schedule(iteration, cfg))
    metric = residual_metric(res, op.volumes)
    a = np.sqrt(GAMMA * q[..., 3] / q[..., 0])
    dt = cfl_schedule(iteration, cfg) * op.spacing / (np.hypot(q[..., 1], q[..., 2]) + a)
    cons = euler.to_conservative(field)
    cons -= (dt / op.volumes)[..., None] * res
    new = euler.to_primitive(cons)
    _check_physical(_to_pressure_form(new), iteration, "update")
    return new, metric


def _check_physical(q, iteration, what):
    ok = np.isfinite(q).all(axis=-1) & (q[..., 0] > 0) & (q[..., 3] > 0)
    if not ok.all():
        cell = tuple(int(c) for c in np.argwhere(~ok)[0])
        raise DivergenceError(f"non-physical {what} at iteration {iteration}, cell {cell}",
                              iteration=iteration, cell=cell)


@dataclass
class ResidualHistory:
    residuals: list
    converged_iter: int | None = None
    reference: float | None = None
    limiter_frozen_at: int | None = None

    def __len__(self):
        return len(self.residuals)


@dataclass
class SolveResult:
    field: np.ndarray
    history: ResidualHistory
    config_digest: str
    # frozen limiter selection, or None; pass back to solve_steady to restart exactly
    limiter_state: dict | None = None


def _as_grid_field(values, grid):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape == (grid.n_cells, 4):
        arr = arr.reshape(grid.nr, grid.ntheta, 4)
    if arr.shape != (grid.nr, grid.ntheta, 4):
        raise UsageError(f"field shape {arr.shape} does not match grid ({grid.nr}, {grid.ntheta}, 4)")
    if not np.all(np.isfinite(arr)):
        raise UsageError("initial field must be finite")
    return arr


def freestream_field(grid, mach):
    """SI freestream state in every cell."""
    return np.broadcast_to(euler.freestream_state(mach), (grid.nr, grid.ntheta, 4)).copy()


def solve_steady(initial, grid, cfg, mach, start_iter=0, reference_residual=None,
                 limiter_state=None):
    """March ``initial`` (SI units) in pseudo-time until converged or ``max_iters``.

    Convergence means the residual fell ``cfg.residual_drop_target`` orders of
    magnitude below ``reference_residual``, which defaults to this run's own
    residual at iteration ``cfg.reference_iter``.  ``start_iter`` offsets the
    CFL and blending schedules.  To restart from a converged result pass its
    ``limiter_state`` too, otherwise the limiter is re-evaluated and the
    discrete fixed point moves slightly.
    """
    field = euler.nondimensionalize(_as_grid_field(initial, grid))
    op = _Operator(grid, mach)
    if limiter_state is not None:
        op.frozen = limiter_state
    history = ResidualHistory([], reference=reference_residual)
    factor = 10.0 ** (-cfg.residual_drop_target)
    for k in range(cfg.max_iters):
        it = start_iter + k
        try:
            new, metric = time_step(field, grid, it, cfg, mach, operator=op)
        except DivergenceError as err:
            err.history = history
            raise
        history.residuals.append(metric)
        if history.reference is None and k == cfg.reference_iter:
            history.reference = metric
        if history.reference is not None:
            if metric <= history.reference * factor:
                history.converged_iter = k
                break
            if (op.frozen is None and it >= cfg.blend_until
                    and metric <= history.reference * 10.0 ** (-cfg.limiter_freeze_drop)):
                op.freeze_limiter(_to_pressure_form(field))
                history.limiter_frozen_at = k
        field = new
    else:
        log.info("no convergence within %d iterations (Mach %s)", cfg.max_iters, mach)
    return SolveResult(euler.dimensionalize(field), history, cfg.digest(), op.frozen)


def stagnation_line_density_ratio(field, grid, rho_inf=euler.RHO_INF):
    """Post-shock to freestream density ratio along the ``theta = 180`` line.

    The shock is located at the steepest density jump along the cell row
    next to the symmetry line; the post-shock value is read three cells
    downstream of it, clear of the captured shock's numerical width.
    """
    line = np.asarray(field)[:, -1, 0][::-1]  # outer to inner
    jump = np.argmax(np.diff(line))
    return float(line[min(jump + 3, len(line) - 1)] / rho_inf)


# ---------------------------------------------------------------- snapshot generation


def _solve_one(mach, grid, cfg):
    try:
        result = solve_steady(freestream_field(grid, mach), grid, cfg, mach)
    except DivergenceError as err:
        raise DivergenceError(f"Mach {mach}: {err}", err.iteration, err.cell, err.history) from err
    return result


def generate_snapshots(machs, grid, cfg, out_dir, jobs=1, csv_mirror=False):
    """Solve every Mach number from freestream and write one ``SNAP`` file each.

    Residual histories go next to the snapshots as ``<name>.history.csv``.
    All snapshots share ``grid.points`` exactly.  With ``jobs > 1`` solves
    run in separate processes; each solve is independent and deterministic,
    so the files do not depend on ``jobs``.  Returns the snapshot paths in
    the order of ``machs``.
    """
    from concurrent.futures import ProcessPoolExecutor
    from pathlib import Path

    from .io import StateField, save_snapshot, save_snapshot_csv, snapshot_name, write_csv

    machs = [float(m) for m in machs]
    if not machs:
        raise UsageError("need at least one Mach number")
    if any(not m > 1 for m in machs):
        raise UsageError("snapshot Mach numbers must exceed 1")
    out_dir = Path(out_dir)
    if jobs > 1 and len(machs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, machs, [grid] * len(machs), [cfg] * len(machs)))
    else:
        results = [_solve_one(m, grid, cfg) for m in machs]

    paths = []
    for mach, result in zip(machs, results):
        if result.history.converged_iter is None:
            log.warning("Mach %s did not reach the residual target in %d iterations", mach, cfg.max_iters)
        snap = StateField(mach, grid.points, result.field.reshape(-1, 4))
        path = out_dir / snapshot_name(mach)
        save_snapshot(path, snap)
        if csv_mirror:
            save_snapshot_csv(path.with_suffix(".csv"), snap)
        write_csv(path.with_suffix(".history.csv"), ("iter", "residual"),
                  enumerate(result.history.residuals))
        paths.append(path)
    return paths
