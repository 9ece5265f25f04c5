"""Neural Basis Function surrogate ``w_i(x, psi) = mean_i(x) + sum_j C_ij(psi) phi_ij(x)``.

Training runs in three stages:

1. :func:`train_basis` regresses one network ``phi_ij`` per (variable, mode)
   pair onto the discrete POD mode ``U_ij``.
2. :func:`pretrain_unknowns` computes least-squares coefficients of every
   training snapshot against the fitted basis functions and regresses one
   network ``C_ij(psi)`` per pair onto them.
3. :func:`physics_train_unknowns` refines the ``C`` networks on the
   nondimensional steady Euler residual, the boundary residual and a
   pressure/temperature data term, with the basis networks frozen.

Networks of one kind share an architecture and are trained together in a
:class:`~nbf_lab.autodiff.NetworkStack`.  Stacks are ordered variable-major:
network ``k`` is variable ``k // n_bf``, mode ``k % n_bf``.

Basis networks see ZMUV-scaled coordinates and are trained on ``sqrt(n) U``
so their targets have unit RMS; ``phi`` is the network output divided by
``sqrt(n)``.  Unknowns networks see ZMUV-scaled Mach numbers and predict
ZMUV-scaled coefficients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import euler, io
from .autodiff import Adam, MlpNetwork, NetworkStack, ZmuvScaler
from .errors import DataError, NumericalError, TrainingError, UsageError
from .euler import VARIABLES

log = logging.getLogger(__name__)

IMPORTANCE_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    lr: float = 1e-3
    decay_factor: float = 0.9
    decay_start_epoch: int = 70
    importance_period: int = 4
    basis_batch: int = 256
    unknowns_batch: int = 1
    physics_epochs: int = 250
    physics_psi_batch: int = 4
    physics_x_batch: int = 256
    lambda_pde: float = 1.0
    lambda_bc: float = 1.0
    lambda_pt: float = 1.0
    basis_hidden: tuple = (40,) * 5
    unknowns_hidden: tuple = (120,) * 7
    negative_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        ints = ("epochs", "importance_period", "basis_batch", "unknowns_batch",
                "physics_psi_batch", "physics_x_batch")
        if any(getattr(self, k) < 1 for k in ints) or self.physics_epochs < 0:
            raise UsageError("epoch counts, batch sizes and the sampling period must be positive")
        if self.lr <= 0 or not 0 < self.decay_factor <= 1:
            raise UsageError("need lr > 0 and decay_factor in (0, 1]")
        if min(self.lambda_pde, self.lambda_bc, self.lambda_pt) < 0:
            raise UsageError("loss weights must be non-negative")
        object.__setattr__(self, "basis_hidden", tuple(int(h) for h in self.basis_hidden))
        object.__setattr__(self, "unknowns_hidden", tuple(int(h) for h in self.unknowns_hidden))

    def optimizer(self, n_params):
        return Adam(n_params, lr=self.lr, decay_factor=self.decay_factor,
                    decay_start_epoch=self.decay_start_epoch)

    def is_importance_epoch(self, epoch):
        return (epoch + 1) % self.importance_period == 0


def derive_seed(seed, *keys):
    """Deterministic 31-bit seed for a named sub-task of a run."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0] & 0x7FFFFFFF)


def importance_probs(targets, mean=None, eps=IMPORTANCE_EPS):
    """Sampling probabilities proportional to ``|U - mean| + eps``.

    ``targets`` may be 1-D or 2-D; rows of a 2-D array are normalized
    independently.  ``mean`` defaults to the spatial mean of each row.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.size == 0:
        raise UsageError("importance_probs needs at least one target")
    if mean is None:
        mean = t.mean(axis=-1, keepdims=True)
    elif t.ndim == 2:
        mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1)
    p = np.abs(t - mean) + eps
    return p / p.sum(axis=-1, keepdims=True)


def _sample_rows(rng, probs, count):
    # one independent draw of `count` indices per row of probs
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random((probs.shape[0], count))
    return np.stack([np.minimum(np.searchsorted(c, r, side="right"), c.size - 1)
                     for c, r in zip(cdf, u)])


# ---------------------------------------------------------------- model parts


class MeanField:
    """Snapshot mean stored at the grid points, evaluable anywhere.

    Values at stored points are returned exactly; elsewhere they are
    linearly interpolated on a Delaunay triangulation, falling back to the
    nearest stored point outside its hull.  Gradients come from an affine
    least-squares fit to the ``k`` nearest stored points.
    """

    def __init__(self, points, values, k_gradient=9):
        self.points = np.asarray(points, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        self.k_gradient = int(k_gradient)
        self._tree = cKDTree(self.points)
        self._interp = None

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dist, idx = self._tree.query(x)
        out = self.values[idx].copy()
        off = dist > 0
        if off.any():
            if self._interp is None:
                self._interp = LinearNDInterpolator(self.points, self.values)
            lin = self._interp(x[off])
            ok = np.isfinite(lin).all(axis=1)
            sub = out[off]
            sub[ok] = lin[ok]
            out[off] = sub
        return out

    def gradient(self, x):
        """``d mean / d(x, y)`` of shape ``(m, 4, 2)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, idx = self._tree.query(x, k=self.k_gradient)
        dx = self.points[idx] - x[:, None, :]
        design = np.concatenate([np.ones(dx.shape[:2] + (1,)), dx], axis=2)
        vals = self.values[idx]
        normal = np.einsum("mka,mkb->mab", design, design)
        rhs = np.einsum("mka,mkv->mav", design, vals)
        coef = np.linalg.solve(normal, rhs)
        return np.swapaxes(coef[:, 1:, :], 1, 2)


class BasisFunctions:
    """The ``4 * n_bf`` basis networks and their input scaling."""

    def __init__(self, stack, x_scaler, output_scale, n_bf):
        self.stack = stack
        self.x_scaler = x_scaler
        self.output_scale = float(output_scale)
        self.n_bf = int(n_bf)

    def evaluate(self, x):
        """``phi`` at points ``x``, shape ``(4, n_bf, m)``."""
        xs = self.x_scaler.transform(np.atleast_2d(x))
        out = self.stack.forward(xs)[..., 0] * self.output_scale
        return out.reshape(len(VARIABLES), self.n_bf, -1)

    def evaluate_with_grad(self, x):
        """``phi`` and ``d phi / d(x, y)`` of shapes ``(4, n_bf, m)`` and ``(4, n_bf, m, 2)``."""
        xs = self.x_scaler.transform(np.atleast_2d(x))
        vals, jac = self.stack.input_jacobian(xs)
        vals = vals[..., 0] * self.output_scale
        grads = jac[:, :, 0, :] * (self.output_scale / self.x_scaler.scale_)
        return (vals.reshape(len(VARIABLES), self.n_bf, -1),
                grads.reshape(len(VARIABLES), self.n_bf, -1, 2))


class Unknowns:
    """The ``4 * n_bf`` coefficient networks and their scalings."""

    def __init__(self, stack, psi_scaler, out_mean, out_scale, n_bf):
        self.stack = stack
        self.psi_scaler = psi_scaler
        self.out_mean = np.asarray(out_mean, dtype=np.float64)
        self.out_scale = np.asarray(out_scale, dtype=np.float64)
        self.n_bf = int(n_bf)

    def scaled_inputs(self, psi):
        return self.psi_scaler.transform(np.asarray(psi, dtype=np.float64).reshape(-1, 1))

    def evaluate(self, psi):
        """``C(psi)`` of shape ``(B, 4, n_bf)``."""
        out = self.stack.forward(self.scaled_inputs(psi))[..., 0]
        c = self.out_mean[:, None] + self.out_scale[:, None] * out
        return c.T.reshape(-1, len(VARIABLES), self.n_bf)


@dataclass
class NbfModel:
    mean: MeanField
    basis: BasisFunctions
    unknowns: Unknowns
    mach_range: tuple
    gas: euler.GasConstants = euler.AIR
    variables: tuple = VARIABLES

    @property
    def n_bf(self):
        return self.basis.n_bf

    def coefficients(self, psi):
        return self.unknowns.evaluate(psi)

    def combine(self, mean, phi, coef):
        """``mean (m, 4) + sum_j C_ij phi_ij`` for one coefficient set ``coef (4, n_bf)``."""
        return mean + np.einsum("ij,ijm->mi", coef, phi)


def nbf_predict(model, x, psi, derived=False):
    """Evaluate the surrogate at points ``x`` for Mach ``psi``.

    ``psi`` is a scalar or one value per point.  Returns ``(field, info)``
    where ``field`` is ``(m, 4)`` in SI units and ``info`` holds an
    ``extrapolated`` flag plus, when ``derived``, the pressure,
    temperature, speed and Mach-number fields.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    psi = np.broadcast_to(np.asarray(psi, dtype=np.float64), (x.shape[0],))
    phi = model.basis.evaluate(x)
    mean = model.mean(x)
    levels, inverse = np.unique(psi, return_inverse=True)
    coefs = model.coefficients(levels)
    out = np.empty((x.shape[0], 4))
    for k in range(levels.size):
        sel = inverse == k
        out[sel] = model.combine(mean[sel], phi[:, :, sel], coefs[k])
    lo, hi = model.mach_range
    info = {"extrapolated": bool(np.any((psi < lo) | (psi > hi)))}
    if info["extrapolated"]:
        log.warning("NBF prediction outside the trained Mach range [%s, %s]", lo, hi)
    if derived:
        with np.errstate(all="ignore"):
            info["pressure"] = euler.pressure(out, model.gas)
            info["temperature"] = info["pressure"] / (model.gas.r_gas * out[:, 0])
            info["speed"] = euler.speed(out)
            info["mach"] = info["speed"] / np.sqrt(model.gas.gamma * model.gas.r_gas * info["temperature"])
    return out, info


# ---------------------------------------------------------------- stage 1: basis networks


@dataclass
class BasisResult:
    basis: BasisFunctions
    final_mse: np.ndarray  # (4, n_bf): mean (phi - U)^2 over the points, in mode units
    relative_mse: np.ndarray  # (4, n_bf): the same error divided by mean U^2
    history: list = field(default_factory=list)  # per-epoch minibatch loss, relative units


def train_basis(bases, points, cfg):
    """Fit one network per (variable, mode) to the POD modes at ``points``.

    ``bases`` maps variable names to fitted :class:`~nbf_lab.pod.SnapshotPOD`
    objects sharing ``n_bf``.  Minibatches are uniform permutations except
    on every ``importance_period``-th epoch, when each network draws its
    points from :func:`importance_probs` of its own target.
    """
    points = np.asarray(points, dtype=np.float64)
    n_bf = {bases[v].n_components_ for v in VARIABLES}
    if len(n_bf) != 1:
        raise UsageError("all variables need the same number of modes")
    n_bf = n_bf.pop()
    n = points.shape[0]
    targets = np.concatenate([bases[v].modes_.T for v in VARIABLES]) * math.sqrt(n)  # (K, n)
    if targets.shape[1] != n:
        raise UsageError("basis modes do not match the number of points")
    k_nets = targets.shape[0]
    x_scaler = ZmuvScaler().fit(points)
    xs = x_scaler.transform(points)
    sizes = [2, *cfg.basis_hidden, 1]
    stack = NetworkStack.create(sizes, [derive_seed(cfg.seed, 1, k) for k in range(k_nets)],
                                "leaky_relu", cfg.negative_slope)
    probs = importance_probs(targets)
    opt = cfg.optimizer(stack.n_params)
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    batch = min(cfg.basis_batch, n)
    steps = math.ceil(n / batch)
    grad = np.empty(stack.n_params)
    history = []
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        if cfg.is_importance_epoch(epoch):
            idx = _sample_rows(rng, probs, steps * batch)  # (K, steps*batch)
        else:
            idx = rng.permutation(n)
        total = 0.0
        for s in range(steps):
            if idx.ndim == 2:
                sel = idx[:, s * batch:(s + 1) * batch]
                xb = xs[sel]
                tb = np.take_along_axis(targets, sel, axis=1)
            else:
                sel = idx[s * batch:(s + 1) * batch]
                xb = xs[sel]
                tb = targets[:, sel]
            out, cache = stack.forward(xb, keep_cache=True)
            diff = out[..., 0] - tb
            losses = np.mean(diff * diff, axis=1)
            if not np.all(np.isfinite(losses)):
                bad = int(np.flatnonzero(~np.isfinite(losses))[0])
                raise TrainingError(f"non-finite basis loss for variable {VARIABLES[bad // n_bf]}, "
                                    f"mode {bad % n_bf}", index=(bad // n_bf, bad % n_bf))
            total += losses.sum()
            stack.backward(cache, (2.0 / diff.shape[1]) * diff[..., None], out=grad)
            opt.step(stack.params, grad)
        history.append(total / (steps * k_nets))
    basis = BasisFunctions(stack, x_scaler, 1.0 / math.sqrt(n), n_bf)
    fitted = stack.forward(xs)[..., 0]
    rel = np.mean((fitted - targets) ** 2, axis=1).reshape(len(VARIABLES), n_bf)
    return BasisResult(basis, rel / n, rel, history)


# ---------------------------------------------------------------- stage 2: pretraining


def least_squares_coefficients(phi, centered, threshold=1e-12):
    """Coefficients minimizing ``||phi^T c - centered||`` per column.

    ``phi`` is ``(n_bf, n)``, ``centered`` is ``(n, D)``.  Solves the normal
    equations; a near-singular Gram matrix falls back to the minimum-norm
    solution from its eigendecomposition with relative cutoff ``threshold``.
    """
    gram = phi @ phi.T
    rhs = phi @ centered
    evals, evecs = np.linalg.eigh(gram)
    top = evals.max() if evals.size else 0.0
    if top > 0 and evals.min() > threshold * top:
        return np.linalg.solve(gram, rhs)
    keep = evals > threshold * top
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    return evecs @ (inv[:, None] * (evecs.T @ rhs))


@dataclass
class PretrainResult:
    unknowns: Unknowns
    targets: np.ndarray  # (D, 4, n_bf) least-squares coefficients
    final_loss: float
    history: list = field(default_factory=list)


def pretrain_targets(basis, mean_values, snapshots):
    """Least-squares coefficients of every snapshot, shape ``(D, 4, n_bf)``."""
    phi = basis.evaluate(snapshots.points)
    out = np.empty((snapshots.n_snapshots, len(VARIABLES), basis.n_bf))
    for i, var in enumerate(VARIABLES):
        centered = snapshots.matrix(var) - mean_values[:, i:i + 1]
        out[:, i, :] = least_squares_coefficients(phi[i], centered).T
    return out


def pretrain_unknowns(basis, mean_values, snapshots, cfg):
    """Regress the coefficient networks onto least-squares targets."""
    targets = pretrain_targets(basis, mean_values, snapshots)
    d = snapshots.n_snapshots
    flat = targets.reshape(d, -1).T  # (K, D)
    out_scaler = ZmuvScaler().fit(flat.T)
    norm_targets = (flat - out_scaler.mean_[:, None]) / out_scaler.scale_[:, None]
    psi_scaler = ZmuvScaler().fit(snapshots.machs.reshape(-1, 1))
    k_nets = flat.shape[0]
    sizes = [1, *cfg.unknowns_hidden, 1]
    stack = NetworkStack.create(sizes, [derive_seed(cfg.seed, 3, k) for k in range(k_nets)],
                                "leaky_relu", cfg.negative_slope)
    unknowns = Unknowns(stack, psi_scaler, out_scaler.mean_, out_scaler.scale_, basis.n_bf)
    psi = unknowns.scaled_inputs(snapshots.machs)
    opt = cfg.optimizer(stack.n_params)
    rng = np.random.default_rng(derive_seed(cfg.seed, 4))
    batch = min(cfg.unknowns_batch, d)
    steps = math.ceil(d / batch)
    grad = np.empty(stack.n_params)
    history = []
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        perm = rng.permutation(d)
        total = 0.0
        for s in range(steps):
            sel = perm[s * batch:(s + 1) * batch]
            out, cache = stack.forward(psi[sel], keep_cache=True)
            diff = out[..., 0] - norm_targets[:, sel]
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite pretraining loss at epoch {epoch}")
            total += loss * sel.size
            stack.backward(cache, (2.0 / diff.shape[1]) * diff[..., None], out=grad)
            opt.step(stack.params, grad)
        history.append(total / d)
    final = float(np.mean((stack.forward(psi)[..., 0] - norm_targets) ** 2))
    return PretrainResult(unknowns, targets, final, history)


# ---------------------------------------------------------------- stage 3: physics training


class PhysicsProblem:
    """Everything the physics loss needs, precomputed at the grid points.

    States are nondimensionalized with the freestream scales.  The
    temperature term uses ``P / rho`` in those units.
    """

    def __init__(self, model, snapshots, grid_points=None, boundary=None):
        gas = model.gas
        self.gas = gas
        self.scales = euler.state_scales(gas)
        pts = snapshots.points if grid_points is None else np.asarray(grid_points)
        self.points = pts
        self.machs = snapshots.machs.copy()
        phi, dphi = model.basis.evaluate_with_grad(pts)
        inv = (1.0 / self.scales)[:, None, None]
        self.phi = phi * inv
        self.dphi = dphi * inv[..., None]
        self.mean = model.mean(pts) / self.scales
        self.dmean = model.mean.gradient(pts) / self.scales[:, None]
        truth = np.stack([snapshots.field(m) for m in self.machs]) / self.scales  # (D, n, 4)
        self.p_true = euler.pressure(truth, gas)
        self.t_true = self.p_true / truth[..., 0]
        # collocation weights: deviation of the training states from their mean flow
        dev = np.abs(truth - self.mean[None]).mean(axis=0)
        dev = dev / np.maximum(dev.mean(axis=0), 1e-300)
        self.x_probs = importance_probs(dev.sum(axis=1))
        self.free = np.stack([euler.nondim_freestream(m, gas) for m in self.machs])
        if boundary is None:
            self.b_phi = np.zeros((4, model.n_bf, 0))
            self.b_mean = np.zeros((0, 4))
            self.b_normals = np.zeros((0, 2))
            self.b_inflow = np.zeros(0, dtype=bool)
        else:
            b_pts, b_normals, tags = boundary
            keep = np.array([t in ("inflow", "wall", "symmetry") for t in tags], dtype=bool)
            self.b_phi = model.basis.evaluate(b_pts[keep]) * inv
            self.b_mean = model.mean(b_pts[keep]) / self.scales
            self.b_normals = np.asarray(b_normals)[keep]
            self.b_inflow = np.array([t == "inflow" for t, k in zip(tags, keep) if k])

    @property
    def n_points(self):
        return self.points.shape[0]

    def loss_and_grad(self, coef, psi_idx, x_idx, weights):
        """Total loss and its gradient with respect to ``coef`` ``(B, 4, n_bf)``.

        ``psi_idx`` indexes training Mach numbers, ``x_idx`` grid points.
        Returns ``(loss, grad, parts)`` with the per-term losses in ``parts``.
        """
        lam_pde, lam_bc, lam_pt = weights
        phi = self.phi[:, :, x_idx]
        dphi = self.dphi[:, :, x_idx]
        w = self.mean[x_idx][None] + np.einsum("bij,ijx->bxi", coef, phi)
        wx = self.dmean[x_idx, :, 0][None] + np.einsum("bij,ijx->bxi", coef, dphi[..., 0])
        wy = self.dmean[x_idx, :, 1][None] + np.einsum("bij,ijx->bxi", coef, dphi[..., 1])
        a1, a2 = euler.flux_jacobians(w, self.gas)
        res = np.einsum("bxij,bxj->bxi", a1, wx) + np.einsum("bxij,bxj->bxi", a2, wy)
        n_samples = res.shape[0] * res.shape[1]
        if not np.all(np.isfinite(res)):
            b, x = np.argwhere(~np.isfinite(res).all(axis=-1))[0]
            raise NumericalError(f"non-finite residual at Mach {self.machs[psi_idx[b]]}, "
                                 f"point {self.points[x_idx[x]]}", index=(int(b), int(x)))
        pde = float(np.sum(res * res)) / n_samples
        g_res = (2.0 * lam_pde / n_samples) * res
        jac_w = euler.interior_residual_state_jacobian(w, wx, wy, self.gas)
        g_w = np.einsum("bxij,bxi->bxj", jac_w, g_res)
        g_wx = np.einsum("bxij,bxi->bxj", a1, g_res)
        g_wy = np.einsum("bxij,bxi->bxj", a2, g_res)

        p = euler.pressure(w, self.gas)
        t = p / w[..., 0]
        rp = p - self.p_true[psi_idx][:, x_idx]
        rt = t - self.t_true[psi_idx][:, x_idx]
        pt = float(np.sum(rp * rp) + np.sum(rt * rt)) / n_samples
        dp = euler.pressure_gradient(w, self.gas)
        dt = dp / w[..., :1]
        dt[..., 0] -= t / w[..., 0]
        g_w += (2.0 * lam_pt / n_samples) * (rp[..., None] * dp + rt[..., None] * dt)

        grad = (np.einsum("bxi,ijx->bij", g_w, phi)
                + np.einsum("bxi,ijx->bij", g_wx, dphi[..., 0])
                + np.einsum("bxi,ijx->bij", g_wy, dphi[..., 1]))

        bc = 0.0
        if self.b_mean.shape[0]:
            wb = self.b_mean[None] + np.einsum("bij,ijx->bxi", coef, self.b_phi)
            n_b = wb.shape[0] * wb.shape[1]
            g_wb = np.zeros_like(wb)
            inflow = self.b_inflow
            r_in = wb[:, inflow] - self.free[psi_idx][:, None, :]
            r_wall = (wb[:, ~inflow, 1] * self.b_normals[~inflow, 0]
                      + wb[:, ~inflow, 2] * self.b_normals[~inflow, 1])
            bc = float(np.sum(r_in * r_in) + np.sum(r_wall * r_wall)) / n_b
            g_wb[:, inflow] = (2.0 * lam_bc / n_b) * r_in
            g_wb[:, ~inflow, 1] = (2.0 * lam_bc / n_b) * r_wall * self.b_normals[~inflow, 0]
            g_wb[:, ~inflow, 2] = (2.0 * lam_bc / n_b) * r_wall * self.b_normals[~inflow, 1]
            grad += np.einsum("bxi,ijx->bij", g_wb, self.b_phi)
        loss = lam_pde * pde + lam_bc * bc + lam_pt * pt
        return loss, grad, {"pde": pde, "bc": bc, "pt": pt}

    def pt_mse(self, coef):
        """Pressure plus temperature MSE over every training Mach and grid point."""
        w = self.mean[None] + np.einsum("bij,ijx->bxi", coef, self.phi)
        p = euler.pressure(w, self.gas)
        rp = p - self.p_true
        rt = p / w[..., 0] - self.t_true
        return float(np.mean(rp * rp) + np.mean(rt * rt))


def _coefficients(unknowns, out):
    coef = (unknowns.out_mean[:, None] + unknowns.out_scale[:, None] * out[..., 0]).T
    return coef.reshape(-1, len(VARIABLES), unknowns.n_bf)


def physics_objective(unknowns, problem, psi_idx, x_idx, weights):
    """Loss and flat parameter gradient of the ``C`` stack for one fixed batch."""
    psi_idx = np.asarray(psi_idx)
    out, cache = unknowns.stack.forward(unknowns.scaled_inputs(problem.machs[psi_idx]), keep_cache=True)
    k = out.shape[0]
    coef = _coefficients(unknowns, out)
    loss, g_coef, parts = problem.loss_and_grad(coef, psi_idx, x_idx, weights)
    g_out = (g_coef.reshape(-1, k).T * unknowns.out_scale[:, None])[..., None]
    return loss, unknowns.stack.backward(cache, g_out), parts


@dataclass
class PhysicsResult:
    history: list  # per epoch: full-batch loss on a fixed evaluation sample
    parts: list
    pt_mse: list  # per epoch: P/T MSE over the whole training set
    best_epoch: int  # epoch whose weights were kept; 0 means the pretrained ones


PT_GUARD = 10.0


def physics_train_unknowns(model, problem, cfg, eval_points=1024, pt_guard=PT_GUARD):
    """Refine ``model.unknowns`` in place on the physics-informed loss.

    Each step draws a batch of training Mach numbers uniformly and a batch of
    grid points from ``problem.x_probs``; every boundary point is used.
    ``history[e]`` is the loss after ``e`` epochs on a fixed sample of all
    training Mach numbers and ``eval_points`` points.

    An epoch is admissible when its training-set P/T MSE is at most
    ``pt_guard`` times the pretrained value.  The admissible epoch with the
    lowest loss is kept, so the result never gives up more data fit than
    that, even when the PDE term dominates the objective.
    """
    unknowns = model.unknowns
    stack = unknowns.stack
    weights = (cfg.lambda_pde, cfg.lambda_bc, cfg.lambda_pt)
    d = problem.machs.size
    rng = np.random.default_rng(derive_seed(cfg.seed, 5))
    eval_x = np.sort(rng.choice(problem.n_points, min(eval_points, problem.n_points),
                                replace=False, p=problem.x_probs))
    all_psi = np.arange(d)

    all_inputs = unknowns.scaled_inputs(problem.machs)

    def evaluate():
        loss, _, parts = physics_objective(unknowns, problem, all_psi, eval_x, weights)
        return loss, parts, problem.pt_mse(_coefficients(unknowns, stack.forward(all_inputs)))

    loss, parts, pt = evaluate()
    history, part_hist, pt_hist = [loss], [parts], [pt]
    limit = pt_guard * pt
    best, best_epoch, best_params = loss, 0, stack.params.copy()
    opt = cfg.optimizer(stack.n_params)
    batch = min(cfg.physics_psi_batch, d)
    steps = math.ceil(d / batch)
    for epoch in range(cfg.physics_epochs):
        opt.set_epoch(epoch)
        perm = rng.permutation(d)
        for s in range(steps):
            psi_idx = np.sort(perm[s * batch:(s + 1) * batch])
            x_idx = rng.choice(problem.n_points, cfg.physics_x_batch, p=problem.x_probs)
            _, grad, _ = physics_objective(unknowns, problem, psi_idx, x_idx, weights)
            try:
                opt.step(stack.params, grad)
            except NumericalError as err:
                raise TrainingError(f"physics training diverged at epoch {epoch}: {err}") from err
        loss, parts, pt = evaluate()
        history.append(loss)
        part_hist.append(parts)
        pt_hist.append(pt)
        if pt <= limit and loss < best:
            best, best_epoch = loss, epoch + 1
            best_params[:] = stack.params
    stack.params[:] = best_params
    return PhysicsResult(history, part_hist, pt_hist, best_epoch)


# ---------------------------------------------------------------- estimator


class NBFRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around the three NBF training stages.

    ``fit`` takes a :class:`~nbf_lab.pod.SnapshotSet`; ``predict`` takes rows
    ``[x, y, mach]`` and returns ``[rho, u, v, E]`` in SI units.

    Parameters
    ----------
    n_bf : int or None
        Retained modes per variable; ``None`` keeps one per training snapshot.
    physics : bool
        Run the physics-informed refinement after pretraining.
    grid : StructuredGrid or None
        Supplies boundary faces for the boundary loss; without it that term
        is dropped.
    """

    def __init__(self, n_bf=None, epochs=250, lr=1e-3, basis_batch=256, unknowns_batch=1,
                 physics=True, physics_epochs=250, physics_psi_batch=4, physics_x_batch=256,
                 lambda_pde=1.0, lambda_bc=1.0, lambda_pt=1.0, basis_hidden=(40,) * 5,
                 unknowns_hidden=(120,) * 7, seed=0, grid=None):
        self.n_bf = n_bf
        self.epochs = epochs
        self.lr = lr
        self.basis_batch = basis_batch
        self.unknowns_batch = unknowns_batch
        self.physics = physics
        self.physics_epochs = physics_epochs
        self.physics_psi_batch = physics_psi_batch
        self.physics_x_batch = physics_x_batch
        self.lambda_pde = lambda_pde
        self.lambda_bc = lambda_bc
        self.lambda_pt = lambda_pt
        self.basis_hidden = basis_hidden
        self.unknowns_hidden = unknowns_hidden
        self.seed = seed
        self.grid = grid

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs, lr=self.lr, basis_batch=self.basis_batch,
            unknowns_batch=self.unknowns_batch,
            physics_epochs=self.physics_epochs if self.physics else 0,
            physics_psi_batch=self.physics_psi_batch, physics_x_batch=self.physics_x_batch,
            lambda_pde=self.lambda_pde, lambda_bc=self.lambda_bc, lambda_pt=self.lambda_pt,
            basis_hidden=tuple(self.basis_hidden), unknowns_hidden=tuple(self.unknowns_hidden),
            seed=self.seed)

    def fit(self, snapshots, y=None, bases=None):
        from .pod import compute_pod

        cfg = self.train_config()
        n_bf = snapshots.n_snapshots if self.n_bf is None else int(self.n_bf)
        if bases is None:
            bases = compute_pod(snapshots, n_bf)
        stage1 = train_basis(bases, snapshots.points, cfg)
        mean_values = np.stack([bases[v].mean_ for v in VARIABLES], axis=1)
        stage2 = pretrain_unknowns(stage1.basis, mean_values, snapshots, cfg)
        model = NbfModel(MeanField(snapshots.points, mean_values), stage1.basis, stage2.unknowns,
                         (float(snapshots.machs.min()), float(snapshots.machs.max())))
        self.basis_mse_ = stage1.final_mse
        self.pretrain_loss_ = stage2.final_loss
        self.pretrain_targets_ = stage2.targets
        self.physics_history_ = []
        if self.physics and cfg.physics_epochs > 0:
            boundary = self.grid.boundary_faces() if self.grid is not None else None
            problem = PhysicsProblem(model, snapshots, boundary=boundary)
            self.physics_history_ = physics_train_unknowns(model, problem, cfg).history
        self.model_ = model
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise UsageError("predict expects rows [x, y, mach]")
        return nbf_predict(self.model_, X[:, :2], X[:, 2])[0]

    def predict_field(self, points, mach):
        check_is_fitted(self)
        return nbf_predict(self.model_, points, mach)[0]

    def score(self, X, y, sample_weight=None):
        """Negative mean relative L2 error over the four variables."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64)
        return -float(np.mean(np.linalg.norm(pred - y, axis=0) / np.linalg.norm(y, axis=0)))


# ---------------------------------------------------------------- persistence


def _scaler_json(s):
    return {"mean": s.mean_.tolist(), "scale": s.scale_.tolist()}


def _scaler_from(d):
    return ZmuvScaler.from_stats(d["mean"], d["scale"])


def save_basis(directory, result):
    directory = Path(directory)
    basis = result.basis
    for k, net in enumerate(basis.stack.networks()):
        io.save_network(directory / f"phi_{VARIABLES[k // basis.n_bf]}_{k % basis.n_bf:02d}.nbf", net)
    io.write_json(directory / "manifest.json", {
        "format": "NBF1", "kind": "basis", "variables": list(VARIABLES), "n_bf": basis.n_bf,
        "x_scaler": _scaler_json(basis.x_scaler), "output_scale": basis.output_scale,
        "final_mse": result.final_mse.tolist(), "relative_mse": result.relative_mse.tolist(),
    })


def load_basis(directory):
    directory = Path(directory)
    man = _read_manifest(directory, "basis")
    n_bf = int(man["n_bf"])
    nets = [io.load_network(directory / f"phi_{v}_{j:02d}.nbf") for v in VARIABLES for j in range(n_bf)]
    return BasisFunctions(NetworkStack(nets), _scaler_from(man["x_scaler"]), man["output_scale"], n_bf)


def _read_manifest(directory, kind):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DataError(f"model bundle not found: {directory}")
    man = io.read_json(path)
    if man.get("format") != "NBF1" or man.get("kind") != kind:
        raise io.FormatError(f"{path}: not an NBF1 {kind} bundle")
    return man


def save_model(directory, model):
    directory = Path(directory)
    n_bf = model.n_bf
    for k, net in enumerate(model.basis.stack.networks()):
        io.save_network(directory / f"phi_{VARIABLES[k // n_bf]}_{k % n_bf:02d}.nbf", net)
    for k, net in enumerate(model.unknowns.stack.networks()):
        io.save_network(directory / f"C_{VARIABLES[k // n_bf]}_{k % n_bf:02d}.nbf", net)
    io.save_snapshot(directory / "mean.snap", io.StateField(0.0, model.mean.points, model.mean.values))
    io.write_json(directory / "manifest.json", {
        "format": "NBF1", "kind": "model", "variables": list(VARIABLES), "n_bf": n_bf,
        "x_scaler": _scaler_json(model.basis.x_scaler), "output_scale": model.basis.output_scale,
        "psi_scaler": _scaler_json(model.unknowns.psi_scaler),
        "coef_mean": model.unknowns.out_mean.tolist(), "coef_scale": model.unknowns.out_scale.tolist(),
        "mach_range": list(model.mach_range), "mean_field": "mean.snap",
        "gas": asdict(model.gas),
    })


def load_model(directory):
    directory = Path(directory)
    man = _read_manifest(directory, "model")
    n_bf = int(man["n_bf"])
    phi = [io.load_network(directory / f"phi_{v}_{j:02d}.nbf") for v in VARIABLES for j in range(n_bf)]
    cs = [io.load_network(directory / f"C_{v}_{j:02d}.nbf") for v in VARIABLES for j in range(n_bf)]
    mean = io.load_snapshot(directory / man["mean_field"])
    basis = BasisFunctions(NetworkStack(phi), _scaler_from(man["x_scaler"]), man["output_scale"], n_bf)
    unknowns = Unknowns(NetworkStack(cs), _scaler_from(man["psi_scaler"]),
                        man["coef_mean"], man["coef_scale"], n_bf)
    return NbfModel(MeanField(mean.points, mean.values), basis, unknowns,
                    tuple(man["mach_range"]), euler.GasConstants(**man["gas"]))
