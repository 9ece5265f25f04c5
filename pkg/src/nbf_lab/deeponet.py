"""Vanilla DeepONet baseline, one branch/trunk pair per state variable.

``G_i(psi)(x) = sum_q b_iq(psi~) t_iq(x~) + b0_i`` in ZMUV-normalized units,
mapped back through the output scaling of variable ``i``.  Branches are tanh
networks of the Mach number, trunks are rectified-linear networks of the
coordinates.  The four branches form one :class:`NetworkStack` and the four
trunks another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import io
from .autodiff import Adam, NetworkStack, ZmuvScaler
from .errors import DataError, TrainingError, UsageError
from .euler import VARIABLES
from .nbf import derive_seed, importance_probs


@dataclass
class DeepONetModel:
    branch: NetworkStack
    trunk: NetworkStack
    b0: np.ndarray  # (4,)
    psi_scaler: ZmuvScaler
    x_scaler: ZmuvScaler
    out_scaler: ZmuvScaler  # four features, one per variable
    mach_range: tuple = (float("nan"), float("nan"))

    @property
    def latent_width(self):
        return self.branch.layer_sizes[-1]


def _normalized_forward(model, xs, ps):
    # xs (m, 2) and ps (B, 1) already scaled; returns (4, B, m)
    b = model.branch.forward(ps)
    t = model.trunk.forward(xs)
    return np.einsum("kbq,kmq->kbm", b, t) + model.b0[:, None, None]


def deeponet_forward(model, x, psi):
    """Predicted ``[rho, u, v, E]`` at points ``x`` for Mach ``psi``, shape ``(m, 4)``.

    ``psi`` is a scalar or one value per point.  The trunk is evaluated once
    per point and the branch once per distinct Mach number.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    psi = np.broadcast_to(np.asarray(psi, dtype=np.float64), (x.shape[0],))
    levels, inverse = np.unique(psi, return_inverse=True)
    b = model.branch.forward(model.psi_scaler.transform(levels[:, None]))  # (4, L, q)
    t = model.trunk.forward(model.x_scaler.transform(x))  # (4, m, q)
    norm = np.einsum("kmq,kmq->mk", b[:, inverse], t) + model.b0
    return model.out_scaler.inverse_transform(norm)


@dataclass
class DeepONetTrainResult:
    model: DeepONetModel
    final_mse: float  # normalized units, all training pairs
    history: list


def train_deeponet(snapshots, epochs=250, lr=1e-3, decay_factor=0.9, decay_start_epoch=70,
                   x_batch=256, importance_period=4, latent=64, branch_hidden=(120,) * 5,
                   trunk_hidden=(120,) * 6, seed=0):
    """Fit the four branch/trunk pairs to every (Mach, point) pair of ``snapshots``.

    Each step takes a minibatch of points combined with every training Mach
    number, so the trunk is evaluated once per point.  Points are a uniform
    permutation except on every ``importance_period``-th epoch, when each
    variable draws points with probability proportional to the deviation of
    its normalized state from the spatial mean, averaged over Mach numbers.
    """
    if snapshots.n_snapshots < 1:
        raise UsageError("DeepONet training needs at least one snapshot")
    n, d = snapshots.n_points, snapshots.n_snapshots
    psi_scaler = ZmuvScaler().fit(snapshots.machs.reshape(-1, 1))
    x_scaler = ZmuvScaler().fit(snapshots.points)
    values = np.transpose(snapshots.data, (2, 1, 0)).reshape(-1, 4)  # (D*n, 4)
    out_scaler = ZmuvScaler().fit(values)
    targets = ((snapshots.data - out_scaler.mean_[:, None, None])
               / out_scaler.scale_[:, None, None]).transpose(0, 2, 1)  # (4, D, n)
    xs = x_scaler.transform(snapshots.points)
    ps = psi_scaler.transform(snapshots.machs.reshape(-1, 1))

    k = len(VARIABLES)
    branch = NetworkStack.create([1, *branch_hidden, latent],
                                 [derive_seed(seed, 11, i) for i in range(k)], "tanh")
    trunk = NetworkStack.create([2, *trunk_hidden, latent],
                                [derive_seed(seed, 12, i) for i in range(k)], "relu")
    model = DeepONetModel(branch, trunk, np.zeros(k), psi_scaler, x_scaler, out_scaler,
                          (float(snapshots.machs.min()), float(snapshots.machs.max())))
    opts = [Adam(s, lr=lr, decay_factor=decay_factor, decay_start_epoch=decay_start_epoch)
            for s in (branch.n_params, trunk.n_params, k)]
    dev = np.abs(targets - targets.mean(axis=2, keepdims=True)).mean(axis=1)  # (4, n)
    probs = importance_probs(dev, mean=np.zeros(k))
    rng = np.random.default_rng(derive_seed(seed, 13))
    batch = min(x_batch, n)
    steps = math.ceil(n / batch)
    g_branch, g_trunk = np.empty(branch.n_params), np.empty(trunk.n_params)
    history = []
    for epoch in range(epochs):
        for opt in opts:
            opt.set_epoch(epoch)
        if (epoch + 1) % importance_period == 0:
            idx = np.stack([rng.choice(n, steps * batch, p=p) for p in probs])  # (4, steps*batch)
        else:
            idx = rng.permutation(n)
        total = 0.0
        for s in range(steps):
            if idx.ndim == 2:
                sel = idx[:, s * batch:(s + 1) * batch]
                xb = xs[sel]  # (4, B, 2)
                yb = np.take_along_axis(targets, sel[:, None, :], axis=2)
            else:
                sel = idx[s * batch:(s + 1) * batch]
                xb = xs[sel]
                yb = targets[:, :, sel]
            bo, b_cache = branch.forward(ps, keep_cache=True)  # (4, D, q)
            to, t_cache = trunk.forward(xb, keep_cache=True)  # (4, B, q)
            pred = np.einsum("kdq,kbq->kdb", bo, to) + model.b0[:, None, None]
            diff = pred - yb
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite DeepONet loss at epoch {epoch}, step {s}")
            total += loss
            g = (2.0 / (diff.shape[1] * diff.shape[2])) * diff
            branch.backward(b_cache, np.einsum("kdb,kbq->kdq", g, to), out=g_branch)
            trunk.backward(t_cache, np.einsum("kdb,kdq->kbq", g, bo), out=g_trunk)
            opts[0].step(branch.params, g_branch)
            opts[1].step(trunk.params, g_trunk)
            opts[2].step(model.b0, g.sum(axis=(1, 2)))
        history.append(total / steps)
    full = _normalized_forward(model, xs, ps)
    return DeepONetTrainResult(model, float(np.mean((full - targets) ** 2)), history)


class DeepONetRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style DeepONet: ``fit(snapshot_set)``, ``predict([[x, y, mach], ...])``."""

    def __init__(self, epochs=250, lr=1e-3, x_batch=256, importance_period=4, latent=64,
                 branch_hidden=(120,) * 5, trunk_hidden=(120,) * 6, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.x_batch = x_batch
        self.importance_period = importance_period
        self.latent = latent
        self.branch_hidden = branch_hidden
        self.trunk_hidden = trunk_hidden
        self.seed = seed

    def fit(self, snapshots, y=None):
        result = train_deeponet(snapshots, epochs=self.epochs, lr=self.lr, x_batch=self.x_batch,
                                importance_period=self.importance_period, latent=self.latent,
                                branch_hidden=tuple(self.branch_hidden),
                                trunk_hidden=tuple(self.trunk_hidden), seed=self.seed)
        self.model_ = result.model
        self.train_mse_ = result.final_mse
        self.history_ = result.history
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise UsageError("predict expects rows [x, y, mach]")
        return deeponet_forward(self.model_, X[:, :2], X[:, 2])

    def predict_field(self, points, mach):
        check_is_fitted(self)
        return deeponet_forward(self.model_, points, mach)


# ---------------------------------------------------------------- persistence


def save_model(directory, model):
    directory = Path(directory)
    for k, net in enumerate(model.branch.networks()):
        io.save_network(directory / f"branch_{VARIABLES[k]}.nbf", net)
    for k, net in enumerate(model.trunk.networks()):
        io.save_network(directory / f"trunk_{VARIABLES[k]}.nbf", net)
    io.write_json(directory / "manifest.json", {
        "format": "DON1", "variables": list(VARIABLES), "latent": model.latent_width,
        "b0": model.b0.tolist(),
        "psi_scaler": {"mean": model.psi_scaler.mean_.tolist(), "scale": model.psi_scaler.scale_.tolist()},
        "x_scaler": {"mean": model.x_scaler.mean_.tolist(), "scale": model.x_scaler.scale_.tolist()},
        "out_scaler": {"mean": model.out_scaler.mean_.tolist(), "scale": model.out_scaler.scale_.tolist()},
        "mach_range": list(model.mach_range),
    })


def load_model(directory):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DataError(f"model bundle not found: {directory}")
    man = io.read_json(path)
    if man.get("format") != "DON1":
        raise io.FormatError(f"{path}: not a DON1 bundle")
    branch = NetworkStack([io.load_network(directory / f"branch_{v}.nbf") for v in VARIABLES])
    trunk = NetworkStack([io.load_network(directory / f"trunk_{v}.nbf") for v in VARIABLES])

    def scaler(key):
        return ZmuvScaler.from_stats(man[key]["mean"], man[key]["scale"])

    return DeepONetModel(branch, trunk, np.asarray(man["b0"], dtype=np.float64), scaler("psi_scaler"),
                         scaler("x_scaler"), scaler("out_scaler"), tuple(man["mach_range"]))
