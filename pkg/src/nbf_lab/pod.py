"""Snapshot POD of steady fields.

Snapshots for ``D`` Mach numbers at ``n`` shared points are stacked per
variable into an ``n x D`` matrix, the per-variable snapshot mean is removed,
and the thin SVD is obtained with the method of snapshots: a cyclic Jacobi
diagonalization of the ``D x D`` Gram matrix.  The Gram matrix is never
formed explicitly; each rotation reads the three Gram entries it needs from
the current columns (one-sided Jacobi), which keeps modes with small singular
values orthonormal to working precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import io
from .errors import DataError, UsageError
from .euler import VARIABLES


@dataclass
class SnapshotSet:
    """Snapshots on a common point set, sorted by ascending Mach number.

    ``data`` has shape ``(4, n, D)``: variable, point, snapshot.
    """

    points: np.ndarray
    machs: np.ndarray
    data: np.ndarray
    variables: tuple = VARIABLES

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_snapshots(self):
        return self.machs.size

    def matrix(self, variable):
        """``W_i`` of shape ``(n, D)`` for a variable name or index."""
        idx = self.variables.index(variable) if isinstance(variable, str) else int(variable)
        return self.data[idx]

    def field(self, mach):
        """``(n, 4)`` state for one stored Mach number."""
        hits = np.flatnonzero(self.machs == float(mach))
        if hits.size == 0:
            raise DataError(f"no snapshot for Mach {mach}")
        return self.data[:, :, hits[0]].T.copy()

    def subset(self, machs):
        idx = []
        for m in machs:
            hits = np.flatnonzero(self.machs == float(m))
            if hits.size == 0:
                raise DataError(f"no snapshot for Mach {m}")
            idx.append(hits[0])
        idx = sorted(idx, key=lambda k: self.machs[k])
        return SnapshotSet(self.points, self.machs[idx].copy(), self.data[:, :, idx].copy(), self.variables)


def assemble(sources):
    """Build a :class:`SnapshotSet` from snapshot files or :class:`~nbf_lab.io.StateField` objects.

    Input order does not matter; the result is sorted by Mach number.  Every
    snapshot must carry bitwise identical coordinates.
    """
    sources = list(sources)
    if not sources:
        raise UsageError("assemble needs at least one snapshot")
    snaps, names = [], []
    for src in sources:
        if isinstance(src, io.StateField):
            snaps.append(src)
            names.append(f"<Mach {src.mach}>")
        else:
            snaps.append(io.load_snapshot(src))
            names.append(str(Path(src)))
    ref = snaps[0].points
    for snap, name in zip(snaps[1:], names[1:]):
        if snap.points.shape != ref.shape or not np.array_equal(snap.points, ref):
            raise DataError(f"coordinates of {name} differ from those of {names[0]}")
    machs = np.array([s.mach for s in snaps])
    if np.unique(machs).size != machs.size:
        raise DataError("duplicate Mach numbers in snapshot set")
    order = np.argsort(machs, kind="stable")
    data = np.stack([snaps[k].values.T for k in order], axis=-1)
    return SnapshotSet(ref.copy(), machs[order], data)


# ---------------------------------------------------------------- decomposition


def jacobi_svd(w, tol=1e-15, max_sweeps=60):
    """Thin SVD of ``w`` (``n x D``, ``n >= D``) by cyclic one-sided Jacobi.

    Returns ``(u, sigma, vt)`` with singular values sorted non-increasing.
    Columns of ``u`` belonging to zero singular values are filled by an
    orthonormal completion.  Sweeps stop once every column pair satisfies
    ``|g_ij| <= tol * sqrt(g_ii g_jj)`` for the Gram entries ``g``.
    """
    w = np.asarray(w, dtype=np.float64)
    n, d = w.shape
    if n < d:
        raise UsageError("jacobi_svd needs at least as many rows as columns")
    cols = w.T.copy()  # one row per column of w, contiguous
    v = np.eye(d)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(d - 1):
            for j in range(i + 1, d):
                a = cols[i] @ cols[i]
                b = cols[j] @ cols[j]
                g = cols[i] @ cols[j]
                if g == 0.0 or abs(g) <= tol * np.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ci, cj = cols[i].copy(), cols[j]
                cols[i] = c * ci - s * cj
                cols[j] = s * ci + c * cj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    order = np.argsort(-sigma, kind="stable")
    sigma, cols, v = sigma[order], cols[order], v[:, order]
    cutoff = max(n, d) * np.finfo(float).eps * (sigma[0] if d else 0.0)
    live = sigma > cutoff
    sigma = np.where(live, sigma, 0.0)
    u = np.zeros((n, d))
    u[:, live] = (cols[live] / sigma[live, None]).T
    _complete_orthonormal(u, live)
    # sign convention: largest-magnitude entry of each mode is positive
    pivot = np.abs(u).argmax(axis=0)
    flip = np.where(u[pivot, np.arange(d)] < 0, -1.0, 1.0)
    return u * flip, sigma, (v * flip).T


def _complete_orthonormal(u, live):
    # candidates: the constant vector first (smooth, easy for a network to fit), then unit vectors
    n = u.shape[0]
    basis = [u[:, k] for k in np.flatnonzero(live)]
    candidate = -1
    for k in np.flatnonzero(~live):
        while True:
            if candidate < 0:
                e = np.full(n, 1.0 / np.sqrt(n))
            else:
                e = np.zeros(n)
                e[candidate % n] = 1.0
            candidate += 1
            for _ in range(2):
                for q in basis:
                    e -= (q @ e) * q
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        u[:, k] = e / norm
        basis.append(u[:, k])


class SnapshotPOD(TransformerMixin, BaseEstimator):
    """Mean-subtracted POD of one variable.

    ``fit`` takes ``X`` of shape ``(D, n)``: one snapshot per row, as for
    any scikit-learn transformer.  ``transform`` returns modal
    coefficients ``(D, n_components)``.

    Attributes
    ----------
    mean_ : (n,) snapshot mean
    modes_ : (n, n_components) orthonormal spatial modes
    singular_values_ : (D,) all singular values, non-increasing
    right_vectors_ : (D, D) right singular vectors as rows
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        d, n = X.shape
        k = d if self.n_components is None else int(self.n_components)
        if not 1 <= k <= d:
            raise UsageError(f"n_components must lie in [1, {d}], got {self.n_components}")
        if n < d:
            raise UsageError("POD needs at least as many points as snapshots")
        self.mean_ = X.mean(axis=0)
        u, sigma, vt = jacobi_svd((X - self.mean_).T)
        self.modes_ = u[:, :k].copy()
        self.singular_values_ = sigma
        self.right_vectors_ = vt
        self.n_components_ = k
        self.n_features_in_ = n
        return self

    @classmethod
    def from_arrays(cls, mean, sigma, modes):
        obj = cls(n_components=modes.shape[1])
        obj.mean_ = np.asarray(mean, dtype=np.float64)
        obj.singular_values_ = np.asarray(sigma, dtype=np.float64)
        obj.modes_ = np.asarray(modes, dtype=np.float64)
        obj.n_components_ = obj.modes_.shape[1]
        obj.n_features_in_ = obj.mean_.size
        return obj

    @property
    def components_(self):
        return self.modes_.T

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.modes_

    def inverse_transform(self, C):
        check_is_fitted(self)
        return self.mean_ + np.atleast_2d(C) @ self.modes_.T

    def truncation_error_bound(self, n_bf=None):
        return truncation_error_bound(self, self.n_components_ if n_bf is None else n_bf)


def compute_pod(snapshots, n_bf=None):
    """One fitted :class:`SnapshotPOD` per variable, keyed by variable name."""
    return {var: SnapshotPOD(n_bf).fit(snapshots.matrix(var).T) for var in snapshots.variables}


def truncation_error_bound(basis, n_bf):
    """Tail sum of squared singular values beyond the first ``n_bf``."""
    sigma = basis.singular_values_
    if not 0 <= n_bf <= sigma.size:
        raise UsageError(f"n_bf must lie in [0, {sigma.size}]")
    return float(np.sum(sigma[n_bf:] ** 2))


def project_coefficients(basis, field):
    """Least-squares modal coefficients ``U^T (field - mean)``."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != basis.mean_.shape:
        raise UsageError(f"field length {field.shape} does not match basis {basis.mean_.shape}")
    return basis.modes_.T @ (field - basis.mean_)


def save_bases(directory, bases):
    directory = Path(directory)
    for var, basis in bases.items():
        io.save_pod_basis(directory / f"{var}.podb", VARIABLES.index(var), basis.mean_,
                          basis.singular_values_, basis.modes_)


def load_bases(directory):
    out = {}
    for var in VARIABLES:
        path = Path(directory) / f"{var}.podb"
        var_id, mean, sigma, modes = io.load_pod_basis(path)
        if var_id != VARIABLES.index(var):
            raise DataError(f"{path}: stores variable id {var_id}, expected {VARIABLES.index(var)}")
        out[var] = SnapshotPOD.from_arrays(mean, sigma, modes)
    return out
