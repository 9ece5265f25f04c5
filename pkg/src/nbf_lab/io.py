"""Binary and text artifact formats.

Every binary format starts with a four-byte magic tag and stores numbers as
little-endian 64-bit floats (integers as little-endian unsigned ints), so a
save/load round trip is bitwise lossless.

* ``SNAP``: one steady state field, ``{mach f64, n u64}`` then per point
  ``x, y, rho, u, v, E``.
* ``PODB``: one variable's POD basis, ``{variable id u32, n u64, n_BF u32,
  D u32}`` then the mean field, all ``D`` singular values and the retained
  modes stored column-major.
* ``NBF1``: one network checkpoint, ``{n_sizes u32, sizes u32..., activation
  u8, slope f64, seed i64}`` then per layer the row-major ``(out, in)``
  weight matrix followed by the bias.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import hashlib
import io as _stdio
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ACTIVATIONS, MlpNetwork
from .errors import DataError, FormatError, UsageError

SNAPSHOT_COLUMNS = ("x", "y", "rho", "u", "v", "E")
_F64 = np.dtype("<f8")


@dataclass
class StateField:
    """Primitive state ``[rho, u, v, E]`` (SI units) at ``n`` points for one Mach number."""

    mach: float
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.mach = float(self.mach)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise DataError(f"points must be (n, 2), got {self.points.shape}")
        if self.values.shape != (self.points.shape[0], 4):
            raise DataError(f"values must be (n, 4), got {self.values.shape}")

    @property
    def n_points(self):
        return self.points.shape[0]


class _Reader:
    def __init__(self, path, magic):
        self.path = Path(path)
        try:
            self.buf = self.path.read_bytes()
        except FileNotFoundError as err:
            raise DataError(f"{self.path}: file not found") from err
        self.pos = 0
        if self.buf[:4] != magic:
            raise FormatError(f"{self.path}: bad magic {self.buf[:4]!r}, expected {magic!r}")
        self.pos = 4

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.path}: truncated header")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def floats(self, count):
        size = 8 * count
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.path}: truncated after {self.pos} bytes, need {size} more")
        out = np.frombuffer(self.buf, dtype=_F64, count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return out

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


_PROTECT = contextvars.ContextVar("nbf_lab_protect_overwrites", default=False)


class ArtifactExistsError(UsageError):
    pass


@contextlib.contextmanager
def protect_overwrites(enabled=True):
    """Refuse to replace an existing file with different content while active."""
    token = _PROTECT.set(enabled)
    try:
        yield
    finally:
        _PROTECT.reset(token)


def _atomic_write(path, data):
    path = Path(path)
    if path.exists():
        if path.read_bytes() == data:
            return
        if _PROTECT.get():
            raise ArtifactExistsError(f"{path} exists with different content; use --force to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- snapshots


def save_snapshot(path, snap):
    body = np.concatenate([snap.points, snap.values], axis=1).astype(_F64)
    _atomic_write(path, b"SNAP" + struct.pack("<dQ", snap.mach, snap.n_points) + body.tobytes())


def load_snapshot(path):
    r = _Reader(path, b"SNAP")
    mach, n = r.unpack("<dQ")
    data = r.floats(6 * n).reshape(n, 6)
    r.finish()
    return StateField(mach, data[:, :2], data[:, 2:])


def save_snapshot_csv(path, snap):
    """CSV mirror of a snapshot; ``repr`` of a float keeps 17 significant digits."""
    rows = ([repr(float(v)) for v in row] for row in np.concatenate([snap.points, snap.values], axis=1))
    write_csv(path, SNAPSHOT_COLUMNS, rows)


def load_snapshot_csv(path, mach):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return StateField(mach, data[:, :2], data[:, 2:])


def snapshot_name(mach):
    return f"mach_{float(mach):06.2f}.snap"


# ---------------------------------------------------------------- POD bases


def save_pod_basis(path, variable_id, mean, sigma, modes):
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    modes = np.asarray(modes, dtype=np.float64)
    n, n_bf = modes.shape
    header = b"PODB" + struct.pack("<IQII", int(variable_id), n, n_bf, sigma.size)
    body = mean.astype(_F64).tobytes() + sigma.astype(_F64).tobytes() + modes.T.astype(_F64).tobytes()
    _atomic_write(path, header + body)


def load_pod_basis(path):
    """Returns ``(variable_id, mean (n,), sigma (D,), modes (n, n_BF))``."""
    r = _Reader(path, b"PODB")
    var_id, n, n_bf, d = r.unpack("<IQII")
    mean = r.floats(n)
    sigma = r.floats(d)
    modes = r.floats(n * n_bf).reshape(n_bf, n).T.copy()
    r.finish()
    return var_id, mean, sigma, modes


# ---------------------------------------------------------------- networks


def network_bytes(net):
    sizes = net.layer_sizes
    head = struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    head += struct.pack("<Bdq", ACTIVATIONS.index(net.hidden_activation), net.negative_slope, net.seed)
    body = b"".join(w.astype(_F64).tobytes() + b.astype(_F64).tobytes()
                    for w, b in zip(net.weights, net.biases))
    return b"NBF1" + head + body


def save_network(path, net):
    _atomic_write(path, network_bytes(net))


def load_network(path):
    r = _Reader(path, b"NBF1")
    (count,) = r.unpack("<I")
    sizes = list(r.unpack(f"<{count}I"))
    act, slope, seed = r.unpack("<Bdq")
    if act >= len(ACTIVATIONS):
        raise FormatError(f"{r.path}: unknown activation id {act}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(r.floats(fan_in * fan_out).reshape(fan_out, fan_in))
        biases.append(r.floats(fan_out))
    r.finish()
    return MlpNetwork(sizes, ACTIVATIONS[act], slope, seed, weights, biases)


# ---------------------------------------------------------------- bundles and reports


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, text.encode())


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise DataError(f"{path}: file not found") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from err


def write_csv(path, header, rows):
    buf = _stdio.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    _atomic_write(path, buf.getvalue().encode())


def write_text(path, text):
    _atomic_write(path, text.encode())


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root):
    """``{relative path: sha256}`` for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): file_digest(p)
            for p in sorted(root.rglob("*")) if p.is_file()}
