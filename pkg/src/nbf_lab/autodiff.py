"""Dense feedforward networks with exact gradients, Adam, and ZMUV scaling.

Everything here is float64 numpy.  Two network containers share one set of
kernels:

* :class:`MlpNetwork` is a single network with weights stored ``(out, in)``
  so that a layer computes ``W @ x + b``.
* :class:`NetworkStack` holds ``K`` networks of identical architecture in one
  flat parameter buffer (weights viewed as ``(K, in, out)``).  Training many
  small independent networks this way costs one batched matmul per layer and
  one Adam update per step instead of ``K`` of each.

Activation derivatives at the kink use the left slope: ``leaky_relu'(0)`` is
the negative slope and ``relu'(0)`` is zero.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InputShapeError, NumericalError, UsageError

ACTIVATIONS = ("leaky_relu", "tanh", "relu")


def _activate(z, kind, slope):
    if kind == "leaky_relu":
        out = np.multiply(z, slope)
        # max(z, slope z) equals the leaky rectifier for slope <= 1, min() for slope > 1
        return (np.maximum if slope <= 1 else np.minimum)(z, out, out=out)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_deriv(z, a, kind, slope):
    if kind == "leaky_relu":
        out = np.greater(z, 0).astype(np.float64)
        out *= 1.0 - slope
        out += slope
        return out
    if kind == "relu":
        return np.greater(z, 0).astype(np.float64)
    out = np.multiply(a, a)
    np.subtract(1.0, out, out=out)
    return out


def _check_activation(kind, slope):
    if kind not in ACTIVATIONS:
        raise UsageError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    if kind == "leaky_relu" and not (np.isfinite(slope) and slope > 0):
        raise UsageError("leaky_relu slope must be a finite positive number")


def init_layer_params(layer_sizes, hidden_activation, seed):
    """He-uniform (rectifiers) or Glorot-uniform (tanh) weights, zero biases.

    Returns lists of ``(out, in)`` weight matrices and bias vectors.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        if hidden_activation == "tanh":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


# --------------------------------------------------------------------------
# stacked kernels: weights (K, in, out), biases (K, out), activations (K, B, .)


def _stack_forward(weights, biases, x, kind, slope):
    zs, acts = [], [x]
    a = x
    last = len(weights) - 1
    for layer, (w, b) in enumerate(zip(weights, biases)):
        z = np.matmul(a, w)
        z += b[:, None, :]
        if layer < last:
            a = _activate(z, kind, slope)
        else:
            a = z
        zs.append(z)
        acts.append(a)
    return acts[-1], (zs, acts)


def _stack_backward(weights, cache, grad_out, kind, slope, grad_w, grad_b):
    zs, acts = cache
    delta = grad_out
    for layer in range(len(weights) - 1, -1, -1):
        a_prev = acts[layer]
        np.matmul(np.swapaxes(a_prev, -1, -2), delta, out=grad_w[layer])
        np.sum(delta, axis=1, out=grad_b[layer])
        if layer > 0:
            delta = np.matmul(delta, np.swapaxes(weights[layer], -1, -2))
            delta *= _activate_deriv(zs[layer - 1], acts[layer], kind, slope)
    return delta


def _stack_jacobian(weights, biases, x, kind, slope):
    # forward-mode: tangent has shape (K, B, n_in, width)
    z = np.matmul(x, weights[0]) + biases[0][:, None, :]
    tangent = np.broadcast_to(weights[0][:, None, :, :],
                              z.shape[:2] + weights[0].shape[1:])
    last = len(weights) - 1
    for layer in range(1, last + 1):
        a = _activate(z, kind, slope)
        tangent = tangent * _activate_deriv(z, a, kind, slope)[:, :, None, :]
        z = np.matmul(a, weights[layer]) + biases[layer][:, None, :]
        tangent = np.matmul(tangent, weights[layer][:, None, :, :])
    return z, np.swapaxes(tangent, -1, -2)


class MlpNetwork:
    """A fully connected network with identity output activation.

    Parameters
    ----------
    layer_sizes : sequence of int
        Input dimension first, output dimension last.
    hidden_activation : {"leaky_relu", "tanh", "relu"}
    negative_slope : float
        Slope of ``leaky_relu`` for negative inputs.
    seed : int
        Initialization seed; equal seeds give bitwise-equal networks.
    """

    def __init__(self, layer_sizes, hidden_activation="leaky_relu", negative_slope=0.01,
                 seed=0, weights=None, biases=None):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise UsageError("layer_sizes needs at least two positive entries")
        _check_activation(hidden_activation, negative_slope)
        self.layer_sizes = layer_sizes
        self.hidden_activation = hidden_activation
        self.negative_slope = float(negative_slope)
        self.seed = int(seed)
        if weights is None:
            weights, biases = init_layer_params(layer_sizes, hidden_activation, self.seed)
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (layer_sizes[k + 1], layer_sizes[k])
            if w.shape != expected or b.shape != (expected[0],):
                raise InputShapeError(
                    f"layer {k}: weight {w.shape} / bias {b.shape} do not chain with {layer_sizes}")

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    def _stacked(self):
        return [w.T[None] for w in self.weights], [b[None] for b in self.biases]

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.ndim != 2 or x2.shape[1] != self.n_inputs:
            raise InputShapeError(
                f"expected inputs with {self.n_inputs} features, got shape {x.shape}")
        return x2, single

    def forward(self, x):
        x2, single = self._as_batch(x)
        ws, bs = self._stacked()
        out, _ = _stack_forward(ws, bs, x2, self.hidden_activation, self.negative_slope)
        return out[0, 0] if single else out[0]

    __call__ = forward

    def input_jacobian(self, x):
        """d(outputs)/d(inputs), shape ``(out, in)`` or ``(B, out, in)``."""
        x2, single = self._as_batch(x)
        ws, bs = self._stacked()
        _, jac = _stack_jacobian(ws, bs, x2, self.hidden_activation, self.negative_slope)
        return jac[0, 0] if single else jac[0]

    def backward(self, x, grad_out):
        """Parameter gradients given upstream ``dL/d(outputs)`` of shape ``(B, out)``."""
        x2, _ = self._as_batch(x)
        ws, bs = self._stacked()
        _, cache = _stack_forward(ws, bs, x2, self.hidden_activation, self.negative_slope)
        gw = [np.empty_like(w) for w in ws]
        gb = [np.empty_like(b) for b in bs]
        _stack_backward(ws, cache, np.asarray(grad_out, dtype=np.float64)[None],
                        self.hidden_activation, self.negative_slope, gw, gb)
        return [g[0].T.copy() for g in gw], [g[0] for g in gb]

    def get_flat_params(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = flat[pos:pos + b.size]
            pos += b.size

    def copy(self):
        return MlpNetwork(self.layer_sizes, self.hidden_activation, self.negative_slope,
                          self.seed, self.weights, self.biases)

    def __repr__(self):
        return (f"MlpNetwork({self.layer_sizes}, {self.hidden_activation!r}, "
                f"negative_slope={self.negative_slope}, seed={self.seed})")


class NetworkStack:
    """``K`` same-shaped networks trained side by side.

    Parameters live in ``self.params`` (one contiguous vector); ``weights``
    and ``biases`` are views into it so an optimizer can update the flat
    buffer in place.
    """

    def __init__(self, networks):
        networks = list(networks)
        if not networks:
            raise UsageError("NetworkStack needs at least one network")
        first = networks[0]
        for net in networks[1:]:
            if (net.layer_sizes != first.layer_sizes
                    or net.hidden_activation != first.hidden_activation
                    or net.negative_slope != first.negative_slope):
                raise UsageError("all networks in a stack must share one architecture")
        self.layer_sizes = list(first.layer_sizes)
        self.hidden_activation = first.hidden_activation
        self.negative_slope = first.negative_slope
        self.seeds = [net.seed for net in networks]
        self.n_networks = len(networks)
        k = self.n_networks
        shapes = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        self.n_params = sum(k * (i * o + o) for i, o in shapes)
        self.params = np.empty(self.n_params)
        self.weights, self.biases = self._views(self.params)
        for idx, net in enumerate(networks):
            for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
                self.weights[layer][idx] = w.T
                self.biases[layer][idx] = b

    @classmethod
    def create(cls, layer_sizes, seeds, hidden_activation="leaky_relu", negative_slope=0.01):
        return cls(MlpNetwork(layer_sizes, hidden_activation, negative_slope, seed)
                   for seed in seeds)

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["weights"], state["biases"]
        return state

    def __setstate__(self, state):
        # pickling copies arrays one by one; rebuild the views so updates to
        # ``params`` keep reaching the layers
        self.__dict__.update(state)
        self.weights, self.biases = self._views(self.params)

    def _views(self, flat):
        k = self.n_networks
        ws, bs, pos = [], [], 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            ws.append(flat[pos:pos + k * i * o].reshape(k, i, o))
            pos += k * i * o
            bs.append(flat[pos:pos + k * o].reshape(k, o))
            pos += k * o
        return ws, bs

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-1] != self.layer_sizes[0]:
            raise InputShapeError(
                f"stack expects (B, {self.layer_sizes[0]}) or (K, B, {self.layer_sizes[0]}) "
                f"inputs, got {x.shape}")
        return x

    def forward(self, x, keep_cache=False):
        """Evaluate every network; ``x`` is shared ``(B, in)`` or per-network ``(K, B, in)``.

        Returns ``(K, B, out)`` and, when ``keep_cache``, the cache needed by
        :meth:`backward`.
        """
        x = self._check_input(x)
        out, cache = _stack_forward(self.weights, self.biases, x,
                                    self.hidden_activation, self.negative_slope)
        return (out, cache) if keep_cache else out

    def backward(self, cache, grad_out, out=None):
        """Flat parameter gradient for upstream ``grad_out`` of shape ``(K, B, out)``."""
        grad = np.empty(self.n_params) if out is None else out
        gw, gb = self._views(grad)
        _stack_backward(self.weights, cache, grad_out, self.hidden_activation,
                        self.negative_slope, gw, gb)
        return grad

    def input_jacobian(self, x, chunk=2048):
        """Outputs ``(K, B, out)`` and Jacobians ``(K, B, out, in)``, chunked over ``B``."""
        x = self._check_input(x)
        n = x.shape[-2]
        vals, jacs = [], []
        for start in range(0, n, chunk):
            xs = x[..., start:start + chunk, :]
            v, j = _stack_jacobian(self.weights, self.biases, xs,
                                   self.hidden_activation, self.negative_slope)
            vals.append(v)
            jacs.append(j)
        return np.concatenate(vals, axis=1), np.concatenate(jacs, axis=1)

    def network(self, idx):
        """Copy network ``idx`` out of the stack as an :class:`MlpNetwork`."""
        return MlpNetwork(self.layer_sizes, self.hidden_activation, self.negative_slope,
                          self.seeds[idx],
                          [w[idx].T.copy() for w in self.weights],
                          [b[idx].copy() for b in self.biases])

    def networks(self):
        return [self.network(i) for i in range(self.n_networks)]


# --------------------------------------------------------------------------
# losses and the spec-level gradient entry points


def squared_error(outputs, targets):
    """Per-sample ``0.5 * ||y - t||^2`` and its derivative w.r.t. ``y``."""
    diff = outputs - targets
    return 0.5 * np.sum(diff * diff, axis=-1), diff


def mlp_forward(net, x):
    return net.forward(x)


def mlp_input_jacobian(net, x):
    return net.input_jacobian(x)


def mlp_param_grad(net, loss_fn, inputs, targets):
    """Mean batch loss and its exact gradients w.r.t. every weight and bias.

    ``loss_fn(outputs, targets)`` returns per-sample losses ``(B,)`` and
    ``dloss/doutputs`` ``(B, out)``.  Returns ``(loss, weight_grads, bias_grads)``
    with gradients shaped like ``net.weights`` / ``net.biases``.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(inputs.shape[0], -1)
    outputs = net.forward(inputs)
    losses, dout = loss_fn(outputs, targets)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NumericalError(f"non-finite loss at batch index {bad[0]}", index=int(bad[0]))
    batch = inputs.shape[0]
    gw, gb = net.backward(inputs, dout / batch)
    return float(np.mean(losses)), gw, gb


# --------------------------------------------------------------------------
# optimizer


def decayed_lr(lr, epoch, decay_factor=0.9, decay_start_epoch=70):
    """Learning rate in effect during ``epoch`` (0-based).

    Epochs before ``decay_start_epoch`` use ``lr``; from then on the rate is
    multiplied by ``decay_factor`` once per epoch.
    """
    return lr * decay_factor ** max(0, epoch - decay_start_epoch + 1)


class Adam:
    """Bias-corrected Adam acting in place on a flat parameter vector."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_factor=0.9, decay_start_epoch=70):
        if lr <= 0 or eps <= 0 or not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise UsageError("Adam needs lr, eps > 0 and betas in (0, 1)")
        if not 0 < decay_factor <= 1:
            raise UsageError("decay_factor must lie in (0, 1]")
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.decay_factor = float(decay_factor)
        self.decay_start_epoch = int(decay_start_epoch)
        self.step_count = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self._tmp = np.empty(n_params)

    def set_epoch(self, epoch):
        self.lr = decayed_lr(self.base_lr, epoch, self.decay_factor, self.decay_start_epoch)

    def step(self, params, grads):
        if grads.shape != self.m.shape:
            raise InputShapeError(f"gradient shape {grads.shape} != state shape {self.m.shape}")
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.isfinite(grads))[0])
            raise NumericalError(f"non-finite gradient entry {bad}", index=bad)
        b1, b2, tmp = self.beta1, self.beta2, self._tmp
        self.step_count += 1
        t = self.step_count
        if self.m.size >= FUSED_ADAM_MIN and params.flags.c_contiguous:
            # same operations in the same order as below, one pass over memory
            _fused_adam()(params, grads, self.m, self.v, b1, b2, self.eps,
                          np.sqrt(1.0 - b2 ** t), self.lr / (1.0 - b1 ** t))
            return params
        self.m *= b1
        np.multiply(grads, 1.0 - b1, out=tmp)
        self.m += tmp
        self.v *= b2
        np.multiply(grads, grads, out=tmp)
        tmp *= 1.0 - b2
        self.v += tmp
        np.sqrt(self.v, out=tmp)
        tmp /= np.sqrt(1.0 - b2 ** t)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / (1.0 - b1 ** t)
        params -= tmp
        return params


FUSED_ADAM_MIN = 100_000
_FUSED = []


def _fused_adam():
    # compiled on first use; numba is only imported when a large optimizer runs
    if not _FUSED:
        import numba

        @numba.njit(cache=True, nogil=True)
        def kernel(params, grads, m, v, b1, b2, eps, bias2, scale):
            for k in range(params.size):
                g = grads[k]
                mk = m[k] * b1 + g * (1.0 - b1)
                vk = v[k] * b2 + (g * g) * (1.0 - b2)
                m[k] = mk
                v[k] = vk
                params[k] -= (mk / (np.sqrt(vk) / bias2 + eps)) * scale

        _FUSED.append(kernel)
    return _FUSED[0]


def adam_step(state, params, grads):
    """Functional alias: one Adam update of ``params`` (modified in place)."""
    return state.step(params, grads)


# --------------------------------------------------------------------------
# ZMUV normalization


class ZmuvScaler(TransformerMixin, BaseEstimator):
    """Per-feature zero-mean unit-variance scaling with a floor on the std.

    Uses the population variance.  Constant features get ``scale_ =
    epsilon_floor`` instead of being left unscaled.
    """

    def __init__(self, epsilon_floor=1e-12):
        self.epsilon_floor = epsilon_floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if self.epsilon_floor <= 0:
            raise UsageError("epsilon_floor must be positive")
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), self.epsilon_floor)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return X * self.scale_ + self.mean_

    @classmethod
    def from_stats(cls, mean, scale, epsilon_floor=1e-12):
        obj = cls(epsilon_floor=epsilon_floor)
        obj.mean_ = np.asarray(mean, dtype=np.float64).reshape(-1)
        obj.scale_ = np.asarray(scale, dtype=np.float64).reshape(-1)
        obj.n_features_in_ = obj.mean_.size
        return obj


def zmuv_fit(data, epsilon_floor=1e-12):
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise UsageError("cannot fit a ZMUV transform to empty data")
    if data.ndim == 1:
        data = data[:, None]
    return ZmuvScaler(epsilon_floor).fit(data)


def zmuv_apply(transform, data):
    data = np.asarray(data, dtype=np.float64)
    return transform.transform(data[:, None] if data.ndim == 1 else data).reshape(data.shape)


def zmuv_invert(transform, data):
    data = np.asarray(data, dtype=np.float64)
    return transform.inverse_transform(data[:, None] if data.ndim == 1 else data).reshape(data.shape)
