"""Dilated causal convolution classifier (WaveNet-style), written against numpy.

Topology, for ``L`` layers of ``C`` filters and kernel size 2 with dilation
``2**l`` at layer ``l``::

    h_0        = w_in * x + b_in                                  (1x1 embedding)
    pre_l[t]   = [h_l[t - 2**l], h_l[t]] @ W_fg[l] + b_fg[l]
    z_l        = tanh(pre_l[:, :C]) * sigmoid(pre_l[:, C:])      (gated unit)
    h_{l+1}    = h_l + z_l @ W_res[l] + b_res[l]                  (residual)
    skip       = sum_l  dropout(z_l[T-1] @ W_skip[l] + b_skip[l])
    logits     = relu(relu(skip) @ W_1 + b_1) @ W_2 + b_2

Only the final time step ``T-1`` is read out.  Because every kernel has two
taps and dilations double, the positions that can reach ``T-1`` form a binary
tree: layer ``l`` needs its input at ``T-1 - k * 2**l`` only, and those
positions pair up as adjacent elements of the thinned sequence.  The
per-epoch forward and backward passes therefore run on the last
``2**L`` samples and halve the sequence at every layer, which computes
exactly the same output as the dense causal stack at a fraction of the cost.
:func:`forward_sequence` is the dense stack, used to score every position of
a long recording in one sweep.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import MalformedHeader, ShapeMismatch, TruncatedPayload

log = logging.getLogger(__name__)

PARAM_ORDER = (
    "in_w", "in_b",
    "fg_w", "fg_b",
    "res_w", "res_b",
    "skip_w", "skip_b",
    "out1_w", "out1_b",
    "out2_w", "out2_b",
)
LOSS_CLAMP = 1e-12


@dataclass(frozen=True)
class ArchSpec:
    n_layers: int = 12
    kernel_size: int = 2
    n_filters: int = 32
    dropout_p: float = 0.2
    n_classes: int = 2
    input_len: int = 4200

    def __post_init__(self):
        if self.kernel_size != 2:
            raise ValueError("only kernel_size=2 is supported")
        if self.n_layers < 1 or self.n_filters < 1 or self.n_classes < 2:
            raise ValueError("n_layers, n_filters must be >= 1 and n_classes >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.input_len < self.receptive_field:
            raise ShapeMismatch(
                f"input_len {self.input_len} is shorter than the receptive field "
                f"{self.receptive_field}")

    @property
    def dilations(self):
        return tuple(2 ** l for l in range(self.n_layers))

    @property
    def receptive_field(self):
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


def receptive_field(arch: ArchSpec) -> int:
    return arch.receptive_field


def param_shapes(arch: ArchSpec) -> dict:
    C, L, K = arch.n_filters, arch.n_layers, arch.n_classes
    return {
        "in_w": (C,), "in_b": (C,),
        "fg_w": (L, 2 * C, 2 * C), "fg_b": (L, 2 * C),
        "res_w": (L - 1, C, C), "res_b": (L - 1, C),
        "skip_w": (L, C, C), "skip_b": (L, C),
        "out1_w": (C, C), "out1_b": (C,),
        "out2_w": (C, K), "out2_b": (K,),
    }


@dataclass
class ModelParams:
    arch: ArchSpec
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.arch)
        if set(self.arrays) != set(shapes):
            raise ShapeMismatch(f"parameter names {sorted(self.arrays)} do not match the architecture")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["in_w"].dtype

    def copy(self):
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def flat(self):
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_ORDER])

    @classmethod
    def from_flat(cls, arch, flat):
        arrays, i = {}, 0
        for name, shape in param_shapes(arch).items():
            size = int(np.prod(shape))
            arrays[name] = np.asarray(flat[i:i + size]).reshape(shape).copy()
            i += size
        if i != len(flat):
            raise ShapeMismatch(f"flat vector has {len(flat)} values, architecture needs {i}")
        return cls(arch, arrays)

    def n_params(self):
        return sum(v.size for v in self.arrays.values())


def init_params(arch: ArchSpec, rng=None, dtype=np.float32) -> ModelParams:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(rng)
    fan_in = {"in_w": 1, "fg_w": 2 * arch.n_filters, "res_w": arch.n_filters,
              "skip_w": arch.n_filters, "out1_w": arch.n_filters, "out2_w": arch.n_filters}
    arrays = {}
    for name in PARAM_ORDER:
        shape = param_shapes(arch)[name]
        if name in fan_in:
            limit = np.sqrt(6.0 / fan_in[name])
            arrays[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(arch, arrays)


def zero_params(arch: ArchSpec, dtype=np.float32) -> ModelParams:
    return ModelParams(arch, {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(arch).items()})


# --- math helpers -----------------------------------------------------------

def _sigmoid(a):
    # tanh form is overflow-free for any input
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(probs, true_class):
    """Categorical cross-entropy ``-log p[true]``; probabilities clamped at 1e-12.

    Accepts one distribution or a batch; a batch returns the mean.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(true_class)
    if p.ndim == 1:
        return float(-np.log(max(p[int(y)], LOSS_CLAMP)))
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.log(np.maximum(picked, LOSS_CLAMP)).mean())


def dropout_mask(arch: ArchSpec, batch, rng, dtype=np.float32):
    """Inverted-dropout mask over the skip contribution of every block."""
    keep = 1.0 - arch.dropout_p
    if arch.dropout_p == 0.0:
        return np.ones((batch, arch.n_layers, arch.n_filters), dtype=dtype)
    m = rng.random((batch, arch.n_layers, arch.n_filters)) < keep
    return (m / keep).astype(dtype)


def _as_batch(params, x):
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.input_len:
        raise ShapeMismatch(
            f"expected input of length {params.arch.input_len}, got shape {x.shape}")
    return x, single


# --- tree evaluation (read-out at the last position) ------------------------

def _forward(params: ModelParams, x, mask):
    """Returns ``(probs, cache)`` for a batch ``x`` of shape (B, input_len)."""
    arch = params.arch
    C, L = arch.n_filters, arch.n_layers
    B = x.shape[0]
    tail = x[:, -arch.receptive_field:]
    h = tail[:, :, None] * params["in_w"] + params["in_b"]
    skip = np.zeros((B, C), dtype=x.dtype)
    layers = []
    for l in range(L):
        n = h.shape[1]
        pair = h.reshape(B, n // 2, 2 * C)   # [h(t - d), h(t)] side by side
        pre = pair @ params["fg_w"][l] + params["fg_b"][l]
        t = np.tanh(pre[..., :C])
        s = _sigmoid(pre[..., C:])
        z = t * s
        contrib = z[:, -1, :] @ params["skip_w"][l] + params["skip_b"][l]
        skip += contrib if mask is None else contrib * mask[:, l, :]
        layers.append((pair, t, s, z))
        if l < L - 1:
            h = pair[..., C:] + z @ params["res_w"][l] + params["res_b"][l]
    r1 = np.maximum(skip, 0)
    u = r1 @ params["out1_w"] + params["out1_b"]
    r2 = np.maximum(u, 0)
    logits = r2 @ params["out2_w"] + params["out2_b"]
    probs = softmax(logits)
    cache = {"tail": tail, "layers": layers, "skip": skip, "r1": r1, "u": u, "r2": r2,
             "probs": probs, "mask": mask}
    return probs, cache


def forward(params: ModelParams, epoch_samples, mode="eval", rng=None, return_cache=False):
    """Class probabilities for one epoch (1-D) or a batch (2-D).

    ``mode="train"`` draws a dropout mask from ``rng``; ``mode="eval"`` is
    deterministic.  With ``return_cache`` the activations and mask needed by
    :func:`backward` are returned as a second value.
    """
    x, single = _as_batch(params, epoch_samples)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for dropout")
        mask = dropout_mask(params.arch, x.shape[0], rng, x.dtype)
    elif mode == "eval":
        mask = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    probs, cache = _forward(params, x, mask)
    out = probs[0] if single else probs
    return (out, cache) if return_cache else out


def forward_with_mask(params: ModelParams, epoch_samples, mask):
    """Forward pass under an explicit dropout mask (shape (B, L, C)); returns (probs, cache)."""
    x, _ = _as_batch(params, epoch_samples)
    return _forward(params, x, None if mask is None else np.asarray(mask, dtype=x.dtype))


def backward(params: ModelParams, cache, true_class, input_grad=False):
    """Analytic gradient of the batch-mean cross-entropy.

    ``cache`` comes from a forward pass; its dropout mask is held fixed.
    Returns a dict of gradients keyed like ``params.arrays`` (plus ``"x"``
    holding d loss / d input when ``input_grad`` is set).
    """
    arch = params.arch
    C, L = arch.n_filters, arch.n_layers
    probs = cache["probs"]
    B = probs.shape[0]
    y = np.atleast_1d(np.asarray(true_class))
    mask = cache["mask"]

    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    g = {}
    g["out2_w"] = cache["r2"].T @ dlogits
    g["out2_b"] = dlogits.sum(0)
    du = (dlogits @ params["out2_w"].T) * (cache["u"] > 0)
    g["out1_w"] = cache["r1"].T @ du
    g["out1_b"] = du.sum(0)
    dskip = (du @ params["out1_w"].T) * (cache["skip"] > 0)

    for name in ("fg_w", "fg_b", "res_w", "res_b", "skip_w", "skip_b"):
        g[name] = np.zeros_like(params[name])

    dh = None
    for l in reversed(range(L)):
        pair, t, s, z = cache["layers"][l]
        dcontrib = dskip if mask is None else dskip * mask[:, l, :]
        g["skip_w"][l] = z[:, -1, :].T @ dcontrib
        g["skip_b"][l] = dcontrib.sum(0)
        if dh is None:
            dz = np.zeros_like(z)
        else:
            dz = dh @ params["res_w"][l].T
            g["res_w"][l] = z.reshape(-1, C).T @ dh.reshape(-1, C)
            g["res_b"][l] = dh.sum((0, 1))
        dz[:, -1, :] += dcontrib @ params["skip_w"][l].T
        dpre = np.concatenate((dz * s * (1.0 - t * t), dz * t * s * (1.0 - s)), axis=-1)
        g["fg_w"][l] = pair.reshape(-1, 2 * C).T @ dpre.reshape(-1, 2 * C)
        g["fg_b"][l] = dpre.sum((0, 1))
        dpair = dpre @ params["fg_w"][l].T
        if dh is not None:
            dpair[..., C:] += dh
        dh = dpair.reshape(B, -1, C)

    tail = cache["tail"]
    g["in_w"] = np.einsum("bn,bnc->c", tail, dh)
    g["in_b"] = dh.sum((0, 1))
    if input_grad:
        dx = np.zeros((B, arch.input_len), dtype=tail.dtype)
        dx[:, -arch.receptive_field:] = dh @ params["in_w"]
        g["x"] = dx
    return g


def loss_and_grad(params: ModelParams, x, y, mask=None):
    probs, cache = forward_with_mask(params, x, mask)
    return loss(probs, y), backward(params, cache, y)


# --- dense causal evaluation over a long sequence --------------------------

def forward_sequence(params: ModelParams, samples, positions=None):
    """Eval-mode class probabilities read out at ``positions`` of a long sequence.

    Output at position ``p`` equals ``forward`` on the window ending at ``p``
    (``p >= receptive_field - 1``).  Defaults to every valid position.
    """
    arch = params.arch
    C, L = arch.n_filters, arch.n_layers
    x = np.asarray(samples, dtype=params.dtype)
    R = arch.receptive_field
    if positions is None:
        positions = np.arange(R - 1, x.size)
    positions = np.asarray(positions)
    if positions.size and (positions.min() < R - 1 or positions.max() >= x.size):
        raise ShapeMismatch("read-out positions must lie in [receptive_field - 1, len)")
    # nothing before the earliest window start can reach a read-out position
    start = int(positions.min()) - (R - 1) if positions.size else 0
    x = x[start:]
    pos = positions - start

    h = x[:, None] * params["in_w"] + params["in_b"]
    skip = np.zeros((pos.size, C), dtype=x.dtype)
    for l in range(L):
        d = 2 ** l
        prev = np.zeros_like(h)
        prev[d:] = h[:-d]
        pre = np.concatenate((prev, h), axis=1) @ params["fg_w"][l] + params["fg_b"][l]
        z = np.tanh(pre[:, :C]) * _sigmoid(pre[:, C:])
        skip += z[pos] @ params["skip_w"][l] + params["skip_b"][l]
        if l < L - 1:
            h = h + z @ params["res_w"][l] + params["res_b"][l]
    u = np.maximum(skip, 0) @ params["out1_w"] + params["out1_b"]
    logits = np.maximum(u, 0) @ params["out2_w"] + params["out2_b"]
    return softmax(logits)


# --- optimizers -------------------------------------------------------------

def sgd_step(params: ModelParams, grads, lr):
    """Plain gradient descent, in place; returns ``params``."""
    for name in PARAM_ORDER:
        params.arrays[name] -= lr * grads[name]
    return params


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams):
        return cls({k: np.zeros_like(v) for k, v in params.arrays.items()},
                   {k: np.zeros_like(v) for k, v in params.arrays.items()})


def adam_step(params: ModelParams, grads, state: AdamState, lr=1e-3,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place; returns ``params``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in PARAM_ORDER:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.arrays[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(m.dtype)
    return params


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "apnea-wavenet"


def save_model(params: ModelParams, path) -> None:
    """JSON header line (architecture + parameter order) then float32 LE payload."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "arch": asdict(params.arch),
        "params": [[name, list(params[name].shape)] for name in PARAM_ORDER],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(params.flat(), dtype="<f4").tobytes())


def load_model(path) -> ModelParams:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        arch = ArchSpec(**header["arch"])
        order = [name for name, _ in header["params"]]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise MalformedHeader(f"{path}: bad checkpoint header ({exc})") from None
    if tuple(order) != PARAM_ORDER:
        raise MalformedHeader(f"{path}: unexpected parameter order {order}")
    flat = np.frombuffer(raw[newline + 1:], dtype="<f4").astype(np.float32)
    expected = sum(int(np.prod(s)) for s in param_shapes(arch).values())
    if flat.size != expected:
        raise TruncatedPayload(f"{path}: {flat.size} parameters, expected {expected}")
    return ModelParams.from_flat(arch, flat)


# --- training ---------------------------------------------------------------

def predict_proba_batched(params: ModelParams, X, batch_size=256):
    out = np.empty((len(X), params.arch.n_classes), dtype=np.float64)
    for i in range(0, len(X), batch_size):
        out[i:i + batch_size] = forward(params, X[i:i + batch_size])
    return out


def mean_loss(params: ModelParams, X, y, batch_size=256):
    probs = predict_proba_batched(params, X, batch_size)
    return loss(probs, y)


def fit_model(X, y, arch: ArchSpec, X_val=None, y_val=None, *, seed=0, lr=1e-3,
              batch_size=32, max_steps=1000, eval_every=50, patience=5,
              init=None, callback=None):
    """Minibatch Adam with early stopping on validation loss.

    Returns ``(best_params, history)``; ``history`` holds one dict per step
    (``{"step", "loss"}``) and per evaluation (``{"step", "val_loss"}``).
    Without validation data the final parameters are returned.
    """
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(arch, rng)
    state = AdamState.zeros_like(params)
    n = len(X)
    history = []
    best, best_loss, since_best = params.copy(), np.inf, 0
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, max_steps + 1):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + batch_size])
        cursor += batch_size
        xb = np.asarray(X[idx], dtype=params.dtype)
        probs, cache = forward(params, xb, "train", rng, return_cache=True)
        yb = y[idx]
        history.append({"step": step, "loss": loss(probs, yb)})
        adam_step(params, backward(params, cache, yb), state, lr)
        if callback is not None:
            callback(step, history[-1])
        if X_val is not None and (step % eval_every == 0 or step == max_steps):
            vl = mean_loss(params, X_val, y_val)
            history.append({"step": step, "val_loss": vl})
            log.info("step %d train %.4f val %.4f", step, history[-2]["loss"], vl)
            if vl < best_loss:
                best, best_loss, since_best = params.copy(), vl, 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    if X_val is None:
        best = params
    return best, history


class WaveNetClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_model` and the tree forward pass.

    ``X`` is an array of epochs, shape (n_samples, input_len); labels are the
    integer class codes ``0..n_classes-1``.
    """

    def __init__(self, n_layers=12, n_filters=32, dropout_p=0.2, n_classes=2,
                 input_len=4200, learning_rate=1e-3, batch_size=32, max_steps=1000,
                 eval_every=50, patience=5, random_state=0):
        self.n_layers = n_layers
        self.n_filters = n_filters
        self.dropout_p = dropout_p
        self.n_classes = n_classes
        self.input_len = input_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.patience = patience
        self.random_state = random_state

    def _arch(self):
        return ArchSpec(n_layers=self.n_layers, n_filters=self.n_filters,
                        dropout_p=self.dropout_p, n_classes=self.n_classes,
                        input_len=self.input_len)

    def _check_X(self, X):
        X = check_array(X, dtype=[np.float32, np.float64])
        if X.shape[1] != self.input_len:
            raise ShapeMismatch(f"expected epochs of length {self.input_len}, got {X.shape[1]}")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ShapeMismatch("y must have one label per epoch")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        if X_val is not None:
            X_val = self._check_X(X_val)
            y_val = np.asarray(y_val, dtype=np.int64)
        self.params_, self.history_ = fit_model(
            X, y, self._arch(), X_val, y_val, seed=self.random_state, lr=self.learning_rate,
            batch_size=self.batch_size, max_steps=self.max_steps,
            eval_every=self.eval_every, patience=self.patience)
        self.classes_ = np.arange(self.n_classes)
        return self

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs):
        a = params.arch
        est = cls(n_layers=a.n_layers, n_filters=a.n_filters, dropout_p=a.dropout_p,
                  n_classes=a.n_classes, input_len=a.input_len, **kwargs)
        est.params_ = params
        est.classes_ = np.arange(a.n_classes)
        est.history_ = []
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_proba_batched(self.params_, self._check_X(X))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_sequence_proba(self, samples, positions=None):
        check_is_fitted(self, "params_")
        return forward_sequence(self.params_, samples, positions)
