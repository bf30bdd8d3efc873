"""Minimal deterministic numeric engine on rank-4 float64 arrays.

Arrays are laid out (batch, channels, height, width). Every convolution is
3x3, stride 1, zero padding 1, so spatial size never changes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, IfesError, TrainingError, UsageError, VerificationError

AXES = ("batch", "channels", "height", "width")


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"


def as_tensor(x, name="tensor"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"{name}: expected rank-4 (batch, channels, height, width), got shape {arr.shape}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
            if sa != sb:
                label = AXES[axis] if a.ndim == 4 else f"axis {axis}"
                raise DimensionError(f"{names[0]} and {names[1]} differ along {label}: {sa} != {sb}")
        raise DimensionError(f"{names[0]} has shape {a.shape}, {names[1]} has shape {b.shape}")


@dataclass
class ConvLayer:
    """A 3x3 convolution with bias and a pointwise activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU
    name: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise DimensionError(f"layer {self.name!r}: kernel must be (out, in, 3, 3), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"layer {self.name!r}: bias length {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def in_ch(self):
        return self.weights.shape[1]

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @classmethod
    def he_normal(cls, rng, in_ch, out_ch, activation=Activation.RELU, name=""):
        std = np.sqrt(2.0 / (in_ch * 9))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3))
        return cls(w, np.zeros(out_ch), activation, name)

    def copy(self):
        return ConvLayer(self.weights.copy(), self.bias.copy(), self.activation, self.name)


@dataclass
class ConvCache:
    """What conv2d_backward needs from the forward pass."""

    windows: np.ndarray  # (batch, in_ch, H, W, 3, 3) view on the padded input
    pre: np.ndarray
    out: np.ndarray


def _activate(pre, activation):
    if activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    if activation is Activation.SIGMOID:
        # split by sign so exp never overflows
        out = np.empty_like(pre)
        pos = pre >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-pre[pos]))
        e = np.exp(pre[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    return pre.copy()


def _activation_grad(grad_out, cache, activation):
    if activation is Activation.RELU:
        return grad_out * (cache.pre > 0)
    if activation is Activation.SIGMOID:
        return grad_out * cache.out * (1.0 - cache.out)
    return grad_out


def _correlate(windows, kernel):
    # windows (B, C, H, W, 3, 3), kernel (O, C, 3, 3) -> (B, O, H, W)
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _windows(x):
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv2d_forward(x, layer):
    """Apply ``layer`` to ``x``. Returns ``(output, cache)``."""
    x = as_tensor(x, "conv input")
    if x.shape[1] != layer.in_ch:
        raise DimensionError(
            f"layer {layer.name!r}: channels mismatch, input has {x.shape[1]}, layer expects {layer.in_ch}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"layer {layer.name!r}: height and width must be >= 1, got {x.shape[2:]}")
    win = _windows(x)
    pre = _correlate(win, layer.weights)
    pre += layer.bias[None, :, None, None]
    out = _activate(pre, layer.activation)
    return out, ConvCache(win, pre, out)


def conv2d_backward(cache, layer, grad_output):
    """Gradients of a conv layer: ``(grad_input, grad_weights, grad_bias)``."""
    if cache is None:
        raise UsageError(f"layer {layer.name!r}: backward called without a forward cache")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    check_same_shape(grad_output, cache.out, ("grad_output", "forward output"))
    gpre = _activation_grad(grad_output, cache, layer.activation)
    grad_w = np.tensordot(gpre, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = gpre.sum(axis=(0, 2, 3))
    flipped = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = _correlate(_windows(gpre), flipped)
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def concat_channels(a, b):
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat: {AXES[axis]} mismatch {a.shape[axis]} != {b.shape[axis]}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad, sizes):
    """Route a concatenated gradient back to its parts."""
    if sum(sizes) != grad.shape[1]:
        raise DimensionError(f"cannot split {grad.shape[1]} channels into {list(sizes)}")
    bounds = np.cumsum([0, *sizes])
    return [grad[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def gaussian_kernel(variance, window):
    if window < 1 or window % 2 == 0:
        raise IfesError(f"gaussian window must be a positive odd integer, got {window}")
    if not variance > 0:
        raise IfesError(f"gaussian variance must be > 0, got {variance}")
    r = window // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * variance))
    return k / k.sum()


def gaussian_filter2d(x, variance=2.0, window=5):
    """Per-channel Gaussian smoothing, kernel renormalized at the borders.

    Written as ``center + sum w_k (neighbor_k - center)`` so constant maps come
    back bit-for-bit, and clipped to the input range so the result is a convex
    combination even after rounding.
    """
    x = as_tensor(x, "map")
    k = gaussian_kernel(variance, window)
    r = window // 2
    h, w = x.shape[2:]
    # normalizer: how much kernel mass lands inside the image at each pixel
    inside = np.pad(np.ones((h, w)), r)
    mass = np.tensordot(sliding_window_view(inside, (window, window)), k, axes=([2, 3], [0, 1]))
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    valid = np.pad(np.ones((h, w), dtype=bool), r)
    win = sliding_window_view(padded, (window, window), axis=(2, 3))
    vwin = sliding_window_view(valid, (window, window))
    diffs = np.where(vwin, win - x[..., None, None], 0.0)
    out = x + np.tensordot(diffs, k, axes=([4, 5], [0, 1])) / mass
    lo = x.min(axis=(2, 3), keepdims=True)
    hi = x.max(axis=(2, 3), keepdims=True)
    return np.clip(out, lo, hi)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-3
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update with classic L2 weight decay folded into the gradient.

    ``params`` and ``grads`` are dicts of arrays keyed by parameter name; params
    are updated in place and also returned.
    """
    for key, g in grads.items():
        if key not in params:
            raise UsageError(f"gradient for unknown parameter {key!r}")
        if g.shape != params[key].shape:
            raise DimensionError(f"{key}: gradient shape {g.shape} != parameter shape {params[key].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {key}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple | None
    checked: int
    kinks: int = 0  # coordinates skipped because every step crossed a kink


def _evaluate(loss_fn):
    r = loss_fn()
    if isinstance(r, tuple):
        return float(r[0]), r[1]
    return float(r), None


def finite_diff_check(
    loss_fn, params, analytic, step=1e-6, samples=None, rng=None, weighting="uniform", refinements=2
):
    """Compare analytic gradients with central differences ``(f(x+h) - f(x-h)) / 2h``.

    ``loss_fn()`` re-evaluates the loss from the current contents of the arrays
    in ``params`` (a dict name -> array, perturbed in place and restored).
    ``analytic`` holds matching gradient arrays. ``samples`` limits the number of
    coordinates checked per array; ``None`` checks all of them.

    ``loss_fn`` may return ``(loss, signature)`` where the signature encodes the
    active piece of a piecewise-smooth loss (ReLU masks, signs under an absolute
    value). When a perturbation changes the signature the step is divided by 10
    up to ``refinements`` times; a coordinate that still straddles a kink is
    counted in ``kinks`` and not compared.

    With ``weighting="magnitude"`` coordinates are drawn with probability
    proportional to ``|analytic|`` (uniform for an all-zero array). Central
    differences cannot resolve a relative error of 1e-5 on components much
    smaller than ``eps * |f| / step``, so uniform draws over a deep network
    mostly measure rounding noise.
    """
    if not step > 0:
        raise IfesError("finite difference step must be > 0")
    if weighting not in ("uniform", "magnitude"):
        raise IfesError(f"unknown weighting {weighting!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, base_sig = _evaluate(loss_fn)
    worst, worst_at, checked, kinks = 0.0, None, 0, 0
    for key, p in params.items():
        g = np.asarray(analytic[key]).reshape(-1)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise UsageError(f"parameter {key!r} must be contiguous to be perturbed in place")
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            prob = None
            if weighting == "magnitude":
                mag = np.abs(g)
                if np.count_nonzero(mag) >= samples:
                    prob = mag / mag.sum()
            idx = rng.choice(flat.size, size=samples, replace=False, p=prob)
        for i in idx:
            orig = flat[i]
            h = step
            for _ in range(refinements + 1):
                flat[i] = orig + h
                fp, sp = _evaluate(loss_fn)
                flat[i] = orig - h
                fm, sm = _evaluate(loss_fn)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise VerificationError(f"non-finite loss at {key}[{i}]", key, int(i))
                smooth = base_sig is None or (sp == base_sig and sm == base_sig)
                if smooth:
                    break
                h /= 10.0
            if not smooth:
                kinks += 1
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = float(g[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (key, int(i))
    return GradCheckResult(worst, worst_at, checked, kinks)
