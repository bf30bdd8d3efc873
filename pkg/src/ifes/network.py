"""Three-branch fusion network: two reconstruction branches (infrared and
visible) interleaved stage by stage with a weight-map fusion branch.

Layer mapping for ``stages`` = S (S = 3 reproduces the published widths)::

    fusion trunk   2 convs per stage          -> F_1 .. F_S
    branch convs   1 conv per stage per side  -> F'_n = C(F_n), F''_n = C(F_n)
    next fused     F_{n+1} = C(C(Cat(F'_n, F''_n)))
    weight maps    two 4-conv heads on F_S, sigmoid output
    recon heads    3 convs on F'_S (infrared) and F''_S (visible), linear output
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Activation,
    ConvLayer,
    as_tensor,
    check_same_shape,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    gaussian_filter2d,
    split_channels,
)

TRUNK_BASE = 64
TRUNK_CAP = 256
WMAP_HEAD = (256, 128, 64, 1)
RECON_HEAD = (128, 64, 1)


class Variant(str, enum.Enum):
    FULL = "full"
    NO_IFEM = "no_ifem"
    HIER_CONNECT = "hc"


def stage_width(n):
    """Width of stage ``n`` (1-based): 64, 128, 256, then capped at 256."""
    return min(TRUNK_BASE * 2 ** (n - 1), TRUNK_CAP)


def default_channels(stages, scale=1):
    """Channel lists ``(ivif, shfe)`` for a stage count and width divisor."""
    if stages < 1:
        raise ConfigError(f"stages must be >= 1, got {stages}")
    widths = [stage_width(n) for n in range(1, stages + 1)]
    ivif = [w for w in widths for _ in range(2)] + list(WMAP_HEAD)
    shfe = widths + list(RECON_HEAD)
    return _scaled(ivif, scale), _scaled(shfe, scale)


def _scaled(channels, scale):
    if scale < 1:
        raise ConfigError(f"scale must be >= 1, got {scale}")
    return [c if c == 1 else max(1, c // scale) for c in channels]


@dataclass
class NetConfig:
    stages: int = 3
    scale: int = 1
    variant: Variant = Variant.FULL
    seed: int = 0
    ivif_channels: list | None = None
    shfe_channels: list | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        ivif, shfe = default_channels(self.stages, self.scale)
        if self.ivif_channels is None:
            self.ivif_channels = ivif
        if self.shfe_channels is None:
            self.shfe_channels = shfe
        self.ivif_channels = [int(c) for c in self.ivif_channels]
        self.shfe_channels = [int(c) for c in self.shfe_channels]
        self.validate()

    def validate(self):
        s = self.stages
        expected = (
            f"expected ivif = 2 convs per stage + 4 head convs ({2 * s + 4} entries, last = 1) and "
            f"shfe = 1 conv per stage + 3 head convs ({s + 3} entries, last = 1); "
            f"default for stages={s}, scale={self.scale}: "
            f"ivif={default_channels(s, self.scale)[0]}, shfe={default_channels(s, self.scale)[1]}"
        )
        ok = (
            len(self.ivif_channels) == 2 * s + 4
            and len(self.shfe_channels) == s + 3
            and self.ivif_channels[-1] == 1
            and self.shfe_channels[-1] == 1
            and all(c >= 1 for c in self.ivif_channels + self.shfe_channels)
        )
        if not ok:
            raise ConfigError(
                f"inconsistent channel lists ivif={self.ivif_channels}, shfe={self.shfe_channels}: {expected}"
            )

    def to_dict(self):
        return {
            "stages": self.stages,
            "scale": self.scale,
            "variant": self.variant.value,
            "seed": self.seed,
            "ivif_channels": list(self.ivif_channels),
            "shfe_channels": list(self.shfe_channels),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Network:
    config: NetConfig
    trunk: list  # 2 per stage
    shfe_ir: list  # 1 per stage
    shfe_vis: list
    wmap_heads: tuple  # two lists of 4
    recon_ir: list  # 3
    recon_vis: list
    adapters: dict = field(default_factory=dict)  # (src stage k, dst stage n) -> ConvLayer

    def layers(self):
        """All layers in declaration order (checkpoint and optimizer order)."""
        out = list(self.trunk)
        out += self.shfe_ir + self.shfe_vis
        out += self.wmap_heads[0] + self.wmap_heads[1]
        out += self.recon_ir + self.recon_vis
        out += [self.adapters[k] for k in sorted(self.adapters)]
        return out

    def parameters(self):
        params = {}
        for layer in self.layers():
            params[f"{layer.name}.weight"] = layer.weights
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def copy(self):
        return Network(
            replace(self.config),
            [l.copy() for l in self.trunk],
            [l.copy() for l in self.shfe_ir],
            [l.copy() for l in self.shfe_vis],
            tuple([l.copy() for l in h] for h in self.wmap_heads),
            [l.copy() for l in self.recon_ir],
            [l.copy() for l in self.recon_vis],
            {k: v.copy() for k, v in self.adapters.items()},
        )


def _chain(rng, name, in_ch, widths, final):
    layers = []
    for i, w in enumerate(widths):
        act = final if i == len(widths) - 1 else Activation.RELU
        layers.append(ConvLayer.he_normal(rng, in_ch, w, act, f"{name}.{i}"))
        in_ch = w
    return layers


def build_network(config):
    """Allocate and He-initialize every layer, deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    s = config.stages
    ivif, shfe = config.ivif_channels, config.shfe_channels
    trunk_w, head_w = ivif[: 2 * s], ivif[2 * s :]
    stage_w, recon_w = shfe[:s], shfe[s:]

    trunk = []
    for n in range(s):
        if n == 0:
            in_ch = 2
        else:
            in_ch = 2 * stage_w[n - 1]
            if config.variant is Variant.HIER_CONNECT:
                in_ch += (n - 1) * stage_w[n - 1]
        trunk.append(ConvLayer.he_normal(rng, in_ch, trunk_w[2 * n], name=f"trunk.{2 * n}"))
        trunk.append(ConvLayer.he_normal(rng, trunk_w[2 * n], trunk_w[2 * n + 1], name=f"trunk.{2 * n + 1}"))

    branches = {}
    for side in ("ir", "vis"):
        layers = []
        for n in range(s):
            if config.variant is Variant.NO_IFEM:
                in_ch = 1 if n == 0 else stage_w[n - 1]
            else:
                in_ch = trunk_w[2 * n + 1]
            layers.append(ConvLayer.he_normal(rng, in_ch, stage_w[n], name=f"shfe_{side}.{n}"))
        branches[side] = layers

    heads = tuple(_chain(rng, f"wmap{i}", trunk_w[-1], head_w, Activation.SIGMOID) for i in (1, 2))
    recon_ir = _chain(rng, "recon_ir", stage_w[-1], recon_w, Activation.LINEAR)
    recon_vis = _chain(rng, "recon_vis", stage_w[-1], recon_w, Activation.LINEAR)

    adapters = {}
    if config.variant is Variant.HIER_CONNECT:
        # F_k skips into the input of F_{n+1} for every k < n
        for n in range(2, s):
            for k in range(1, n):
                adapters[(k, n)] = ConvLayer.he_normal(
                    rng, trunk_w[2 * k - 1], stage_w[n - 1], name=f"skip.{k}to{n}"
                )
    return Network(config, trunk, branches["ir"], branches["vis"], heads, recon_ir, recon_vis, adapters)


@dataclass
class StageState:
    n: int
    fused: np.ndarray  # F_n
    ir: np.ndarray  # F'_n
    vis: np.ndarray  # F''_n


@dataclass
class ForwardOutput:
    fused: np.ndarray  # I_f
    w1: np.ndarray
    w2: np.ndarray
    recon_ir: np.ndarray  # I_r1
    recon_vis: np.ndarray  # I_r2
    stages: list
    inputs: tuple = ()
    caches: dict = field(default_factory=dict, repr=False)


def _run(layers, x, caches):
    for layer in layers:
        x, caches[layer.name] = conv2d_forward(x, layer)
    return x


def _run_back(layers, grad, caches, grads):
    for layer in reversed(layers):
        grad, gw, gb = conv2d_backward(caches[layer.name], layer, grad)
        _accumulate(grads, layer, gw, gb)
    return grad


def _accumulate(grads, layer, gw, gb):
    kw, kb = f"{layer.name}.weight", f"{layer.name}.bias"
    if kw in grads:
        grads[kw] += gw
        grads[kb] += gb
    else:
        grads[kw] = gw
        grads[kb] = gb


def ifem_stage(fused, network, n, caches=None, earlier=()):
    """One interactive stage.

    Splits ``fused`` (F_n) into the infrared and visible branch features and,
    unless ``n`` is the last stage, merges them back into F_{n+1}. ``earlier``
    carries F_1 .. F_{n-1}, used only by the hierarchical-connection variant.
    Returns ``(StageState, next_fused_or_None)``.
    """
    cfg = network.config
    if not 1 <= n <= cfg.stages:
        raise DimensionError(f"stage {n} outside 1..{cfg.stages}")
    if cfg.variant is Variant.NO_IFEM:
        raise DimensionError("ifem_stage is undefined for the no_ifem variant; use forward()")
    caches = {} if caches is None else caches
    fused = as_tensor(fused, f"F_{n}")
    ir = _run([network.shfe_ir[n - 1]], fused, caches)
    vis = _run([network.shfe_vis[n - 1]], fused, caches)
    state = StageState(n, fused, ir, vis)
    if n == cfg.stages:
        return state, None
    return state, _merge(network, n, ir, vis, earlier, caches)


def _merge(network, n, ir, vis, earlier, caches):
    # F_{n+1} = C^2(Cat(F'_n, F''_n [, skips]))
    parts = [ir, vis]
    if network.config.variant is Variant.HIER_CONNECT:
        for k in range(1, n):
            parts.append(_run([network.adapters[(k, n)]], earlier[k - 1], caches))
    x = parts[0]
    for p in parts[1:]:
        x = concat_channels(x, p)
    return _run(network.trunk[2 * n : 2 * n + 2], x, caches)


def _check_pair(i1, i2):
    i1 = as_tensor(i1, "I_1")
    i2 = as_tensor(i2, "I_2")
    if i1.shape[1] != 1 or i2.shape[1] != 1:
        raise DimensionError(f"source images must be single-channel, got {i1.shape[1]} and {i2.shape[1]}")
    check_same_shape(i1, i2, ("I_1", "I_2"))
    return i1, i2


def forward(network, i1, i2):
    """Full forward pass; the returned object carries the caches for ``backward``."""
    i1, i2 = _check_pair(i1, i2)
    cfg = network.config
    caches = {}
    f = _run(network.trunk[:2], concat_channels(i1, i2), caches)
    fused = [f]
    stages = []
    if cfg.variant is Variant.NO_IFEM:
        # branches see only their own previous feature; no delivery from the fusion trunk
        ir, vis = i1, i2
        for n in range(1, cfg.stages + 1):
            ir = _run([network.shfe_ir[n - 1]], ir, caches)
            vis = _run([network.shfe_vis[n - 1]], vis, caches)
            stages.append(StageState(n, fused[-1], ir, vis))
            if n < cfg.stages:
                fused.append(_merge(network, n, ir, vis, fused, caches))
    else:
        for n in range(1, cfg.stages + 1):
            state, nxt = ifem_stage(fused[-1], network, n, caches, fused)
            stages.append(state)
            if nxt is not None:
                fused.append(nxt)

    last = stages[-1]
    w1 = _run(network.wmap_heads[0], last.fused, caches)
    w2 = _run(network.wmap_heads[1], last.fused, caches)
    r1 = _run(network.recon_ir, last.ir, caches)
    r2 = _run(network.recon_vis, last.vis, caches)
    out = fuse_with_weight_maps(w1, w2, i1, i2)
    return ForwardOutput(out, w1, w2, r1, r2, stages, (i1, i2), caches)


def backward(network, out, grad_fused, grad_w1, grad_w2, grad_recon_ir, grad_recon_vis):
    """Gradients of a scalar loss w.r.t. every parameter, given its gradients
    w.r.t. the five network outputs. Returns a dict keyed like ``parameters()``.
    """
    cfg = network.config
    caches = out.caches
    i1, i2 = out.inputs
    s = cfg.stages
    grads = {}

    gw1 = grad_w1 + grad_fused * i1
    gw2 = grad_w2 + grad_fused * i2
    g_f = [None] * (s + 1)  # g_f[n] = dL/dF_n, 1-based
    g_f[s] = _run_back(network.wmap_heads[0], gw1, caches, grads)
    g_f[s] = g_f[s] + _run_back(network.wmap_heads[1], gw2, caches, grads)
    g_ir = _run_back(network.recon_ir, grad_recon_ir, caches, grads)
    g_vis = _run_back(network.recon_vis, grad_recon_vis, caches, grads)

    ir_w = cfg.shfe_channels
    for n in range(s, 0, -1):
        if n < s and g_f[n + 1] is not None:
            # back through F_{n+1} = C^2(Cat(F'_n, F''_n, skips))
            g_in = _run_back(network.trunk[2 * n : 2 * n + 2], g_f[n + 1], caches, grads)
            sizes = [ir_w[n - 1], ir_w[n - 1]]
            if cfg.variant is Variant.HIER_CONNECT:
                sizes += [network.adapters[(k, n)].out_ch for k in range(1, n)]
            parts = split_channels(g_in, sizes)
            g_ir = g_ir + parts[0]
            g_vis = g_vis + parts[1]
            for k in range(1, n) if cfg.variant is Variant.HIER_CONNECT else ():
                g_skip = _run_back([network.adapters[(k, n)]], parts[1 + k], caches, grads)
                g_f[k] = g_skip if g_f[k] is None else g_f[k] + g_skip
        g_from_ir = _run_back([network.shfe_ir[n - 1]], g_ir, caches, grads)
        g_from_vis = _run_back([network.shfe_vis[n - 1]], g_vis, caches, grads)
        if cfg.variant is Variant.NO_IFEM:
            g_ir, g_vis = g_from_ir, g_from_vis
        else:
            g = g_from_ir + g_from_vis
            g_f[n] = g if g_f[n] is None else g_f[n] + g
            g_ir = g_vis = 0.0
    if g_f[1] is None:
        g_f[1] = np.zeros_like(out.stages[0].fused)
    _run_back(network.trunk[:2], g_f[1], caches, grads)

    # layers that never influenced the loss still get an explicit zero
    for layer in network.layers():
        if f"{layer.name}.weight" not in grads:
            _accumulate(grads, layer, np.zeros_like(layer.weights), np.zeros_like(layer.bias))
    return grads


def fuse_with_weight_maps(w1, w2, i1, i2, smooth=False, variance=2.0, window=5):
    """I_f = W_1 * I_1 + W_2 * I_2, optionally smoothing the maps first."""
    w1, w2, i1, i2 = (as_tensor(t, n) for t, n in zip((w1, w2, i1, i2), ("W_1", "W_2", "I_1", "I_2")))
    check_same_shape(w1, i1, ("W_1", "I_1"))
    check_same_shape(w2, i2, ("W_2", "I_2"))
    check_same_shape(i1, i2, ("I_1", "I_2"))
    if smooth:
        w1 = gaussian_filter2d(w1, variance, window)
        w2 = gaussian_filter2d(w2, variance, window)
    return w1 * i1 + w2 * i2
