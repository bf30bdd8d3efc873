"""End-to-end gradient verification: every layer type, every loss term and a
tiny network of each variant, compared against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .losses import LossConfig, total_loss
from .network import NetConfig, build_network, forward
from .tensor import (
    Activation,
    ConvLayer,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    finite_diff_check,
    split_channels,
)
from .training import loss_and_grads, piece_signature

THRESHOLD = 1e-5


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    checked: int
    kinks: int

    @property
    def passed(self):
        return self.max_rel_error < THRESHOLD and self.checked > 0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max_rel_err={self.max_rel_error:.3e} checked={self.checked} kinks={self.kinks}"


def _conv_case(rng, activation):
    x = rng.normal(size=(2, 3, 5, 6))
    layer = ConvLayer.he_normal(rng, 3, 4, activation, "probe")
    layer.bias[:] = rng.normal(size=4) * 0.1
    weight = rng.normal(size=(2, 4, 5, 6))

    def loss():
        out, cache = conv2d_forward(x, layer)
        return float(np.sum(out * weight)), np.packbits(cache.pre > 0).tobytes()

    _, cache = conv2d_forward(x, layer)
    gx, gw, gb = conv2d_backward(cache, layer, weight)
    return loss, {"x": x, "weight": layer.weights, "bias": layer.bias}, {"x": gx, "weight": gw, "bias": gb}


def _concat_case(rng):
    a, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    weight = rng.normal(size=(1, 5, 4, 4))
    ga, gb = split_channels(weight, [2, 3])
    return lambda: float(np.sum(concat_channels(a, b) * weight)), {"a": a, "b": b}, {"a": ga, "b": gb}


def _loss_cases(rng, cfg):
    i1, i2 = rng.uniform(size=(2, 1, 1, 8, 8))
    x = rng.uniform(size=(1, 1, 8, 8))
    w1, w2 = rng.uniform(0, 0.6, size=(2, 1, 1, 8, 8))
    target = losses.build_ssim_target(i1, i2, cfg)
    cases = {}

    _, g = losses.mse_loss(x, i1)
    cases["loss.mse"] = (lambda: losses.mse_loss(x, i1)[0], {"x": x}, {"x": g})

    _, g = losses.mae_loss(x, i1)
    cases["loss.mae"] = (
        lambda: (losses.mae_loss(x, i1)[0], np.packbits(x > i1).tobytes()),
        {"x": x},
        {"x": g},
    )

    a, b = rng.uniform(size=(2, 1, 1, 8, 8))
    _, ga, gb = losses.ssim(a, b, cfg)
    cases["loss.ssim"] = (lambda: losses.ssim(a, b, cfg)[0], {"a": a, "b": b}, {"a": ga, "b": gb})

    _, g = losses.fusion_loss(x, i1, i2, cfg, target)
    cases["loss.fusion"] = (lambda: losses.fusion_loss(x, i1, i2, cfg, target)[0], {"fused": x}, {"fused": g})

    _, g1, g2 = losses.weight_map_loss(w1, w2, cfg)
    cases["loss.weight_map"] = (
        lambda: (losses.weight_map_loss(w1, w2, cfg)[0], np.packbits(cfg.tau - w1 - w2 > 0).tobytes()),
        {"w1": w1, "w2": w2},
        {"w1": g1, "w2": g2},
    )
    return cases


def tiny_network_case(variant, seed, stages=3, size=8, scale=16, cfg=None):
    cfg = cfg or LossConfig(window=4)
    rng = np.random.default_rng(seed)
    i1, i2 = rng.uniform(size=(2, 1, 1, size, size))
    net = build_network(NetConfig(stages=stages, scale=scale, variant=variant, seed=seed))
    _, grads, _ = loss_and_grads(net, i1, i2, cfg)

    def loss():
        out = forward(net, i1, i2)
        return total_loss(out, i1, i2, cfg).total, piece_signature(net, out, i1, i2, cfg)

    return loss, net.parameters(), grads


def run_gradcheck(seed=0, samples=4, step=1e-5):
    """Run every component; returns a list of ComponentResult in a fixed order."""
    rng = np.random.default_rng(seed)
    cases = {}
    for act in Activation:
        cases[f"conv.{act.value}"] = _conv_case(rng, act)
    cases["concat"] = _concat_case(rng)
    cases.update(_loss_cases(rng, LossConfig(window=4)))
    for variant in ("full", "no_ifem", "hc"):
        cases[f"network.{variant}"] = tiny_network_case(variant, seed)

    results = []
    for name, (fn, params, grads) in cases.items():
        is_net = name.startswith("network.")
        r = finite_diff_check(
            fn,
            params,
            grads,
            step=step,
            samples=samples if is_net else None,
            rng=np.random.default_rng(seed),
            weighting="magnitude" if is_net else "uniform",
            refinements=2,
        )
        results.append(ComponentResult(name, r.max_rel_error, r.checked, r.kinks))
    return results
