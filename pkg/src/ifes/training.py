"""Single-pair training step and a simple loop over a list of pairs."""

from __future__ import annotations

import logging
import time

import numpy as np

from .errors import TrainingError
from .losses import build_ssim_target, total_loss
from .network import backward, forward
from .tensor import Activation, AdamState, adam_step

logger = logging.getLogger(__name__)


def loss_and_grads(network, i1, i2, cfg, target=None):
    """Forward, total loss and parameter gradients without updating anything."""
    out = forward(network, i1, i2)
    terms = total_loss(out, i1, i2, cfg, target)
    g = terms.grads
    grads = backward(network, out, g["fused"], g["w1"], g["w2"], g["recon_ir"], g["recon_vis"])
    return terms, grads, out


def piece_signature(network, out, i1, i2, cfg):
    """Bytes identifying the smooth piece the loss currently sits on.

    Covers every ReLU mask, the sign of the weight-map residual and, for the MAE
    reconstruction loss, the residual signs of both reconstructions.
    """
    masks = [
        out.caches[layer.name].pre > 0 for layer in network.layers() if layer.activation is Activation.RELU
        and layer.name in out.caches
    ]
    masks.append(cfg.tau - out.w1 - out.w2 > 0)
    if cfg.recon == "mae":
        masks.append(out.recon_ir - i1 > 0)
        masks.append(out.recon_vis - i2 > 0)
    return np.packbits(np.concatenate([m.reshape(-1) for m in masks])).tobytes()


def train_step(network, state, pair, cfg, target=None):
    """One optimizer step on one (infrared, visible) pair; batch size 1.

    Mutates ``network`` parameters and ``state``; returns the loss terms
    evaluated before the update.
    """
    i1, i2 = pair
    terms, grads, _ = loss_and_grads(network, i1, i2, cfg, target)
    for layer in network.layers():
        for key in (f"{layer.name}.weight", f"{layer.name}.bias"):
            if not np.all(np.isfinite(grads[key])):
                raise TrainingError(f"non-finite gradient in layer {layer.name}")
    adam_step(network.parameters(), grads, state)
    return terms


def make_optimizer(lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-3):
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def train(network, pairs, cfg, iterations, state=None, callback=None):
    """Cycle through ``pairs`` (lists of (1,1,H,W) arrays) for ``iterations`` steps.

    Returns ``(history, state)`` where history is a list of dicts with the loss
    terms and elapsed seconds per step.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    state = state if state is not None else make_optimizer()
    targets = [build_ssim_target(a, b, cfg) for a, b in pairs]
    history = []
    start = time.perf_counter()
    for it in range(iterations):
        k = it % len(pairs)
        terms = train_step(network, state, pairs[k], cfg, targets[k])
        row = {"iteration": it + 1, **terms.as_row(), "elapsed": time.perf_counter() - start}
        history.append(row)
        if callback is not None:
            callback(row)
        if (it + 1) % 50 == 0:
            logger.info("iter %d total %.6f", it + 1, terms.total)
    return history, state
