"""Training objective: reconstruction, SSIM fusion, and weight-map terms.

All window statistics use non-overlapping square windows tiled from the top
left; pixels in an incomplete last row/column of windows are ignored. A window
size of 0 means one window covering the whole image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .tensor import as_tensor, check_same_shape

# below this a window counts as flat (contrast is exactly zero up to rounding)
FLAT_EPS = 1e-12


@dataclass
class LossConfig:
    tau: float = 1.0
    xi: float = 1.7
    ssim_const: float = 9e-4
    window: int = 16
    recon: str = "mse"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.xi > 0:
            raise ConfigError(f"xi must be > 0, got {self.xi}")
        if not self.ssim_const > 0:
            raise ConfigError(f"ssim_const must be > 0, got {self.ssim_const}")
        if self.window < 0:
            raise ConfigError(f"window must be >= 0, got {self.window}")
        if self.recon not in ("mse", "mae"):
            raise ConfigError(f"recon must be 'mse' or 'mae', got {self.recon!r}")


@dataclass
class LossTerms:
    recon_ir: float  # L_I
    recon_vis: float  # L_V
    fusion: float  # L_F
    weight_map: float  # L_M
    total: float
    grads: dict = field(default_factory=dict, repr=False)

    def as_row(self):
        return {
            "L_I": self.recon_ir,
            "L_V": self.recon_vis,
            "L_F": self.fusion,
            "L_M": self.weight_map,
            "total": self.total,
        }


def mse_loss(x, target):
    x, target = np.asarray(x, dtype=np.float64), np.asarray(target, dtype=np.float64)
    check_same_shape(x, target, ("x", "target"))
    d = x - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def mae_loss(x, target):
    x, target = np.asarray(x, dtype=np.float64), np.asarray(target, dtype=np.float64)
    check_same_shape(x, target, ("x", "target"))
    d = x - target
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def window_size(shape, window):
    """Effective (wh, ww) for an image of spatial ``shape``."""
    h, w = shape
    if window == 0:
        return h, w
    return min(window, h), min(window, w)


def to_windows(x, window):
    """(B, C, H, W) -> (B, C, nh, nw, wh*ww) over complete windows only."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    wh, ww = window_size((h, w), window)
    nh, nw = h // wh, w // ww
    crop = x[:, :, : nh * wh, : nw * ww]
    return crop.reshape(b, c, nh, wh, nw, ww).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, nh, nw, wh * ww)


def from_windows(win, shape, window):
    """Inverse of ``to_windows``; uncovered pixels are zero."""
    b, c, h, w = shape
    wh, ww = window_size((h, w), window)
    nh, nw = h // wh, w // ww
    out = np.zeros(shape)
    out[:, :, : nh * wh, : nw * ww] = (
        win.reshape(b, c, nh, nw, wh, ww).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, nh * wh, nw * ww)
    )
    return out


def build_ssim_target(i1, i2, cfg):
    """Expected fusion result: per window, xi * max contrast * normalized summed structure."""
    i1, i2 = as_tensor(i1, "I_1"), as_tensor(i2, "I_2")
    check_same_shape(i1, i2, ("I_1", "I_2"))
    structures, contrasts = [], []
    for img in (i1, i2):
        win = to_windows(img, cfg.window)
        d = win - win.mean(axis=-1, keepdims=True)
        c = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
        flat = c <= FLAT_EPS
        structures.append(np.where(flat, 0.0, d / np.where(flat, 1.0, c)))
        contrasts.append(np.where(flat, 0.0, c))
    c_max = np.maximum(contrasts[0], contrasts[1])
    s_sum = structures[0] + structures[1]
    norm = np.sqrt(np.sum(s_sum * s_sum, axis=-1, keepdims=True))
    cancel = norm <= FLAT_EPS
    s_bar = np.where(cancel, 0.0, s_sum / np.where(cancel, 1.0, norm))
    return from_windows(cfg.xi * c_max * s_bar, i1.shape, cfg.window)


def ssim(a, b, cfg):
    """Windowed SSIM without the luminance term, averaged over windows.

    Returns ``(value, grad_a, grad_b)``.
    """
    a, b = as_tensor(a, "a"), as_tensor(b, "b")
    check_same_shape(a, b, ("a", "b"))
    wa, wb = to_windows(a, cfg.window), to_windows(b, cfg.window)
    n = wa.shape[-1]
    da = wa - wa.mean(axis=-1, keepdims=True)
    db = wb - wb.mean(axis=-1, keepdims=True)
    var_a = np.mean(da * da, axis=-1, keepdims=True)
    var_b = np.mean(db * db, axis=-1, keepdims=True)
    cov = np.mean(da * db, axis=-1, keepdims=True)
    c = cfg.ssim_const
    num = 2.0 * cov + c
    den = var_a + var_b + c
    per_window = num / den
    count = per_window.size
    value = float(per_window.mean())
    # d cov/d a_k = db_k / n, d var_a/d a_k = 2 da_k / n
    ga = (2.0 * db / den - num / den**2 * 2.0 * da) / (n * count)
    gb = (2.0 * da / den - num / den**2 * 2.0 * db) / (n * count)
    return value, from_windows(ga, a.shape, cfg.window), from_windows(gb, b.shape, cfg.window)


def fusion_loss(fused, i1, i2, cfg, target=None):
    """1 - SSIM(target, fused); the target is a constant."""
    if target is None:
        target = build_ssim_target(i1, i2, cfg)
    value, _, grad = ssim(target, fused, cfg)
    return 1.0 - value, -grad


def weight_map_loss(w1, w2, cfg):
    w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
    check_same_shape(w1, w2, ("W_1", "W_2"))
    r = cfg.tau - w1 - w2
    g = -np.sign(r) / r.size
    return float(np.mean(np.abs(r))), g, g.copy()


def total_loss(out, i1, i2, cfg, target=None):
    """Unweighted sum of the four terms with gradients w.r.t. the network outputs."""
    recon = mse_loss if cfg.recon == "mse" else mae_loss
    l_i, g_r1 = recon(out.recon_ir, i1)
    l_v, g_r2 = recon(out.recon_vis, i2)
    l_f, g_f = fusion_loss(out.fused, i1, i2, cfg, target)
    l_m, g_w1, g_w2 = weight_map_loss(out.w1, out.w2, cfg)
    for name, v in (("L_I", l_i), ("L_V", l_v), ("L_F", l_f), ("L_M", l_m)):
        if not np.isfinite(v):
            raise TrainingError(f"non-finite loss term {name}")
    grads = {"recon_ir": g_r1, "recon_vis": g_r2, "fused": g_f, "w1": g_w1, "w2": g_w2}
    return LossTerms(l_i, l_v, l_f, l_m, l_i + l_v + l_f + l_m, grads)
