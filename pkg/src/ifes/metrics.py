"""Objective fusion-quality metrics and dataset-level reports.

Range conventions: AG, EN, MI and GLD are computed on the byte range [0, 255];
SF and SSIM on the unit range [0, 1]. ``GrayImage`` carries its range so the
conversion happens here, not at the call site.

Arrays are indexed ``img[i, j]`` with ``i`` the row. Horizontal differences run
along ``j``, vertical ones along ``i``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .losses import LossConfig, ssim

UNIT = "unit"
BYTE = "byte"
BINS = 256
COLUMNS = ("AG", "EN", "MI", "GLD", "SF", "SSIM")
RANGE_NOTE = "# ranges: AG,EN,MI,GLD on [0,255]; SF,SSIM on [0,1]; VIFF not computed"


@dataclass
class GrayImage:
    pixels: np.ndarray
    range: str = BYTE

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise MetricError(f"gray image must be 2-D, got shape {self.pixels.shape}")
        if self.range not in (UNIT, BYTE):
            raise MetricError(f"unknown range tag {self.range!r}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def as_byte(self):
        return self.pixels * 255.0 if self.range == UNIT else self.pixels

    def as_unit(self):
        return self.pixels / 255.0 if self.range == BYTE else self.pixels

    def to(self, rng):
        return GrayImage(self.as_unit() if rng == UNIT else self.as_byte(), rng)


def _pixels(img, rng):
    if isinstance(img, GrayImage):
        return img.as_unit() if rng == UNIT else img.as_byte()
    # bare arrays are assumed to already be in the metric's range
    return np.asarray(img, dtype=np.float64)


def _need_grid(x, name):
    if x.ndim != 2 or min(x.shape) < 2:
        raise MetricError(f"{name} needs an image of at least 2x2 pixels, got shape {x.shape}")


def average_gradient(img):
    x = _pixels(img, BYTE)
    _need_grid(x, "AG")
    dv = x[1:, :-1] - x[:-1, :-1]
    dh = x[:-1, 1:] - x[:-1, :-1]
    return float(np.mean(np.sqrt((dv * dv + dh * dh) / 2.0)))


def gray_level_difference(img):
    x = _pixels(img, BYTE)
    _need_grid(x, "GLD")
    dv = x[:-1, :-1] - x[1:, :-1]
    dh = x[:-1, :-1] - x[:-1, 1:]
    return float(np.mean(np.abs(dv) + np.abs(dh)))


def spatial_frequency(img):
    x = _pixels(img, UNIT)
    _need_grid(x, "SF")
    mn = x.size
    h = np.sqrt(np.sum((x[:, 1:] - x[:, :-1]) ** 2) / mn)
    v = np.sqrt(np.sum((x[1:, :] - x[:-1, :]) ** 2) / mn)
    return float(np.sqrt(h * h + v * v))


def quantize(img):
    """Byte-range levels 0..255: round half up, then clamp."""
    x = _pixels(img, BYTE)
    return np.clip(np.floor(x + 0.5), 0, BINS - 1).astype(np.intp)


def _entropy_of_counts(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def entropy(img):
    return _entropy_of_counts(np.bincount(quantize(img).ravel(), minlength=BINS))


def joint_entropy(a, b):
    qa, qb = quantize(a), quantize(b)
    if qa.shape != qb.shape:
        raise MetricError(f"joint entropy: shapes differ {qa.shape} vs {qb.shape}")
    return _entropy_of_counts(np.bincount((qa * BINS + qb).ravel(), minlength=BINS * BINS))


def mutual_information(i1, i2, fused):
    shapes = {_pixels(i, BYTE).shape for i in (i1, i2, fused)}
    if len(shapes) != 1:
        raise MetricError(f"MI needs equal dimensions, got {sorted(shapes)}")
    e_f = entropy(fused)
    total = 0.0
    for src in (i1, i2):
        total += entropy(src) + e_f - joint_entropy(src, fused)
    return total


def ssim_score(a, b, cfg=None):
    cfg = cfg or LossConfig()
    x = _pixels(a, UNIT)[None, None]
    y = _pixels(b, UNIT)[None, None]
    return ssim(x, y, cfg)[0]


@dataclass
class MetricRow:
    image: str
    AG: float
    EN: float
    MI: float
    GLD: float
    SF: float
    SSIM: float

    def values(self):
        return [getattr(self, c) for c in COLUMNS]


def evaluate_pair(i1, i2, fused, image="", cfg=None):
    """All metrics for one (infrared, visible, fused) triple.

    SSIM is the mean of SSIM(fused, infrared) and SSIM(fused, visible).
    """
    shapes = {_pixels(i, BYTE).shape for i in (i1, i2, fused)}
    if len(shapes) != 1:
        raise MetricError(f"triple {image!r}: dimensions differ {sorted(shapes)}")
    s = 0.5 * (ssim_score(fused, i1, cfg) + ssim_score(fused, i2, cfg))
    return MetricRow(
        image,
        average_gradient(fused),
        entropy(fused),
        mutual_information(i1, i2, fused),
        gray_level_difference(fused),
        spatial_frequency(fused),
        s,
    )


def fmt(v):
    return f"{v:.4f}"


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def means(self):
        if not self.rows:
            raise MetricError("empty report has no mean")
        return MetricRow("mean", *[float(np.mean([r.values()[k] for r in self.rows])) for k in range(len(COLUMNS))])

    def to_csv(self):
        buf = io.StringIO()
        buf.write("image," + ",".join(COLUMNS) + "\n")
        for r in [*self.rows, self.means()] if self.rows else []:
            buf.write(r.image + "," + ",".join(fmt(v) for v in r.values()) + "\n")
        return buf.getvalue()
