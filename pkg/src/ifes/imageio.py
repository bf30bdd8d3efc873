"""Binary PGM (P5, maxval 255) reading and writing, pair discovery, patches."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, RegistrationError
from .metrics import BYTE, UNIT, GrayImage

logger = logging.getLogger(__name__)

_WS = b" \t\n\r\v\f"


def _header_token(data, pos, path):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos : pos + 1] not in _WS and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("truncated header", offset=start, path=path)
    return data[start:pos], pos


def decode_pgm(data, path=None):
    if data[:2] != b"P5":
        fmt = data[:2].decode("latin-1", "replace")
        raise ParseError(f"unsupported format {fmt!r}, only binary P5 is accepted", offset=0, path=path)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _header_token(data, pos, path)
        if not tok.isdigit():
            raise ParseError(f"bad {name} {tok!r}", offset=start, path=path)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported, expected 255", offset=pos, path=path)
    if width < 1 or height < 1:
        raise ParseError(f"zero-size image {width}x{height}", offset=pos, path=path)
    if pos >= len(data) or data[pos : pos + 1] not in _WS:
        raise ParseError("missing whitespace after header", offset=pos, path=path)
    pos += 1
    need = width * height
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise ParseError(f"truncated payload: {len(payload)} of {need} bytes", offset=pos + len(payload), path=path)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)
    return GrayImage(pixels, BYTE)


def encode_pgm(img):
    px = img.as_byte() if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    if px.ndim != 2 or px.size == 0:
        raise DataError(f"cannot encode an image of shape {px.shape}")
    if not np.all(np.isfinite(px)):
        raise DataError("cannot encode non-finite pixels")
    q = np.clip(np.floor(px + 0.5), 0, 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def load_gray_image(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e
    return decode_pgm(data, path)


def save_gray_image(img, path):
    path = Path(path)
    data = encode_pgm(img)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e.strerror}") from e


def to_tensor(img):
    """GrayImage -> (1, 1, H, W) array on the unit range."""
    return img.as_unit()[None, None].copy()


def from_tensor(x):
    return GrayImage(np.asarray(x, dtype=np.float64)[0, 0], UNIT)


@dataclass
class ImagePair:
    infrared: GrayImage
    visible: GrayImage
    identifier: str

    def __post_init__(self):
        if self.infrared.pixels.shape != self.visible.pixels.shape:
            raise RegistrationError(
                f"pair {self.identifier!r}: infrared {self.infrared.pixels.shape} and "
                f"visible {self.visible.pixels.shape} differ"
            )

    def tensors(self):
        return to_tensor(self.infrared), to_tensor(self.visible)


def find_groups(directory, suffixes):
    """Map identifier -> {suffix: path} for ``<id><suffix>.pgm`` files.

    Returns ``(complete, unmatched)``: identifiers with every suffix present
    (sorted) and the paths of files whose group is incomplete.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    groups = {}
    # longest suffix first so "_ir" does not steal "_vis_ir"-style names
    ordered = sorted(suffixes, key=len, reverse=True)
    for entry in sorted(os.listdir(directory)):
        if not entry.endswith(".pgm"):
            continue
        stem = entry[: -len(".pgm")]
        for suf in ordered:
            if stem.endswith(suf) and len(stem) > len(suf):
                groups.setdefault(stem[: -len(suf)], {})[suf] = directory / entry
                break
    complete, unmatched = [], []
    for ident in sorted(groups):
        if len(groups[ident]) == len(suffixes):
            complete.append((ident, groups[ident]))
        else:
            unmatched.extend(sorted(str(p) for p in groups[ident].values()))
    return complete, unmatched


def load_pairs(directory, ir_suffix="_ir", vis_suffix="_vis"):
    """Registered pairs sorted by identifier, plus the list of orphan files."""
    complete, unmatched = find_groups(directory, (ir_suffix, vis_suffix))
    pairs = [
        ImagePair(load_gray_image(paths[ir_suffix]), load_gray_image(paths[vis_suffix]), ident)
        for ident, paths in complete
    ]
    for p in unmatched:
        logger.warning("unmatched file %s", p)
    return pairs, unmatched


@dataclass
class PatchSet:
    side: int
    seed: int
    patches: list = field(default_factory=list)  # (infrared, visible) arrays, (side, side)
    sources: list = field(default_factory=list)  # identifier per patch
    corners: list = field(default_factory=list)  # (row, col) per patch

    def __len__(self):
        return len(self.patches)


def sample_patches(pairs, side, count, seed):
    """Uniformly placed square patches, same corner in both images of a pair."""
    if side < 1:
        raise ConfigError(f"patch side must be >= 1, got {side}")
    if count < 0:
        raise ConfigError(f"patch count must be >= 0, got {count}")
    out = PatchSet(side, seed)
    if count == 0:
        return out
    if not pairs:
        raise DataError("no pairs to sample patches from")
    smallest = min(pairs, key=lambda p: min(p.infrared.pixels.shape))
    if side > min(smallest.infrared.pixels.shape):
        raise ConfigError(
            f"patch side {side} exceeds image {smallest.identifier!r} of shape {smallest.infrared.pixels.shape}; "
            "use patch = 0 to train on full images"
        )
    rng = np.random.default_rng(seed)
    for _ in range(count):
        pair = pairs[int(rng.integers(len(pairs)))]
        h, w = pair.infrared.pixels.shape
        r = int(rng.integers(h - side + 1))
        c = int(rng.integers(w - side + 1))
        out.patches.append(
            (
                pair.infrared.as_unit()[r : r + side, c : c + side].copy(),
                pair.visible.as_unit()[r : r + side, c : c + side].copy(),
            )
        )
        out.sources.append(pair.identifier)
        out.corners.append((r, c))
    return out
