"""Heatmap rendering to binary PGM (P5) and PPM (P6).

Maps are min-max normalized (a constant map renders black), each patch is
upscaled nearest-neighbor to ``cell_pixels`` square, and color output goes
through a fixed five-anchor viridis-like palette.  An optional base image
is blended in at alpha 0.5.
"""

from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from .compressor import grid_of

# viridis anchors at 0, .25, .5, .75, 1
PALETTE = np.array(
    [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ],
    dtype=np.float64,
)
OVERLAY_ALPHA = 0.5
CELL_PIXELS = 8


def normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def to_bytes(unit) -> np.ndarray:
    """Map [0, 1] to 0..255 by round-half-up."""
    return np.floor(np.clip(unit, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def colorize(unit) -> np.ndarray:
    unit = np.clip(np.asarray(unit, dtype=np.float64), 0.0, 1.0)
    pos = unit * (len(PALETTE) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(PALETTE) - 2)
    frac = (pos - lo)[..., None]
    rgb = PALETTE[lo] * (1.0 - frac) + PALETTE[lo + 1] * frac
    return np.floor(rgb + 0.5).astype(np.uint8)


def patch_grid(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    side = grid_of(v.size)
    return normalize(v).reshape(side, side)


def upscale(grid, cell_pixels: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, cell_pixels, axis=0), cell_pixels, axis=1)


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse the headers written by :func:`encode_pgm` / :func:`encode_ppm`."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError("unsupported PNM header")
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(rest, dtype=np.uint8).reshape(h, w, channels)
    return arr[..., 0] if channels == 1 else arr


def heatmap_image(values, cell_pixels: int = CELL_PIXELS, color: bool = False, base=None) -> np.ndarray:
    """Pixel array for a 1 x N map: ``(H, W)`` gray or ``(H, W, 3)`` color."""
    grid = upscale(patch_grid(values), cell_pixels)
    if not color and base is None:
        return to_bytes(grid)
    rgb = colorize(grid).astype(np.float64)
    if base is not None:
        base = np.asarray(base, dtype=np.float64)
        if base.ndim == 2:
            base = np.repeat(base[..., None], 3, axis=-1)
        base = upscale(np.clip(base, 0.0, 1.0), cell_pixels) * 255.0
        if base.shape != rgb.shape:
            raise ValueError(f"base image grid {base.shape[:2]} does not match the map grid {rgb.shape[:2]}")
        rgb = OVERLAY_ALPHA * rgb + (1.0 - OVERLAY_ALPHA) * base
        rgb = np.floor(rgb + 0.5)
    return rgb.astype(np.uint8)


def write_image(pixels: np.ndarray, path) -> Path:
    path = Path(path)
    data = encode_ppm(pixels) if pixels.ndim == 3 else encode_pgm(pixels)
    path.write_bytes(data)
    return path


def render_patch_map(values, path, cell_pixels: int = CELL_PIXELS, color: bool | None = None, base=None) -> Path:
    """Write one map; color defaults to PPM when the path ends in ``.ppm``."""
    path = Path(path)
    if color is None:
        color = path.suffix.lower() == ".ppm"
    return write_image(heatmap_image(values, cell_pixels, color, base), path)


def render_query_grid(query_to_patch, out_dir, cell_pixels: int = CELL_PIXELS, color: bool = False) -> List[Path]:
    """One image per query row plus a ``sqrt(M) x sqrt(M)`` contact sheet without gaps.

    Returns the tile paths followed by the contact-sheet path.
    """
    q2p = np.asarray(query_to_patch, dtype=np.float64)
    if q2p.ndim != 2:
        raise ValueError("query_to_patch must be an M x N matrix")
    m_side = grid_of(q2p.shape[0])
    grid_of(q2p.shape[1])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".ppm" if color else ".pgm"
    tiles, paths = [], []
    for m, row in enumerate(q2p):
        pixels = heatmap_image(row, cell_pixels, color)
        tiles.append(pixels)
        paths.append(write_image(pixels, out_dir / f"query_{m:03d}{ext}"))
    rows = [np.concatenate(tiles[r * m_side : (r + 1) * m_side], axis=1) for r in range(m_side)]
    paths.append(write_image(np.concatenate(rows, axis=0), out_dir / f"contact_sheet{ext}"))
    return paths
