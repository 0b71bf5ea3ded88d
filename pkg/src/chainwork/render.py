"""Binary PPM (P6) frames with particles splatted as filled discs."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

__all__ = ["PALETTE", "BACKGROUND", "render_frame", "write_ppm", "read_ppm", "render_trajectory", "color_centroid"]

BACKGROUND = (255, 255, 255)
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)


def _colors(group, actuation=None):
    g = np.asarray(group, dtype=np.int64)
    c = PALETTE[g % len(PALETTE)].astype(float)
    if actuation is not None:
        # blend toward red (positive) or blue (negative) by |a|
        a = np.clip(np.asarray(actuation, dtype=float), -1.0, 1.0)[:, None]
        red, blue = np.array([220.0, 20.0, 20.0]), np.array([20.0, 20.0, 220.0])
        c = np.where(a > 0, c + a * (red - c), c - a * (blue - c))
    return np.rint(c).astype(np.uint8)


def render_frame(x, group=None, domain=(1.0, 1.0), size=(256, 256), radius=1.5, actuation=None,
                 background=BACKGROUND) -> np.ndarray:
    """Image of shape ``(H, W, 3)``; ``y`` points up, later particles paint over earlier ones."""
    W, H = size
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    group = np.zeros(len(x), dtype=np.int64) if group is None else np.asarray(group)
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = background
    if len(x) == 0:
        return img
    col = _colors(group, actuation)
    px = x[:, 0] / domain[0] * W
    py = (1.0 - x[:, 1] / domain[1]) * H
    r = int(np.ceil(radius))
    off = np.arange(-r, r + 1)
    for cx, cy, c in zip(px, py, col):
        ix = np.floor(cx).astype(int) + off
        iy = np.floor(cy).astype(int) + off
        ix = ix[(ix >= 0) & (ix < W)]
        iy = iy[(iy >= 0) & (iy < H)]
        if ix.size == 0 or iy.size == 0:
            continue
        # pixel centres within the disc
        inside = ((ix[None, :] + 0.5 - cx) ** 2 + (iy[:, None] + 0.5 - cy) ** 2) <= radius * radius
        sub = img[iy[0]:iy[-1] + 1, ix[0]:ix[-1] + 1]
        sub[inside] = c
    return img


def write_ppm(path, img) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3).copy()


def render_trajectory(traj, out_dir, domain=(1.0, 1.0), size=(256, 256), radius=1.5, every=1,
                      start=0, stop=None, prefix="frame") -> list:
    """Write one PPM per selected frame; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = list(range(traj.n_frames))[start:stop:max(1, every)]
    if not frames:
        warnings.warn("no frames in the selected range", UserWarning, stacklevel=2)
        return []
    paths = []
    for k in frames:
        p = out / f"{prefix}_{int(traj.steps[k]):06d}.ppm"
        write_ppm(p, render_frame(traj.x[k], traj.group, domain, size, radius))
        paths.append(p)
    return paths


def color_centroid(img, color) -> tuple[float, float] | None:
    """Mean ``(col, row)`` of pixels exactly matching ``color``; None when absent."""
    mk = np.all(img == np.asarray(color, dtype=np.uint8), axis=-1)
    if not mk.any():
        return None
    rows, cols = np.nonzero(mk)
    return float(cols.mean()), float(rows.mean())
