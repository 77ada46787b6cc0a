"""Binary PPM (P6) rendering of class maps."""

from __future__ import annotations

import os

import numpy as np

# index 0 (unlabeled / border) is black; classes beyond 15 wrap around
PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 212),
        (0, 128, 128),
        (220, 190, 255),
        (170, 110, 40),
        (255, 250, 200),
        (128, 0, 0),
    ],
    dtype=np.uint8,
)


def colorize(class_map: np.ndarray) -> np.ndarray:
    class_map = np.asarray(class_map, dtype=np.int64)
    idx = np.where(class_map > 0, (class_map - 1) % (len(PALETTE) - 1) + 1, 0)
    return PALETTE[idx]


def write_ppm(path: str | os.PathLike, class_map: np.ndarray) -> None:
    rgb = colorize(class_map)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` back into an H x W x 3 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, offset=pos + 1, count=w * h * 3).reshape(h, w, 3)
