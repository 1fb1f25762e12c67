"""Run-length text encoding of boolean masks and portable pixmap dumps.

Encoded mask: ``"<height> <width> n0 n1 n2 ..."`` where the counts are
alternating runs of False/True over the row-major raster, starting with a
(possibly zero) False run. A mask file is ``RLE <height> <width>`` on the
first line and the counts on the second.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def encode(mask: np.ndarray) -> str:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return " ".join(map(str, [h, w] + runs))


def decode(text: str) -> np.ndarray:
    nums = [int(t) for t in text.split()]
    if len(nums) < 2:
        raise ValueError("RLE string lacks canvas dimensions")
    h, w, runs = nums[0], nums[1], nums[2:]
    if sum(runs) != h * w:
        raise ValueError(f"RLE runs cover {sum(runs)} pixels, canvas has {h * w}")
    vals = np.zeros(len(runs), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, runs).reshape(h, w)


def write_mask(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    counts = encode(mask).split(" ", 2)[2] if mask.size else ""
    Path(path).write_text(f"RLE {h} {w}\n{counts}\n")


def read_mask(path) -> np.ndarray:
    head, _, body = Path(path).read_text().partition("\n")
    tag, h, w = head.split()
    if tag != "RLE":
        raise ValueError(f"{path}: not an RLE mask file")
    return decode(f"{h} {w} {body}")


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, grey: np.ndarray) -> None:
    h, w = grey.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(grey, dtype=np.uint8).tobytes())
