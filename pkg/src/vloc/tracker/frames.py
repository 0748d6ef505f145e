"""Raster frame container and PGM/PNG directory input."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.csv"


@dataclass
class RasterFrame:
    frame_id: int
    timestamp: float
    pixels: np.ndarray  # (height, width) uint8, row-major

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D grayscale array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def read_frame_dir(directory) -> list[RasterFrame]:
    """Load frames listed in ``manifest.csv`` (columns frame_id,timestamp,filename).

    Without a manifest, every .pgm/.png file is loaded in name order with
    frame ids 0..n-1 and timestamps at 30 Hz.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    frames = []
    if manifest.exists():
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                frames.append(RasterFrame(int(row["frame_id"]), float(row["timestamp"]),
                                          read_image(directory / row["filename"])))
    else:
        files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".png"))
        for i, p in enumerate(files):
            frames.append(RasterFrame(i, i / 30.0, read_image(p)))
    frames.sort(key=lambda f: f.frame_id)
    ids = [f.frame_id for f in frames]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError("frame ids must be strictly increasing")
    return frames


def write_frame_dir(directory, frames: list[RasterFrame], ext: str = ".png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "timestamp", "filename"])
        for f in frames:
            name = f"frame_{f.frame_id:06d}{ext}"
            write_image(directory / name, f.pixels)
            w.writerow([f.frame_id, repr(f.timestamp), name])
