"""Sequence directories: numbered PGM/PPM frames plus ``groundtruth.txt``."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .backbone import ImagePatch, load_image
from .evaluation import read_annotations, write_annotations
from .geometry import Box
from .pnm import write_pnm

FRAME_SUFFIXES = (".pgm", ".ppm", ".pnm")
GT_NAME = "groundtruth.txt"


def frame_name(t: int) -> str:
    return f"{t + 1:05d}.pgm"


def write_sequence(out_dir, frames: Sequence[ImagePatch], gt: Sequence[Box] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        write_pnm(out / frame_name(t), f.to_uint8())
    if gt is not None:
        write_annotations(out / GT_NAME, gt)
    return out


def frame_paths(seq_dir) -> list[Path]:
    paths = sorted(p for p in Path(seq_dir).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no PGM/PPM frames in {seq_dir}")
    return paths


def load_frames(seq_dir) -> list[ImagePatch]:
    return [load_image(p) for p in frame_paths(seq_dir)]


def load_groundtruth(seq_dir) -> list[Box]:
    return read_annotations(Path(seq_dir) / GT_NAME)
