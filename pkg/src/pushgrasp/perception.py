"""Heightmap rendering and exact occlusion measurements.

The simulator knows every footprint, so the amodal mask of the target is read
off directly instead of being predicted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .sim import Scene

BORDER_RADIUS = 10

PALETTE = np.array(
    [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class HeightmapStack:
    color: np.ndarray  # (H, W, 3) uint8, 0 where empty
    depth: np.ndarray  # (H, W) float32, number of objects covering each cell
    amodal: np.ndarray  # (H, W) bool, full footprint of the target

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def as_input(self) -> np.ndarray:
        """Stack into the 5-channel ``(5, H, W)`` float32 network input."""
        return np.concatenate(
            [
                np.moveaxis(self.color, -1, 0).astype(np.float32) / 255.0,
                self.depth[None].astype(np.float32),
                self.amodal[None].astype(np.float32),
            ]
        )


@dataclass(frozen=True)
class OcclusionReport:
    full_mask: np.ndarray
    visible_mask: np.ndarray
    border_mask: np.ndarray
    o: float
    o_b: int
    t_b: int
    t_m: int
    a_b: float
    a_n: float


def _require_live(scene: Scene, target_id: int) -> None:
    if target_id not in scene:
        raise KeyError(f"target {target_id} is not in the scene")


def render(scene: Scene, target_id: int) -> HeightmapStack:
    _require_live(scene, target_id)
    depth = np.zeros((scene.height, scene.width), dtype=np.float32)
    for obj_id in scene.stack_order:
        depth += scene.footprint(obj_id)
    colors = {spec.id: PALETTE[spec.color_id % len(PALETTE)] for spec, _ in scene.objects}
    color = np.zeros((scene.height, scene.width, 3), dtype=np.uint8)
    for obj_id in scene.stack_order:
        color[scene.footprint(obj_id)] = colors[obj_id]
    return HeightmapStack(color=color, depth=depth, amodal=scene.footprint(target_id).copy())


def border_strip(full_mask: np.ndarray, radius: int = BORDER_RADIUS) -> np.ndarray:
    """Square (Chebyshev) dilation ring of width ``radius`` around ``full_mask``."""
    size = 2 * radius + 1
    grown = ndimage.binary_dilation(full_mask, structure=np.ones((size, size), dtype=bool))
    return grown & ~full_mask


def occlusion_report(
    scene: Scene,
    target_id: int,
    border_any_overlap: bool = False,
    radius: int = BORDER_RADIUS,
) -> OcclusionReport:
    _require_live(scene, target_id)
    full = scene.footprint(target_id)
    above = scene.covered_above(target_id)
    visible = full & ~above
    border = border_strip(full, radius)
    if border_any_overlap:
        blockers = np.zeros_like(full)
        for obj_id in scene.stack_order:
            if obj_id != target_id:
                blockers |= scene.footprint(obj_id)
    else:
        blockers = above
    t_m = int(full.sum())
    t_b = int(border.sum())
    o_b = int((border & blockers).sum())
    return OcclusionReport(
        full_mask=full.copy(),
        visible_mask=visible,
        border_mask=border,
        o=int((full & above).sum()) / t_m,
        o_b=o_b,
        t_b=t_b,
        t_m=t_m,
        a_b=o_b / t_b if t_b else 0.0,
        a_n=o_b / t_m,
    )


def occluded_rate(scene: Scene, target_id: int) -> float:
    _require_live(scene, target_id)
    full = scene.footprint(target_id)
    return int((full & scene.covered_above(target_id)).sum()) / int(full.sum())


def most_occluded_target(scene: Scene, candidate_ids: Iterable[int]) -> int:
    candidates = sorted(set(candidate_ids))
    if not candidates:
        raise ValueError("no candidate targets")
    best, best_o = candidates[0], -1.0
    for obj_id in candidates:
        o = occluded_rate(scene, obj_id)
        if o > best_o:
            best, best_o = obj_id, o
    return best


# -- raster dumps --------------------------------------------------------


def write_pgm(path: Path, raster: np.ndarray) -> None:
    data = np.asarray(raster)
    if data.dtype == bool:
        data = data.astype(np.uint8) * 255
    data = np.clip(data, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path: Path, raster: np.ndarray) -> None:
    data = np.asarray(raster, dtype=np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = raw.split(maxsplit=4)
    magic, w, h, _maxval, payload = fields[0], int(fields[1]), int(fields[2]), fields[3], fields[4]
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(payload[: w * h * channels], dtype=np.uint8)
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def dump_stack(stack: HeightmapStack, out_dir: Path, trial: int | str, step: int | str) -> list[Path]:
    """Write ``<trial>_<step>_{color,depth,amodal}`` rasters; depth is scaled by 32 per object."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{trial}_{step}"
    paths = [out_dir / f"{stem}_color.ppm", out_dir / f"{stem}_depth.pgm", out_dir / f"{stem}_amodal.pgm"]
    write_ppm(paths[0], stack.color)
    write_pgm(paths[1], stack.depth * 32)
    write_pgm(paths[2], stack.amodal)
    return paths
