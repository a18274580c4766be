"""Regenerate the six scripted challenging layouts under src/pushgrasp/layouts/.

Each layout hides a target under at least one occluder and hems it in with
neighbours so that a direct grasp is blocked until something is pushed away.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from pushgrasp.perception import occluded_rate
from pushgrasp.sim import DEFAULT_SHAPES, Pose, add_object, empty_scene, validate_scene

SQUARE, BAR, LONG, THIN, TRI, HEX, OCT = DEFAULT_SHAPES
C = 32.0
OUT = Path(__file__).resolve().parents[1] / "src" / "pushgrasp" / "layouts"

# (shape, x, y, theta, color); the first entry is the target, later entries sit higher.
LAYOUTS = {
    1: [
        (SQUARE, C, C, 0.0, 1),
        (LONG, C - 6.5, C, 0.0, 2), (LONG, C + 6.5, C, 0.0, 3),
        (LONG, C, C - 6.5, math.pi / 2, 4), (LONG, C, C + 6.5, math.pi / 2, 5),
        (LONG, C, C - 1.5, math.pi / 2, 6),
    ],
    2: [
        (BAR, C, C, 0.0, 1),
        (THIN, C - 4.5, C, 0.0, 2), (THIN, C + 4.5, C, 0.0, 3),
        (TRI, C, C - 6.0, 0.0, 4), (TRI, C, C + 6.0, math.pi, 5),
        (HEX, C + 1.0, C + 1.5, 0.0, 6),
    ],
    3: [
        (OCT, C, C, 0.0, 1),
        *[(SQUARE, C + 6.5 * math.cos(a), C + 6.5 * math.sin(a), a, 2 + i % 5)
          for i, a in enumerate(k * math.pi / 3 for k in range(6))],
        (SQUARE, C + 1.5, C + 1.0, math.pi / 4, 7),
    ],
    4: [
        (TRI, C, C, 0.0, 1),
        (LONG, C - 5.0, C, 0.0, 2), (LONG, C, C - 5.0, math.pi / 2, 3),
        (SQUARE, C + 5.5, C + 4.0, 0.0, 4),
        (THIN, C + 0.5, C + 0.5, math.pi / 4, 5),
    ],
    5: [
        (LONG, C, C, 0.0, 1),
        (LONG, C - 4.5, C, 0.0, 2), (LONG, C + 4.5, C, 0.0, 3),
        (BAR, C, C - 7.5, math.pi / 2, 4), (BAR, C, C + 7.5, math.pi / 2, 5),
        (SQUARE, C, C - 3.0, 0.0, 6), (SQUARE, C, C + 3.0, 0.0, 7),
    ],
    6: [
        (SQUARE, C, C, 0.0, 1),
        *[(SQUARE, C + 5.0 * dx, C + 5.0 * dy, 0.0, 2 + (dx + 1 + 3 * (dy + 1)) % 6)
          for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)],
        (SQUARE, C + 1.0, C - 1.0, math.pi / 4, 7),
    ],
}


def build(layout_id: int) -> dict:
    scene = empty_scene(64)
    for shape, x, y, theta, color in LAYOUTS[layout_id]:
        scene = add_object(scene, shape, Pose(x, y, theta), color_id=color)
    validate_scene(scene)
    target = scene.ids[0]
    data = scene.to_dict()
    data["target_id"] = target
    return data, occluded_rate(scene, target)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for k in LAYOUTS:
        data, o = build(k)
        (OUT / f"layout{k}.json").write_text(json.dumps(data, indent=1) + "\n")
        print(f"layout{k}: {len(data['objects'])} objects, target occlusion {o:.3f}")


if __name__ == "__main__":
    main()
