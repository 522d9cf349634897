"""Regenerate the bundled canonical data files under src/miencap/data/.

The mean face is a schematic frontal layout on the standard 49-point
ordering (brows 0-9, nose 10-18, eyes 19-30, outer mouth 31-42, inner
mouth 43-48), y up, centered so the centroid sits exactly at the origin.
"""

import json
from pathlib import Path

import numpy as np

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "miencap" / "data"

POINTS = [
    # left eyebrow 0-4
    (-45, 33), (-38, 37), (-30, 39), (-22, 37), (-15, 33),
    # right eyebrow 5-9
    (15, 33), (22, 37), (30, 39), (38, 37), (45, 33),
    # nose bridge 10-13
    (0, 25), (0, 17), (0, 9), (0, 2),
    # nose base 14-18 (14 leftmost, 18 rightmost)
    (-12, -2), (-6, -4), (0, -5), (6, -4), (12, -2),
    # left eye 19-24: outer corner, top x2, inner corner, bottom x2
    (-40, 20), (-34, 24), (-26, 24), (-20, 20), (-26, 16), (-34, 16),
    # right eye 25-30: inner corner, top x2, outer corner, bottom x2
    (20, 20), (26, 24), (34, 24), (40, 20), (34, 16), (26, 16),
    # outer mouth 31-42: left corner, upper arc, right corner, lower arc
    (-24, -25), (-16, -21), (-8, -19), (0, -18), (8, -19), (16, -21),
    (24, -25), (16, -29), (8, -31), (0, -32), (-8, -31), (-16, -29),
    # inner mouth 43-48: upper arc, lower arc
    (-12, -24), (0, -23), (12, -24), (12, -26), (0, -27), (-12, -26),
]

SEMANTIC_INDICES = {
    "mouth_left": 31,
    "mouth_right": 37,
    "upper_lip": 44,
    "lower_lip": 47,
    "nose_left": 14,
    "nose_right": 18,
    "left_brow_top": 2,
    "right_brow_top": 7,
    "left_eye_top": 20,
    "left_eye_bottom": 24,
    "right_eye_top": 27,
    "right_eye_bottom": 29,
    "left_lower_eyelid": 23,
    "right_lower_eyelid": 30,
}

# 52 tracker-style FACS channel names (the common AR face-capture set).
CHANNELS = [
    "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft",
    "browOuterUpRight", "cheekPuff", "cheekSquintLeft", "cheekSquintRight",
    "eyeBlinkLeft", "eyeBlinkRight", "eyeLookDownLeft", "eyeLookDownRight",
    "eyeLookInLeft", "eyeLookInRight", "eyeLookOutLeft", "eyeLookOutRight",
    "eyeLookUpLeft", "eyeLookUpRight", "eyeSquintLeft", "eyeSquintRight",
    "eyeWideLeft", "eyeWideRight", "jawForward", "jawLeft", "jawOpen",
    "jawRight", "mouthClose", "mouthDimpleLeft", "mouthDimpleRight",
    "mouthFrownLeft", "mouthFrownRight", "mouthFunnel", "mouthLeft",
    "mouthLowerDownLeft", "mouthLowerDownRight", "mouthPressLeft",
    "mouthPressRight", "mouthPucker", "mouthRight", "mouthRollLower",
    "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthSmileLeft",
    "mouthSmileRight", "mouthStretchLeft", "mouthStretchRight",
    "mouthUpperUpLeft", "mouthUpperUpRight", "noseSneerLeft",
    "noseSneerRight", "tongueOut",
]


def main():
    DATA_DIR.mkdir(parents=True, exist_ok=True)

    pts = np.array(POINTS, dtype=np.float64)
    assert pts.shape == (49, 2)
    pts -= pts.mean(axis=0)
    # Second pass kills the residual rounding drift so the invariant is exact.
    pts -= pts.mean(axis=0)
    mean_face = {"version": 1, "points": [[float(x), float(y)] for x, y in pts]}
    (DATA_DIR / "mean_face.json").write_text(json.dumps(mean_face, indent=1) + "\n")

    smap = {"version": 1, "indices": SEMANTIC_INDICES}
    (DATA_DIR / "semantic_map.json").write_text(json.dumps(smap, indent=1) + "\n")

    assert len(CHANNELS) == 52 and len(set(CHANNELS)) == 52
    chan = {"version": 1, "channels": CHANNELS}
    (DATA_DIR / "channels_52.json").write_text(json.dumps(chan, indent=1) + "\n")

    print(f"wrote canonical data to {DATA_DIR}")


if __name__ == "__main__":
    main()
