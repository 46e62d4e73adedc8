"""Writes the synthetic reference trajectories used by the scenarios.

Usage: python3 scripts/make_fixtures.py [OUT_DIR]
"""

import math
import sys
from pathlib import Path

DT = 0.05
DURATION = 40.0


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return [[1, 0, 0], [0, c, -s], [0, s, c]]


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return [[c, 0, s], [0, 1, 0], [-s, 0, c]]


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return [[c, -s, 0], [s, c, 0], [0, 0, 1]]


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)] for i in range(3)]


def bump(t, period):
    """0 → 1 → 0 over one period, smooth."""
    return 0.5 * (1.0 - math.cos(2.0 * math.pi * t / period))


def header():
    h = ["t", "base_x", "base_y", "base_yaw", "torso_1", "torso_2", "torso_3", "torso_4"]
    for side, grip in (("eeL", "gripL"), ("eeR", "gripR")):
        h += [f"{side}_{c}" for c in ("px", "py", "pz")]
        h += [f"{side}_r{r}{c}" for r in range(1, 4) for c in range(1, 4)]
        h.append(grip)
    return h + ["head_1", "head_2"]


def row(t, base, torso, left, grip_l, right, grip_r, head):
    out = [t, *base, *torso]
    for (p, r), g in ((left, grip_l), (right, grip_r)):
        out += list(p)
        out += [r[i][j] for i in range(3) for j in range(3)]
        out.append(g)
    return out + list(head)


def tabletop_reach(t):
    w = 2.0 * math.pi / 10.0
    s = math.sin(w * t)
    b = bump(t, 10.0)
    left_p = (0.65 + 0.12 * s, 0.22 + 0.10 * b, 1.40 - 0.25 * b)
    left_r = matmul(rot_y(0.35 * b), rot_z(0.2 * s))
    right_p = (0.65 + 0.04 * math.sin(0.5 * w * t), -0.22, 1.40 - 0.05 * bump(t, 20.0))
    right_r = rot_x(-0.15 * math.sin(0.5 * w * t))
    torso = (0.05 * s, 0.1 * b, -0.05 * b, 0.1 * math.sin(0.5 * w * t))
    grip_l = bump(t, 12.0)
    grip_r = 0.2
    head = (0.2 * math.sin(2.0 * math.pi * t / 15.0), 0.3 + 0.1 * b)
    return row(t, (0.0, 0.0, 0.0), torso, (left_p, left_r), grip_l, (right_p, right_r), grip_r, head)


def ground_pick_squat(t):
    b = bump(t, 14.0)
    drift = bump(t, 20.0)
    base = (0.3 * drift, 0.05 * math.sin(2.0 * math.pi * t / 20.0), 0.2 * math.sin(2.0 * math.pi * t / 20.0))
    torso = (0.6 * b, -1.0 * b, 0.5 * b, 0.1 * math.sin(2.0 * math.pi * t / 14.0))
    pitch = rot_y(0.8 * b)
    left_p = (0.65 + 0.1 * b, 0.20, 1.40 - 0.85 * b)
    right_p = (0.65 + 0.1 * b, -0.20, 1.40 - 0.85 * b)
    grip = bump(t, 7.0)
    head = (0.0, 0.3 + 0.4 * b)
    return row(t, base, torso, (left_p, pitch), grip, (right_p, pitch), grip, head)


def write(path, comment, fn):
    n = int(round(DURATION / DT))
    with open(path, "w") as f:
        f.write(f"# {comment}\n")
        f.write(",".join(header()) + "\n")
        for i in range(n + 1):
            t = round(i * DT, 10)
            f.write(",".join(repr(float(v)) for v in fn(t)) + "\n")


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "crates/core/fixtures/reference"
    out.mkdir(parents=True, exist_ok=True)
    write(out / "tabletop_reach.csv", "synthetic tabletop reach arc, fixed base", tabletop_reach)
    write(out / "ground_pick_squat.csv", "synthetic ground-pick squat with base drift", ground_pick_squat)


if __name__ == "__main__":
    main()
