"""Synthetic moving-square video task, tensor file IO, and view extraction.

The task renders a bright square translating at constant speed in one of four
directions. Every direction places the same square at the same set of offsets,
only the frame order differs, so a clip's class is decidable from temporal
order alone: reversing a "left" clip produces a legitimate "right" clip and
vice versa. A model that never mixes frames cannot beat chance between a
direction and its reverse.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ShapeError

CLASSES = ("left", "right", "up", "down")


@dataclass
class SyntheticVideoTask:
    frames: int = 8
    height: int = 32
    width: int = 32
    object_size: int = 8
    speed: int = 2
    noise_std: float = 0.05
    object_intensity: float = 1.0

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")
        if self.object_size < 1:
            raise ConfigError(f"object_size must be positive, got {self.object_size}")
        if self.speed < 1:
            raise ConfigError(f"speed must be positive, got {self.speed}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        travel = self.speed * (self.frames - 1) + self.object_size
        if travel > min(self.height, self.width):
            raise ConfigError(
                f"motion span {travel} exceeds the {self.height}x{self.width} frame")

    @property
    def num_classes(self) -> int:
        return len(CLASSES)


def render_clip(task: SyntheticVideoTask, positions: np.ndarray) -> np.ndarray:
    """Draw the square at the given per-frame (row, col) corners. No noise."""
    positions = np.asarray(positions)
    if positions.shape != (task.frames, 2):
        raise ShapeError(f"positions must be ({task.frames}, 2), got {positions.shape}")
    clip = np.zeros((task.frames, task.height, task.width, 1), dtype=np.float64)
    s = task.object_size
    for t, (r, c) in enumerate(positions):
        if r < 0 or c < 0 or r + s > task.height or c + s > task.width:
            raise ConfigError(f"object leaves the frame at t={t}: corner ({r}, {c})")
        clip[t, r:r + s, c:c + s, 0] = task.object_intensity
    return clip


def class_positions(task: SyntheticVideoTask, label: int, start: tuple) -> np.ndarray:
    """Per-frame corners for a clip of the given class starting at ``start``."""
    steps = np.arange(task.frames) * task.speed
    r0, c0 = start
    rows = np.full(task.frames, r0)
    cols = np.full(task.frames, c0)
    name = CLASSES[label]
    if name == "left":
        cols = c0 - steps
    elif name == "right":
        cols = c0 + steps
    elif name == "up":
        rows = r0 - steps
    else:
        rows = r0 + steps
    return np.stack([rows, cols], axis=1)


def sample_start(task: SyntheticVideoTask, label: int, rng: np.random.Generator) -> tuple:
    travel = task.speed * (task.frames - 1)
    s = task.object_size
    name = CLASSES[label]
    if name == "left":
        r = rng.integers(0, task.height - s + 1)
        c = rng.integers(travel, task.width - s + 1)
    elif name == "right":
        r = rng.integers(0, task.height - s + 1)
        c = rng.integers(0, task.width - s - travel + 1)
    elif name == "up":
        r = rng.integers(travel, task.height - s + 1)
        c = rng.integers(0, task.width - s + 1)
    else:
        r = rng.integers(0, task.height - s - travel + 1)
        c = rng.integers(0, task.width - s + 1)
    return int(r), int(c)


def generate_clip(task: SyntheticVideoTask, label: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One noisy clip of the given class, shape (T, H, W, 1) float64."""
    if not 0 <= label < len(CLASSES):
        raise ConfigError(f"label must be in [0, {len(CLASSES)}), got {label}")
    clip = render_clip(task, class_positions(task, label, sample_start(task, label, rng)))
    if task.noise_std > 0:
        clip = clip + rng.normal(0.0, task.noise_std, size=clip.shape)
    return clip


def make_dataset(task: SyntheticVideoTask, count: int, rng: np.random.Generator):
    """Balanced shuffled dataset: (count, T, H, W, 1) clips and int labels."""
    if count < 1:
        raise ConfigError(f"dataset size must be positive, got {count}")
    labels = np.arange(count) % len(CLASSES)
    labels = labels[rng.permutation(count)]
    clips = np.empty((count, task.frames, task.height, task.width, 1), dtype=np.float64)
    for i, label in enumerate(labels):
        clips[i] = generate_clip(task, int(label), rng)
    return clips, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# tensor files: `shape: d0 d1 ...` header line + little-endian float64 payload

def save_tensor(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        dims = " ".join(str(d) for d in arr.shape)
        fh.write(f"shape: {dims}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        if not header.startswith(b"shape:"):
            raise OSError(f"{path}: missing tensor shape header")
        try:
            shape = tuple(int(d) for d in header[len(b"shape:"):].split())
        except ValueError:
            raise OSError(f"{path}: malformed tensor shape header")
        payload = fh.read()
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 8 * count:
        raise OSError(
            f"{path}: payload holds {len(payload)} bytes, shape {shape} needs {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_clip_dataset(directory, clips: np.ndarray, labels: np.ndarray) -> None:
    """Write one tensor file per clip plus a labels.txt index."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, (clip, label) in enumerate(zip(clips, labels)):
        name = f"clip{i:05d}.t64"
        save_tensor(os.path.join(directory, name), clip)
        lines.append(f"{name} {int(label)}\n")
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        fh.writelines(lines)


def load_clip_dataset(directory):
    """Read a directory written by save_clip_dataset (or hand-assembled)."""
    index = os.path.join(directory, "labels.txt")
    clips = []
    labels = []
    with open(index) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise OSError(f"{index}:{line_no}: expected '<file> <label>'")
            clips.append(load_tensor(os.path.join(directory, parts[0])))
            labels.append(int(parts[1]))
    if not clips:
        raise OSError(f"{index}: no clips listed")
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise ShapeError(f"clips disagree on shape: {sorted(shapes)}")
    return np.stack(clips), np.asarray(labels, dtype=np.int64)


def extract_views(clip: np.ndarray, target: tuple, n_clips: int, n_crops: int) -> np.ndarray:
    """Cut (n_clips x n_crops) views of shape ``target`` = (T, H, W) from a clip.

    Temporal windows start at evenly spaced offsets; spatial crops cycle
    through left/top, center, and right/bottom placements. A clip already at
    the target size yields identical views.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ShapeError(f"expected clip (T,H,W,C), got {clip.shape}")
    t_need, h_need, w_need = target
    t_have, h_have, w_have, _ = clip.shape
    if t_have < t_need or h_have < h_need or w_have < w_need:
        raise ConfigError(
            f"clip {clip.shape[:3]} is smaller than the requested view {target}")
    if n_clips < 1 or n_crops < 1:
        raise ConfigError("view counts must be positive")
    t_starts = np.linspace(0, t_have - t_need, n_clips).round().astype(int)
    anchors = []
    for j in range(n_crops):
        frac = 0.5 if n_crops == 1 else j / (n_crops - 1)
        anchors.append((int(round(frac * (h_have - h_need))),
                        int(round(frac * (w_have - w_need)))))
    views = []
    for ts in t_starts:
        for (ra, ca) in anchors:
            views.append(clip[ts:ts + t_need, ra:ra + h_need, ca:ca + w_need, :])
    return np.stack(views)
