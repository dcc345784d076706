"""Generative mode: gradient ascent on input features to maximize the
predicted dual variable, turning uninformative samples into informative
ones. Trajectories can be exported as PGM image grids plus a CSV score
trace for visual inspection.
"""
from __future__ import annotations

import csv as csvlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import ModelParams, ShapeError


@dataclass
class AscentConfig:
    step_size: float = 0.05
    n_steps: int = 200
    clip_range: tuple[float, float] = (0.0, 1.0)
    snapshot_every: int = 10

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        lo, hi = self.clip_range
        if not lo < hi:
            raise ValueError("clip range must satisfy lo < hi")
        if self.n_steps < 0 or self.snapshot_every < 1:
            raise ValueError("n_steps must be >= 0 and snapshot_every >= 1")


@dataclass
class AscentTrajectory:
    steps: list[int] = field(default_factory=list)
    xs: list[np.ndarray] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    stalled: bool = False

    @property
    def initial_score(self) -> float:
        return self.scores[0]

    @property
    def final_score(self) -> float:
        return self.scores[-1]

    @property
    def final_x(self) -> np.ndarray:
        return self.xs[-1]


def input_gradient(params: ModelParams, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Predicted dual of a single input and its exact gradient w.r.t. x.

    The score path is backbone then dual head; the prediction head plays no
    part, so its parameters cannot influence the result.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.input_dim:
        raise ShapeError(f"input has {x.shape[0]} features, model expects {params.input_dim}")
    batch = x[None, :]
    act = params.activation
    emb, bcache = numerics.stack_forward(params.backbone, batch, act, act)
    score, dcache = numerics.stack_forward(params.dual_head, emb, "relu", "softplus")
    _, g_emb = numerics.stack_backward(params.dual_head, dcache, np.ones((1, 1)))
    _, g_x = numerics.stack_backward(params.backbone, bcache, g_emb)
    return float(score[0, 0]), g_x[0]


def ascend_input(params: ModelParams, x0: np.ndarray, cfg: AscentConfig) -> AscentTrajectory:
    """Clipped plain gradient ascent on the predicted dual.

    Snapshots are recorded at step 0, every snapshot_every steps, and at
    the final step. Terminates early once the iterate stops moving; the
    stall flag is set when the final score failed to reach the initial one
    or a non-finite score aborted the climb.
    """
    lo, hi = cfg.clip_range
    x = np.clip(np.asarray(x0, dtype=np.float64).reshape(-1), lo, hi)
    traj = AscentTrajectory()
    score, grad = input_gradient(params, x)
    if not np.isfinite(score):
        traj.steps, traj.xs, traj.scores = [0], [x.copy()], [score]
        traj.stalled = True
        return traj
    traj.steps.append(0)
    traj.xs.append(x.copy())
    traj.scores.append(score)
    last_recorded = 0
    step = 0
    for step in range(1, cfg.n_steps + 1):
        x_new = np.clip(x + cfg.step_size * grad, lo, hi)
        moved = not np.array_equal(x_new, x)
        x = x_new
        score, grad = input_gradient(params, x)
        if not np.isfinite(score):
            traj.stalled = True
            break
        if step % cfg.snapshot_every == 0:
            traj.steps.append(step)
            traj.xs.append(x.copy())
            traj.scores.append(score)
            last_recorded = step
        if not moved:
            break
    final_step = min(step, cfg.n_steps) if cfg.n_steps else 0
    if cfg.n_steps and last_recorded != final_step and np.isfinite(score):
        traj.steps.append(final_step)
        traj.xs.append(x.copy())
        traj.scores.append(score)
    if traj.final_score < traj.initial_score:
        traj.stalled = True
    return traj


def save_pgm_grid(
    images: list[np.ndarray] | np.ndarray,
    image_shape: tuple[int, int],
    path: str,
    cols: int = 10,
    padding: int = 2,
    value_range: tuple[float, float] = (0.0, 1.0),
) -> None:
    """Tile images into one binary PGM (P5) file, row-major, padded gray."""
    images = [np.asarray(im, dtype=np.float64).reshape(image_shape) for im in images]
    if not images:
        raise ValueError("no images to save")
    h, w = image_shape
    cols = min(cols, len(images))
    rows = (len(images) + cols - 1) // cols
    lo, hi = value_range
    grid = np.full((rows * (h + padding) + padding, cols * (w + padding) + padding), 0.5)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        top = padding + r * (h + padding)
        left = padding + c * (w + padding)
        grid[top : top + h, left : left + w] = (im - lo) / (hi - lo)
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def save_score_csv(trajectories: list[AscentTrajectory], path: str) -> None:
    """One row per (trajectory, snapshot) with the predicted dual score."""
    with open(path, "w", newline="") as f:
        writer = csvlib.writer(f)
        writer.writerow(["trajectory", "step", "score", "stalled"])
        for i, traj in enumerate(trajectories):
            for step, score in zip(traj.steps, traj.scores):
                writer.writerow([i, step, f"{score:.12g}", int(traj.stalled)])
