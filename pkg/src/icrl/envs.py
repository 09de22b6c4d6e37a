"""Trial-based Darkroom gridworlds (state and pixel observations).

A trial fixes one hidden goal and runs episodes back to back; each episode
re-draws the agent's start cell. The only signal about the goal is reward:
1.0 for every step that ends on the goal cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTION_DELTAS = np.array([[0, 1], [0, -1], [-1, 0], [1, 0], [0, 0]])
N_ACTIONS = len(ACTION_DELTAS)
VARIANTS = ("state", "pixel")


@dataclass
class DarkroomSpec:
    grid_size: int = 10
    horizon: int = 100
    variant: str = "state"
    image_size: tuple[int, int] = (25, 25)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Darkroom variant {self.variant!r}")
        if self.grid_size < 1 or self.horizon < 1:
            raise ValueError("grid_size and horizon must be >= 1")

    @property
    def obs_key(self) -> str:
        return "image" if self.variant == "pixel" else "state"

    @property
    def image_shape(self) -> tuple[int, int, int]:
        w, h = self.image_size
        return (h, w, 3)


@dataclass
class TrialSpec:
    """One task: the seed fixes the goal and the sequence of episode starts."""

    task_seed: int
    env: DarkroomSpec = field(default_factory=DarkroomSpec)
    n_episodes: int | None = None


@dataclass
class StepResult:
    """Outcome of one action.

    ``obs`` is what the agent acts on next; when ``done`` it is already the
    first observation of the following episode. ``episode_index`` and ``step``
    describe the transition just taken (``step`` counts from 1).
    """

    obs: np.ndarray
    reward: float
    done: bool
    episode_index: int
    step: int


class Darkroom:
    """Single-worker environment state for one trial."""

    def __init__(self, trial: TrialSpec):
        self.trial = trial
        self.spec = trial.env
        self.rng = np.random.default_rng(np.random.SeedSequence(int(trial.task_seed)))
        g = self.spec.grid_size
        self.goal = tuple(int(v) for v in self.rng.integers(0, g, size=2))
        self.episode_index = 0
        self.t = 0
        self.pos = self._draw_start()

    def _draw_start(self) -> tuple[int, int]:
        return tuple(int(v) for v in self.rng.integers(0, self.spec.grid_size, size=2))

    def observe(self) -> np.ndarray:
        if self.spec.variant == "pixel":
            return render_pixel(self.spec, self.pos)
        g = max(self.spec.grid_size - 1, 1)
        return np.array([self.pos[0] / g, self.pos[1] / g], dtype=np.float32)

    def step(self, action: int) -> StepResult:
        if not (isinstance(action, (int, np.integer)) and 0 <= action < N_ACTIONS):
            raise ValueError(f"invalid action {action!r}; expected 0..{N_ACTIONS - 1}")
        g = self.spec.grid_size
        dx, dy = ACTION_DELTAS[action]
        self.pos = (min(max(self.pos[0] + int(dx), 0), g - 1), min(max(self.pos[1] + int(dy), 0), g - 1))
        reward = 1.0 if self.pos == self.goal else 0.0
        self.t += 1
        ep, step = self.episode_index, self.t
        done = self.t >= self.spec.horizon
        if done:
            self.episode_index += 1
            self.t = 0
            self.pos = self._draw_start()
        return StepResult(self.observe(), reward, done, ep, step)


def reset_trial(spec: TrialSpec) -> tuple[Darkroom, np.ndarray]:
    env = Darkroom(spec)
    return env, env.observe()


def oracle_action(pos: tuple[int, int], goal: tuple[int, int]) -> int:
    """Shortest-path move: close the x gap first, then y; stay on the goal."""
    if pos[0] != goal[0]:
        return RIGHT if goal[0] > pos[0] else LEFT
    if pos[1] != goal[1]:
        return UP if goal[1] > pos[1] else DOWN
    return STAY


def _cell_bounds(n_pixels: int, n_cells: int, c: int) -> tuple[int, int]:
    lo = (c * n_pixels) // n_cells
    hi = ((c + 1) * n_pixels) // n_cells
    return lo, max(hi, lo + 1)


def render_pixel(spec: DarkroomSpec, pos: tuple[int, int]) -> np.ndarray:
    """``H×W×3`` image in ``[0, 1]``: static textured floor plus an agent marker.

    Row 0 is the top of the image, i.e. the largest y. The goal is never drawn.
    """
    h, w, _ = spec.image_shape
    g = spec.grid_size
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((h, w, 3), dtype=np.float32)
    # Floor texture: smooth colour ramps plus a faint cell checkerboard.
    cx = (xx * g) // w
    cy = (g - 1) - (yy * g) // h
    checker = ((cx + cy) % 2).astype(np.float32)
    img[..., 0] = 0.15 + 0.25 * xx / max(w - 1, 1)
    img[..., 1] = 0.15 + 0.25 * yy / max(h - 1, 1)
    img[..., 2] = 0.2 + 0.1 * checker
    x0, x1 = _cell_bounds(w, g, pos[0])
    y0, y1 = _cell_bounds(h, g, g - 1 - pos[1])
    img[y0:y1, x0:x1] = (1.0, 0.9, 0.2)
    return img


class VectorDarkroom:
    """Lock-step manager over independent per-worker trials.

    Each worker owns its ``Darkroom`` (and thus its RNG stream), so a worker's
    trajectory does not depend on how many other workers run beside it.
    """

    def __init__(self, trials: list[TrialSpec]):
        self.envs = [Darkroom(t) for t in trials]

    @property
    def n_workers(self) -> int:
        return len(self.envs)

    def observe(self) -> np.ndarray:
        return np.stack([e.observe() for e in self.envs])

    def step(self, actions) -> list[StepResult]:
        actions = list(actions)
        if len(actions) != len(self.envs):
            raise ValueError(f"got {len(actions)} actions for {len(self.envs)} workers")
        return [e.step(int(a)) for e, a in zip(self.envs, actions)]


def vector_step(manager: VectorDarkroom, actions) -> list[StepResult]:
    return manager.step(actions)


def write_trajectory(path: str | Path, records: list[dict]) -> Path:
    """Line-delimited JSON, one transition per line.

    Record keys: ``episode_index, step, obs, action, reward, done``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            obs = r["obs"]
            obs = obs.tolist() if isinstance(obs, np.ndarray) else obs
            f.write(
                json.dumps(
                    {
                        "episode_index": int(r["episode_index"]),
                        "step": int(r["step"]),
                        "obs": obs,
                        "action": int(r["action"]),
                        "reward": float(r["reward"]),
                        "done": bool(r["done"]),
                    }
                )
                + "\n"
            )
    return path


def read_trajectory(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
