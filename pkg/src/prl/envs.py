"""Deterministic toy games emitting stacked-frame observations.

Two games are built in:

* ``catch`` - a one-pixel paddle on the bottom row catches objects falling
  one row per step from the top.  A caught object scores a point and a new
  one spawns; a missed object is a death and ends the episode (single life).
  An episode also ends after ``max_objects`` catches.
* ``mini-breakout`` - a three-pixel paddle bounces a diagonally moving ball
  into a row of bricks on the top row.  Each brick hit scores.  The ball
  starts parked on the paddle and only moves once shoot is pressed; losing
  it off the bottom row is a death and ends the episode.

Controls are 3-vectors (shoot, horizontal, vertical); targets are cumulative
per-step flags (died-by-now, scored-without-death).
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "ControlVector",
    "StepOutcome",
    "TargetVector",
    "EpisodeOverError",
    "NOOP",
    "encode_control",
    "decode_control",
    "build_targets",
    "frame_preprocess",
    "Catch",
    "MiniBreakout",
    "Env",
    "make_env",
    "GAME_NAMES",
    "catch_optimal_control",
    "frame_to_pgm",
]

PADDLE_VALUE = 0.5
OBJECT_VALUE = 1.0
BRICK_VALUE = 0.75


class EpisodeOverError(RuntimeError):
    """step() was called after the episode ended."""


class ControlVector(NamedTuple):
    shoot: int
    horizontal: int
    vertical: int

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.int8)


NOOP = ControlVector(0, 0, 0)


class StepOutcome(NamedTuple):
    frame: np.ndarray
    scored: bool
    died: bool
    episode_over: bool


class TargetVector(NamedTuple):
    died_by_now: int
    scored_clean: int


def _validate_control(control: ControlVector) -> ControlVector:
    control = ControlVector(*(int(v) for v in control))
    if control.shoot not in (0, 1):
        raise ValueError(f"shoot must be 0 or 1, got {control.shoot}")
    if control.horizontal not in (-1, 0, 1) or control.vertical not in (-1, 0, 1):
        raise ValueError(f"horizontal/vertical must be in {{-1,0,1}}, got {control}")
    return control


def encode_control(buttons: Iterable[str]) -> ControlVector:
    """Translate button names into the 3-component control encoding.

    shoot -> dim 0 = 1; left/right -> dim 1 = -1/+1; down/up -> dim 2 = -1/+1.
    An empty set is the no-op.  Conflicting opposites are rejected.
    """
    pressed = set(buttons)
    known = {"shoot", "left", "right", "up", "down"}
    unknown = pressed - known
    if unknown:
        raise ValueError(f"unknown buttons: {sorted(unknown)}")
    if {"left", "right"} <= pressed:
        raise ValueError("left and right pressed simultaneously")
    if {"up", "down"} <= pressed:
        raise ValueError("up and down pressed simultaneously")
    horizontal = -1 if "left" in pressed else (1 if "right" in pressed else 0)
    vertical = -1 if "down" in pressed else (1 if "up" in pressed else 0)
    return ControlVector(1 if "shoot" in pressed else 0, horizontal, vertical)


def decode_control(control: ControlVector) -> frozenset[str]:
    control = _validate_control(control)
    buttons = set()
    if control.shoot:
        buttons.add("shoot")
    if control.horizontal:
        buttons.add("left" if control.horizontal < 0 else "right")
    if control.vertical:
        buttons.add("down" if control.vertical < 0 else "up")
    return frozenset(buttons)


def build_targets(outcomes: Sequence[StepOutcome]) -> list[TargetVector]:
    """Cumulative flags over a window of consecutive outcomes.

    died_by_now[j] is set once any death has happened up to step j;
    scored_clean[j] is set only while no death has happened and some point
    has been earned up to step j.
    """
    targets = []
    died = False
    scored = False
    for outcome in outcomes:
        died = died or outcome.died
        scored = scored or outcome.scored
        targets.append(TargetVector(int(died), int(scored and not died)))
    return targets


def frame_preprocess(previous: np.ndarray, current: np.ndarray, mode: str = "identity") -> np.ndarray:
    """Collapse the two most recent raw frames into one observation frame."""
    if mode == "identity":
        return current
    if mode == "max2":
        return np.maximum(previous, current)
    raise ValueError(f"unknown preprocess mode: {mode!r}")


class Catch:
    """Falling-object catching on a ``height`` x ``width`` grid.

    The object falls one row per step; the paddle moves by the horizontal
    control component, clamped at the walls.  Landing on the paddle scores
    and respawns the object at the top in a fresh uniform column; landing
    anywhere else is a death.  ``max_objects`` catches end the episode.
    """

    name = "catch"
    requires_launch = False

    def __init__(self, height: int = 16, width: int = 16, max_objects: int = 10):
        if height < 3 or width < 2:
            raise ValueError(f"grid too small: {height}x{width}")
        self.height = height
        self.width = width
        self.max_objects = max_objects
        self._rng = np.random.default_rng(0)
        self.reset(0)

    def valid_controls(self) -> list[ControlVector]:
        return [NOOP, ControlVector(0, -1, 0), ControlVector(0, 1, 0)]

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self.object_row = 0
        self.object_col = int(self._rng.integers(self.width))
        self.paddle_col = self.width // 2
        self.score = 0
        self.episode_over = False
        return self.render()

    def step(self, control: ControlVector) -> StepOutcome:
        if self.episode_over:
            raise EpisodeOverError("catch episode is over; reset before stepping")
        control = _validate_control(control)
        self.paddle_col = int(np.clip(self.paddle_col + control.horizontal, 0, self.width - 1))
        self.object_row += 1
        scored = died = False
        if self.object_row == self.height - 1:
            if self.object_col == self.paddle_col:
                scored = True
                self.score += 1
                if self.score >= self.max_objects:
                    self.episode_over = True
                else:
                    self.object_row = 0
                    self.object_col = int(self._rng.integers(self.width))
            else:
                died = True
                self.episode_over = True
        return StepOutcome(self.render(), scored, died, self.episode_over)

    def render(self) -> np.ndarray:
        frame = np.zeros((self.height, self.width))
        frame[self.height - 1, self.paddle_col] = PADDLE_VALUE
        frame[self.object_row, self.object_col] = OBJECT_VALUE
        return frame


class MiniBreakout:
    """Single-row breakout with sign-flip reflections.

    The ball moves diagonally one cell per step once launched.  Side walls
    flip the horizontal velocity; the brick row (top row) absorbs one brick
    per touch, scores, and flips the vertical velocity (an emptied slot
    still reflects, as the wall behind it).  Reaching the bottom row on the
    paddle reflects the ball; reaching it anywhere else is a death.  Before
    launch the ball rides the paddle and only a shoot control releases it.
    """

    name = "mini-breakout"
    requires_launch = True

    def __init__(self, height: int = 16, width: int = 16, paddle_width: int = 3,
                 max_steps: int = 200):
        if height < 5 or width < paddle_width + 1:
            raise ValueError(f"grid too small: {height}x{width}")
        if paddle_width % 2 != 1:
            raise ValueError("paddle_width must be odd")
        self.height = height
        self.width = width
        self.paddle_width = paddle_width
        self.max_steps = max_steps
        self._rng = np.random.default_rng(0)
        self.reset(0)

    def valid_controls(self) -> list[ControlVector]:
        return [NOOP, ControlVector(0, -1, 0), ControlVector(0, 1, 0),
                ControlVector(1, 0, 0), ControlVector(1, -1, 0), ControlVector(1, 1, 0)]

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self.paddle_col = self.width // 2
        self.bricks = np.ones(self.width, dtype=bool)
        self.ball_row = self.height - 2
        self.ball_col = self.paddle_col
        self.vel_row = 0
        self.vel_col = 0
        self.launched = False
        self.steps = 0
        self.score = 0
        self.episode_over = False
        return self.render()

    def _half(self) -> int:
        return self.paddle_width // 2

    def step(self, control: ControlVector) -> StepOutcome:
        if self.episode_over:
            raise EpisodeOverError("mini-breakout episode is over; reset before stepping")
        control = _validate_control(control)
        self.steps += 1
        half = self._half()
        self.paddle_col = int(np.clip(self.paddle_col + control.horizontal,
                                      half, self.width - 1 - half))
        scored = died = False
        if not self.launched:
            self.ball_row = self.height - 2
            self.ball_col = self.paddle_col
            if control.shoot:
                self.launched = True
                self.vel_row = -1
                self.vel_col = int(self._rng.choice((-1, 1)))
        else:
            col = self.ball_col + self.vel_col
            if col < 0 or col > self.width - 1:
                self.vel_col = -self.vel_col
                col = self.ball_col + self.vel_col
            row = self.ball_row + self.vel_row
            if row <= 0:
                # Brick row: consume a live brick, otherwise bounce off the wall.
                if self.bricks[col]:
                    self.bricks[col] = False
                    scored = True
                    self.score += 1
                self.vel_row = 1
                row = 1
            elif row == self.height - 1:
                if abs(col - self.paddle_col) <= half:
                    self.vel_row = -1
                    row = self.height - 2
                else:
                    died = True
                    self.episode_over = True
            self.ball_row, self.ball_col = row, col
        if not self.episode_over:
            if not self.bricks.any() or self.steps >= self.max_steps:
                self.episode_over = True
        return StepOutcome(self.render(), scored, died, self.episode_over)

    def render(self) -> np.ndarray:
        frame = np.zeros((self.height, self.width))
        frame[0, self.bricks] = BRICK_VALUE
        half = self._half()
        frame[self.height - 1, self.paddle_col - half:self.paddle_col + half + 1] = PADDLE_VALUE
        frame[self.ball_row, self.ball_col] = OBJECT_VALUE
        return frame


class Env:
    """A game plus its frame stack and preprocessing.

    ``observe`` returns the last ``frame_stack`` preprocessed frames, newest
    last; before enough frames exist the first frame is repeated.
    """

    def __init__(self, game, frame_stack: int = 4, preprocess: str = "identity"):
        frame_preprocess(np.zeros(1), np.zeros(1), preprocess)  # validate mode
        self.game = game
        self.frame_stack = frame_stack
        self.preprocess = preprocess
        self._frames: deque[np.ndarray] = deque(maxlen=frame_stack)
        self._last_raw: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.game.name

    @property
    def height(self) -> int:
        return self.game.height

    @property
    def width(self) -> int:
        return self.game.width

    @property
    def requires_launch(self) -> bool:
        return self.game.requires_launch

    @property
    def score(self) -> int:
        return self.game.score

    @property
    def episode_over(self) -> bool:
        return self.game.episode_over

    def valid_controls(self) -> list[ControlVector]:
        return self.game.valid_controls()

    def reset(self, seed: int) -> np.ndarray:
        frame = self.game.reset(seed)
        self._last_raw = frame
        first = frame_preprocess(frame, frame, self.preprocess)
        self._frames.clear()
        for _ in range(self.frame_stack):
            self._frames.append(first)
        return frame

    def step(self, control: ControlVector) -> StepOutcome:
        outcome = self.game.step(control)
        processed = frame_preprocess(self._last_raw, outcome.frame, self.preprocess)
        self._last_raw = outcome.frame
        self._frames.append(processed)
        return outcome

    def observe(self) -> np.ndarray:
        if not self._frames:
            raise RuntimeError("observe() called before reset()")
        return np.stack(self._frames)


GAME_NAMES = ("catch", "mini-breakout")


def make_env(name: str, frame_stack: int = 4, preprocess: str = "identity",
             height: int = 16, width: int = 16) -> Env:
    if name == "catch":
        game = Catch(height=height, width=width)
    elif name == "mini-breakout":
        game = MiniBreakout(height=height, width=width)
    else:
        raise ValueError(f"unknown environment {name!r}; choose from {GAME_NAMES}")
    return Env(game, frame_stack=frame_stack, preprocess=preprocess)


def catch_optimal_control(env) -> ControlVector:
    """Move the paddle toward the falling object's column (exact policy)."""
    game = env.game if isinstance(env, Env) else env
    delta = game.object_col - game.paddle_col
    return ControlVector(0, int(np.sign(delta)), 0)


def frame_to_pgm(frame: np.ndarray, path) -> None:
    """Dump one grayscale frame as a binary portable graymap for debugging."""
    levels = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())
