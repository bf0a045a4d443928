"""Random-shooting control: sample candidate sequences, score, pick, replay.

Each decision samples fresh uniform control sequences, carries over the best
sequence from the previous decision (shifted by the step just executed, with
a fresh random control appended), scores every candidate with the model in
one batch, and executes the first control of the selected sequence.

Selection filters to candidates whose predicted survival meets the
``min_survival`` threshold and takes the highest point probability among
them; when nothing qualifies it falls back to the globally safest candidate.
The carried-over sequence sits at index 0 so lowest-index tie-breaking keeps
an already-chosen plan stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import ControlVector, Env, OBJECT_VALUE, PADDLE_VALUE

__all__ = [
    "PlannerConfig",
    "ScoredSequence",
    "sample_sequences",
    "score_sequences",
    "select_sequence",
    "RandomShootingPlanner",
    "CatchOracle",
]


@dataclass
class PlannerConfig:
    num_candidates: int
    horizon: int
    min_survival: float
    seed: int = 0

    def __post_init__(self):
        if self.num_candidates < 1 or self.horizon < 1:
            raise ValueError("num_candidates and horizon must be positive")
        if not 0.0 <= self.min_survival <= 1.0:
            raise ValueError(f"min_survival must lie in [0, 1], got {self.min_survival}")


@dataclass(frozen=True)
class ScoredSequence:
    controls: np.ndarray  # [horizon, 3] int8
    p_death: float
    p_point: float


def sample_sequences(rng: np.random.Generator, valid_controls, num: int, horizon: int,
                     previous_best: np.ndarray | None = None) -> np.ndarray:
    """Draw ``num`` candidate sequences of shape [num, horizon, 3].

    Controls are uniform over the environment's valid control set.  When a
    previous best is supplied (and num >= 2) it occupies index 0, shifted
    left by the step already executed and padded with one fresh draw.
    """
    controls = np.asarray([c.as_array() for c in valid_controls], dtype=np.int8)
    carry = previous_best is not None and num >= 2
    fresh = num - 1 if carry else num
    idx = rng.integers(len(controls), size=(fresh, horizon))
    sequences = controls[idx]
    if carry:
        shifted = np.concatenate([previous_best[1:],
                                  controls[rng.integers(len(controls), size=1)]])
        sequences = np.concatenate([shifted[None], sequences])
    return sequences


def score_sequences(model, obs: np.ndarray, candidates: np.ndarray) -> list[ScoredSequence]:
    """Run the model over every candidate; perception runs once per call."""
    p_death, p_point = model.score_candidates(obs, candidates)
    return [ScoredSequence(controls=candidates[i], p_death=float(p_death[i]),
                           p_point=float(p_point[i]))
            for i in range(len(candidates))]


def select_sequence(scored: list[ScoredSequence], min_survival: float) -> ScoredSequence:
    """Pick the best candidate under the survival threshold.

    Candidates with survival probability (1 - p_death) at or above the
    threshold compete on p_point; if none qualify, the globally lowest
    p_death wins.  Ties resolve to the lowest index.
    """
    if not scored:
        raise ValueError("select_sequence needs at least one scored candidate")
    survivors = [s for s in scored if 1.0 - s.p_death >= min_survival]
    if survivors:
        return max(survivors, key=lambda s: s.p_point)
    return min(scored, key=lambda s: s.p_death)


class RandomShootingPlanner:
    """Stateful per-episode planner around a frozen model snapshot.

    With ``record_decisions`` enabled, every call to :meth:`act` appends one
    structured record (candidate count, chosen scores, executed control) to
    ``decision_log`` for the CLI to dump.
    """

    def __init__(self, model, config: PlannerConfig, valid_controls,
                 record_decisions: bool = False):
        self.model = model
        self.config = config
        self.valid_controls = list(valid_controls)
        self.rng = np.random.default_rng(config.seed)
        self.previous_best: np.ndarray | None = None
        self.last_selected: ScoredSequence | None = None
        self.record_decisions = record_decisions
        self.decision_log: list[dict] = []

    def begin_episode(self) -> None:
        self.previous_best = None
        self.last_selected = None

    def act(self, env: Env) -> ControlVector:
        """Plan from the environment's current observation; returns the first
        control of the selected sequence and remembers it for carry-over."""
        obs = env.observe()
        candidates = sample_sequences(self.rng, self.valid_controls,
                                      self.config.num_candidates, self.config.horizon,
                                      self.previous_best)
        scored = score_sequences(self.model, obs, candidates)
        selected = select_sequence(scored, self.config.min_survival)
        self.previous_best = selected.controls
        self.last_selected = selected
        control = ControlVector(*(int(v) for v in selected.controls[0]))
        if self.record_decisions:
            self.decision_log.append({
                "candidates": len(scored),
                "p_death": selected.p_death,
                "p_point": selected.p_point,
                "control": list(control),
            })
        return control


class CatchOracle:
    """Exact-simulation stand-in for the model, for the catch game only.

    Decodes the game state from the newest frame of the observation and
    replays each candidate against the true dynamics.  Scores are the exact
    cumulative outcomes at the first landing inside the horizon: (1, 0) for
    a miss, (0, 1) for a catch, (0, 0) when the object has not landed yet.
    Respawn columns after a catch are unknowable, so later landings in the
    same window are not simulated.
    """

    def __init__(self, height: int = 16, width: int = 16):
        self.height = height
        self.width = width

    def score_candidates(self, obs: np.ndarray, control_seqs) -> tuple[np.ndarray, np.ndarray]:
        frame = np.asarray(obs)[-1]
        obj_cells = np.argwhere(frame == OBJECT_VALUE)
        if len(obj_cells) != 1:
            raise ValueError(f"expected exactly one object pixel, found {len(obj_cells)}")
        obj_row, obj_col = (int(v) for v in obj_cells[0])
        paddle_cells = np.flatnonzero(frame[self.height - 1] == PADDLE_VALUE)
        if len(paddle_cells) != 1:
            raise ValueError(f"expected exactly one paddle pixel, found {len(paddle_cells)}")
        paddle_start = int(paddle_cells[0])

        seqs = np.asarray(control_seqs)
        landing = (self.height - 1) - obj_row  # every candidate lands together
        if landing > seqs.shape[1]:
            return np.zeros(len(seqs)), np.zeros(len(seqs))
        paddle = np.full(len(seqs), paddle_start, dtype=np.int64)
        for step in range(landing):
            paddle = np.clip(paddle + seqs[:, step, 1].astype(np.int64),
                             0, self.width - 1)
        caught = paddle == obj_col
        return (~caught).astype(np.float64), caught.astype(np.float64)
