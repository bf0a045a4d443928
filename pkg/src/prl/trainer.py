"""The alternating generate-data / train-offline loop.

Iteration 1 fills the dataset with uniform-random play and trains on it;
every later iteration first generates fresh cases with the current model
driving the planner, appends them to the persistent dataset, then keeps
training the same parameters.  Replay sampling weights each generation
iteration geometrically (newer data drawn more often) so recent strategies
dominate without discarding the old ones.  After each iteration the model
is evaluated by playing full episodes per game; the model itself is never
told which game a case came from.

All randomness is derived functionally from (seed, purpose, iteration,
game, worker), which is what makes a resumed run reproduce an uninterrupted
one exactly.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import backward
from .envs import (NOOP, Env, TargetVector, build_targets,
                   catch_optimal_control, make_env)
from .model import Model, ModelConfig, model_loss
from .optim import OptimizerConfig, adam_step
from .planner import PlannerConfig, RandomShootingPlanner
from .store import (Dataset, IncompatibleCheckpointError, TrainingCase,
                    load_checkpoint, quantize_frames, save_checkpoint)

__all__ = [
    "ExperimentConfig",
    "TrainingDivergedError",
    "iteration_weight",
    "schedule_value",
    "WeightedSampler",
    "build_sampler",
    "RandomPolicy",
    "OptimalCatchPolicy",
    "play_episode",
    "play_episodes",
    "generate_data",
    "train_iteration",
    "run_experiment",
    "append_report_row",
    "read_report",
    "write_metric_csvs",
]

# Purpose tags for functional seed derivation.
_SEED_INIT = 1
_SEED_DATA = 2
_SEED_TRAIN = 3
_SEED_EVAL = 4
_SEED_BASELINE = 5


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


def _rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def _seed_for(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """Schedules and budgets for one experiment run.

    Schedules are (iteration, value) steps, sorted, first entry at
    iteration 1; the value in force at iteration i is the last entry with
    iteration <= i.  ``candidate_schedule`` controls how many sequences the
    planner considers, ``survival_schedule`` the per-game selection
    threshold, ``lr_schedule`` the base learning rate (halved within each
    iteration after ``halve_lr_after`` updates).
    """

    games: tuple[str, ...] = ("catch", "mini-breakout")
    iterations: int = 10
    initial_cases_per_game: int = 8000
    cases_per_game_per_iter: int = 3000
    candidate_schedule: tuple[tuple[int, int], ...] = ((1, 25),)
    survival_schedule: dict[str, tuple[tuple[int, float], ...]] = field(default_factory=dict)
    lr_schedule: tuple[tuple[int, float], ...] = ((1, 1e-3), (4, 5e-4), (7, 1e-4))
    updates_per_iteration: int = 6000
    halve_lr_after: int = 3000
    batch_size: int = 64
    weight_multiplier: float = 3.0
    weight_period: int = 3
    noop_max: int = 3
    eval_episodes: int = 100
    preprocess: str = "identity"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.games = tuple(self.games)
        # catch has no survive-vs-score tradeoff (a miss IS the death), so its
        # planner maximizes the point head outright; mini-breakout plays the
        # safest-only extreme, which is what makes forced launches necessary.
        default_survival = {"catch": 0.0, "mini-breakout": 1.0}
        for game in self.games:
            self.survival_schedule.setdefault(
                game, ((1, default_survival.get(game, 0.5)),))
        for name in ("candidate_schedule", "lr_schedule"):
            _check_schedule(getattr(self, name), name)
        for game, sched in self.survival_schedule.items():
            _check_schedule(sched, f"survival_schedule.{game}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def min_survival(self, game: str, iteration: int) -> float:
        return schedule_value(self.survival_schedule[game], iteration)


def _check_schedule(schedule, name: str) -> None:
    if not schedule or schedule[0][0] != 1:
        raise ValueError(f"{name} must start at iteration 1, got {schedule}")
    its = [it for it, _ in schedule]
    if its != sorted(its):
        raise ValueError(f"{name} must be sorted by iteration, got {schedule}")


def schedule_value(schedule, iteration: int):
    """Value of a stepwise (iteration, value) schedule at ``iteration``."""
    current = schedule[0][1]
    for start, value in schedule:
        if start <= iteration:
            current = value
        else:
            break
    return current


def iteration_weight(iteration: int, multiplier: float = 3.0, period: int = 3) -> float:
    """Replay weight of data generated at ``iteration`` (1-based):
    multiplier ** floor((iteration - 1) / period)."""
    return float(multiplier) ** ((iteration - 1) // period)


class WeightedSampler:
    """Two-stage replay sampling: draw an iteration tag proportionally to
    weight(tag) * count(tag), then a case uniformly within that tag.
    Draws are with replacement."""

    def __init__(self, tags, weight_fn, seed: int):
        tags = np.asarray(tags, dtype=np.int64)
        if tags.size == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.unique, counts = np.unique(tags, return_counts=True)
        weights = np.array([weight_fn(int(t)) for t in self.unique], dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError("iteration weights must be positive")
        mass = weights * counts
        self.tag_p = mass / mass.sum()
        order = np.argsort(tags, kind="stable")
        boundaries = np.searchsorted(tags[order], self.unique)
        self.groups = [order[b:b + c] for b, c in zip(boundaries, counts)]
        self.rng = np.random.default_rng(seed)

    def draw(self, n: int) -> np.ndarray:
        tag_idx = self.rng.choice(len(self.unique), size=n, p=self.tag_p)
        out = np.empty(n, dtype=np.int64)
        for i, t in enumerate(tag_idx):
            group = self.groups[t]
            out[i] = group[int(self.rng.integers(len(group)))]
        return out


def build_sampler(tags, weight_fn, seed: int) -> WeightedSampler:
    return WeightedSampler(tags, weight_fn, seed)


# ---------------------------------------------------------------------------
# playing protocol


class RandomPolicy:
    """Uniform draws over the environment's valid control set."""

    def __init__(self, valid_controls, rng: np.random.Generator):
        self.valid = list(valid_controls)
        self.rng = rng

    def begin_episode(self) -> None:
        pass

    def act(self, env: Env):
        return self.valid[int(self.rng.integers(len(self.valid)))]


class OptimalCatchPolicy:
    """Hand-coded exact policy: walk the paddle toward the object column."""

    def begin_episode(self) -> None:
        pass

    def act(self, env: Env):
        return catch_optimal_control(env)


def play_episode(env: Env, policy, rng: np.random.Generator, noop_max: int) -> int:
    """Play one episode to completion and return its score.

    The episode starts with a uniform number of no-op steps in [0, noop_max];
    in games that need a launch the first real action is forced to include
    shoot so the episode cannot stall unstarted.
    """
    policy.begin_episode()
    env.reset(int(rng.integers(2**31 - 1)))
    noops = int(rng.integers(noop_max + 1)) if noop_max > 0 else 0
    step = 0
    first_action = True
    while not env.episode_over:
        if step < noops:
            control = NOOP
        else:
            control = policy.act(env)
            if first_action and env.requires_launch and not control.shoot:
                control = control._replace(shoot=1)
            first_action = False
        env.step(control)
        step += 1
    return env.score


def play_episodes(env: Env, policy, episodes: int, rng: np.random.Generator,
                  noop_max: int) -> list[int]:
    return [play_episode(env, policy, rng, noop_max) for _ in range(episodes)]


# ---------------------------------------------------------------------------
# data generation


def _window_case(observations, controls, outcomes, start: int, horizon: int,
                 rng: np.random.Generator, pad_controls: np.ndarray,
                 iteration: int, game_id: int) -> TrainingCase:
    """Assemble one window.  A window cut short by a death is completed with
    uniform filler controls and latched (died, no-score) targets: the death
    fixes every remaining cumulative target, whatever would be pressed."""
    real = outcomes[start:start + horizon]
    window_controls = [np.asarray(c) for c in controls[start:start + horizon]]
    targets = build_targets(real)
    missing = horizon - len(real)
    if missing > 0:
        filler = pad_controls[rng.integers(len(pad_controls), size=missing)]
        window_controls.extend(filler)
        targets.extend([TargetVector(1, 0)] * missing)
    return TrainingCase(
        observation=quantize_frames(observations[start]),
        controls=np.array(window_controls, dtype=np.int8),
        targets=np.array(targets, dtype=np.uint8),
        iteration=iteration,
        game_id=game_id)


def _collect_cases(env: Env, policy, count: int, horizon: int, rng: np.random.Generator,
                   noop_max: int, iteration: int, game_id: int,
                   provenance: list | None = None) -> list[TrainingCase]:
    """Play episodes, storing a case once each observation has k resolved
    future steps.  Windows never cross an episode reset.  A death resolves
    every pending window at once (cumulative targets latch), so those are
    stored too; windows truncated by any other episode end are discarded."""
    pad_controls = np.array([c.as_array() for c in env.valid_controls()],
                            dtype=np.int8)
    cases: list[TrainingCase] = []
    while len(cases) < count:
        episode_seed = int(rng.integers(2**31 - 1))
        policy.begin_episode()
        env.reset(episode_seed)
        noops = int(rng.integers(noop_max + 1)) if noop_max > 0 else 0
        observations = [env.observe()]
        controls: list[np.ndarray] = []
        outcomes = []
        step = 0
        first_action = True
        while not env.episode_over and len(cases) < count:
            if step < noops:
                control = NOOP
            else:
                control = policy.act(env)
                if first_action and env.requires_launch and not control.shoot:
                    control = control._replace(shoot=1)
                first_action = False
            outcome = env.step(control)
            controls.append(control.as_array())
            outcomes.append(outcome)
            step += 1
            start = len(outcomes) - horizon
            if start >= 0:
                cases.append(_window_case(observations, controls, outcomes, start,
                                          horizon, rng, pad_controls, iteration,
                                          game_id))
                if provenance is not None:
                    provenance.append((episode_seed, start,
                                       [tuple(int(v) for v in c) for c in controls]))
            if not env.episode_over:
                observations.append(env.observe())
        if outcomes and outcomes[-1].died:
            total = len(outcomes)
            for start in range(max(0, total - horizon + 1), total):
                if len(cases) >= count:
                    break
                cases.append(_window_case(observations, controls, outcomes, start,
                                          horizon, rng, pad_controls, iteration,
                                          game_id))
                if provenance is not None:
                    provenance.append((episode_seed, start,
                                       [tuple(int(v) for v in c) for c in controls]))
    return cases


def _make_policy(model, env: Env, num_candidates: int, horizon: int,
                 min_survival: float, planner_seed: int, rng: np.random.Generator):
    if model is None:
        return RandomPolicy(env.valid_controls(), rng)
    planner_config = PlannerConfig(num_candidates=num_candidates, horizon=horizon,
                                   min_survival=min_survival, seed=planner_seed)
    return RandomShootingPlanner(model, planner_config, env.valid_controls())


def _generation_job(args) -> list[TrainingCase]:
    (game, model, quota, iteration, game_id, seed, worker, num_candidates,
     min_survival, model_config_dict, noop_max, preprocess) = args
    model_config = ModelConfig.from_dict(model_config_dict)
    env = make_env(game, frame_stack=model_config.frame_stack, preprocess=preprocess,
                   height=model_config.frame_height, width=model_config.frame_width)
    rng = _rng_for(seed, _SEED_DATA, iteration, game_id, worker, 0)
    planner_seed = _seed_for(seed, _SEED_DATA, iteration, game_id, worker, 1)
    policy = _make_policy(model, env, num_candidates, model_config.horizon,
                          min_survival, planner_seed, rng)
    return _collect_cases(env, policy, quota, model_config.horizon, rng,
                          noop_max, iteration, game_id)


def generate_data(game: str, model: Model | None, count: int, iteration: int,
                  game_id: int, config: ExperimentConfig, model_config: ModelConfig,
                  with_provenance: bool = False):
    """Generate ``count`` training cases for one game.

    ``model=None`` plays uniformly at random (the first iteration); otherwise
    the random-shooting planner drives play with the candidate count and
    survival threshold in force at ``iteration``.  With ``config.workers`` > 1
    the episode stream is split across processes on per-worker seeds, so
    results are reproducible for a fixed worker count.
    """
    num_candidates = schedule_value(config.candidate_schedule, iteration)
    min_survival = config.min_survival(game, iteration)
    workers = max(1, config.workers)

    if with_provenance:
        if workers != 1:
            raise ValueError("provenance capture requires a single worker")
        env = make_env(game, frame_stack=model_config.frame_stack,
                       preprocess=config.preprocess,
                       height=model_config.frame_height, width=model_config.frame_width)
        rng = _rng_for(config.seed, _SEED_DATA, iteration, game_id, 0, 0)
        planner_seed = _seed_for(config.seed, _SEED_DATA, iteration, game_id, 0, 1)
        policy = _make_policy(model, env, num_candidates, model_config.horizon,
                              min_survival, planner_seed, rng)
        provenance: list = []
        cases = _collect_cases(env, policy, count, model_config.horizon, rng,
                               config.noop_max, iteration, game_id, provenance)
        return cases, provenance

    quotas = [count // workers + (1 if w < count % workers else 0) for w in range(workers)]
    jobs = [(game, model, quota, iteration, game_id, config.seed, w, num_candidates,
             min_survival, model_config.to_dict(), config.noop_max, config.preprocess)
            for w, quota in enumerate(quotas) if quota > 0]
    if workers == 1:
        results = [_generation_job(job) for job in jobs]
    else:
        with multiprocessing.Pool(processes=workers) as pool:
            results = pool.map(_generation_job, jobs)
    cases: list[TrainingCase] = []
    for part in results:
        cases.extend(part)
    return cases


# ---------------------------------------------------------------------------
# training


def train_iteration(model: Model, dataset: Dataset, sampler: WeightedSampler,
                    optimizer: OptimizerConfig, config: ExperimentConfig,
                    iteration: int) -> dict:
    """Run the iteration's minibatch updates; returns mean loss and per-head
    accuracies.  Parameters carry over from the previous iteration."""
    base_lr = schedule_value(config.lr_schedule, iteration)
    losses: list[float] = []
    head_correct = np.zeros(2)
    head_total = 0
    model.train()
    for update in range(config.updates_per_iteration):
        lr = base_lr * 0.5 if update >= config.halve_lr_after else base_lr
        step_config = replace(optimizer, learning_rate=lr)
        indices = sampler.draw(config.batch_size)
        obs, controls, targets = dataset.minibatch(indices)
        predictions = model.rollout(obs, controls)
        loss = model_loss(predictions, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at iteration {iteration}, update {update}")
        backward(loss)
        adam_step(model.parameters(), step_config)
        model.zero_grad()
        losses.append(value)
        for j, pred in enumerate(predictions):
            head_correct += ((pred.data > 0.5) == (targets[:, j] > 0.5)).sum(axis=0)
            head_total += pred.data.shape[0]
    return {
        "mean_loss": float(np.mean(losses)) if losses else None,
        "death_accuracy": float(head_correct[0] / head_total) if head_total else None,
        "point_accuracy": float(head_correct[1] / head_total) if head_total else None,
        "updates": len(losses),
    }


def _evaluate(model: Model, game: str, config: ExperimentConfig,
              model_config: ModelConfig, iteration: int) -> float:
    env = make_env(game, frame_stack=model_config.frame_stack,
                   preprocess=config.preprocess,
                   height=model_config.frame_height, width=model_config.frame_width)
    game_id = config.games.index(game)
    rng = _rng_for(config.seed, _SEED_EVAL, iteration, game_id, 0)
    planner_seed = _seed_for(config.seed, _SEED_EVAL, iteration, game_id, 1)
    planner = RandomShootingPlanner(
        model,
        PlannerConfig(num_candidates=schedule_value(config.candidate_schedule, iteration),
                      horizon=model_config.horizon,
                      min_survival=config.min_survival(game, iteration),
                      seed=planner_seed),
        env.valid_controls())
    scores = play_episodes(env, planner, config.eval_episodes, rng, config.noop_max)
    return float(np.mean(scores))


def run_experiment(model_config: ModelConfig, config: ExperimentConfig, out_dir,
                   optimizer: OptimizerConfig | None = None,
                   resume_checkpoint=None, log=None) -> list[dict]:
    """Run the full loop, writing the report, dataset and per-iteration
    checkpoints under ``out_dir``.  Returns all report rows (including
    pre-existing ones when resuming)."""
    if optimizer is None:
        optimizer = OptimizerConfig(learning_rate=1e-3)
    say = log if log is not None else (lambda msg: None)
    os.makedirs(out_dir, exist_ok=True)
    dataset_path = os.path.join(out_dir, "dataset.prld")
    report_path = os.path.join(out_dir, "report.jsonl")

    if resume_checkpoint is not None:
        model, cursor = load_checkpoint(resume_checkpoint, expected_config=model_config)
        if cursor.get("seed") != config.seed:
            raise IncompatibleCheckpointError(
                f"checkpoint seed {cursor.get('seed')} does not match config seed "
                f"{config.seed}")
        start_iteration = int(cursor["iteration"]) + 1
        dataset = Dataset.open(dataset_path)
        if dataset.games != config.games:
            raise IncompatibleCheckpointError(
                f"dataset games {dataset.games} do not match config {config.games}")
        rows, _ = read_report(report_path)
        say(f"resuming at iteration {start_iteration} with {len(dataset)} cases")
    else:
        model = Model(model_config, seed=_seed_for(config.seed, _SEED_INIT))
        dataset = Dataset.create(dataset_path, model_config.frame_stack,
                                 model_config.frame_height, model_config.frame_width,
                                 model_config.horizon, config.games)
        rows = []
        for game_id, game in enumerate(config.games):
            env = make_env(game, frame_stack=model_config.frame_stack,
                           preprocess=config.preprocess,
                           height=model_config.frame_height,
                           width=model_config.frame_width)
            rng = _rng_for(config.seed, _SEED_BASELINE, 0, game_id)
            scores = play_episodes(env, RandomPolicy(env.valid_controls(), rng),
                                   config.eval_episodes, rng, config.noop_max)
            row = {"iteration": 0, "game": game, "mean_score": float(np.mean(scores)),
                   "mean_loss": None, "dataset_size": 0}
            rows.append(row)
            append_report_row(report_path, row)
            say(f"random baseline on {game}: mean score {row['mean_score']:.4f}")
        start_iteration = 1

    try:
        for iteration in range(start_iteration, config.iterations + 1):
            for game_id, game in enumerate(config.games):
                count = (config.initial_cases_per_game if iteration == 1
                         else config.cases_per_game_per_iter)
                policy_model = None if iteration == 1 else model
                cases = generate_data(game, policy_model, count, iteration, game_id,
                                      config, model_config)
                dataset.append(cases)
            sampler = build_sampler(
                dataset.iteration_tags(),
                lambda it: iteration_weight(it, config.weight_multiplier,
                                            config.weight_period),
                seed=_seed_for(config.seed, _SEED_TRAIN, iteration))
            metrics = train_iteration(model, dataset, sampler, optimizer, config,
                                      iteration)
            for game in config.games:
                mean_score = _evaluate(model, game, config, model_config, iteration)
                row = {"iteration": iteration, "game": game, "mean_score": mean_score,
                       "mean_loss": metrics["mean_loss"], "dataset_size": len(dataset)}
                rows.append(row)
                append_report_row(report_path, row)
                say(f"iteration {iteration} on {game}: mean score {mean_score:.4f}, "
                    f"loss {metrics['mean_loss']:.4f}")
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{iteration:03d}.prlm"),
                            model, {"iteration": iteration, "seed": config.seed})
    finally:
        dataset.close()
    return rows


# ---------------------------------------------------------------------------
# report persistence


def append_report_row(path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.flush()


def read_report(path) -> tuple[list[dict], list[str]]:
    """Read report rows, skipping malformed lines; returns (rows, warnings)."""
    rows: list[dict] = []
    warnings: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict) or "iteration" not in row or "game" not in row:
                    raise ValueError("missing required fields")
            except ValueError as exc:
                warnings.append(f"{path}:{lineno}: skipping malformed record ({exc})")
                continue
            rows.append(row)
    return rows, warnings


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metric_csvs(rows: list[dict], out_dir) -> list[str]:
    """One CSV per game: iteration, mean_score, mean_loss, dataset_size."""
    games = sorted({row["game"] for row in rows})
    paths = []
    for game in games:
        path = os.path.join(out_dir, f"scores_{game}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("iteration,mean_score,mean_loss,dataset_size\n")
            for row in rows:
                if row["game"] != game:
                    continue
                fh.write(",".join([
                    str(row["iteration"]),
                    _format_value(row.get("mean_score")),
                    _format_value(row.get("mean_loss")),
                    str(row.get("dataset_size", "")),
                ]) + "\n")
        paths.append(path)
    return paths
