"""Plain key = value run configuration with named presets.

Every model, experiment and optimizer field has a documented default;
unknown keys are rejected.  Schedules are written ``iter:value,iter:value``
and per-game survival thresholds as ``survival_schedule.<game>`` keys.  The
effective configuration is echoed into each run directory so runs are
self-describing.
"""

from __future__ import annotations

import os

from .model import ModelConfig
from .optim import OptimizerConfig
from .trainer import ExperimentConfig

__all__ = ["ConfigError", "RunSettings", "DEFAULTS", "PRESETS",
           "parse_config_text", "load_config_file", "load_preset",
           "build_settings", "echo_config"]


class ConfigError(ValueError):
    """Bad key, value or file in a run configuration."""


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}") from exc


def _parse_games(text: str) -> tuple[str, ...]:
    games = tuple(part.strip() for part in text.split(",") if part.strip())
    if not games:
        raise ConfigError("games list is empty")
    return games


def _parse_schedule(text: str, value_parser):
    entries = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"schedule entry {part!r} is not iter:value")
        left, right = part.split(":", 1)
        entries.append((_parse_int(left), value_parser(right)))
    if not entries:
        raise ConfigError("schedule is empty")
    return tuple(entries)


def _parse_int_schedule(text: str):
    return _parse_schedule(text, _parse_int)


def _parse_float_schedule(text: str):
    return _parse_schedule(text, _parse_float)


def _parse_conv_layers(text: str):
    layers = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            channels, rest = part.split("x", 1)
            kernel, stride = rest.split("s", 1)
            layers.append((int(channels), int(kernel), int(stride)))
        except ValueError as exc:
            raise ConfigError(
                f"conv layer {part!r} is not <channels>x<kernel>s<stride>") from exc
    if not layers:
        raise ConfigError("conv_layers is empty")
    return tuple(layers)


def _parse_preprocess(text: str) -> str:
    if text not in ("identity", "max2"):
        raise ConfigError(f"preprocess must be identity or max2, got {text!r}")
    return text


# key -> (parser, default-as-string, description)
DEFAULTS: dict[str, tuple] = {
    # model
    "frame_stack": (_parse_int, "4", "frames per observation"),
    "frame_height": (_parse_int, "16", "frame height in pixels"),
    "frame_width": (_parse_int, "16", "frame width in pixels"),
    "latent_dim": (_parse_int, "32", "latent state width"),
    "hidden_dim": (_parse_int, "128", "transition hidden width"),
    "control_dim": (_parse_int, "3", "control vector width (fixed)"),
    "horizon": (_parse_int, "10", "rollout window length"),
    "conv_layers": (_parse_conv_layers, "8x3s2,8x3s2",
                    "perception conv stack, <channels>x<kernel>s<stride> list"),
    # experiment
    "games": (_parse_games, "catch,mini-breakout", "environments in the run"),
    "iterations": (_parse_int, "10", "generate/train iterations"),
    "initial_cases_per_game": (_parse_int, "8000", "random-play cases at iteration 1"),
    "cases_per_game_per_iter": (_parse_int, "3000", "planner cases per later iteration"),
    "candidate_schedule": (_parse_int_schedule, "1:25",
                           "planner candidate count per iteration"),
    "lr_schedule": (_parse_float_schedule, "1:1e-3,4:5e-4,7:1e-4",
                    "base learning rate per iteration"),
    "updates_per_iteration": (_parse_int, "6000", "minibatch updates per iteration"),
    "halve_lr_after": (_parse_int, "3000", "updates before the in-iteration lr halving"),
    "batch_size": (_parse_int, "64", "minibatch size"),
    "weight_multiplier": (_parse_float, "3.0", "replay weight growth factor"),
    "weight_period": (_parse_int, "3", "iterations per replay weight step"),
    "noop_max": (_parse_int, "3", "max random no-op steps at episode start"),
    "eval_episodes": (_parse_int, "100", "evaluation episodes per game per iteration"),
    "preprocess": (_parse_preprocess, "identity", "frame preprocessing: identity or max2"),
    "seed": (_parse_int, "0", "master seed"),
    "workers": (_parse_int, "1", "data-generation worker processes"),
    # optimizer
    "beta1": (_parse_float, "0.9", "Adam first-moment decay"),
    "beta2": (_parse_float, "0.999", "Adam second-moment decay"),
    "epsilon": (_parse_float, "1e-8", "Adam denominator epsilon"),
    "weight_decay": (_parse_float, "1e-4", "decoupled weight decay"),
    "grad_clip": (_parse_float, "1.0", "element-wise gradient clamp"),
}

_SURVIVAL_PREFIX = "survival_schedule."

PRESETS: dict[str, dict[str, str]] = {
    "desk": {},
    # Full-size configuration: 84x84 frames, 100-d latent, 25-step horizon,
    # and the large-run schedules (batch 100, 4.8e4 updates per iteration).
    "paper-scale": {
        "frame_height": "84",
        "frame_width": "84",
        "latent_dim": "100",
        "hidden_dim": "500",
        "horizon": "25",
        "conv_layers": "32x8s4,64x4s2,64x3s1",
        "iterations": "19",
        "initial_cases_per_game": "400000",
        "cases_per_game_per_iter": "200000",
        "candidate_schedule": "1:25,4:100,7:200",
        "lr_schedule": "1:1e-4,4:5e-5,7:1e-5",
        "updates_per_iteration": "48000",
        "halve_lr_after": "24000",
        "batch_size": "100",
        "noop_max": "30",
        "preprocess": "max2",
    },
}


class RunSettings:
    """Parsed configuration split into the three config objects."""

    def __init__(self, model: ModelConfig, experiment: ExperimentConfig,
                 optimizer: OptimizerConfig, raw: dict[str, str]):
        self.model = model
        self.experiment = experiment
        self.optimizer = optimizer
        self.raw = raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=os.fspath(path))


def load_preset(name: str) -> dict[str, str]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[name])


def build_settings(values: dict[str, str], overrides: dict[str, str] | None = None
                   ) -> RunSettings:
    """Validate raw key/value pairs and build the config objects."""
    merged = dict(values)
    if overrides:
        merged.update(overrides)

    parsed: dict[str, object] = {}
    survival: dict[str, tuple] = {}
    for key, raw in merged.items():
        if key.startswith(_SURVIVAL_PREFIX):
            game = key[len(_SURVIVAL_PREFIX):]
            if not game:
                raise ConfigError(f"bad survival schedule key {key!r}")
            survival[game] = _parse_float_schedule(raw)
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = DEFAULTS[key][0]
        try:
            parsed[key] = parser(raw)
        except ConfigError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    effective = {key: parser_default[1] for key, parser_default in DEFAULTS.items()}
    effective.update(merged)
    for key, (parser, default, _) in DEFAULTS.items():
        if key not in parsed:
            parsed[key] = parser(default)

    games = parsed["games"]
    for game in survival:
        if game not in games:
            raise ConfigError(f"survival schedule for unknown game {game!r}; "
                              f"games are {games}")

    try:
        model = ModelConfig(
            frame_stack=parsed["frame_stack"],
            frame_height=parsed["frame_height"],
            frame_width=parsed["frame_width"],
            latent_dim=parsed["latent_dim"],
            hidden_dim=parsed["hidden_dim"],
            control_dim=parsed["control_dim"],
            horizon=parsed["horizon"],
            conv_layers=parsed["conv_layers"],
        )
        experiment = ExperimentConfig(
            games=games,
            iterations=parsed["iterations"],
            initial_cases_per_game=parsed["initial_cases_per_game"],
            cases_per_game_per_iter=parsed["cases_per_game_per_iter"],
            candidate_schedule=parsed["candidate_schedule"],
            survival_schedule=survival,
            lr_schedule=parsed["lr_schedule"],
            updates_per_iteration=parsed["updates_per_iteration"],
            halve_lr_after=parsed["halve_lr_after"],
            batch_size=parsed["batch_size"],
            weight_multiplier=parsed["weight_multiplier"],
            weight_period=parsed["weight_period"],
            noop_max=parsed["noop_max"],
            eval_episodes=parsed["eval_episodes"],
            preprocess=parsed["preprocess"],
            seed=parsed["seed"],
            workers=parsed["workers"],
        )
        optimizer = OptimizerConfig(
            learning_rate=parsed["lr_schedule"][0][1],
            beta1=parsed["beta1"],
            beta2=parsed["beta2"],
            epsilon=parsed["epsilon"],
            weight_decay=parsed["weight_decay"],
            grad_clip=parsed["grad_clip"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    for game, sched in experiment.survival_schedule.items():
        effective[_SURVIVAL_PREFIX + game] = ",".join(f"{it}:{val}" for it, val in sched)
    return RunSettings(model, experiment, optimizer, effective)


def echo_config(settings: RunSettings, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(settings.raw):
            fh.write(f"{key} = {settings.raw[key]}\n")
