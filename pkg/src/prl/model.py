"""The three-network predictor: perception, residual recurrent cell, valuation.

Perception maps a stack of frames to a low-dimensional latent vector.  The
recurrent cell advances that latent one control at a time by adding a learned
residual, so with an all-zero transition the latent is carried through
unchanged.  The valuation head turns any latent into two probabilities:
death-so-far and scored-without-dying-so-far, both cumulative from the start
of the rollout window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .optim import Parameter

__all__ = ["ModelConfig", "Model", "StepPrediction", "model_loss"]

CONTROL_DIM = 3


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions. ``conv_layers`` entries are (channels, kernel, stride);
    each conv uses padding = kernel // 2 and is followed by batch norm + ReLU."""

    frame_stack: int = 4
    frame_height: int = 16
    frame_width: int = 16
    latent_dim: int = 32
    hidden_dim: int = 128
    control_dim: int = CONTROL_DIM
    horizon: int = 10
    conv_layers: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (8, 3, 2))

    def __post_init__(self):
        for name in ("frame_stack", "frame_height", "frame_width",
                     "latent_dim", "hidden_dim", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.control_dim != CONTROL_DIM:
            raise ValueError(f"control_dim is fixed at {CONTROL_DIM}")
        if not self.conv_layers:
            raise ValueError("at least one conv layer is required")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size configuration: 4x84x84 observations, 100-d latent,
        500-wide transition, 25-step horizon."""
        return cls(frame_stack=4, frame_height=84, frame_width=84,
                   latent_dim=100, hidden_dim=500, horizon=25,
                   conv_layers=((32, 8, 4), (64, 4, 2), (64, 3, 1)))

    def conv_output_size(self) -> int:
        h, w = self.frame_height, self.frame_width
        channels = self.frame_stack
        for out_ch, kernel, stride in self.conv_layers:
            pad = kernel // 2
            h = (h + 2 * pad - kernel) // stride + 1
            w = (w + 2 * pad - kernel) // stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"conv stack shrinks {self.frame_height}x{self.frame_width} "
                                 "frames below 1x1")
            channels = out_ch
        return channels * h * w

    def to_dict(self) -> dict:
        return {
            "frame_stack": self.frame_stack,
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim,
            "control_dim": self.control_dim,
            "horizon": self.horizon,
            "conv_layers": [list(layer) for layer in self.conv_layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_layers"] = tuple(tuple(layer) for layer in d["conv_layers"])
        return cls(**d)


@dataclass(frozen=True)
class StepPrediction:
    """Cumulative probabilities read off one rollout step."""
    p_death: float
    p_point: float


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Holds the full parameter set and wires the three networks together.

    All forward methods work on batches.  ``training`` switches batch norm
    between batch statistics and running statistics; planning and data
    generation always run in eval mode so the model is deterministic there.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = True
        self.perceive_calls = 0
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init_weights(np.random.default_rng(seed))

    def _add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def _init_weights(self, rng: np.random.Generator) -> None:
        cfg = self.config
        in_ch = cfg.frame_stack
        for i, (out_ch, kernel, _) in enumerate(cfg.conv_layers):
            fan_in = in_ch * kernel * kernel
            self._add_param(f"perception.conv{i}.weight",
                            _uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), fan_in))
            self._add_param(f"perception.conv{i}.bias", np.zeros(out_ch))
            self._add_param(f"perception.bn{i}.gain", np.ones(out_ch))
            self._add_param(f"perception.bn{i}.bias", np.zeros(out_ch))
            self.buffers[f"perception.bn{i}.running_mean"] = np.zeros(out_ch)
            self.buffers[f"perception.bn{i}.running_var"] = np.ones(out_ch)
            in_ch = out_ch
        flat = cfg.conv_output_size()
        self._add_param("perception.out.weight",
                        _uniform_fan_in(rng, (flat, cfg.latent_dim), flat))
        self._add_param("perception.out.bias", np.zeros(cfg.latent_dim))

        f_in = cfg.latent_dim + cfg.control_dim
        self._add_param("f.l1.weight", _uniform_fan_in(rng, (f_in, cfg.hidden_dim), f_in))
        self._add_param("f.l1.bias", np.zeros(cfg.hidden_dim))
        self._add_param("f.l2.weight",
                        _uniform_fan_in(rng, (cfg.hidden_dim, cfg.latent_dim), cfg.hidden_dim))
        self._add_param("f.l2.bias", np.zeros(cfg.latent_dim))

        self._add_param("value.l1.weight",
                        _uniform_fan_in(rng, (cfg.latent_dim, cfg.latent_dim), cfg.latent_dim))
        self._add_param("value.l1.bias", np.zeros(cfg.latent_dim))
        self._add_param("value.l2.weight",
                        _uniform_fan_in(rng, (cfg.latent_dim, 2), cfg.latent_dim))
        self._add_param("value.l2.bias", np.zeros(2))

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def parameter_count(self, prefix: str = "") -> int:
        return sum(p.data.size for name, p in self.params.items()
                   if name.startswith(prefix))

    # -- networks -----------------------------------------------------------

    def perceive(self, obs) -> Tensor:
        """Encode observations [B,F,H,W] into latents [B,d]."""
        x = obs if isinstance(obs, Tensor) else Tensor(obs)
        cfg = self.config
        expected = (cfg.frame_stack, cfg.frame_height, cfg.frame_width)
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise ShapeError(f"observation batch shape {x.data.shape} does not match "
                             f"(B, {expected[0]}, {expected[1]}, {expected[2]})")
        self.perceive_calls += 1
        for i, (_, kernel, stride) in enumerate(cfg.conv_layers):
            x = ag.conv2d(x, self.params[f"perception.conv{i}.weight"].value,
                          self.params[f"perception.conv{i}.bias"].value,
                          stride=stride, padding=kernel // 2)
            x = ag.batch_norm(x, self.params[f"perception.bn{i}.gain"].value,
                              self.params[f"perception.bn{i}.bias"].value,
                              self.buffers[f"perception.bn{i}.running_mean"],
                              self.buffers[f"perception.bn{i}.running_var"],
                              training=self.training)
            x = ag.relu(x)
        x = ag.reshape(x, (x.data.shape[0], -1))
        return ag.linear(x, self.params["perception.out.weight"].value,
                         self.params["perception.out.bias"].value)

    def rrnn_step(self, h: Tensor, controls) -> tuple[Tensor, Tensor]:
        """Advance latents one step: returns (h + residual, residual).

        The transition input is [relu(LN(h)), control]; the ReLU is applied
        to the normalized latent only, never to the control components.
        """
        c = controls if isinstance(controls, Tensor) else Tensor(
            np.asarray(controls, dtype=np.float64))
        if c.data.ndim != 2 or c.data.shape != (h.data.shape[0], self.config.control_dim):
            raise ShapeError(f"control batch shape {c.data.shape} does not match "
                             f"({h.data.shape[0]}, {self.config.control_dim})")
        z = ag.concat([ag.relu(ag.layer_norm(h)), c], axis=1)
        hidden = ag.linear(z, self.params["f.l1.weight"].value,
                           self.params["f.l1.bias"].value)
        residual = ag.linear(ag.relu(hidden), self.params["f.l2.weight"].value,
                             self.params["f.l2.bias"].value)
        return ag.add(h, residual), residual

    def valuate(self, h: Tensor) -> Tensor:
        """Map latents [B,d] to cumulative probabilities [B,2]: death, point."""
        z = ag.layer_norm(h)
        z = ag.relu(ag.linear(z, self.params["value.l1.weight"].value,
                              self.params["value.l1.bias"].value))
        return ag.sigmoid(ag.linear(z, self.params["value.l2.weight"].value,
                                    self.params["value.l2.bias"].value))

    def rollout(self, obs, controls) -> list[Tensor]:
        """Unroll the predictor: one [B,2] prediction per control step.

        ``controls`` is [B,k,3]; the same transition and valuation weights
        are shared across all k steps.
        """
        c = np.asarray(controls, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] == 0 or c.shape[1] == 0:
            raise ValueError(f"rollout needs a non-empty [B,k,3] control array, got {c.shape}")
        h = self.perceive(obs)
        predictions = []
        for j in range(c.shape[1]):
            h, _ = self.rrnn_step(h, c[:, j])
            predictions.append(self.valuate(h))
        return predictions

    def predict(self, obs, controls) -> list[StepPrediction]:
        """Single-observation rollout returning plain per-step probabilities."""
        c = np.asarray(controls, dtype=np.float64)
        was_training = self.training
        self.eval()
        try:
            with ag.no_grad():
                preds = self.rollout(np.asarray(obs)[None], c[None])
        finally:
            self.training = was_training
        return [StepPrediction(p_death=float(p.data[0, 0]), p_point=float(p.data[0, 1]))
                for p in preds]

    def score_candidates(self, obs, control_seqs) -> tuple[np.ndarray, np.ndarray]:
        """Score candidate control sequences against one observation.

        Perception runs exactly once; the resulting latent is tiled across
        candidates and all sequences advance in one batch.  Returns the
        final-step (p_death, p_point) arrays, which aggregate each whole
        window because the targets are cumulative.
        """
        seqs = np.asarray(control_seqs, dtype=np.float64)
        if seqs.ndim != 3:
            raise ValueError(f"expected [n,k,3] candidate array, got {seqs.shape}")
        n = seqs.shape[0]
        was_training = self.training
        self.eval()
        try:
            with ag.no_grad():
                h0 = self.perceive(np.asarray(obs, dtype=np.float64)[None])
                h = Tensor(np.repeat(h0.data, n, axis=0))
                for j in range(seqs.shape[1]):
                    h, _ = self.rrnn_step(h, seqs[:, j])
                final = self.valuate(h).data
        finally:
            self.training = was_training
        return final[:, 0].copy(), final[:, 1].copy()


def model_loss(predictions: list[Tensor], targets) -> Tensor:
    """Mean binary cross-entropy over both heads and all rollout steps.

    ``targets`` is [B,k,2] with the same step count as ``predictions``.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 3 or t.shape[1] != len(predictions):
        raise ValueError(f"target shape {t.shape} does not match {len(predictions)} "
                         "prediction steps")
    total = ag.bce_loss(predictions[0], t[:, 0])
    for j in range(1, len(predictions)):
        total = ag.add(total, ag.bce_loss(predictions[j], t[:, j]))
    return ag.scale(total, 1.0 / len(predictions))
