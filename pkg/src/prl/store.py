"""Binary persistence: replay datasets and model checkpoints.

Both formats are little-endian and fixed-layout so files are byte-portable
across platforms.  Dataset records are fixed-size (frames quantized to 8
bits) for O(1) random access by the weighted sampler; the record count in
the header is only advanced after the records themselves are flushed, so a
crash mid-append leaves the file loadable at its previous count.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .model import Model, ModelConfig

__all__ = [
    "TrainingCase",
    "Dataset",
    "FormatError",
    "IncompatibleCheckpointError",
    "quantize_frames",
    "dequantize_frames",
    "save_checkpoint",
    "load_checkpoint",
]

DATASET_MAGIC = b"PRLD"
CHECKPOINT_MAGIC = b"PRLM"
FORMAT_VERSION = 1

# magic(4) version(u2) frame_stack(u1) height(u2) width(u2) horizon(u2)
_FIXED_HEADER = struct.Struct("<4sHBHHH")
_COUNT_STRUCT = struct.Struct("<Q")
_COUNT_OFFSET = _FIXED_HEADER.size


class FormatError(ValueError):
    """File is not a valid dataset/checkpoint or its version is unsupported."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint contents do not match the expected configuration."""


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 levels; round-trip error is at most 1/510."""
    return np.clip(np.round(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def dequantize_frames(levels: np.ndarray) -> np.ndarray:
    return np.asarray(levels, dtype=np.float64) / 255.0


@dataclass
class TrainingCase:
    """One stored decision point: the observation at window start, the k
    controls that followed, and the cumulative targets they produced."""

    observation: np.ndarray  # [F,H,W] uint8
    controls: np.ndarray     # [k,3] int8
    targets: np.ndarray      # [k,2] uint8
    iteration: int
    game_id: int

    def observation_float(self) -> np.ndarray:
        return dequantize_frames(self.observation)


def _record_dtype(frame_stack: int, height: int, width: int, horizon: int) -> np.dtype:
    return np.dtype([
        ("iteration", "<u4"),
        ("game", "<u2"),
        ("obs", "u1", (frame_stack, height, width)),
        ("controls", "i1", (horizon, 3)),
        ("targets", "u1", (horizon, 2)),
    ])


class Dataset:
    """Appendable fixed-record replay file with an in-memory mirror.

    Records are mirrored in memory for random access and per-iteration
    indexing; the file on disk is the durable copy and the only thing a
    resumed run needs.
    """

    def __init__(self, path, mode: str, frame_stack: int, height: int, width: int,
                 horizon: int, games: tuple[str, ...]):
        self.path = os.fspath(path)
        self.frame_stack = frame_stack
        self.height = height
        self.width = width
        self.horizon = horizon
        self.games = games
        self._dtype = _record_dtype(frame_stack, height, width, horizon)
        self._fh = open(self.path, mode)
        self._records = np.empty(0, dtype=self._dtype)

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, path, frame_stack: int, height: int, width: int, horizon: int,
               games) -> "Dataset":
        games = tuple(games)
        ds = cls(path, "w+b", frame_stack, height, width, horizon, games)
        header = _FIXED_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, frame_stack,
                                    height, width, horizon)
        header += _COUNT_STRUCT.pack(0)
        header += struct.pack("<H", len(games))
        for name in games:
            raw = name.encode("utf-8")
            header += struct.pack("<H", len(raw)) + raw
        ds._fh.write(header)
        ds._fh.flush()
        ds._data_offset = len(header)
        return ds

    @classmethod
    def open(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _FIXED_HEADER.size + _COUNT_STRUCT.size + 2:
            raise FormatError(f"{path}: file too short to be a dataset")
        magic, version, frame_stack, height, width, horizon = _FIXED_HEADER.unpack_from(blob, 0)
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        (count,) = _COUNT_STRUCT.unpack_from(blob, _COUNT_OFFSET)
        offset = _COUNT_OFFSET + _COUNT_STRUCT.size
        (game_count,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        games = []
        for _ in range(game_count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            games.append(blob[offset:offset + name_len].decode("utf-8"))
            offset += name_len

        ds = cls(path, "r+b", frame_stack, height, width, horizon, tuple(games))
        ds._data_offset = offset
        available = (len(blob) - offset) // ds._dtype.itemsize
        if count > available:
            raise FormatError(f"{path}: header promises {count} records, "
                              f"file holds {available}")
        ds._records = np.frombuffer(blob, dtype=ds._dtype, count=count,
                                    offset=offset).copy()
        return ds

    # -- access --------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    @property
    def count(self) -> int:
        return len(self._records)

    def case(self, index: int) -> TrainingCase:
        rec = self._records[index]
        return TrainingCase(observation=rec["obs"].copy(),
                            controls=rec["controls"].copy(),
                            targets=rec["targets"].copy(),
                            iteration=int(rec["iteration"]),
                            game_id=int(rec["game"]))

    def iteration_tags(self) -> np.ndarray:
        return self._records["iteration"].astype(np.int64)

    def game_ids(self) -> np.ndarray:
        return self._records["game"].astype(np.int64)

    def minibatch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense float arrays (observations, controls, targets) for training."""
        recs = self._records[np.asarray(indices)]
        return (dequantize_frames(recs["obs"]),
                recs["controls"].astype(np.float64),
                recs["targets"].astype(np.float64))

    # -- mutation --------------------------------------------------------------

    def append(self, cases: list[TrainingCase]) -> None:
        """Append records, then advance the header count (flush in between)."""
        if not cases:
            return
        batch = np.empty(len(cases), dtype=self._dtype)
        for i, case in enumerate(cases):
            obs = np.asarray(case.observation, dtype=np.uint8)
            controls = np.asarray(case.controls, dtype=np.int8)
            targets = np.asarray(case.targets, dtype=np.uint8)
            expected_obs = (self.frame_stack, self.height, self.width)
            if obs.shape != expected_obs:
                raise FormatError(f"case observation shape {obs.shape} does not match "
                                  f"dataset {expected_obs}")
            if controls.shape != (self.horizon, 3) or targets.shape != (self.horizon, 2):
                raise FormatError(f"case window shapes {controls.shape}/{targets.shape} "
                                  f"do not match horizon {self.horizon}")
            batch[i] = (case.iteration, case.game_id, obs, controls, targets)

        end = self._data_offset + len(self._records) * self._dtype.itemsize
        self._fh.seek(end)
        self._fh.write(batch.tobytes())
        self._fh.flush()
        os.fsync(self._fh.fileno())
        new_count = len(self._records) + len(batch)
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(_COUNT_STRUCT.pack(new_count))
        self._fh.flush()
        self._records = np.concatenate([self._records, batch])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "Dataset":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# checkpoints


def _pack_named_array(name: str, arr: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    out = struct.pack("<H", len(raw_name)) + raw_name
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += arr.astype("<f8").tobytes()
    return out


class _Reader:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.offset = offset

    def unpack(self, fmt: str):
        st = struct.Struct(fmt)
        vals = st.unpack_from(self.blob, self.offset)
        self.offset += st.size
        return vals

    def raw(self, size: int) -> bytes:
        out = self.blob[self.offset:self.offset + size]
        if len(out) != size:
            raise FormatError("checkpoint truncated")
        self.offset += size
        return out

    def named_array(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.raw(name_len).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.raw(size * 8), dtype="<f8").reshape(shape).copy()
        return name, arr


def save_checkpoint(path, model: Model, cursor: dict) -> None:
    """Write parameters, Adam moments, batch-norm buffers and the experiment
    cursor; the write is atomic (temp file + rename)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", FORMAT_VERSION)]
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(config_blob)))
    parts.append(config_blob)

    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        p = params[name]
        parts.append(_pack_named_array(name, p.value.data))
        parts.append(p.adam_m.astype("<f8").tobytes())
        parts.append(p.adam_v.astype("<f8").tobytes())
        parts.append(struct.pack("<Q", p.step_count))

    parts.append(struct.pack("<I", len(model.buffers)))
    for name in sorted(model.buffers):
        parts.append(_pack_named_array(name, model.buffers[name]))

    cursor_blob = json.dumps(cursor, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(cursor_blob)))
    parts.append(cursor_blob)

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[Model, dict]:
    """Rebuild the model bit-exactly; optionally insist on a known config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    magic = reader.raw(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<I")
    config = ModelConfig.from_dict(json.loads(reader.raw(config_len).decode("utf-8")))
    if expected_config is not None and config != expected_config:
        raise IncompatibleCheckpointError(
            f"checkpoint config {config} does not match expected {expected_config}")

    model = Model(config, seed=0)
    (n_params,) = reader.unpack("<I")
    seen = set()
    for _ in range(n_params):
        name, value = reader.named_array()
        if name not in model.params:
            raise IncompatibleCheckpointError(f"unexpected parameter {name!r}")
        p = model.params[name]
        if value.shape != p.value.data.shape:
            raise IncompatibleCheckpointError(
                f"parameter {name!r} shape {value.shape} does not match "
                f"{p.value.data.shape}")
        p.value.data = value
        p.adam_m = np.frombuffer(reader.raw(value.size * 8),
                                 dtype="<f8").reshape(value.shape).copy()
        p.adam_v = np.frombuffer(reader.raw(value.size * 8),
                                 dtype="<f8").reshape(value.shape).copy()
        (p.step_count,) = reader.unpack("<Q")
        seen.add(name)
    if seen != set(model.params):
        raise IncompatibleCheckpointError(
            f"checkpoint is missing parameters: {sorted(set(model.params) - seen)}")

    (n_buffers,) = reader.unpack("<I")
    for _ in range(n_buffers):
        name, value = reader.named_array()
        if name not in model.buffers:
            raise IncompatibleCheckpointError(f"unexpected buffer {name!r}")
        model.buffers[name][:] = value

    (cursor_len,) = reader.unpack("<I")
    cursor = json.loads(reader.raw(cursor_len).decode("utf-8"))
    return model, cursor
