"""Comparison methods: nearest-neighbor averaging and a direct MLP.

Both map receiver position straight to a complex channel, skipping the
field entirely.  They share the optimizer, scheduler, and encoding of the
main model, which keeps every accuracy comparison about the method rather
than the tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_position, nmse as nmse_metric, snr_db as to_snr_db
from .field import positional_encode
from .mlp import (
    LayerSpec,
    MlpParameters,
    OptimizerState,
    PlateauScheduler,
    TrainingDiverged,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .sim import Dataset

DIRECT_MLP_WIDTH = 128
DIRECT_MLP_DEPTH = 7


@dataclass
class KnnModel:
    """Channel lookup by unweighted average of the nearest measurements."""

    positions: np.ndarray  # (N, 3)
    channels: np.ndarray  # (N,) complex
    k: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.channels = np.asarray(self.channels, dtype=np.complex128).reshape(-1)
        n = self.positions.shape[0]
        if self.channels.shape[0] != n:
            raise ValueError("one channel per position")
        if n == 0:
            raise ValueError("model needs at least one measurement")
        if not (1 <= self.k <= n):
            raise ValueError("k must lie in [1, number of measurements]")


def fit_knn(dataset: Dataset, k: int = 3, split: str = "train") -> KnnModel:
    ids = dataset.indices(split)
    return KnnModel(dataset.positions()[ids], dataset.channels()[ids], k)


def knn_predict(model: KnnModel, position) -> complex:
    """Complex mean over the K nearest stored positions.

    Distance ties are broken toward the lower record index, so the
    prediction is deterministic even on tie boundaries.
    """
    pos = as_position(position)
    dist = np.linalg.norm(model.positions - pos[None, :], axis=1)
    nearest = np.argsort(dist, kind="stable")[: model.k]
    return complex(model.channels[nearest].mean())


@dataclass
class DirectMlpModel:
    """Encoded position -> (re, im), scaled by one fitted amplitude.

    The tanh output head bounds raw predictions to the unit square;
    ``channel_scale`` (the training split's largest channel magnitude)
    restores physical units.
    """

    params: MlpParameters
    channel_scale: float
    box_min: np.ndarray
    box_max: np.ndarray
    n_freq_position: int = 10
    include_input: bool = True

    def __post_init__(self):
        self.box_min = as_position(self.box_min)
        self.box_max = as_position(self.box_max)
        if np.any(self.box_max <= self.box_min):
            raise ValueError("normalization box must have positive extent")
        if not (self.channel_scale > 0 and np.isfinite(self.channel_scale)):
            raise ValueError("channel scale must be positive and finite")

    def encode(self, positions: np.ndarray) -> np.ndarray:
        span = self.box_max - self.box_min
        x = 2.0 * (positions - self.box_min) / span - 1.0
        return positional_encode(
            x, self.n_freq_position, self.include_input, self.params.dtype
        )


def direct_mlp_layers() -> tuple[LayerSpec, ...]:
    hidden = tuple(
        LayerSpec(("x",) if i == 0 else ("prev",), DIRECT_MLP_WIDTH)
        for i in range(DIRECT_MLP_DEPTH)
    )
    return hidden + (LayerSpec(("prev",), 2, "tanh"),)


@dataclass(kw_only=True)
class DirectMlpConfig:
    """Training knobs for the direct baseline; defaults mirror `train`."""

    n_iterations: int = 5000
    batch_size: int = 32
    learning_rate: float = 5e-4
    plateau_patience: int = 10
    plateau_factor: float = 0.9
    plateau_threshold: float = 1e-4
    min_learning_rate: float = 1e-6
    scheduler_every: int = 25
    n_freq_position: int = 10
    dtype: str = "float32"
    seed: int = 0
    divergence_loss: float = 1e6

    def __post_init__(self):
        if self.n_iterations < 1 or self.batch_size < 1:
            raise ValueError("iteration count and batch size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def _predict_batch(model: DirectMlpModel, positions: np.ndarray):
    z, cache = mlp_forward(model.params, {"x": model.encode(positions)})
    pred = model.channel_scale * (
        z[:, 0].astype(np.float64) + 1j * z[:, 1].astype(np.float64)
    )
    return pred, z, cache


def train_direct_mlp(dataset: Dataset, config: DirectMlpConfig) -> DirectMlpModel:
    """Fit the direct baseline on the training split.

    Same loss as the field (single-quotient NMSE per batch), same
    optimizer and plateau schedule, deterministic under the seed.
    """
    ids = dataset.indices("train")
    if len(ids) == 0:
        raise ValueError("dataset has no training measurements")
    positions = dataset.positions()[ids]
    truths = dataset.channels()[ids]
    scale = float(np.abs(truths).max())
    if scale <= 0:
        raise ValueError("training channels are all zero")

    lo, hi = dataset.scene.bounds
    rng = np.random.default_rng(config.seed)
    dtype = np.float32 if config.dtype == "float32" else np.float64
    params = init_mlp(direct_mlp_layers(), {"x": 3 * (2 * config.n_freq_position + 1)}, rng, dtype=dtype)
    model = DirectMlpModel(
        params, scale, lo, hi, n_freq_position=config.n_freq_position
    )
    opt = OptimizerState.for_params(params)
    scheduler = PlateauScheduler(
        patience=config.plateau_patience,
        factor=config.plateau_factor,
        threshold=config.plateau_threshold,
        min_lr=config.min_learning_rate,
    )
    lr = config.learning_rate
    batch = min(config.batch_size, len(ids))
    window: list[float] = []
    for it in range(config.n_iterations):
        sel = rng.choice(len(ids), size=batch, replace=False)
        pred, z, cache = _predict_batch(model, positions[sel])
        resid = pred - truths[sel]
        denom = float(np.sum(np.abs(truths[sel]) ** 2))
        loss = float(np.sum(np.abs(resid) ** 2) / denom)
        if not np.isfinite(loss) or loss > config.divergence_loss:
            raise TrainingDiverged(f"baseline loss {loss} at iteration {it}")
        d_pred = (2.0 / denom) * resid  # dL/d(conj is folded: d|r|^2 = 2r)
        d_out = np.empty((batch, 2), dtype=dtype)
        d_out[:, 0] = model.channel_scale * d_pred.real
        d_out[:, 1] = model.channel_scale * d_pred.imag
        grads = mlp_backward(params, cache, d_out)
        adam_step(params, grads, opt, lr)
        window.append(loss)
        if len(window) == config.scheduler_every:
            lr = scheduler.step(float(np.mean(window)), lr)
            window.clear()
    return model


def direct_mlp_predict(model: DirectMlpModel, position) -> complex:
    pred, _, _ = _predict_batch(model, as_position(position)[None, :])
    return complex(pred[0])


@dataclass
class BaselineEvalReport:
    kind: str
    split: str
    n_measurements: int
    nmse: float
    snr_db: float
    predictions: np.ndarray
    truths: np.ndarray

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "split": self.split,
            "n_measurements": self.n_measurements,
            "nmse": self.nmse,
            "snr_db": self.snr_db,
        }


def evaluate_baseline(model, dataset: Dataset, split: str = "test") -> BaselineEvalReport:
    """Score either baseline on a dataset split with the shared metric."""
    ids = dataset.indices(split)
    if len(ids) == 0:
        raise ValueError(f"dataset has no {split!r} measurements")
    positions = dataset.positions()[ids]
    truths = dataset.channels()[ids]
    if isinstance(model, KnnModel):
        kind = "knn"
        predictions = np.array(
            [knn_predict(model, p) for p in positions], dtype=np.complex128
        )
    elif isinstance(model, DirectMlpModel):
        kind = "direct_mlp"
        predictions, _, _ = _predict_batch(model, positions)
    else:
        raise TypeError(f"not a baseline model: {type(model).__name__}")
    err = nmse_metric(predictions, truths)
    return BaselineEvalReport(
        kind, split, len(ids), err, to_snr_db(err), predictions, truths
    )
