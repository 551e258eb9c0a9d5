"""Generic feedforward network with named input streams.

Every layer consumes a concatenation of named streams: ``"prev"`` is the
previous layer's output, anything else is an external input (encoded
positions, encoded directions, ...).  This one engine runs the radiation
field trunks, the direct position-to-channel baseline, and the small
path-count regressor, all through the backend kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import kernels

_ACT_CODES = {"linear": 0, "relu": 1, "tanh": 2}


@dataclass(frozen=True)
class LayerSpec:
    """One linear layer: which streams feed it, its width, its activation."""

    inputs: tuple[str, ...]
    width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.width <= 0:
            raise ValueError("layer width must be positive")
        if not self.inputs:
            raise ValueError("layer needs at least one input stream")


@dataclass
class MlpParameters:
    """Weights and biases for a stack of :class:`LayerSpec` layers.

    ``stream_dims`` fixes the width of every external stream; the first
    layer may not consume ``"prev"``.
    """

    layers: tuple[LayerSpec, ...]
    stream_dims: dict[str, int]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def input_dims(self, index: int) -> list[int]:
        dims = []
        for name in self.layers[index].inputs:
            if name == "prev":
                if index == 0:
                    raise ValueError("first layer cannot consume 'prev'")
                dims.append(self.layers[index - 1].width)
            else:
                dims.append(self.stream_dims[name])
        return dims

    @property
    def dtype(self):
        return self.weights[0].dtype

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def copy(self) -> "MlpParameters":
        return MlpParameters(
            self.layers,
            dict(self.stream_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_mlp(
    layers,
    stream_dims,
    rng: np.random.Generator,
    dtype=np.float32,
    final_scale: float = 1.0,
) -> MlpParameters:
    """He-uniform initialization; biases zero.

    ``final_scale`` shrinks the last layer's weights, which keeps initial
    field outputs small so early transmittance does not saturate.
    """
    params = MlpParameters(tuple(layers), dict(stream_dims))
    for i, spec in enumerate(params.layers):
        fan_in = sum(params.input_dims(i))
        bound = np.sqrt(6.0 / fan_in)
        if i == len(params.layers) - 1:
            bound *= final_scale
        w = rng.uniform(-bound, bound, size=(fan_in, spec.width))
        params.weights.append(np.ascontiguousarray(w, dtype=dtype))
        params.biases.append(np.zeros(spec.width, dtype=dtype))
    return params


def _gather_parts(params, streams, activations, index):
    parts = []
    for name in params.layers[index].inputs:
        if name == "prev":
            parts.append(activations[index - 1])
        else:
            parts.append(streams[name])
    return parts


def mlp_forward(params: MlpParameters, streams: dict[str, np.ndarray]):
    """Run the stack; returns (output, cache-of-activations for backward)."""
    dtype = params.dtype
    streams = {
        k: np.ascontiguousarray(v, dtype=dtype) for k, v in streams.items()
    }
    activations: list[np.ndarray] = []
    for i, spec in enumerate(params.layers):
        parts = _gather_parts(params, streams, activations, i)
        a = kernels.linear_forward(
            parts, params.weights[i], params.biases[i], _ACT_CODES[spec.activation]
        )
        activations.append(a)
    return activations[-1], (streams, activations)


@dataclass
class MlpGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )


def mlp_backward(params: MlpParameters, cache, d_out: np.ndarray) -> MlpGradients:
    """Reverse pass from the output gradient; consumes ``d_out``."""
    streams, activations = cache
    n = len(params.layers)
    d_weights: list[np.ndarray | None] = [None] * n
    d_biases: list[np.ndarray | None] = [None] * n
    d_prev = np.ascontiguousarray(d_out, dtype=params.dtype)
    for i in range(n - 1, -1, -1):
        spec = params.layers[i]
        parts = _gather_parts(params, streams, activations, i)
        want = {k for k, name in enumerate(spec.inputs) if name == "prev"}
        dw, db, dx = kernels.linear_backward(
            parts,
            activations[i],
            params.weights[i],
            d_prev,
            _ACT_CODES[spec.activation],
            want,
        )
        d_weights[i] = dw
        d_biases[i] = db
        if want:
            d_prev = dx[next(iter(want))]
        elif i != 0:
            raise ValueError("non-first layer without 'prev' input")
    return MlpGradients(d_weights, d_biases)


@dataclass
class OptimizerState:
    """Adam moments for one parameter list (weights then biases)."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: MlpParameters) -> "OptimizerState":
        tensors = list(params.weights) + list(params.biases)
        return cls(
            m=[np.zeros_like(t) for t in tensors],
            v=[np.zeros_like(t) for t in tensors],
        )


def adam_step(
    params: MlpParameters,
    grads: MlpGradients,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update over every tensor of one model."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    tensors = list(params.weights) + list(params.biases)
    gradients = list(grads.weights) + list(grads.biases)
    for t, g, m, v in zip(tensors, gradients, state.m, state.v):
        kernels.adam_step_core(t, g, m, v, lr, beta1, beta2, eps, bc1, bc2)


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau: cut the rate after ``patience`` bad steps.

    A step improves when the value drops below best * (1 - threshold).
    The ``patience``-th consecutive non-improving step multiplies the rate
    by ``factor`` (floored at ``min_lr``) and resets the counter, so a
    constant loss triggers the first cut on evaluation patience + 1.
    """

    patience: int = 10
    factor: float = 0.9
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float | None = None
    num_bad: int = 0

    def step(self, value: float, lr: float) -> float:
        if self.best is None or value < self.best * (1.0 - self.threshold):
            self.best = value
            self.num_bad = 0
            return lr
        self.num_bad += 1
        if self.num_bad >= self.patience:
            self.num_bad = 0
            return max(lr * self.factor, self.min_lr)
        return lr

    def state_dict(self) -> dict:
        return {"best": self.best, "num_bad": self.num_bad}

    def load_state_dict(self, d: dict) -> None:
        self.best = d["best"]
        self.num_bad = d["num_bad"]


class TrainingDiverged(RuntimeError):
    """Loss exploded or went non-finite; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
