"""Volumetric radiation field: encoding, sampling, and channel rendering.

The field is a pair of MLPs (coarse and fine) mapping an encoded sample
position and ray direction to an in-phase component I, a quadrature
component Q, and a density sigma.  A measurement's channel is rendered by
marching rays from the receiver, blending samples with transmittance
weights, and accumulating each sample's complex contribution

    w * (c / (4 pi t f)) * (I + jQ) * exp(-j 2 pi f t / c)

over every ray cast for that measurement.  A sample at depth t along a ray
acts as a virtual transmitter at distance t, so its free-space attenuation
and phase delay are explicit and the network only learns the residual
interaction terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .backend import kernels
from .core import SPEED_OF_LIGHT, direction_to_unit
from .mlp import LayerSpec, MlpParameters, init_mlp, mlp_backward, mlp_forward

D_MIN = 0.1  # meters: exclusion radius around the receiver

# direction used when probing density on a grid; density varies only weakly
# with direction, so one canonical probe is representative
CANONICAL_DIRECTION = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal encoding sizes for positions and directions.

    Zero direction frequencies removes the direction input entirely (no
    raw component either), which makes the field direction-independent; a
    useful setting when reflection gains do not vary with angle.
    """

    n_freq_position: int = 10
    n_freq_direction: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.n_freq_position < 1 or self.n_freq_direction < 0:
            raise ValueError("frequency counts out of range")

    @property
    def position_dim(self) -> int:
        return 3 * (2 * self.n_freq_position + (1 if self.include_input else 0))

    @property
    def direction_dim(self) -> int:
        if self.n_freq_direction == 0:
            return 0
        return 3 * (2 * self.n_freq_direction + (1 if self.include_input else 0))


def positional_encode(values, n_freq: int, include_input: bool = True, dtype=np.float64):
    """Sinusoidal features with frequencies pi * 2^k, k = 0..n_freq-1.

    ``values`` is (S, d); the output has d * (2*n_freq + include_input)
    columns ordered [identity, sin/cos band 0, sin/cos band 1, ...].
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a 2-D array of row vectors")
    if n_freq < 1:
        raise ValueError("need at least one frequency band")
    return kernels.positional_encode_core(values, n_freq, include_input, dtype)


def field_layer_specs(enc: EncodingConfig, trunk_width: int = 128, head_width: int = 64):
    """Architecture of one field MLP.

    Seven trunk layers of ``trunk_width`` with the encoded position
    re-injected after the fourth, then a head that concatenates the encoded
    direction into one ``head_width`` layer feeding the (I, Q, sigma)
    triple.  Activations: ReLU everywhere, with tanh on I/Q and ReLU on
    sigma applied by the caller on the final linear output.
    """
    w = trunk_width
    return (
        LayerSpec(("x",), w),
        LayerSpec(("prev",), w),
        LayerSpec(("prev",), w),
        LayerSpec(("prev",), w),
        LayerSpec(("prev", "x"), w),
        LayerSpec(("prev",), w),
        LayerSpec(("prev",), w),
        LayerSpec(("prev", "d"), head_width),
        LayerSpec(("prev",), 3, "linear"),
    )


@dataclass
class FieldOutput:
    """Per-sample field values on a ray batch: shapes all (R, N)."""

    i: np.ndarray
    q: np.ndarray
    sigma: np.ndarray


@dataclass
class RaySampleBatch:
    """Rays with sample depths, grouped by the measurement they render.

    ``measurement`` maps each ray to the index of its measurement within
    the render batch.  ``bin_width`` caps the spacing assigned to the last
    sample of every ray.
    """

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    depths: np.ndarray  # (R, N) increasing
    measurement: np.ndarray  # (R,) int
    t_near: float
    t_far: float
    bin_width: float

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.measurement = np.asarray(self.measurement, dtype=np.int64)
        r = self.origins.shape[0]
        if self.directions.shape != (r, 3) or self.depths.shape[0] != r:
            raise ValueError("inconsistent ray batch shapes")
        if self.measurement.shape != (r,):
            raise ValueError("measurement index must be per ray")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit vectors")
        if np.any(np.diff(self.depths, axis=1) < 0):
            raise ValueError("sample depths must be non-decreasing along rays")
        if self.depths.size and (
            self.depths.min() < self.t_near - 1e-12
            or self.depths.max() > self.t_far + 1e-12
        ):
            raise ValueError("sample depths outside [t_near, t_far]")

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    @property
    def n_measurements(self) -> int:
        return int(self.measurement.max()) + 1 if self.n_rays else 0

    def positions(self) -> np.ndarray:
        """Sample positions, shape (R, N, 3)."""
        return self.origins[:, None, :] + self.depths[:, :, None] * self.directions[:, None, :]

    def spacings(self) -> np.ndarray:
        """Per-sample spacing: forward differences, last capped at bin_width."""
        delta = np.empty_like(self.depths)
        delta[:, :-1] = np.diff(self.depths, axis=1)
        delta[:, -1] = self.bin_width
        np.maximum(delta, 1e-12, out=delta)
        return delta

    def with_depths(self, depths: np.ndarray) -> "RaySampleBatch":
        return RaySampleBatch(
            self.origins,
            self.directions,
            depths,
            self.measurement,
            self.t_near,
            self.t_far,
            self.bin_width,
        )


def stratified_samples(
    t_near: float,
    t_far: float,
    n: int,
    n_rays: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One depth per equal-width bin of [t_near, t_far] for each ray.

    With an rng the depth is uniform within its bin (stratified jitter);
    without one it sits at the bin midpoint, which keeps inference
    deterministic.
    """
    if not (t_far > t_near >= 0):
        raise ValueError("need t_far > t_near >= 0")
    if n < 1 or n_rays < 0:
        raise ValueError("sample and ray counts must be positive")
    width = (t_far - t_near) / n
    offsets = np.arange(n) * width + t_near
    if rng is None:
        u = np.full((n_rays, n), 0.5)
    else:
        u = rng.random((n_rays, n))
    return offsets + u * width


def hierarchical_samples(
    coarse_depths: np.ndarray,
    weights: np.ndarray,
    n_fine: int,
    rng: np.random.Generator | None = None,
    t_near: float | None = None,
    t_far: float | None = None,
    eps_floor: float = 1e-5,
) -> np.ndarray:
    """Importance-sample new depths from the coarse weight profile.

    Each coarse sample owns a bin (edges at midpoints between neighbors,
    extended to t_near/t_far when given); the sampling PDF is piecewise
    constant and proportional to ``w_i + eps_floor``.  All-zero weights
    therefore fall back to uniform.  Returns (R, n_fine) sorted depths;
    no gradients flow through this boundary.
    """
    depths = np.asarray(coarse_depths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if depths.shape != w.shape or depths.ndim != 2:
        raise ValueError("coarse depths and weights must share an (R, N) shape")
    n_rays, n_bins = depths.shape
    lo = depths[:, :1] if t_near is None else np.full((n_rays, 1), float(t_near))
    hi = depths[:, -1:] if t_far is None else np.full((n_rays, 1), float(t_far))
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    edges = np.concatenate([lo, mids, hi], axis=1)  # (R, N+1)
    widths = np.maximum(edges[:, 1:] - edges[:, :-1], 0.0)

    mass = w + eps_floor
    np.maximum(mass, 0.0, out=mass)
    total = mass.sum(axis=1, keepdims=True)
    flat = total[:, 0] <= 0.0
    if np.any(flat):  # degenerate: revert to uniform over the range
        mass[flat] = 1.0
        total[flat] = n_bins
    pdf = mass / total
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine)).copy()
    else:
        u = rng.random((n_rays, n_fine))

    out = np.empty((n_rays, n_fine))
    for r in range(n_rays):
        idx = np.searchsorted(cdf[r], u[r], side="right") - 1
        np.clip(idx, 0, n_bins - 1, out=idx)
        p = pdf[r, idx]
        frac = np.where(p > 0, (u[r] - cdf[r, idx]) / np.where(p > 0, p, 1.0), 0.5)
        out[r] = edges[r, idx] + np.clip(frac, 0.0, 1.0) * widths[r, idx]
    out.sort(axis=1)
    return out


def merge_depths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sorted union of two per-ray depth sets."""
    return np.sort(np.concatenate([a, b], axis=1), axis=1)


def compute_weights(sigma: np.ndarray, deltas: np.ndarray):
    """Transmittance T, opacity alpha, and blend weights w = T * alpha.

    T_i is the transmittance accumulated before sample i (T_0 = 1) and
    alpha_i = 1 - exp(-sigma_i * delta_i).  Densities must be nonnegative;
    the per-ray weight sum is at most 1 by construction.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigma.shape != deltas.shape or sigma.ndim != 2:
        raise ValueError("sigma and deltas must share an (R, N) shape")
    if sigma.size and sigma.min() < 0:
        raise ValueError("densities must be nonnegative")
    if deltas.size and deltas.min() <= 0:
        raise ValueError("spacings must be positive")
    return kernels.compute_weights_core(sigma, deltas)


def render_channels(
    batch: RaySampleBatch,
    outputs: FieldOutput,
    frequency_hz: float,
    weights: np.ndarray,
    d_min: float = D_MIN,
):
    """Rendered complex channel per measurement, plus the backward cache.

    Sums every sample of every ray belonging to a measurement.  Samples
    closer than ``d_min`` to the receiver contribute no radiance but keep
    their opacity.
    """
    amp_const = SPEED_OF_LIGHT / (4.0 * math.pi * frequency_hz)
    wavenumber = 2.0 * math.pi * frequency_hz / SPEED_OF_LIGHT
    g_re, g_im, amp, cos_p, sin_p = kernels.render_forward_core(
        batch.depths, weights, outputs.i, outputs.q, amp_const, wavenumber, d_min
    )
    n_meas = batch.n_measurements
    h_re = np.bincount(batch.measurement, weights=g_re, minlength=n_meas)
    h_im = np.bincount(batch.measurement, weights=g_im, minlength=n_meas)
    cache = (amp, cos_p, sin_p)
    return h_re + 1j * h_im, (g_re + 1j * g_im), cache


def render_channel(
    batch: RaySampleBatch,
    outputs: FieldOutput,
    frequency_hz: float,
    d_min: float = D_MIN,
):
    """Channel for a single measurement's render set."""
    if batch.n_rays and batch.measurement.max() != 0:
        raise ValueError("render_channel expects a single measurement")
    _, _, w = compute_weights(outputs.sigma, batch.spacings())
    h, _, _ = render_channels(batch, outputs, frequency_hz, w, d_min)
    return complex(h[0])


@dataclass
class FieldModel:
    """Trained (or training) radiation field with everything needed to render."""

    enc: EncodingConfig
    coarse: MlpParameters
    fine: MlpParameters
    box_min: np.ndarray
    box_max: np.ndarray
    t_near: float
    t_far: float
    n_coarse: int
    n_fine: int
    frequency_hz: float

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64)
        self.box_max = np.asarray(self.box_max, dtype=np.float64)
        if self.box_min.shape != (3,) or self.box_max.shape != (3,):
            raise ValueError("normalization box must be two 3-vectors")
        if np.any(self.box_max <= self.box_min):
            raise ValueError("normalization box must have positive extent")
        if not (self.t_far > self.t_near >= 0):
            raise ValueError("need t_far > t_near >= 0")

    @property
    def bin_width(self) -> float:
        return (self.t_far - self.t_near) / self.n_coarse

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        """Map scene coordinates into the [-1, 1] encoding domain."""
        span = self.box_max - self.box_min
        return 2.0 * (positions - self.box_min) / span - 1.0

    def params(self, which: str) -> MlpParameters:
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise ValueError("which must be 'coarse' or 'fine'")


DENSITY_BIAS_CUSHION = 0.05


def _prime_density_head(params: MlpParameters, enc: EncodingConfig, rng) -> None:
    """Start the density relu alive everywhere, with slack against collapse.

    The density preactivation is a single linear combination of nonnegative
    trunk features, so its sign over the whole input domain is close to a
    per-draw coin flip, and a mostly-negative draw leaves the relu without
    gradient anywhere.  Worse, early training pressure is net-negative (the
    cheapest way to shrink a bad prediction is to zero all density), and a
    head pushed below zero at every sample never recovers.  Flip the output
    column if the draw starts mostly dead, then shift its bias so the median
    preactivation sits a small cushion above zero: density starts low but
    live, and transient downward pressure stays recoverable.
    """
    n = 256
    x = rng.uniform(-1.0, 1.0, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x_enc = positional_encode(x, enc.n_freq_position, enc.include_input, params.dtype)
    d_enc = positional_encode(d, enc.n_freq_direction, enc.include_input, params.dtype)
    z, _ = mlp_forward(params, {"x": x_enc, "d": d_enc})
    z_sigma = z[:, 2]
    if np.median(z_sigma) < 0:
        params.weights[-1][:, 2] *= -1
        z_sigma = -z_sigma
    params.biases[-1][2] += params.dtype.type(
        DENSITY_BIAS_CUSHION - np.median(z_sigma)
    )


def init_field_model(
    enc: EncodingConfig,
    box_min,
    box_max,
    t_near: float,
    t_far: float,
    n_coarse: int,
    n_fine: int,
    frequency_hz: float,
    rng: np.random.Generator,
    dtype=np.float32,
    final_scale: float = 1e-2,
) -> FieldModel:
    specs = field_layer_specs(enc)
    dims = {"x": enc.position_dim, "d": enc.direction_dim}
    coarse = init_mlp(specs, dims, rng, dtype=dtype, final_scale=final_scale)
    _prime_density_head(coarse, enc, rng)
    fine = init_mlp(specs, dims, rng, dtype=dtype, final_scale=final_scale)
    _prime_density_head(fine, enc, rng)
    return FieldModel(
        enc=enc,
        coarse=coarse,
        fine=fine,
        box_min=box_min,
        box_max=box_max,
        t_near=t_near,
        t_far=t_far,
        n_coarse=n_coarse,
        n_fine=n_fine,
        frequency_hz=frequency_hz,
    )


def encode_directions(model: FieldModel, directions: np.ndarray, dtype) -> np.ndarray:
    """Encode unit direction vectors (already in [-1, 1] per component)."""
    if model.enc.n_freq_direction == 0:
        return np.zeros((len(directions), 0), dtype=dtype)
    return positional_encode(
        directions, model.enc.n_freq_direction, model.enc.include_input, dtype
    )


def field_forward(model: FieldModel, which: str, batch: RaySampleBatch):
    """Evaluate one field MLP on every sample of a ray batch.

    Returns the FieldOutput (R, N arrays) and the cache needed by
    :func:`field_backward`.
    """
    params = model.params(which)
    dtype = params.dtype
    r, n = batch.depths.shape
    pos = batch.positions().reshape(r * n, 3)
    x_enc = positional_encode(
        model.normalize(pos), model.enc.n_freq_position, model.enc.include_input, dtype
    )
    d_enc = encode_directions(model, batch.directions, dtype)
    d_enc = np.repeat(d_enc, n, axis=0)
    z, cache = mlp_forward(params, {"x": x_enc, "d": d_enc})
    i = np.tanh(z[:, 0]).reshape(r, n)
    q = np.tanh(z[:, 1]).reshape(r, n)
    sigma = np.maximum(z[:, 2], 0).reshape(r, n)
    return FieldOutput(i, q, sigma), cache


def field_backward(
    model: FieldModel,
    which: str,
    cache,
    outputs: FieldOutput,
    d_i: np.ndarray,
    d_q: np.ndarray,
    d_sigma: np.ndarray,
):
    """Backpropagate per-sample (dI, dQ, dsigma) into parameter gradients."""
    params = model.params(which)
    dtype = params.dtype
    s = outputs.i.size
    dz = np.empty((s, 3), dtype=dtype)
    i = outputs.i.reshape(s)
    q = outputs.q.reshape(s)
    dz[:, 0] = d_i.reshape(s) * (1.0 - i * i)
    dz[:, 1] = d_q.reshape(s) * (1.0 - q * q)
    dz[:, 2] = d_sigma.reshape(s) * (outputs.sigma.reshape(s) > 0)
    return mlp_backward(params, cache, dz)


def density_grid(
    model: FieldModel,
    bounds,
    resolution,
    which: str = "fine",
    max_cells: int = 2_000_000,
    chunk: int = 65536,
):
    """Densities at the centers of a regular grid over ``bounds``.

    Probes the field with the canonical direction.  Returns (centers,
    sigma) with shapes (nx, ny, nz, 3) and (nx, ny, nz).  Grids larger
    than ``max_cells`` raise, since the export is diagnostic and a huge
    grid is almost always a configuration mistake.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if np.isscalar(resolution):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(v) for v in resolution)
    if len(res) != 3 or min(res) < 1:
        raise ValueError("resolution must be one or three positive integers")
    n_cells = res[0] * res[1] * res[2]
    if n_cells > max_cells:
        raise ValueError(
            f"grid of {n_cells} cells exceeds the cap of {max_cells}"
        )
    axes = [
        lo[k] + (np.arange(res[k]) + 0.5) * (hi[k] - lo[k]) / res[k] for k in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1)
    flat = centers.reshape(-1, 3)

    params = model.params(which)
    dtype = params.dtype
    d_enc_row = positional_encode(
        CANONICAL_DIRECTION[None, :],
        model.enc.n_freq_direction,
        model.enc.include_input,
        dtype,
    )
    sig = np.empty(n_cells, dtype=np.float64)
    for start in range(0, n_cells, chunk):
        part = flat[start : start + chunk]
        x_enc = positional_encode(
            model.normalize(part),
            model.enc.n_freq_position,
            model.enc.include_input,
            dtype,
        )
        d_enc = np.repeat(d_enc_row, part.shape[0], axis=0)
        z, _ = mlp_forward(params, {"x": x_enc, "d": d_enc})
        sig[start : start + part.shape[0]] = np.maximum(z[:, 2], 0)
    return centers, sig.reshape(res)
