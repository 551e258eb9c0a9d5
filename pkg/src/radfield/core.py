"""Shared physical constants, geometry types, and channel metrics.

Complex channels follow the engineering convention ``h = a * exp(j*phi)``
with time dependence ``exp(+j*2*pi*f*t)``, so propagation over a distance
``d`` multiplies by ``exp(-j*2*pi*f*d/c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact
VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m (CODATA 2018)

# A complex channel coefficient or gain.  Kept as a plain Python complex /
# complex128 throughout; the alias only names the role.
ComplexValue = complex

# A point in 3-D space, meters, as a float64 array of shape (3,).
Position = np.ndarray


def as_position(p) -> np.ndarray:
    """Coerce ``p`` to a float64 array of shape (3,)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"position must be a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Direction:
    """A direction of arrival or departure in scene coordinates.

    Azimuth is measured in the x-y plane from +x toward +y and lies in
    [-pi, pi); elevation is measured from the x-y plane toward +z and lies
    in [-pi/2, pi/2].
    """

    azimuth: float
    elevation: float

    def __post_init__(self):
        if not (-math.pi <= self.azimuth < math.pi):
            raise ValueError(f"azimuth {self.azimuth} outside [-pi, pi)")
        if not (-math.pi / 2 <= self.elevation <= math.pi / 2):
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")


def direction_to_unit(d: Direction) -> np.ndarray:
    """Unit 3-vector for a direction: (cos el cos az, cos el sin az, sin el)."""
    ce = math.cos(d.elevation)
    return np.array(
        [ce * math.cos(d.azimuth), ce * math.sin(d.azimuth), math.sin(d.elevation)],
        dtype=np.float64,
    )


def unit_to_direction(v) -> Direction:
    """Inverse of :func:`direction_to_unit`; normalizes non-unit input.

    At the poles (|elevation| = pi/2) azimuth is degenerate and pinned to 0.
    Raises ValueError on a zero vector.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("cannot convert zero or non-finite vector to a direction")
    x, y, z = arr / norm
    el = math.asin(min(1.0, max(-1.0, z)))
    if abs(x) < 1e-15 and abs(y) < 1e-15:
        az = 0.0  # pole: azimuth undefined
    else:
        az = math.atan2(y, x)
        if az >= math.pi:  # atan2 returns (-pi, pi]; fold pi to -pi
            az = -math.pi
    return Direction(az, el)


@dataclass(frozen=True)
class FrequencyConfig:
    """Carrier frequency plus an optional symmetric subcarrier comb.

    Subcarrier k sits at ``carrier_hz + k * subcarrier_spacing_hz``.
    """

    carrier_hz: float
    subcarrier_spacing_hz: float = 312.5e3
    subcarrier_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.carrier_hz <= 0:
            raise ValueError("carrier frequency must be positive")
        if self.subcarrier_spacing_hz <= 0:
            raise ValueError("subcarrier spacing must be positive")
        if self.subcarrier_range is not None:
            lo, hi = self.subcarrier_range
            if lo != -hi or hi < 0:
                raise ValueError("subcarrier range must be symmetric about 0")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def subcarrier_frequency(self, k: int) -> float:
        if self.subcarrier_range is not None:
            lo, hi = self.subcarrier_range
            if not (lo <= k <= hi):
                raise ValueError(f"subcarrier index {k} outside [{lo}, {hi}]")
        return self.carrier_hz + k * self.subcarrier_spacing_hz

    def subcarrier_indices(self) -> list[int]:
        if self.subcarrier_range is None:
            return [0]
        lo, hi = self.subcarrier_range
        return list(range(lo, hi + 1))


@dataclass
class Measurement:
    """One receiver location with its measured channel and path directions."""

    position: np.ndarray
    channel: ComplexValue
    doas: list[Direction] = field(default_factory=list)

    def __post_init__(self):
        self.position = as_position(self.position)
        self.channel = complex(self.channel)

    def doa_units(self) -> np.ndarray:
        """Stacked unit vectors for the stored directions, shape (n, 3)."""
        if not self.doas:
            return np.zeros((0, 3))
        return np.stack([direction_to_unit(d) for d in self.doas])


def free_space_gain(distance_m: float, frequency_hz: float) -> ComplexValue:
    """Complex free-space channel over one line-of-sight path.

    Amplitude is ``c / (4 pi d f)`` and phase is ``-2 pi f d / c``.
    Raises ValueError for non-positive distance or frequency.
    """
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    if frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    amp = SPEED_OF_LIGHT / (4.0 * math.pi * distance_m * frequency_hz)
    phase = -2.0 * math.pi * frequency_hz * distance_m / SPEED_OF_LIGHT
    return complex(amp * math.cos(phase), amp * math.sin(phase))


def multipath_sum(gains) -> ComplexValue:
    """Coherent sum of per-path complex gains; an empty set sums to 0."""
    total = 0.0 + 0.0j
    for g in gains:
        total += complex(g)
    return total


def nmse(predicted, truth) -> float:
    """Normalized mean square error over a batch of complex channels.

    Single quotient: ``sum |h_hat - h|^2 / sum |h|^2``.  Both inputs must
    have the same shape and the truth must carry nonzero total power.
    """
    p = np.asarray(predicted, dtype=np.complex128)
    t = np.asarray(truth, dtype=np.complex128)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    denom = float(np.sum(np.abs(t) ** 2))
    if denom == 0.0:
        raise ValueError("truth has zero total power")
    return float(np.sum(np.abs(p - t) ** 2) / denom)


def snr_db(nmse_value: float) -> float:
    """Map NMSE to SNR in dB: ``-10 * log10(nmse)``; 0 maps to +inf."""
    if nmse_value < 0:
        raise ValueError("NMSE cannot be negative")
    if nmse_value == 0.0:
        return math.inf
    return -10.0 * math.log10(nmse_value)


def iq_to_amp_phase(i, q):
    """Convert in-phase/quadrature parts to (amplitude, phase in (-pi, pi])."""
    i_arr = np.asarray(i, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    return np.hypot(i_arr, q_arr), np.arctan2(q_arr, i_arr)
