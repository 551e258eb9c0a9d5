"""Neural wireless radiation fields.

Reconstructs a volumetric radiation field from sparse channel measurements
and predicts complex wireless channels at unvisited locations.  Ships with
an image-method multipath simulator used for dataset generation and as the
evaluation ground truth.
"""

__version__ = "0.1.0"

from .core import (
    SPEED_OF_LIGHT,
    VACUUM_PERMITTIVITY,
    ComplexValue,
    Direction,
    FrequencyConfig,
    Measurement,
    Position,
    direction_to_unit,
    free_space_gain,
    iq_to_amp_phase,
    multipath_sum,
    nmse,
    snr_db,
    unit_to_direction,
)

__all__ = [
    "SPEED_OF_LIGHT",
    "VACUUM_PERMITTIVITY",
    "ComplexValue",
    "Direction",
    "FrequencyConfig",
    "Measurement",
    "Position",
    "direction_to_unit",
    "free_space_gain",
    "iq_to_amp_phase",
    "multipath_sum",
    "nmse",
    "snr_db",
    "unit_to_direction",
]
