"""Run configurations for the command-line tools.

Values are resolved with the precedence: command-line flags, then a JSON
config file, then the defaults below. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SimulateConfig:
    out: str = "simulation"
    seed: int = 0
    threads: int = 1
    catalog: str | None = None  # directory of structure files; None = synthetic classes
    # placement
    box: tuple = (512.0, 512.0, 512.0)  # nm
    voxel_size: float = 0.5  # nm
    protein_range: tuple = (1000, 3000)
    fiducial_range: tuple = (7, 14)
    vesicle_range: tuple = (2, 7)
    fiducial_radius: float = 5.0
    vesicle_radius_range: tuple = (15.0, 30.0)
    vesicle_wall: float = 5.0
    max_attempts: int = 1000
    # acquisition
    min_angle: float = -60.0
    max_angle: float = 60.0
    n_tilts: int = 61
    defocus_range: tuple = (2000.0, 5000.0)  # nm
    dose_range: tuple = (100.0, 120.0)  # e/A^2
    shift_half_range: float = 0.5  # nm
    use_dqe: bool = True
    optics: dict = field(default_factory=dict)  # OpticsConfig overrides
    ring_scale: bool = False
    reference: str | None = None  # MRC image or radial-profile table
    # reconstruction
    bin_factor: int = 2
    weighting: str = "ramp"


# 128 nm box: 1/64 of the full-size volume. Protein count is in the scaled
# range (16-47); fiducials and vesicles keep roughly the full-size densities.
DESK_PRESET = {
    "box": (128.0, 128.0, 128.0),
    "protein_range": (30, 30),
    "fiducial_range": (0, 1),
    "vesicle_range": (0, 1),
    "vesicle_radius_range": (12.0, 15.0),
}


@dataclass
class ReconstructConfig:
    tiltseries: str = ""
    out: str = "tomogram.mrc"
    bin_factor: int = 2
    weighting: str = "ramp"
    align: bool = True
    thickness: int | None = None  # output z size in binned voxels


@dataclass
class MatchConfig:
    tomogram: str = ""
    templates: str = ""  # directory with <class>.mrc potentials
    out: str = "predictions.txt"
    variant: str = "tm"  # tm or tm-f
    classes: tuple = ()
    spacing: float = 30.0  # deg
    n_candidates: int = 1000
    defocus: float = 3650.0  # nm
    lowpass: float = 4.0  # nm
    fiducials: bool = True
    fiducial_sigma: float = 5.0
    fiducial_polarity: str = "dark"
    threads: int = 1
    seed: int = 0


@dataclass
class EvaluateConfig:
    predictions: str = ""
    particles: str = ""
    occupancy: str | None = None
    out: str | None = None
    exclude_class: tuple = ("vesicle",)
    classes: tuple = ()
    n_truth: int | None = None
    radius: float | None = None  # fallback matcher when no occupancy mask


@dataclass
class DescribeConfig:
    structure: str = ""
    voxel_size: float = 0.5
    threshold: float = 0.5
    out: str | None = None


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def resolve(cls, config_file=None, overrides: dict | None = None, preset: dict | None = None):
    """Build ``cls`` from defaults, an optional preset, a JSON file and
    explicit overrides (in increasing priority)."""
    names = {f.name: f for f in fields(cls)}
    values = {}
    layers = [preset or {}]
    if config_file:
        try:
            data = json.loads(Path(config_file).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {config_file}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_file}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: top level must be an object")
        layers.append(data)
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for layer in layers:
        unknown = sorted(set(layer) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(layer)
    obj = cls()
    for k, v in values.items():
        setattr(obj, k, _coerce(v, getattr(obj, k)))
    return obj


def as_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))
