"""System configuration, scene/estimate containers, and their serialization.

Grid conventions used throughout the package
--------------------------------------------
Symbol grids are plain complex ndarrays:

* transmitted / scrambled symbols: shape ``(num_subcarriers, num_ofdm_symbols)``,
  axis 0 = subcarrier index s, axis 1 = OFDM symbol index mu;
* received radar returns: shape ``(num_rx_antennas, num_subcarriers,
  num_ofdm_symbols)``, axis 0 = receive element index m.

Angles are degrees at every public boundary and radians only inside
formulas.  Element spacings are carrier wavelengths.  All functions here are
pure: same inputs, same outputs, no hidden state.
"""

import dataclasses
import hashlib
import json
import math

import numpy as np

#: Exact vacuum speed of light (m/s).
SPEED_OF_LIGHT = 299_792_458.0
#: Rounded value used by many link-budget style calculations; selected by
#: ``SystemConfig.rounded_speed_of_light`` so bin-center arithmetic can be
#: reproduced digit for digit.
ROUNDED_SPEED_OF_LIGHT = 3.0e8


class ConfigError(ValueError):
    """A system configuration violates one of its invariants."""


@dataclasses.dataclass(frozen=True)
class SystemConfig:
    """Static description of the OFDM waveform and the two antenna arrays.

    ``symbol_duration_s`` is the full OFDM symbol period including the cyclic
    prefix; the useful (data) portion always lasts ``1/subcarrier_spacing_hz``.
    """

    carrier_freq_hz: float
    subcarrier_spacing_hz: float
    num_subcarriers: int
    num_ofdm_symbols: int
    num_tx_antennas: int
    num_rx_antennas: int
    symbol_duration_s: float
    cu_angle_deg: float
    tx_spacing_wavelengths: float = 0.5
    rx_spacing_wavelengths: float = 0.5
    snr_db: float = 10.0
    rounded_speed_of_light: bool = False
    narrowband_doppler: bool = False

    @property
    def c(self) -> float:
        """Propagation speed used by all range/velocity arithmetic."""
        return ROUNDED_SPEED_OF_LIGHT if self.rounded_speed_of_light else SPEED_OF_LIGHT

    @property
    def wavelength_m(self) -> float:
        return self.c / self.carrier_freq_hz

    @property
    def useful_symbol_duration_s(self) -> float:
        return 1.0 / self.subcarrier_spacing_hz

    @property
    def cp_duration_s(self) -> float:
        return self.symbol_duration_s - self.useful_symbol_duration_s

    @property
    def grid_shape(self) -> tuple:
        return (self.num_subcarriers, self.num_ofdm_symbols)

    @property
    def returns_shape(self) -> tuple:
        return (self.num_rx_antennas,) + self.grid_shape

    @property
    def range_window_m(self) -> float:
        """Unambiguous range span of the subcarrier phase ramp."""
        return self.c / (2.0 * self.subcarrier_spacing_hz)

    @property
    def velocity_window_mps(self) -> float:
        """Half-width of the signed unambiguous velocity interval."""
        return self.c / (4.0 * self.carrier_freq_hz * self.symbol_duration_s)


# Ordered list of (predicate, message) pairs so the *first* violated invariant
# is the one reported.
def _invariants(cfg: SystemConfig):
    yield cfg.carrier_freq_hz > 0, "carrier_freq_hz must be positive"
    yield cfg.subcarrier_spacing_hz > 0, "subcarrier_spacing_hz must be positive"
    yield cfg.num_subcarriers >= 1, "num_subcarriers must be >= 1"
    yield cfg.num_ofdm_symbols >= 1, "num_ofdm_symbols must be >= 1"
    yield cfg.num_tx_antennas >= 1, "num_tx_antennas must be >= 1"
    yield cfg.num_rx_antennas >= 1, "num_rx_antennas must be >= 1"
    yield cfg.tx_spacing_wavelengths > 0, "tx_spacing_wavelengths must be positive"
    yield cfg.rx_spacing_wavelengths > 0, "rx_spacing_wavelengths must be positive"
    # Allow exact equality (zero cyclic prefix) up to float rounding of 1/f_s.
    yield (
        cfg.symbol_duration_s >= (1.0 - 1e-12) / cfg.subcarrier_spacing_hz,
        "symbol_duration_s must be >= 1/subcarrier_spacing_hz (non-negative cyclic prefix)",
    )
    yield abs(cfg.cu_angle_deg) <= 90.0, "cu_angle_deg must lie in [-90, 90]"
    yield not math.isnan(cfg.snr_db), "snr_db must not be NaN"


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Return ``cfg`` unchanged iff every invariant holds.

    Raises:
        ConfigError: naming the first violated invariant.
    """
    for ok, message in _invariants(cfg):
        if not ok:
            raise ConfigError(message)
    return cfg


def derived_resolutions(cfg: SystemConfig):
    """Resolution cells implied by the configuration.

    Returns:
        (range_res_m, velocity_res_mps, angle_grid_deg) where angle_grid_deg
        maps each receive-DFT bin index to its beam angle in degrees (NaN for
        bins whose spatial frequency falls outside |sin theta| <= 1, which can
        happen for element spacings below half a wavelength).
    """
    validate_config(cfg)
    range_res = cfg.c / (2.0 * cfg.num_subcarriers * cfg.subcarrier_spacing_hz)
    velocity_res = cfg.c / (
        2.0 * cfg.carrier_freq_hz * cfg.num_ofdm_symbols * cfg.symbol_duration_s
    )
    k = np.arange(cfg.num_rx_antennas)
    freq = k / cfg.num_rx_antennas
    freq = np.where(freq >= 0.5, freq - 1.0, freq)  # wrap to [-1/2, 1/2)
    sin_grid = -freq / cfg.rx_spacing_wavelengths
    angle_grid = np.full(cfg.num_rx_antennas, np.nan)
    valid = np.abs(sin_grid) <= 1.0 + 1e-12
    angle_grid[valid] = np.degrees(np.arcsin(np.clip(sin_grid[valid], -1.0, 1.0)))
    return range_res, velocity_res, angle_grid


@dataclasses.dataclass(frozen=True)
class Target:
    """A point scatterer: angle (deg), slant range (m), radial velocity (m/s),
    complex reflectivity."""

    angle_deg: float
    range_m: float
    velocity_mps: float
    reflectivity: complex = 1.0 + 0.0j


class SceneError(ValueError):
    """A target or scene violates the geometry the waveform can support."""


def validate_target(target: Target, cfg: SystemConfig, allow_out_of_window: bool = False) -> Target:
    """Check a single target against the configured unambiguous windows."""
    if abs(target.angle_deg) > 90.0:
        raise SceneError(f"target angle {target.angle_deg} deg outside [-90, 90]")
    if target.range_m < 0.0:
        raise SceneError(f"target range {target.range_m} m is negative")
    if not allow_out_of_window:
        if target.range_m >= cfg.range_window_m:
            raise SceneError(
                f"target range {target.range_m} m outside unambiguous window "
                f"[0, {cfg.range_window_m}) m; pass allow_out_of_window to override"
            )
        if abs(target.velocity_mps) > cfg.velocity_window_mps:
            raise SceneError(
                f"target velocity {target.velocity_mps} m/s outside unambiguous window "
                f"+-{cfg.velocity_window_mps} m/s; pass allow_out_of_window to override"
            )
    return target


def check_symbol_grid(cfg: SystemConfig, values: np.ndarray) -> np.ndarray:
    """Validate shape of a (subcarrier, symbol) grid and return it as complex."""
    values = np.asarray(values)
    if values.shape != cfg.grid_shape:
        raise ValueError(f"symbol grid shape {values.shape} != expected {cfg.grid_shape}")
    return values.astype(np.complex128, copy=False)


def check_antenna_grid(cfg: SystemConfig, values: np.ndarray) -> np.ndarray:
    """Validate shape of a per-receive-element grid and return it as complex."""
    values = np.asarray(values)
    if values.shape != cfg.returns_shape:
        raise ValueError(f"antenna grid shape {values.shape} != expected {cfg.returns_shape}")
    return values.astype(np.complex128, copy=False)


@dataclasses.dataclass(frozen=True)
class CoarseEstimate:
    """One (angle bin, range bin, velocity bin) detection from the DFT stage.

    ``velocity_bin`` uses the signed (centered) bin convention.
    """

    angle_bin: int
    angle_deg: float
    range_bin: int
    range_m: float
    velocity_bin: int
    velocity_mps: float


@dataclasses.dataclass(frozen=True)
class RefinedEstimate:
    """One refined target triple; ``angle_bin`` records the coarse bin it
    came from."""

    angle_bin: int
    angle_deg: float
    range_m: float
    velocity_mps: float


@dataclasses.dataclass
class EstimateSet:
    """Coarse detections plus refined triples for one processed frame."""

    coarse: list = dataclasses.field(default_factory=list)
    refined: list = dataclasses.field(default_factory=list)

    def validate(self) -> "EstimateSet":
        bins = {row.angle_bin for row in self.coarse}
        for row in self.refined:
            if row.angle_bin not in bins:
                raise ValueError(
                    f"refined estimate traces to angle bin {row.angle_bin} "
                    f"which holds no coarse detection"
                )
        return self

    def to_dict(self) -> dict:
        return {
            "coarse": [dataclasses.asdict(row) for row in self.coarse],
            "refined": [dataclasses.asdict(row) for row in self.refined],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EstimateSet":
        return cls(
            coarse=[CoarseEstimate(**row) for row in data.get("coarse", [])],
            refined=[RefinedEstimate(**row) for row in data.get("refined", [])],
        ).validate()


# --- configuration serialization -------------------------------------------

_INT_FIELDS = {"num_subcarriers", "num_ofdm_symbols", "num_tx_antennas", "num_rx_antennas"}
_BOOL_FIELDS = {"rounded_speed_of_light", "narrowband_doppler"}


def config_to_dict(cfg: SystemConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> SystemConfig:
    """Build and validate a config from a plain dict; unknown keys are an error."""
    known = {f.name for f in dataclasses.fields(SystemConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {}
    for key, value in data.items():
        if key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {key} must be an integer, got {value!r}")
            coerced[key] = value
        elif key in _BOOL_FIELDS:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a boolean, got {value!r}")
            coerced[key] = value
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key} must be a number, got {value!r}")
            coerced[key] = float(value)
    try:
        cfg = SystemConfig(**coerced)
    except TypeError as exc:  # missing required field
        raise ConfigError(str(exc)) from None
    return validate_config(cfg)


def config_to_json(cfg: SystemConfig) -> str:
    # repr-based float serialization round-trips bit-exactly through json
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def config_from_json(text: str) -> SystemConfig:
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError("config JSON must be an object")
    return config_from_dict(data)


def load_config(path) -> SystemConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())


def save_config(cfg: SystemConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_json(cfg) + "\n")


def config_hash(cfg: SystemConfig) -> str:
    """Stable hex digest identifying a configuration (embedded in outputs)."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
