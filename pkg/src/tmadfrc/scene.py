"""Point-target scenes, simulated receive grids, and grid file storage.

Monostatic geometry: the transmit array scrambles the OFDM frame per
direction, each target reflects the mixture arriving at its own angle, and a
separate uniform linear receive array observes the superposition.  For target
k at angle theta_k, range R_k, radial velocity v_k and reflectivity beta_k,
receive element m sees on subcarrier s of OFDM symbol mu:

    beta_k * scrambled(s, mu, theta_k)
           * exp(-2j pi m d_r sin(theta_k) / lambda)
           * exp(-2j pi s f_s 2 R_k / c)
           * exp(+2j pi mu T_p f_D(k, s))

with Doppler f_D(k, s) = 2 v_k (f_c + s f_s) / c, or the narrowband
simplification 2 v_k f_c / c when ``cfg.narrowband_doppler`` is set.

Noise is complex white Gaussian, calibrated so that
mean(|signal|^2) / sigma^2 equals the linear SNR (reference power 1.0 when
the scene is empty).  Sampling uses numpy's seeded PCG64 generator
(``np.random.default_rng``; ziggurat-sampled normals), so grids are
bit-reproducible for a given seed.
"""

import dataclasses
import json
import struct

import numpy as np

from .model import (
    SceneError,
    SystemConfig,
    Target,
    check_symbol_grid,
    validate_target,
)
from .tma import SwitchingPattern, scramble_symbols


@dataclasses.dataclass(frozen=True)
class Scene:
    """Targets plus the noise realization parameters.

    ``snr_db`` of None defers to ``cfg.snr_db``; an infinite value disables
    noise entirely.
    """

    targets: tuple
    seed: int = 0
    snr_db: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))


def validate_scene(scene: Scene, cfg: SystemConfig, allow_out_of_window: bool = False) -> Scene:
    """Check every target and the angle-identifiability bound."""
    for target in scene.targets:
        validate_target(target, cfg, allow_out_of_window=allow_out_of_window)
    distinct = {float(np.sin(np.radians(t.angle_deg))) for t in scene.targets}
    if len(distinct) > cfg.num_rx_antennas - 1:
        raise SceneError(
            f"{len(distinct)} distinct target angles exceed the "
            f"{cfg.num_rx_antennas - 1} the receive array can identify"
        )
    return scene


def _noise(rng: np.random.Generator, shape, sigma2: float) -> np.ndarray:
    scale = np.sqrt(sigma2 / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def radar_returns(
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    scene: Scene,
    allow_out_of_window: bool = False,
) -> np.ndarray:
    """Simulate the receive-array grid for one OFDM frame.

    Args:
        data: transmitted symbol grid (num_subcarriers, num_ofdm_symbols).

    Returns:
        Complex grid (num_rx_antennas, num_subcarriers, num_ofdm_symbols).
    """
    data = check_symbol_grid(cfg, data)
    validate_scene(scene, cfg, allow_out_of_window=allow_out_of_window)

    m = np.arange(cfg.num_rx_antennas)
    s = np.arange(cfg.num_subcarriers)
    mu = np.arange(cfg.num_ofdm_symbols)
    out = np.zeros(cfg.returns_shape, dtype=np.complex128)
    for target in scene.targets:
        scrambled = scramble_symbols(data, pattern, cfg, target.angle_deg)
        sin_theta = np.sin(np.radians(target.angle_deg))
        steer = np.exp(-2j * np.pi * m * cfg.rx_spacing_wavelengths * sin_theta)
        range_ramp = np.exp(
            -2j * np.pi * s * cfg.subcarrier_spacing_hz * 2.0 * target.range_m / cfg.c
        )
        if cfg.narrowband_doppler:
            doppler_hz = np.full(cfg.num_subcarriers, 2.0 * target.velocity_mps * cfg.carrier_freq_hz / cfg.c)
        else:
            doppler_hz = (
                2.0 * target.velocity_mps * (cfg.carrier_freq_hz + s * cfg.subcarrier_spacing_hz) / cfg.c
            )
        slow_time = np.exp(
            2j * np.pi * cfg.symbol_duration_s * np.multiply.outer(doppler_hz, mu)
        )  # (N_s, N_p)
        out += (
            target.reflectivity
            * steer[:, None, None]
            * (scrambled * range_ramp[:, None] * slow_time)[None, :, :]
        )

    snr_db = cfg.snr_db if scene.snr_db is None else scene.snr_db
    if np.isfinite(snr_db):
        signal_power = float(np.mean(np.abs(out) ** 2))
        reference = signal_power if signal_power > 0.0 else 1.0
        sigma2 = reference / 10.0 ** (snr_db / 10.0)
        out += _noise(np.random.default_rng(scene.seed), out.shape, sigma2)
    return out


def one_way_received(
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    theta_deg: float,
    snr_db: float,
    seed: int = 0,
) -> np.ndarray:
    """Direct-path grid seen by a single-antenna receiver at ``theta_deg``.

    The SNR is referenced to the received (scrambled) signal power at that
    angle, so detection statistics are comparable across directions.
    """
    received = scramble_symbols(check_symbol_grid(cfg, data), pattern, cfg, theta_deg)
    if np.isfinite(snr_db):
        sigma2 = float(np.mean(np.abs(received) ** 2)) / 10.0 ** (snr_db / 10.0)
        received = received + _noise(np.random.default_rng(seed), received.shape, sigma2)
    return received


# --- scene serialization -----------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "targets": [
            {
                "angle_deg": t.angle_deg,
                "range_m": t.range_m,
                "velocity_mps": t.velocity_mps,
                "beta": [t.reflectivity.real, t.reflectivity.imag],
            }
            for t in scene.targets
        ],
        "seed": scene.seed,
        "snr_db": None if scene.snr_db is None else scene.snr_db,
    }


def _target_from_dict(data: dict) -> Target:
    known = {"angle_deg", "range_m", "velocity_mps", "beta"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SceneError(f"unknown target keys: {', '.join(unknown)}")
    beta = data.get("beta", [1.0, 0.0])
    return Target(
        angle_deg=float(data["angle_deg"]),
        range_m=float(data["range_m"]),
        velocity_mps=float(data["velocity_mps"]),
        reflectivity=complex(beta[0], beta[1]),
    )


def scene_from_dict(data) -> Scene:
    """Accept either a bare target list or a {targets, seed, snr_db} object."""
    if isinstance(data, list):
        return Scene(targets=tuple(_target_from_dict(t) for t in data))
    known = {"targets", "seed", "snr_db"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SceneError(f"unknown scene keys: {', '.join(unknown)}")
    snr = data.get("snr_db")
    return Scene(
        targets=tuple(_target_from_dict(t) for t in data.get("targets", [])),
        seed=int(data.get("seed") or 0),
        snr_db=None if snr is None else float(snr),
    )


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- binary grid storage -------------------------------------------------------

GRID_MAGIC = b"TMAG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, n_rx, n_subcarriers, n_symbols, reserved


class GridFormatError(ValueError):
    """A grid file is malformed or truncated."""


def write_grid(path, values: np.ndarray) -> None:
    """Store a complex grid as little-endian interleaved float64 re/im.

    ``values`` may be 2-D (subcarrier, symbol) — stored with a leading
    receive-element axis of 1 — or 3-D (element, subcarrier, symbol).
    """
    values = np.asarray(values, dtype=np.complex128)
    if values.ndim == 2:
        values = values[None, :, :]
    if values.ndim != 3:
        raise GridFormatError(f"grid must be 2-D or 3-D, got shape {values.shape}")
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, *values.shape, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values).astype("<c16").tobytes())


def read_grid(path) -> np.ndarray:
    """Load a grid written by :func:`write_grid`; always returns 3-D."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise GridFormatError(
            f"grid header truncated: need {_HEADER.size} bytes, file has {len(raw)}"
        )
    magic, version, n_rx, n_sub, n_sym, _ = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r} at byte 0 (expected {GRID_MAGIC!r})")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version}")
    expected = n_rx * n_sub * n_sym * 16
    payload = len(raw) - _HEADER.size
    if payload != expected:
        raise GridFormatError(
            f"grid payload truncated at byte {len(raw)}: header promises "
            f"{expected} bytes after byte {_HEADER.size}, found {payload}"
        )
    data = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size)
    return data.reshape(n_rx, n_sub, n_sym).astype(np.complex128)
