"""Constellations and the one-way communication link.

The receiver protocol is fixed by the intended user: equalize by the known
fundamental array gain in the steered direction, then slice to the nearest
constellation point.  A receiver in the steered direction sees exactly the
transmitted constellation plus noise; anywhere else the harmonic mixture both
rotates the fundamental and superimposes inter-subcarrier leakage, neither of
which the fixed protocol can undo.  :func:`ber_vs_angle` measures the
resulting bit error rate per direction — the security figure of merit.

SNR is defined per receiver direction (noise scaled to the locally received
signal power), which models the strongest eavesdropper: perfect gain control
and the same operating SNR as the intended user.
"""

import dataclasses
import math

import numpy as np

from .model import SystemConfig
from .tma import SwitchingPattern, harmonic_coefficient, scramble_symbols

_DEMOD_CHUNK = 1 << 16


@dataclasses.dataclass(frozen=True)
class Constellation:
    """Unit-average-power symbol alphabet with per-rail Gray labeling."""

    name: str
    points: np.ndarray  # (2**bits_per_symbol,) complex, indexed by bit label
    bits_per_symbol: int

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.complex128)
        if points.ndim != 1 or points.size != 1 << self.bits_per_symbol:
            raise ValueError(
                f"{self.name}: need {1 << self.bits_per_symbol} points, got {points.shape}"
            )
        points.setflags(write=False)
        object.__setattr__(self, "points", points)


def square_qam(order: int) -> Constellation:
    """Gray-labeled square QAM normalized to unit average power.

    Each rail carries half the bits: rail position j in [0, L) maps to
    amplitude (L - 1) - 2j under Gray label j ^ (j >> 1), so horizontally or
    vertically adjacent points differ in exactly one bit.
    """
    side = math.isqrt(order)
    if side * side != order or side < 2 or side & (side - 1):
        raise ValueError(f"order must be an even power of two >= 4, got {order}")
    j = np.arange(side)
    amplitude = np.empty(side)
    amplitude[j ^ (j >> 1)] = (side - 1) - 2 * j  # index by Gray label
    bits = order.bit_length() - 1
    label = np.arange(order)
    points = amplitude[label >> (bits // 2)] + 1j * amplitude[label & (side - 1)]
    points = points / math.sqrt(2.0 * (side * side - 1) / 3.0)
    name = "QPSK" if order == 4 else f"{order}-QAM"
    return Constellation(name=name, points=points, bits_per_symbol=bits)


def qpsk() -> Constellation:
    return square_qam(4)


def modulate(bits, constellation: Constellation) -> np.ndarray:
    """Bit stream (multiple of bits_per_symbol long, MSB first) to symbols."""
    bits = np.asarray(bits)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0 or 1")
    k = constellation.bits_per_symbol
    if bits.size % k:
        raise ValueError(f"bit count {bits.size} is not a multiple of {k}")
    weights = 1 << np.arange(k - 1, -1, -1)
    labels = bits.reshape(-1, k) @ weights
    return constellation.points[labels]


def demodulate(symbols, constellation: Constellation) -> np.ndarray:
    """Nearest-point slicing back to the bit stream (MSB first)."""
    symbols = np.asarray(symbols, dtype=np.complex128).ravel()
    k = constellation.bits_per_symbol
    labels = np.empty(symbols.size, dtype=np.intp)
    for lo in range(0, symbols.size, _DEMOD_CHUNK):
        chunk = symbols[lo : lo + _DEMOD_CHUNK]
        labels[lo : lo + _DEMOD_CHUNK] = np.argmin(
            np.abs(chunk[:, None] - constellation.points[None, :]), axis=1
        )
    shifts = np.arange(k - 1, -1, -1)
    return ((labels[:, None] >> shifts) & 1).ravel().astype(np.uint8)


def ber(sent_bits, received_bits) -> float:
    sent = np.asarray(sent_bits).ravel()
    got = np.asarray(received_bits).ravel()
    if sent.shape != got.shape:
        raise ValueError(f"bit streams differ in length: {sent.size} vs {got.size}")
    return float(np.mean(sent != got))


def awgn(signal: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add complex white Gaussian noise at the given SNR relative to the
    mean power of ``signal``."""
    signal = np.asarray(signal, dtype=np.complex128)
    sigma2 = float(np.mean(np.abs(signal) ** 2)) / 10.0 ** (snr_db / 10.0)
    noise = rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)
    return signal + np.sqrt(sigma2 / 2.0) * noise


def qpsk_awgn_ber(snr_db: float) -> float:
    """Theoretical Gray-QPSK bit error rate on an AWGN channel at symbol SNR
    ``snr_db``: Q(sqrt(SNR))."""
    snr = 10.0 ** (snr_db / 10.0)
    return 0.5 * math.erfc(math.sqrt(snr / 2.0))


def link_ber(
    cfg: SystemConfig,
    pattern: SwitchingPattern,
    constellation: Constellation,
    theta_deg: float,
    snr_db: float | None = None,
    num_symbols: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Bit error rate of the fixed receiver protocol in one direction.

    Random payload bits are scrambled toward ``theta_deg``, noise is added at
    the per-direction SNR, and the result is equalized by the fundamental
    gain of the steered direction before slicing.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    snr = cfg.snr_db if snr_db is None else snr_db
    count = cfg.num_subcarriers * cfg.num_ofdm_symbols if num_symbols is None else num_symbols
    if count % cfg.num_subcarriers:
        raise ValueError(
            f"num_symbols must fill whole OFDM symbols "
            f"(multiples of {cfg.num_subcarriers}), got {count}"
        )
    bits = rng.integers(0, 2, size=count * constellation.bits_per_symbol)
    grid = modulate(bits, constellation).reshape(cfg.num_subcarriers, -1)
    received = scramble_symbols(grid, pattern, cfg, theta_deg)
    if np.isfinite(snr):
        received = awgn(received, snr, rng)
    reference = harmonic_coefficient(pattern, cfg, 0, cfg.cu_angle_deg)
    return ber(bits, demodulate(received / reference, constellation))


def ber_vs_angle(
    cfg: SystemConfig,
    pattern: SwitchingPattern,
    constellation: Constellation,
    angles_deg,
    snr_db: float | None = None,
    num_symbols: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """BER of the fixed protocol at each probe direction.

    Every position in ``angles_deg`` gets an independent child RNG stream
    spawned from ``seed``, so appending probes never changes the payload or
    noise of the probes already in the list.
    """
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=float))
    children = np.random.SeedSequence(seed).spawn(angles.size)
    return np.array(
        [
            link_ber(
                cfg,
                pattern,
                constellation,
                float(angle),
                snr_db=snr_db,
                num_symbols=num_symbols,
                rng=np.random.default_rng(child),
            )
            for angle, child in zip(angles, children)
        ]
    )
