"""First- and second-order wavelet scattering of fixed-length windows.

Frequencies are expressed on a Nyquist-normalised axis (1.0 is the Nyquist
frequency). Band-pass filters are analytic Morlet wavelets centred at
``2**(-j/Q)`` for ``j = 0..H``; ``Q - 1`` extra linearly spaced filters cover
the band below ``2**(-H/Q)`` and a Gaussian low-pass does the time averaging.
All convolutions are circular products on a zero-padded FFT grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft
from scipy.optimize import brentq

from .errors import InvalidParameters, NonFiniteInput

EPSILON = 2.0**-20
_HALF_POWER = 2.0 * math.sqrt(math.log(2.0))


def _corrected_gaussian(omega: np.ndarray, center: float, width: float) -> np.ndarray:
    """Gaussian bump minus the multiple of a DC Gaussian that zeroes it at 0.

    Negative frequencies are cut off so the filter is analytic.
    """
    kappa = math.exp(-(center**2) / (2 * width**2))
    out = np.exp(-((omega - center) ** 2) / (2 * width**2)) - kappa * np.exp(
        -(omega**2) / (2 * width**2)
    )
    out[omega < 0] = 0.0
    return out


def _peak_offset(width: float) -> float:
    """Gaussian centre for which the corrected bump peaks exactly at 1."""

    def slope_at_one(c: float) -> float:
        kappa = math.exp(-(c**2) / (2 * width**2))
        return -(1 - c) * math.exp(-((1 - c) ** 2) / (2 * width**2)) + kappa * math.exp(
            -1 / (2 * width**2)
        )

    if slope_at_one(1.0) <= 0:
        return 1.0
    return brentq(slope_at_one, 0.5, 1.0, xtol=1e-15)


def _l1_normalize(spectrum: np.ndarray) -> np.ndarray:
    return spectrum / np.abs(sfft.ifft(spectrum)).sum()


@dataclass(frozen=True)
class FilterBank:
    """Morlet filter bank sampled on an ``N``-point FFT grid.

    ``psi_hat`` rows ``0..H`` are the dyadic-grid wavelets; any further rows
    are the low-frequency linear filters. Every band-pass filter has unit L1
    norm in time, and ``phi_hat(0) == 1``.
    """

    Q: int
    H: int
    N: int
    psi_hat: np.ndarray
    phi_hat: np.ndarray
    centers: np.ndarray

    @property
    def n_dyadic(self) -> int:
        return self.H + 1

    @property
    def n_filters(self) -> int:
        return self.psi_hat.shape[0]

    @property
    def omega(self) -> np.ndarray:
        return 2.0 * sfft.fftfreq(self.N)

    @property
    def stride(self) -> int:
        return max(1, int(round(2.0 ** (self.H / self.Q - 1))))

    def first_order_indices(self, include_lowpass: bool = False) -> list[int]:
        return list(range(self.n_filters if include_lowpass else self.n_dyadic))

    def littlewood_paley(self) -> np.ndarray:
        return (np.abs(self.psi_hat) ** 2).sum(axis=0) + np.abs(self.phi_hat) ** 2


def build_filter_bank(Q: int, H: int, N: int) -> FilterBank:
    """Analytic Morlet wavelets, low-frequency linear filters and the low-pass."""
    for name, value in (("Q", Q), ("H", H), ("N", N)):
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise InvalidParameters(f"{name} must be a positive integer, got {value!r}")
    if N & (N - 1):
        raise InvalidParameters(f"N must be a power of two, got {N}")
    if N < 2.0 ** (H / Q):
        raise InvalidParameters(f"N={N} is shorter than the largest scale 2^(H/Q)")

    omega = 2.0 * sfft.fftfreq(N)
    # half-power bandwidth of the mother wavelet is 1/Q around centre 1
    width = 1.0 / (_HALF_POWER * Q)
    c = _peak_offset(width)
    rows, centers = [], []
    for j in range(H + 1):
        scale = 2.0 ** (j / Q)
        rows.append(_corrected_gaussian(scale * omega, c, width))
        centers.append(1.0 / scale)

    low = 2.0 ** (-H / Q)
    low_width = low / (_HALF_POWER * Q)
    for l in range(1, Q):
        center = l * low / Q
        rows.append(_corrected_gaussian(omega, center, low_width))
        centers.append(center)

    psi_hat = np.array([_l1_normalize(r) for r in rows]).real
    phi_hat = np.exp(-(omega**2) / (2 * low_width**2))
    return FilterBank(Q, H, N, psi_hat, phi_hat, np.array(centers))


def fft_length(n_samples: int, H: int, Q: int) -> int:
    """Smallest power of two leaving room for the widest filter on both sides."""
    support = int(math.ceil(8 * 2.0 ** (H / Q)))
    need = max(n_samples + support, int(math.ceil(2.0 ** (H / Q))))
    return 1 << (need - 1).bit_length()


@dataclass(frozen=True)
class ScatteringCoefficients:
    """Scattering coefficients on the full (unsubsampled) time grid.

    ``s1[k]`` belongs to filter ``first_order[k]``; ``s2[p]`` to the pair
    ``pairs[p] = (j1, j2)`` with ``j1 < j2``. ``norm`` is ``|x| * phi``, the
    first-order renormaliser. After :func:`renormalize_and_log` the arrays hold
    log values and ``logged`` is set.
    """

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    norm: np.ndarray
    first_order: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...]
    stride: int
    epsilon: float = EPSILON
    logged: bool = False

    def s2_path(self, j1: int, j2: int) -> np.ndarray:
        return self.s2[self.pairs.index((j1, j2))]

    def s1_path(self, j1: int) -> np.ndarray:
        return self.s1[self.first_order.index(j1)]


def _lowpass(signals: np.ndarray, bank: FilterBank) -> np.ndarray:
    half = bank.phi_hat[: bank.N // 2 + 1]
    return sfft.irfft(sfft.rfft(signals, axis=-1) * half, n=bank.N, axis=-1)


# low-pass bins below this gain are dropped when sampling the output directly
_PHI_CUTOFF = 1e-17


def _lowpass_sampler(bank: FilterBank, at: np.ndarray):
    """Bins and matrix giving the low-pass output at positions ``at`` from rfft spectra.

    Equivalent to ``irfft(rfft(u) * phi)[at]`` but only touches the bins where
    ``phi`` is non-negligible.
    """
    half = bank.phi_hat[: bank.N // 2 + 1]
    keep = np.flatnonzero(half > _PHI_CUTOFF)
    weight = np.where((keep == 0) | (keep == bank.N // 2), 1.0, 2.0) / bank.N
    phase = np.exp(2j * np.pi * np.outer(keep, np.asarray(at)) / bank.N)
    return keep, (weight * half[keep])[:, None] * phase


def scatter(
    window: np.ndarray, bank: FilterBank, include_lowpass: bool = False, at=None
) -> ScatteringCoefficients:
    """Raw S0, S1 and S2 of one window.

    The window is zero-padded to ``bank.N``; results are cropped back to the
    window length. With ``at`` every coefficient is evaluated only at those
    sample positions, which skips the full-length inverse transforms.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("window must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("window contains NaN or infinite samples")
    L = len(x)
    if L > bank.N:
        raise InvalidParameters(f"window of {L} samples exceeds FFT length {bank.N}")
    xp = np.zeros(bank.N)
    xp[:L] = x

    if at is None:
        crop = slice(0, L)

        def lowpass(u):
            return _lowpass(u, bank)[..., crop]

    else:
        at = np.asarray(at, dtype=np.int64)
        if at.size and (at.min() < 0 or at.max() >= L):
            raise InvalidParameters("sample positions must lie inside the window")
        keep, E = _lowpass_sampler(bank, at)

        def lowpass(u):
            return (sfft.rfft(u, axis=-1)[..., keep] @ E).real

    first = bank.first_order_indices(include_lowpass)
    pairs = tuple((a, b) for i, a in enumerate(first) for b in first[i + 1 :])

    s0 = lowpass(xp)
    norm = lowpass(np.abs(xp))

    xf = sfft.fft(xp)
    u1 = np.abs(sfft.ifft(xf[None, :] * bank.psi_hat[first], axis=-1))
    s1 = lowpass(u1)

    n_out = s0.shape[-1]
    if pairs:
        u1f = sfft.fft(u1, axis=-1)
        pos = {j: k for k, j in enumerate(first)}
        s2 = np.empty((len(pairs), n_out))
        # chunked to bound the complex temporaries
        chunk = 32
        for start in range(0, len(pairs), chunk):
            block = pairs[start : start + chunk]
            a = np.array([pos[j1] for j1, _ in block])
            b = np.array([j2 for _, j2 in block])
            u2 = np.abs(sfft.ifft(u1f[a] * bank.psi_hat[b], axis=-1))
            s2[start : start + len(block)] = lowpass(u2)
    else:
        s2 = np.empty((0, n_out))

    # the low-pass is positive; clamp round-off below zero
    return ScatteringCoefficients(
        s0=s0,
        s1=np.maximum(s1, 0.0),
        s2=np.maximum(s2, 0.0),
        norm=np.maximum(norm, 0.0),
        first_order=tuple(first),
        pairs=pairs,
        stride=bank.stride,
    )


def _floored_log(values: np.ndarray, floor: float) -> np.ndarray:
    return np.log(np.maximum(values, floor))


def renormalize_and_log(coeffs: ScatteringCoefficients) -> ScatteringCoefficients:
    """Divide S1 by ``|x| * phi + eps`` and S2 by ``S1(j1) + eps``, then take logs.

    Every log is floored at ``log(eps)`` so silent inputs stay finite.
    """
    if coeffs.logged:
        raise ValueError("coefficients are already log-compressed")
    eps = coeffs.epsilon
    s1_tilde = coeffs.s1 / (coeffs.norm + eps)
    rows = [coeffs.first_order.index(j1) for j1, _ in coeffs.pairs]
    s2_tilde = coeffs.s2 / (coeffs.s1[rows] + eps) if rows else coeffs.s2
    return ScatteringCoefficients(
        s0=_floored_log(coeffs.s0 + eps, eps),
        s1=_floored_log(s1_tilde, eps),
        s2=_floored_log(s2_tilde, eps),
        norm=coeffs.norm,
        first_order=coeffs.first_order,
        pairs=coeffs.pairs,
        stride=coeffs.stride,
        epsilon=eps,
        logged=True,
    )


def slot_centers(n_samples: int, stride: int) -> np.ndarray:
    """Centres of the half-overlapping windows of width ``2 * stride`` that fit inside the signal."""
    m = np.arange(1, n_samples // stride + 1)
    return (m * stride)[(m + 1) * stride <= n_samples]


@dataclass(frozen=True)
class ScatteringFeature:
    """Flattened scattering feature of one epoch.

    ``values`` is path-major: entry ``p * n_slots + s`` is path ``paths[p]``
    at time slot ``s``. Paths are ``(order, j1, j2)`` with ``-1`` for unused
    indices.
    """

    values: np.ndarray
    paths: tuple[tuple[int, int, int], ...]
    n_slots: int
    subject_id: str = ""
    epoch_index: int = -1

    @property
    def dim(self) -> int:
        return len(self.values)

    def path_map(self, index: int) -> tuple[int, int, int, int]:
        p, s = divmod(index, self.n_slots)
        return (*self.paths[p], s)


def feature_paths(coeffs: ScatteringCoefficients) -> tuple[tuple[int, int, int], ...]:
    return (
        ((0, -1, -1),)
        + tuple((1, j, -1) for j in coeffs.first_order)
        + tuple((2, a, b) for a, b in coeffs.pairs)
    )


def subsample_concat(
    coeffs: ScatteringCoefficients, subject_id: str = "", epoch_index: int = -1
) -> ScatteringFeature:
    """Sample every path at the slot centres and concatenate in path order."""
    centers = slot_centers(len(coeffs.s0), coeffs.stride)
    stacked = np.vstack([coeffs.s0[None, :], coeffs.s1, coeffs.s2])
    values = stacked[:, centers].reshape(-1)
    return ScatteringFeature(
        values=values,
        paths=feature_paths(coeffs),
        n_slots=len(centers),
        subject_id=subject_id,
        epoch_index=epoch_index,
    )


class ScatteringExtractor:
    """Reusable extractor for windows of one fixed length.

    >>> ext = ScatteringExtractor(n_samples=9000)
    >>> ext.dim
    8256
    """

    def __init__(self, n_samples: int = 9000, Q: int = 2, H: int = 17, include_lowpass: bool = False):
        self.n_samples = n_samples
        self.Q = Q
        self.H = H
        self.include_lowpass = include_lowpass
        self.bank = build_filter_bank(Q, H, fft_length(n_samples, H, Q))

    @cached_property
    def centers(self) -> np.ndarray:
        return slot_centers(self.n_samples, self.bank.stride)

    @property
    def n_slots(self) -> int:
        return len(self.centers)

    @cached_property
    def paths(self) -> tuple[tuple[int, int, int], ...]:
        first = self.bank.first_order_indices(self.include_lowpass)
        pairs = [(a, b) for i, a in enumerate(first) for b in first[i + 1 :]]
        return ((0, -1, -1),) + tuple((1, j, -1) for j in first) + tuple((2, a, b) for a, b in pairs)

    @property
    def dim(self) -> int:
        return len(self.paths) * self.n_slots

    def header(self) -> dict:
        return {
            "Q": self.Q,
            "H": self.H,
            "n_samples": self.n_samples,
            "fft_length": self.bank.N,
            "stride": self.bank.stride,
            "n_slots": self.n_slots,
            "epsilon": EPSILON,
            "include_lowpass": self.include_lowpass,
            "paths": [list(p) for p in self.paths],
        }

    def __call__(self, window: np.ndarray) -> np.ndarray:
        if len(window) != self.n_samples:
            raise InvalidParameters(f"expected {self.n_samples} samples, got {len(window)}")
        coeffs = renormalize_and_log(scatter(window, self.bank, self.include_lowpass, at=self.centers))
        return np.vstack([coeffs.s0[None, :], coeffs.s1, coeffs.s2]).reshape(-1)

    def transform(self, windows) -> np.ndarray:
        out = np.empty((len(windows), self.dim))
        for i, w in enumerate(windows):
            out[i] = self(w)
        return out
