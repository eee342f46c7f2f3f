"""Butterworth band-pass design as second-order sections and zero-phase application."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FilterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    order: int
    low: float
    high: float
    fs: float
    sos: np.ndarray  # (n_sections, 6): b0 b1 b2 a0 a1 a2

    @property
    def n_sections(self) -> int:
        return len(self.sos)

    @property
    def padlen(self) -> int:
        """Edge extension used by :func:`filter_zero_phase` (three times the filter length)."""
        return 3 * (2 * self.n_sections + 1)

    def response(self, freqs) -> np.ndarray:
        """Complex single-pass frequency response at ``freqs`` (Hz)."""
        z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / self.fs)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 * z + b2 * z * z) / (a0 + a1 * z + a2 * z * z)
        return h

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sos])


def design_butterworth(order: int, low: float, high: float, fs: float) -> FilterSpec:
    """Digital band-pass with an ``order``-pole analog prototype (2*order poles overall).

    Analog low-pass prototype -> low-pass to band-pass -> bilinear transform
    with the band edges pre-warped, then one conjugate pole pair per section.
    """
    if order < 1:
        raise FilterConfigError("filter order must be at least 1")
    if not 0 < low < high < fs / 2:
        raise FilterConfigError(f"need 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")
    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))     # left half-plane poles

    wl, wh = (2 * fs * np.tan(np.pi * f / fs) for f in (low, high))
    bw, w0 = wh - wl, np.sqrt(wl * wh)
    half = proto * bw / 2
    root = np.sqrt(half * half - w0 * w0)
    analog = np.concatenate([half + root, half - root])
    gain = bw ** order                                            # numerator s^order

    fs2 = 2 * fs
    digital = (fs2 + analog) / (fs2 - analog)
    # s^order maps to (z-1)^order up to scale; the remaining order zeros sit at z=-1
    gain = np.real(gain * fs2 ** order / np.prod(fs2 - analog))

    upper = digital[digital.imag > 0]
    if len(upper) != order:
        raise FilterConfigError("pole pairing failed; cutoffs too close to 0 or Nyquist")
    upper = upper[np.argsort(np.abs(upper))]                      # most damped first
    sos = np.zeros((order, 6))
    for i, p in enumerate(upper):
        sos[i] = [1.0, 0.0, -1.0, 1.0, -2.0 * p.real, abs(p) ** 2]
    sos[0, :3] *= gain
    return FilterSpec(order, float(low), float(high), float(fs), sos)


def _section_zi(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Steady-state state of one transposed direct-form II biquad for a unit step."""
    b, a = b / a[0], a / a[0]
    IminusA = np.array([[1.0 + a[1], -1.0], [a[2], 1.0]])
    B = b[1:] - a[1:] * b[0]
    return np.linalg.solve(IminusA, B)


def sos_zi(sos: np.ndarray) -> np.ndarray:
    zi = np.empty((len(sos), 2))
    scale = 1.0
    for i, s in enumerate(sos):
        zi[i] = scale * _section_zi(s[:3], s[3:])
        scale *= s[:3].sum() / s[3:].sum()
    return zi


def sosfilt(sos: np.ndarray, x: np.ndarray, zi: np.ndarray = None) -> np.ndarray:
    """Causal cascade along the last axis; ``zi`` is (sections, ..., 2) or None for rest."""
    y = np.array(x, dtype=np.float64, copy=True)
    lead = y.shape[:-1]
    for i, (b0, b1, b2, a0, a1, a2) in enumerate(sos):
        b0, b1, b2, a1, a2 = b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0
        z1 = np.zeros(lead) if zi is None else np.array(zi[i][..., 0], dtype=np.float64)
        z2 = np.zeros(lead) if zi is None else np.array(zi[i][..., 1], dtype=np.float64)
        src = y
        out = np.empty_like(y)
        for t in range(y.shape[-1]):
            xt = src[..., t]
            yt = b0 * xt + z1
            z1 = b1 * xt - a1 * yt + z2
            z2 = b2 * xt - a2 * yt
            out[..., t] = yt
        y = out
    return y


def filter_zero_phase(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward-backward filtering along the last axis with odd reflection at both edges."""
    x = np.asarray(x, dtype=np.float64)
    n = spec.padlen
    if x.shape[-1] <= n:
        raise FilterConfigError(f"signal of {x.shape[-1]} samples is too short for edge padding of {n}")
    left = 2 * x[..., :1] - x[..., n:0:-1]
    right = 2 * x[..., -1:] - x[..., -2:-n - 2:-1]
    ext = np.concatenate([left, x, right], axis=-1)
    zi = sos_zi(spec.sos).reshape((spec.n_sections,) + (1,) * (x.ndim - 1) + (2,))
    y = sosfilt(spec.sos, ext, zi * ext[..., 0][None, ..., None])
    y = sosfilt(spec.sos, y[..., ::-1], zi * y[..., -1][None, ..., None])
    return y[..., ::-1][..., n:-n]


def zero_phase_matrix(spec: FilterSpec, length: int, step: int = 1) -> np.ndarray:
    """Matrix M with ``filter_zero_phase(x)[..., ::step] == x @ M`` for signals of ``length``.

    Edge padding and the steady-state start are both linear in the signal, so
    the whole operation is one fixed linear map; applying it as a product is
    far cheaper than running the recursion for every epoch.
    """
    return np.ascontiguousarray(filter_zero_phase(np.eye(length), spec)[:, ::step])
