"""Spectra of the per-window ensemble signal: transform, peak picking, predicted
lines, broadening contrast and file output."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .control import DriveProgram

MIN_LENGTH = 16
WINDOWS = ("rectangular", "hann")


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeries:
    tau: float
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < MIN_LENGTH:
            raise SpectrumError(f"time series needs at least {MIN_LENGTH} samples, got {v.size}")
        if self.tau <= 0:
            raise SpectrumError("tau must be positive")
        object.__setattr__(self, "values", v)

    @property
    def p(self) -> np.ndarray:
        return np.arange(self.values.size)


@dataclass(frozen=True)
class Peak:
    frequency: float
    height: float
    width: float


@dataclass(frozen=True, eq=False)
class Spectrum:
    freqs: np.ndarray
    magnitude: np.ndarray
    peaks: list = field(default_factory=list)
    predicted: list = field(default_factory=list)
    tau: float = 1e-3
    zero_pad: int = 1
    window: str = "rectangular"

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def with_peaks(self, peaks, predicted=None) -> "Spectrum":
        return Spectrum(self.freqs, self.magnitude, list(peaks),
                        list(self.predicted if predicted is None else predicted),
                        self.tau, self.zero_pad, self.window)


def _taper(n: int, window: str) -> np.ndarray:
    if window not in WINDOWS:
        raise SpectrumError(f"unknown window {window!r}")
    return np.ones(n) if window == "rectangular" else sps.get_window("hann", n, fftbins=False)


def to_spectrum(series: TimeSeries, window: str = "rectangular", zero_pad: int = 4) -> Spectrum:
    """tau * |DFT| of the mean-removed, windowed series up to Nyquist (nu/2)."""
    if zero_pad < 1:
        raise SpectrumError("zero_pad must be at least 1")
    x = series.values - series.values.mean()
    x = x * _taper(x.size, window)
    n = x.size * int(zero_pad)
    X = np.fft.rfft(x, n=n)
    freqs = np.fft.rfftfreq(n, d=series.tau)
    return Spectrum(freqs, series.tau * np.abs(X), tau=series.tau, zero_pad=int(zero_pad), window=window)


def parseval_sides(series: TimeSeries, spectrum: Spectrum) -> tuple[float, float]:
    """(sum |x|^2 tau, integral |X|^2 df) for the mean-removed, windowed series.

    The one-sided integral counts interior bins twice.
    """
    x = series.values - series.values.mean()
    x = x * _taper(x.size, spectrum.window)
    lhs = float(np.sum(x**2) * series.tau)
    n = x.size * spectrum.zero_pad
    w = np.full(spectrum.magnitude.size, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    rhs = float(np.sum(w * spectrum.magnitude**2) / (n * series.tau))
    return lhs, rhs


def find_peaks(spectrum: Spectrum, min_prominence: float, interpolate: bool = True) -> list[Peak]:
    """Local maxima above `min_prominence`, refined by a three-point parabola, tallest first."""
    if min_prominence <= 0:
        raise SpectrumError("min_prominence must be positive")
    mag = spectrum.magnitude
    idx, props = sps.find_peaks(mag, prominence=min_prominence, width=0)
    df = spectrum.df
    out = []
    for i, w in zip(idx, props["widths"]):
        f, h = spectrum.freqs[i], mag[i]
        if interpolate and 0 < i < mag.size - 1:
            a, b, c = mag[i - 1], mag[i], mag[i + 1]
            denom = a - 2 * b + c
            if denom < 0:
                shift = 0.5 * (a - c) / denom
                f = f + shift * df
                h = b - 0.25 * (a - c) * shift
        out.append(Peak(float(f), float(h), float(w * df)))
    return sorted(out, key=lambda pk: -pk.height)


@dataclass(frozen=True)
class LinePrediction:
    lines: tuple
    bloch_siegert: float  # (1/sqrt 3) Omega^2 / (4 omega), Hz


def predict_lines(groups, drive: DriveProgram | None) -> LinePrediction:
    """f_i = (delta_iso_i + Omega^2 / (4 omega)) / sqrt(3) for each isotropic shift (Hz)."""
    bs = 0.0 if drive is None else drive.bloch_siegert
    isos = [g[1] if isinstance(g, (tuple, list)) else g for g in groups]
    return LinePrediction(tuple((iso + bs) / np.sqrt(3.0) for iso in isos), bs / np.sqrt(3.0))


def height_near(spectrum: Spectrum, frequency: float, bins: int = 2) -> float:
    """Largest magnitude within +-`bins` raw (unpadded) bins of `frequency`."""
    raw_bin = spectrum.df * spectrum.zero_pad
    sel = np.abs(spectrum.freqs - frequency) <= bins * raw_bin + 1e-12
    return float(spectrum.magnitude[sel].max()) if sel.any() else 0.0


def broadening_metric(spectrum_a: Spectrum, spectrum_b: Spectrum, lines, bins: int = 2) -> np.ndarray:
    """Per-line ratio of peak heights (a over b) near each predicted line."""
    if spectrum_a.freqs.shape != spectrum_b.freqs.shape or not np.allclose(spectrum_a.freqs, spectrum_b.freqs):
        raise SpectrumError("spectra are on different frequency grids")
    out = []
    for f in lines:
        den = height_near(spectrum_b, f, bins)
        if den <= 0:
            raise SpectrumError(f"zero reference height near {f:.2f} Hz")
        out.append(height_near(spectrum_a, f, bins) / den)
    return np.array(out)


# --- output ----------------------------------------------------------------------------------


def write_timeseries_csv(path, series: TimeSeries, stderr=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "t_s", "signal"] + (["stderr"] if stderr is not None else []))
        for i, v in enumerate(series.values):
            row = [i, repr(float(i * series.tau)), repr(float(v))]
            if stderr is not None:
                row.append(repr(float(stderr[i])))
            w.writerow(row)


def write_spectrum_csv(path, spectrum: Spectrum) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "magnitude"])
        for f, m in zip(spectrum.freqs, spectrum.magnitude):
            w.writerow([repr(float(f)), repr(float(m))])


def write_peaks_json(path, spectrum: Spectrum, extra: dict | None = None) -> None:
    doc = {
        "peaks": [asdict(pk) for pk in spectrum.peaks],
        "predicted_hz": [float(f) for f in spectrum.predicted],
        "window": spectrum.window,
        "zero_pad": spectrum.zero_pad,
        "resolution_hz": spectrum.df * spectrum.zero_pad,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def render_svg(spectrum: Spectrum, width: int = 720, height: int = 360, title: str = "") -> str:
    """Standalone SVG line plot, magnitude normalized to unit maximum, predicted lines dashed."""
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 45
    fw, fh = width - pad_l - pad_r, height - pad_t - pad_b
    f, m = spectrum.freqs, spectrum.magnitude
    top = m.max() if m.max() > 0 else 1.0
    fmax = f[-1] if f[-1] > 0 else 1.0
    xs = pad_l + fw * f / fmax
    ys = pad_t + fh * (1 - m / top)
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{fw}" height="{fh}" fill="none" stroke="black"/>',
    ]
    for line in spectrum.predicted:
        x = pad_l + fw * line / fmax
        parts.append(f'<line x1="{x:.2f}" y1="{pad_t}" x2="{x:.2f}" y2="{pad_t + fh}" '
                     'stroke="gray" stroke-dasharray="4,3"/>')
    parts.append(f'<polyline fill="none" stroke="#1f4e99" stroke-width="1.2" points="{pts}"/>')
    for k in range(6):
        fv = fmax * k / 5
        x = pad_l + fw * k / 5
        parts.append(f'<text x="{x:.1f}" y="{pad_t + fh + 16}" text-anchor="middle">{fv:.0f}</text>')
    parts.append(f'<text x="{pad_l + fw / 2}" y="{height - 8}" text-anchor="middle">frequency (Hz)</text>')
    parts.append(f'<text x="14" y="{pad_t + fh / 2}" transform="rotate(-90 14 {pad_t + fh / 2})" '
                 'text-anchor="middle">normalized magnitude</text>')
    if title:
        parts.append(f'<text x="{pad_l}" y="{pad_t - 10}">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(path, spectrum: Spectrum, title: str = "") -> None:
    Path(path).write_text(render_svg(spectrum, title=title))
