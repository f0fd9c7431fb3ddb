"""Temporal spectra of forward vs backward motion representations.

A fixed pixel's forward motion follows one object's trajectory (smooth,
polynomial in time); its backward motion re-matches the covering object at
every sample time, so occlusion crossings put jumps into the signal. The
Fourier tooling here quantifies that difference.
"""

from dataclasses import dataclass

import numpy as np

from .scene import SceneSpec, _top_object_index, displacement_at, ground_truth_flow

REPRESENTATIONS = ("forward", "backward")


@dataclass
class MotionSignal:
    """Per-time displacement of one pixel location, [T, 2] as (dx, dy)."""

    values: np.ndarray
    representation: str
    pixel: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != 2:
            raise ValueError(f"expected [T,2] signal, got {self.values.shape}")
        if self.values.shape[0] < 8:
            raise ValueError(f"need at least 8 samples, got {self.values.shape[0]}")
        if not np.isfinite(self.values).all():
            raise ValueError("signal contains non-finite values")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")


def _check_extraction_args(spec: SceneSpec, pixel, representation, T):
    if T < 8:
        raise ValueError(f"need at least 8 samples, got {T}")
    if representation not in REPRESENTATIONS:
        raise ValueError(f"representation must be one of {REPRESENTATIONS}")
    x, y = pixel
    if not (0 <= x < spec.width and 0 <= y < spec.height):
        raise ValueError(f"pixel {pixel} outside canvas {spec.width}x{spec.height}")
    return int(x), int(y)


def extract_motion_signal(spec: SceneSpec, pixel, representation: str, T: int = 33) -> MotionSignal:
    """Motion of one pixel sampled at times k/(T-1), in low-res pixel units.

    forward: displacement of the material under the pixel at time 0, as it
    travels to each sample time. backward: displacement from the fixed pixel
    location back to its ground-truth match in frame 0, re-selecting the
    covering object at each sample time.
    """
    x, y = _check_extraction_args(spec, pixel, representation, T)
    cx = np.array([x + 0.5], dtype=np.float32)
    cy = np.array([y + 0.5], dtype=np.float32)
    values = np.zeros((T, 2), dtype=np.float32)
    for k, tau in enumerate(np.linspace(0.0, 1.0, T)):
        if representation == "forward":
            dx, dy, _ = displacement_at(spec, cx, cy, 0.0, float(tau))
        else:
            dx, dy, _ = displacement_at(spec, cx, cy, float(tau), 0.0)
        values[k] = (dx[0], dy[0])
    return MotionSignal(values, representation, (x, y))


def motion_signal_fields(spec: SceneSpec, representation: str, T: int = 33) -> np.ndarray:
    """Dense variant of extract_motion_signal: [T, 2, H, W] for every pixel."""
    _check_extraction_args(spec, (0, 0), representation, T)
    fields = np.zeros((T, 2, spec.height, spec.width), dtype=np.float32)
    for k, tau in enumerate(np.linspace(0.0, 1.0, T)):
        if representation == "forward":
            fields[k] = ground_truth_flow(spec, 0.0, float(tau), 1.0)[0].data
        else:
            fields[k] = ground_truth_flow(spec, float(tau), 0.0, 1.0)[0].data
    return fields


def coverage_switches(spec: SceneSpec, T: int = 33, first_sample: int = 0) -> np.ndarray:
    """[H, W] count of covering-object changes across the T sample times.

    A nonzero count marks a pixel whose backward matching switches objects
    (an occlusion crossing) at least once. first_sample=1 restricts to
    switches visible in the backward signal: a crossing confined to the
    first inter-sample gap leaves that signal at zero (the time-0 sample is
    zero by definition).
    """
    xs = (np.arange(spec.width, dtype=np.float32) + 0.5)[None, :].repeat(spec.height, 0)
    ys = (np.arange(spec.height, dtype=np.float32) + 0.5)[:, None].repeat(spec.width, 1)
    switches = np.zeros((spec.height, spec.width), dtype=np.int32)
    prev = None
    for tau in np.linspace(0.0, 1.0, T)[first_sample:]:
        top = _top_object_index(spec, xs, ys, float(tau))
        if prev is not None:
            switches += (top != prev).astype(np.int32)
        prev = top
    return switches


def temporal_fft(signal: MotionSignal, window: str = "rect") -> np.ndarray:
    """One-sided DFT magnitude spectrum [T//2+1, 2], DC included.

    window: "rect" (default) or "hann".
    """
    values = signal.values.astype(np.float64)
    if window == "hann":
        values = values * np.hanning(values.shape[0])[:, None]
    elif window != "rect":
        raise ValueError(f"unknown window {window!r}")
    return np.abs(np.fft.rfft(values, axis=0))


def high_freq_ratio(spectrum: np.ndarray, cutoff_bin: int | None = None) -> float:
    """Energy in bins strictly above cutoff_bin over total non-DC energy.

    Operates on one-sided magnitudes (for odd sample counts the ratio equals
    the two-sided one exactly). cutoff_bin defaults to a quarter of the
    sampling rate. An all-DC spectrum has no non-DC energy; returns 0.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.ndim == 1:
        spectrum = spectrum[:, None]
    n_bins = spectrum.shape[0]
    if cutoff_bin is None:
        cutoff_bin = (n_bins - 1) // 2
    if not 0 < cutoff_bin <= n_bins - 1:
        raise ValueError(f"cutoff_bin must lie in [1, {n_bins - 1}], got {cutoff_bin}")
    energy = (spectrum**2).sum(axis=1)
    total = float(energy[1:].sum())
    # a constant signal's non-DC bins hold only rounding residue
    if total <= 1e-18 * float(energy.sum()):
        return 0.0
    return float(energy[cutoff_bin + 1 :].sum() / total)


def motion_smoothness_ratio(
    signal: MotionSignal, cutoff_bin: int | None = None, min_amplitude: float = 1e-3
) -> float:
    """High-frequency ratio after removing the endpoint-anchored line.

    A raw DFT sees any non-returning trajectory as a sawtooth (the periodic
    extension jumps from the last sample back to the first), which puts the
    same high-frequency floor under smooth and discontinuous signals alike.
    Subtracting the line through the endpoints removes that artifact while
    interior jumps survive. Residuals below min_amplitude (low-res pixels)
    count as perfectly smooth: 0. Raw spectra remain available through
    temporal_fft + high_freq_ratio.
    """
    values = signal.values.astype(np.float64)
    T = values.shape[0]
    line = values[0] + (values[-1] - values[0]) * np.linspace(0.0, 1.0, T)[:, None]
    detrended = values - line
    if np.abs(detrended).max() < min_amplitude:
        return 0.0
    return high_freq_ratio(np.abs(np.fft.rfft(detrended, axis=0)), cutoff_bin)
