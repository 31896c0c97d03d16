"""Sleep State Trend construction and rendering.

The per-channel quiet-sleep probabilities are fused into a single trend
with an uncertainty band, median-smoothed, thresholded into dichotomic
quiet-sleep intervals, and drawn as a deterministic SVG chart alongside
an optional amplitude-integrated EEG companion trend.

Missing entries (rejected epochs) are NaN throughout. An epoch where
every channel is missing is a Gap: it stays NaN in all derived series,
splits detected intervals, and breaks the plotted line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dsp
from .errors import ConfigError, EvenWindow, LengthMismatch, ShapeMismatch
from .labels import GAP, Label

EPOCH_S = 60.0
DEFAULT_THRESHOLD = 0.5
DEFAULT_WINDOW = 5


@dataclass(frozen=True)
class ProbSeries:
    """Per-epoch quiet-sleep probability for each channel, NaN where the
    epoch was rejected."""

    channels: tuple[str, ...]
    values: np.ndarray  # (n_epochs, n_channels)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.channels):
            raise ShapeMismatch(
                f"values {values.shape} vs {len(self.channels)} channels")
        present = values[np.isfinite(values)]
        if present.size and (present.min() < 0.0 or present.max() > 1.0):
            raise ShapeMismatch("probabilities must sit in [0, 1]")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_predictions(cls, predictions: Mapping[str, np.ndarray]):
        channels = tuple(sorted(predictions))
        values = np.column_stack([predictions[c] for c in channels])
        return cls(channels=channels, values=values)

    @property
    def n_epochs(self) -> int:
        return self.values.shape[0]


def _norm_weights(probs: ProbSeries, weights) -> np.ndarray:
    if weights is None:
        return np.ones(len(probs.channels))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(probs.channels),):
        raise ConfigError(f"{w.size} weights for {len(probs.channels)} "
                          f"channels")
    if np.any(w < 0):
        raise ConfigError("channel weights must be non-negative")
    return w


def fuse_channels(probs: ProbSeries, weights=None) -> np.ndarray:
    """Weighted mean over the channels present at each epoch; the weights
    are renormalized over whichever channels are present. All-missing
    epochs stay NaN."""
    w = _norm_weights(probs, weights)
    present = np.isfinite(probs.values)
    totals = present @ w
    fused = np.full(probs.n_epochs, np.nan)
    covered = totals > 0
    filled = np.where(present, probs.values, 0.0)
    fused[covered] = (filled @ w)[covered] / totals[covered]
    if np.any(present.any(axis=1) & ~covered):
        raise ConfigError("present channels carry zero total weight")
    return fused


def median_smooth(series: np.ndarray, window: int = DEFAULT_WINDOW
                  ) -> np.ndarray:
    """Centered moving median. The window shrinks symmetrically near the
    edges; NaN entries are excluded from neighboring windows and stay NaN
    in the output.

    The smoothed value is always one of the window's observed samples.
    When a gap leaves an even number of them, the result is whichever of
    the two middle samples lies nearer the epoch's own raw value (the
    lower one on exact ties). Averaging the middles instead would invent
    probabilities that sit on neither side of a bimodal window, and one
    missing minute next to a state change could then flip a confidently
    classified neighbor.
    """
    if window % 2 != 1 or window < 1:
        raise EvenWindow(f"window {window} must be odd and positive")
    series = np.asarray(series, dtype=float)
    n = len(series)
    out = np.full(n, np.nan)
    half_max = window // 2
    for i in range(n):
        if not np.isfinite(series[i]):
            continue
        half = min(half_max, i, n - 1 - i)
        chunk = series[i - half:i + half + 1]
        vals = np.sort(chunk[np.isfinite(chunk)])
        k = vals.size
        if k % 2 == 1:
            out[i] = vals[k // 2]
        else:
            lo, hi = vals[k // 2 - 1], vals[k // 2]
            near_lo = abs(series[i] - lo) <= abs(series[i] - hi)
            out[i] = lo if near_lo else hi
    return out


@dataclass(frozen=True)
class SstTrace:
    p_mean: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    p_smoothed: np.ndarray
    decisions: tuple[str, ...]
    epoch_len_s: float = EPOCH_S

    def __post_init__(self):
        n = len(self.p_mean)
        for name in ("p_min", "p_max", "p_smoothed"):
            if len(getattr(self, name)) != n:
                raise LengthMismatch(f"{name} length != {n}")
        if len(self.decisions) != n:
            raise LengthMismatch("decisions length mismatch")
        ok = np.isfinite(self.p_mean)
        if not (np.all(self.p_min[ok] <= self.p_mean[ok] + 1e-12)
                and np.all(self.p_mean[ok] <= self.p_max[ok] + 1e-12)):
            raise ShapeMismatch("band must bracket the mean")

    def __len__(self) -> int:
        return len(self.p_mean)


def compute_sst(probs: ProbSeries, weights=None,
                window: int = DEFAULT_WINDOW,
                threshold: float = DEFAULT_THRESHOLD) -> SstTrace:
    """Fuse, band, smooth, and decide. The decision is taken on the
    smoothed trend: quiet sleep when it reaches the threshold, Gap when
    no channel survived artifact rejection."""
    fused = fuse_channels(probs, weights)
    present = np.isfinite(probs.values)
    p_min = np.full(probs.n_epochs, np.nan)
    p_max = np.full(probs.n_epochs, np.nan)
    any_present = present.any(axis=1)
    if probs.values.size:
        with np.errstate(invalid="ignore"):
            p_min[any_present] = np.nanmin(probs.values[any_present], axis=1)
            p_max[any_present] = np.nanmax(probs.values[any_present], axis=1)
    smoothed = median_smooth(fused, window)
    decisions = tuple(
        GAP if not np.isfinite(smoothed[i])
        else str(Label.QS) if smoothed[i] >= threshold
        else str(Label.AS)
        for i in range(probs.n_epochs))
    return SstTrace(p_mean=fused, p_min=p_min, p_max=p_max,
                    p_smoothed=smoothed, decisions=decisions)


@dataclass(frozen=True)
class QsInterval:
    start_epoch: int
    end_epoch: int  # half-open

    def __post_init__(self):
        if self.end_epoch <= self.start_epoch:
            raise ConfigError("empty interval")


def detect_dqs(trace: SstTrace,
               threshold: float = DEFAULT_THRESHOLD) -> list[QsInterval]:
    """Maximal runs of smoothed probability at or above the threshold.
    Gaps always terminate a run."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} must sit in (0, 1)")
    intervals = []
    start = None
    for i, value in enumerate(trace.p_smoothed):
        hit = np.isfinite(value) and value >= threshold
        if hit and start is None:
            start = i
        elif not hit and start is not None:
            intervals.append(QsInterval(start, i))
            start = None
    if start is not None:
        intervals.append(QsInterval(start, len(trace)))
    return intervals


def compute_aeeg(samples: np.ndarray, fs: float = dsp.TARGET_FS
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude-integrated trend: band-pass 2-15 Hz, rectify, 0.5 s
    moving average, then the 10th and 90th percentile per 1-minute epoch.
    Returns (lower, upper) in µV; the trailing partial minute is dropped.

    A steady 10 µV 7 Hz tone comes out near (6.37, 6.37): rectification
    leaves a 14 Hz ripple whose cycles fit the 0.5 s window exactly, so
    the average flattens to the rectified mean 2A/pi.
    """
    samples = np.asarray(samples, dtype=float)
    spec = dsp.design_butter_bandpass(2.0, 15.0, order=2, fs=fs)
    rectified = np.abs(dsp.filter_zero_phase(samples, spec))
    win = max(1, int(round(0.5 * fs)))
    smooth = np.convolve(rectified, np.ones(win) / win, mode="same")
    per_epoch = int(round(EPOCH_S * fs))
    n_epochs = len(smooth) // per_epoch
    lower = np.empty(n_epochs)
    upper = np.empty(n_epochs)
    for i in range(n_epochs):
        seg = smooth[i * per_epoch:(i + 1) * per_epoch]
        lower[i] = np.percentile(seg, 10)
        upper[i] = np.percentile(seg, 90)
    return lower, upper


# CSV output ----------------------------------------------------------------

def write_sst_csv(trace: SstTrace, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch_index", "t_start_s", "p_mean", "p_min",
                         "p_max", "p_smoothed", "decision"])
        for i in range(len(trace)):
            writer.writerow([
                i, repr(i * trace.epoch_len_s),
                repr(float(trace.p_mean[i])), repr(float(trace.p_min[i])),
                repr(float(trace.p_max[i])),
                repr(float(trace.p_smoothed[i])), trace.decisions[i]])


def read_sst_csv(path: str | Path) -> SstTrace:
    rows = list(csv.DictReader(open(path)))
    return SstTrace(
        p_mean=np.array([float(r["p_mean"]) for r in rows]),
        p_min=np.array([float(r["p_min"]) for r in rows]),
        p_max=np.array([float(r["p_max"]) for r in rows]),
        p_smoothed=np.array([float(r["p_smoothed"]) for r in rows]),
        decisions=tuple(r["decision"] for r in rows))


def write_dqs_csv(intervals: Sequence[QsInterval], path: str | Path,
                  epoch_len_s: float = EPOCH_S) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["start_s", "end_s"])
        for qs in intervals:
            writer.writerow([repr(qs.start_epoch * epoch_len_s),
                             repr(qs.end_epoch * epoch_len_s)])


# SVG rendering -------------------------------------------------------------

PX_PER_HOUR = 40.0
SVG_HEIGHT = 300
MARGIN_LEFT = 56.0
MARGIN_RIGHT = 12.0
SST_TOP = 14.0
SST_HEIGHT = 130.0
STRIP_HEIGHT = 12.0
STRIP_PAD = 4.0
AEEG_HEIGHT = 86.0
AEEG_MAX_UV = 100.0

_LABEL_FILL = {str(Label.QS): "#1f4e79", str(Label.AS): "#9dc3e6",
               str(Label.EXCLUDED): "#bfbfbf", GAP: "#bfbfbf"}


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _aeeg_y(uv: float, top: float, height: float) -> float:
    """Standard semilogarithmic display: linear up to 10 µV in the lower
    half, logarithmic 10-100 µV in the upper half."""
    uv = min(max(uv, 0.0), AEEG_MAX_UV)
    if uv <= 10.0:
        frac = 0.5 * uv / 10.0
    else:
        frac = 0.5 + 0.5 * np.log10(uv / 10.0)
    return top + height * (1.0 - frac)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def render_svg(trace: SstTrace, dqs: Sequence[QsInterval] = (),
               annotations: Mapping[str, Sequence[str]] | None = None,
               aeeg: tuple[np.ndarray, np.ndarray] | None = None,
               threshold: float = DEFAULT_THRESHOLD) -> str:
    """Deterministic SVG chart: the trend with its min/max shadow and
    threshold line, dichotomic QS bars, optional annotation strips, and
    an optional semilogarithmic companion trend below."""
    n = len(trace)
    hours = n * trace.epoch_len_s / 3600.0
    plot_w = max(PX_PER_HOUR * hours, 8.0)
    width = MARGIN_LEFT + plot_w + MARGIN_RIGHT

    def x_at(epoch: float) -> float:
        return MARGIN_LEFT + (plot_w * epoch / n if n else 0.0)

    def y_at(p: float) -> float:
        return SST_TOP + SST_HEIGHT * (1.0 - p)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{_fmt(width)}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {_fmt(width)} {SVG_HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]

    # probability axis with gridline labels
    axis_y = SST_TOP + SST_HEIGHT
    parts.append(f'<g font-family="sans-serif" font-size="9" fill="#444">')
    for p in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{_fmt(MARGIN_LEFT - 6)}" y="{_fmt(y_at(p) + 3)}" '
            f'text-anchor="end">{_fmt(p)}</text>')
    for h in range(int(hours) + 1):
        xh = x_at(h * 3600.0 / trace.epoch_len_s)
        parts.append(f'<text x="{_fmt(xh)}" y="{_fmt(axis_y + 10)}" '
                     f'text-anchor="middle">{h}h</text>')
    parts.append('</g>')
    parts.append(f'<rect x="{_fmt(MARGIN_LEFT)}" y="{_fmt(SST_TOP)}" '
                 f'width="{_fmt(plot_w)}" height="{_fmt(SST_HEIGHT)}" '
                 f'fill="none" stroke="#888" stroke-width="0.5"/>')

    present = np.isfinite(trace.p_smoothed)
    centers = np.arange(n) + 0.5

    # min/max shadow, split at gaps, drawn per contiguous run
    for a, b in _runs(present):
        if b - a < 2:
            continue
        top = [f"{_fmt(x_at(centers[i]))},{_fmt(y_at(trace.p_max[i]))}"
               for i in range(a, b)]
        bottom = [f"{_fmt(x_at(centers[i]))},{_fmt(y_at(trace.p_min[i]))}"
                  for i in range(b - 1, a - 1, -1)]
        parts.append(f'<polygon points="{" ".join(top + bottom)}" '
                     f'fill="#c8c8c8" stroke="none"/>')

    # threshold
    ty = y_at(threshold)
    parts.append(f'<line x1="{_fmt(MARGIN_LEFT)}" y1="{_fmt(ty)}" '
                 f'x2="{_fmt(MARGIN_LEFT + plot_w)}" y2="{_fmt(ty)}" '
                 f'stroke="black" stroke-width="0.8" '
                 f'stroke-dasharray="4 3"/>')

    # smoothed trend, one path per run so gaps break the line
    for a, b in _runs(present):
        pts = [f"{_fmt(x_at(centers[i]))},"
               f"{_fmt(y_at(trace.p_smoothed[i]))}" for i in range(a, b)]
        if len(pts) == 1:
            cx, cy = pts[0].split(",")
            parts.append(f'<circle cx="{cx}" cy="{cy}" r="1.5" '
                         f'fill="black"/>')
        else:
            parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                         f'stroke="black" stroke-width="1.2"/>')

    # DQS bars and annotation strips
    strip_y = axis_y + 16.0
    parts.append(f'<text x="{_fmt(MARGIN_LEFT - 6)}" '
                 f'y="{_fmt(strip_y + STRIP_HEIGHT - 3)}" '
                 f'font-family="sans-serif" font-size="9" fill="#444" '
                 f'text-anchor="end">DQS</text>')
    for qs in dqs:
        parts.append(
            f'<rect x="{_fmt(x_at(qs.start_epoch))}" y="{_fmt(strip_y)}" '
            f'width="{_fmt(x_at(qs.end_epoch) - x_at(qs.start_epoch))}" '
            f'height="{_fmt(STRIP_HEIGHT)}" fill="#1f4e79"/>')
    strip_y += STRIP_HEIGHT + STRIP_PAD

    for expert in sorted(annotations or {}):
        labels = list((annotations or {})[expert])
        parts.append(f'<text x="{_fmt(MARGIN_LEFT - 6)}" '
                     f'y="{_fmt(strip_y + STRIP_HEIGHT - 3)}" '
                     f'font-family="sans-serif" font-size="9" fill="#444" '
                     f'text-anchor="end">{expert}</text>')
        for value in sorted({str(v) for v in labels}):
            fill = _LABEL_FILL.get(value, "#e0e0e0")
            mask = np.array([str(v) == value for v in labels])
            for a, b in _runs(mask):
                parts.append(
                    f'<rect x="{_fmt(x_at(a))}" y="{_fmt(strip_y)}" '
                    f'width="{_fmt(x_at(b) - x_at(a))}" '
                    f'height="{_fmt(STRIP_HEIGHT)}" fill="{fill}"/>')
        strip_y += STRIP_HEIGHT + STRIP_PAD

    if aeeg is not None:
        lower, upper = aeeg
        m = len(lower)
        a_top = SVG_HEIGHT - AEEG_HEIGHT - 4.0
        parts.append(
            f'<rect x="{_fmt(MARGIN_LEFT)}" y="{_fmt(a_top)}" '
            f'width="{_fmt(plot_w)}" height="{_fmt(AEEG_HEIGHT)}" '
            f'fill="none" stroke="#888" stroke-width="0.5"/>')
        parts.append('<g font-family="sans-serif" font-size="9" '
                     'fill="#444">')
        for uv in (0.0, 10.0, 100.0):
            yy = _aeeg_y(uv, a_top, AEEG_HEIGHT)
            parts.append(f'<text x="{_fmt(MARGIN_LEFT - 6)}" '
                         f'y="{_fmt(yy + 3)}" text-anchor="end">'
                         f'{_fmt(uv)}</text>')
        parts.append('</g>')
        if m >= 2:
            sx = [MARGIN_LEFT + plot_w * (i + 0.5) / m for i in range(m)]
            top_pts = [f"{_fmt(sx[i])},"
                       f"{_fmt(_aeeg_y(upper[i], a_top, AEEG_HEIGHT))}"
                       for i in range(m)]
            bot_pts = [f"{_fmt(sx[i])},"
                       f"{_fmt(_aeeg_y(lower[i], a_top, AEEG_HEIGHT))}"
                       for i in range(m - 1, -1, -1)]
            parts.append(f'<polygon points="{" ".join(top_pts + bot_pts)}" '
                         f'fill="#2e7d32" fill-opacity="0.85" '
                         f'stroke="none"/>')

    parts.append('</svg>')
    return "\n".join(parts) + "\n"
