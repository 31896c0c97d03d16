"""Signal conditioning: band-pass, resampling, artifact scan, segmentation.

The preprocessing order is fixed and asserted: scan raw minutes for
artifacts first (amplitude and flatness limits apply to the unfiltered
signal), then band-pass, then resample to the working rate, then cut
1-minute epochs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import (ConfigError, InvalidEpoch, NyquistViolation,
                     ShapeMismatch, TooShortSignal)

TARGET_FS = 64.0
EPOCH_S = 60.0
EPOCH_SAMPLES = 3840  # 60 s at 64 Hz

PIPELINE_STAGES = ("artifact_scan", "bandpass", "resample", "segment")


@dataclass(frozen=True)
class FilterSpec:
    """A Butterworth band-pass realized as cascaded second-order sections.

    `order` counts second-order sections per band edge: an order-4 design
    rolls each edge off with 8 poles (16 overall), which keeps the stopband
    under -30 dB by 45 Hz while the band edges stay at the half-power
    (-3 dB) points of the single-pass response. Zero-phase application
    squares the magnitude response.
    """

    low_hz: float
    high_hz: float
    order: int
    fs: float
    sos: np.ndarray


@dataclass(frozen=True)
class ArtifactConfig:
    """Raw-signal rejection limits, applied per 1-minute window."""

    amp_limit_uv: float = 250.0
    flat_run_s: float = 1.0


@dataclass
class EpochTensor:
    """One 1-minute single-channel epoch at the working rate."""

    samples: np.ndarray
    channel: str
    epoch_index: int
    valid: bool = True

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (EPOCH_SAMPLES,):
            raise InvalidEpoch(
                f"epoch needs {EPOCH_SAMPLES} samples, got "
                f"{self.samples.shape}")


@dataclass(frozen=True)
class PreprocessReport:
    channel: str
    n_epochs: int
    rejected: tuple[int, ...]
    stages: tuple[str, ...]


def design_butter_bandpass(low_hz: float = 0.5, high_hz: float = 30.0,
                           order: int = 4, fs: float = 256.0) -> FilterSpec:
    """Design the band-pass filter for one sampling rate.

    Raises NyquistViolation when the band does not fit below fs/2. The
    returned sections are checked for stability (all poles strictly inside
    the unit circle).
    """
    if order < 1:
        raise ConfigError(f"filter order {order} must be >= 1")
    if fs <= 0:
        raise ConfigError(f"sampling rate {fs} must be positive")
    if not 0.0 < low_hz < high_hz:
        raise NyquistViolation(
            f"band edges ({low_hz}, {high_hz}) must satisfy 0 < low < high")
    if high_hz >= fs / 2.0:
        raise NyquistViolation(
            f"high edge {high_hz} Hz requires fs > {2 * high_hz} Hz, "
            f"got {fs} Hz")
    sos = signal.butter(2 * order, [low_hz, high_hz], btype="bandpass",
                        fs=fs, output="sos")
    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise ConfigError(
                f"unstable design for band ({low_hz}, {high_hz}) at {fs} Hz")
    return FilterSpec(low_hz=low_hz, high_hz=high_hz, order=order, fs=fs,
                      sos=sos)


def _settle_samples(sos: np.ndarray) -> int:
    """Samples for the slowest pole's impulse response to decay to 1e-6."""
    _, poles, _ = signal.sos2zpk(sos)
    radius = float(np.max(np.abs(poles)))
    if radius <= 0.0 or radius >= 1.0:
        return 0
    return int(math.ceil(math.log(1e-6) / math.log(radius)))


def filter_zero_phase(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Forward-backward filtering: zero phase, squared magnitude.

    The signal is extended by even reflection before filtering. An even
    extension carries no step at the boundary, so the slow pole near the
    low band edge is barely excited; the default odd extension offsets
    the pad by twice the edge value and leaves a visible transient. The
    pad length covers the slowest pole's settling time when the signal
    is long enough, and shrinks to fit otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"expected 1-D signal, got shape {x.shape}")
    min_pad = 3 * (2 * len(spec.sos) + 1)
    if x.size <= min_pad:
        raise TooShortSignal(
            f"{x.size} samples, zero-phase filtering needs > {min_pad}")
    padlen = min(x.size - 1, max(min_pad, _settle_samples(spec.sos)))
    return signal.sosfiltfilt(spec.sos, x, padtype="even", padlen=padlen)


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase resampling with a Kaiser anti-aliasing low-pass.

    The rate ratio is taken as the closest rational with denominator at
    most 1000, which is exact for the usual PSG rates. Output length is
    ceil(n * fs_out / fs_in).
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ConfigError(f"rates must be positive, got {fs_in}, {fs_out}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"expected 1-D signal, got shape {x.shape}")
    if fs_in == fs_out:
        return x.copy()
    ratio = Fraction(fs_out / fs_in).limit_denominator(1000)
    if ratio <= 0:
        raise ConfigError(f"degenerate rate ratio {fs_out}/{fs_in}")
    y = signal.resample_poly(x, ratio.numerator, ratio.denominator,
                             window=("kaiser", 8.0))
    expected = math.ceil(x.size * ratio.numerator / ratio.denominator)
    if y.size != expected:
        raise ShapeMismatch(
            f"resampler produced {y.size} samples, expected {expected}")
    return y


def _window_is_artifact(x: np.ndarray, fs: float,
                        cfg: ArtifactConfig) -> bool:
    """Amplitude or flatness violation inside one window of raw signal."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        return True
    if np.max(np.abs(x)) > cfg.amp_limit_uv:
        return True
    run_limit = int(round(cfg.flat_run_s * fs))
    if run_limit <= 1:
        raise ConfigError(
            f"flat_run_s {cfg.flat_run_s} spans under two samples at "
            f"{fs} Hz")
    same = np.diff(x) == 0.0
    if not same.any():
        return False
    # longest run of equal consecutive samples
    padded = np.concatenate([[False], same, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    longest = int((edges[1::2] - edges[0::2]).max()) + 1
    return longest >= run_limit


def reject_artifacts(epoch: EpochTensor, cfg: ArtifactConfig) -> bool:
    """True when a working-rate epoch violates the artifact limits."""
    return _window_is_artifact(epoch.samples, TARGET_FS, cfg)


def segment_epochs(x: np.ndarray, channel: str, fs: float = TARGET_FS,
                   valid: list[bool] | None = None) -> list[EpochTensor]:
    """Cut a working-rate signal into 1-minute epochs; a trailing partial
    minute is dropped."""
    if abs(fs - TARGET_FS) > 1e-9:
        raise ConfigError(
            f"segmentation works at {TARGET_FS} Hz, got {fs} Hz")
    x = np.asarray(x, dtype=np.float64)
    n_epochs = x.size // EPOCH_SAMPLES
    if valid is not None and len(valid) < n_epochs:
        raise ShapeMismatch(
            f"{len(valid)} validity flags for {n_epochs} epochs")
    epochs = []
    for i in range(n_epochs):
        chunk = x[i * EPOCH_SAMPLES:(i + 1) * EPOCH_SAMPLES]
        ok = True if valid is None else bool(valid[i])
        epochs.append(EpochTensor(samples=chunk, channel=channel,
                                  epoch_index=i, valid=ok))
    return epochs


def preprocess_channel(samples: np.ndarray, fs_in: float, channel: str,
                       low_hz: float = 0.5, high_hz: float = 30.0,
                       order: int = 4,
                       artifact: ArtifactConfig = ArtifactConfig(),
                       ) -> tuple[list[EpochTensor], PreprocessReport]:
    """Run the fixed conditioning chain on one raw channel.

    Artifacts are scanned on the raw signal per whole minute, so amplitude
    excursions are judged before the band-pass can shrink them. Epochs
    whose raw minute was rejected come back with valid=False.
    """
    stages = []
    x = np.asarray(samples, dtype=np.float64)

    stages.append("artifact_scan")
    window = int(round(EPOCH_S * fs_in))
    n_windows = x.size // window
    rejected = tuple(
        i for i in range(n_windows)
        if _window_is_artifact(x[i * window:(i + 1) * window], fs_in,
                               artifact))

    stages.append("bandpass")
    spec = design_butter_bandpass(low_hz=low_hz, high_hz=high_hz,
                                  order=order, fs=fs_in)
    filtered = filter_zero_phase(x, spec)

    stages.append("resample")
    at_target = resample(filtered, fs_in, TARGET_FS)

    stages.append("segment")
    flags = [i not in set(rejected) for i in range(n_windows)]
    epochs = segment_epochs(at_target, channel, TARGET_FS, valid=flags)
    if len(epochs) != n_windows:
        raise ShapeMismatch(
            f"{n_windows} raw minutes became {len(epochs)} epochs")

    report = PreprocessReport(channel=channel, n_epochs=len(epochs),
                              rejected=rejected, stages=tuple(stages))
    assert report.stages == PIPELINE_STAGES
    return epochs, report


def write_epoch_dump(epoch: EpochTensor, out_dir: str | Path) -> Path:
    """Debug dump: raw little-endian float32 plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{epoch.channel.replace('-', '_')}_{epoch.epoch_index:05d}"
    raw_path = out_dir / f"{stem}.f32"
    raw_path.write_bytes(epoch.samples.astype("<f4").tobytes())
    sidecar = {"channel": epoch.channel, "epoch_index": epoch.epoch_index,
               "fs": TARGET_FS, "n": EPOCH_SAMPLES, "valid": epoch.valid}
    (out_dir / f"{stem}.json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")
    return raw_path


def read_epoch_dump(raw_path: str | Path) -> EpochTensor:
    raw_path = Path(raw_path)
    meta = json.loads(raw_path.with_suffix(".json").read_text())
    samples = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if samples.size != meta["n"]:
        raise ShapeMismatch(
            f"{raw_path}: {samples.size} samples, sidecar says {meta['n']}")
    return EpochTensor(samples=samples, channel=meta["channel"],
                       epoch_index=meta["epoch_index"],
                       valid=bool(meta["valid"]))
