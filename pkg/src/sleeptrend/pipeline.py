"""From files on disk to training-ready subjects.

Conventions: a data directory holds one EDF per subject plus sidecar
annotation CSVs named <subject>.<scorer>.csv. The scorer name "truth" is
reserved for ground truth and never feeds training; every other sidecar
is treated as an independent scorer. A subject with no scorer files falls
back to training on ground truth when it exists.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from . import dsp
from .dsp import ArtifactConfig, EpochTensor, PreprocessReport
from .errors import DataError
from .recording import (AnnotationTrack, Recording, derive_bipolar,
                        epoch_labels, read_annotations, read_edf)
from .training import SubjectData

BIPOLAR_PAIRS = (("F3", "P3"), ("F4", "P4"), ("F3", "F4"), ("P3", "P4"))
TRUTH_SCORER = "truth"


def preprocess_recording(recording: Recording,
                         pairs: Sequence[Sequence[str]] = BIPOLAR_PAIRS,
                         low_hz: float = 0.5, high_hz: float = 30.0,
                         order: int = 4,
                         artifact: ArtifactConfig = ArtifactConfig(),
                         ) -> tuple[dict[str, list[EpochTensor]],
                                    dict[str, PreprocessReport]]:
    """Derive bipolar channels and run the conditioning chain on each."""
    bipolar = derive_bipolar(recording, [tuple(p) for p in pairs])
    epochs: dict[str, list[EpochTensor]] = {}
    reports: dict[str, PreprocessReport] = {}
    for ch in bipolar.channels:
        epochs[ch.label], reports[ch.label] = dsp.preprocess_channel(
            ch.samples, ch.fs, ch.label, low_hz=low_hz, high_hz=high_hz,
            order=order, artifact=artifact)
    return epochs, reports


def assemble_subject(recording: Recording,
                     tracks: Mapping[str, AnnotationTrack],
                     pairs: Sequence[Sequence[str]] = BIPOLAR_PAIRS,
                     low_hz: float = 0.5, high_hz: float = 30.0,
                     order: int = 4,
                     artifact: ArtifactConfig = ArtifactConfig(),
                     ) -> SubjectData:
    """Preprocess a recording and align per-scorer epoch labels to it."""
    if not tracks:
        raise DataError(
            f"subject {recording.subject_id}: no annotation tracks")
    epochs, _ = preprocess_recording(recording, pairs, low_hz=low_hz,
                                     high_hz=high_hz, order=order,
                                     artifact=artifact)
    counts = {len(tensors) for tensors in epochs.values()}
    if len(counts) != 1:
        raise DataError(f"subject {recording.subject_id}: channels "
                        f"disagree on epoch count {sorted(counts)}")
    n_epochs = counts.pop()
    labels = {scorer: epoch_labels(track, n_epochs)
              for scorer, track in tracks.items()}
    return SubjectData(subject_id=recording.subject_id, epochs=epochs,
                       labels=labels, n_epochs=n_epochs)


def discover_subjects(data_dir: str | Path) -> list[str]:
    """Subject ids, one per EDF file, sorted."""
    return sorted(p.stem for p in Path(data_dir).glob("*.edf"))


def scorer_tracks(data_dir: str | Path,
                  subject_id: str) -> dict[str, AnnotationTrack]:
    """All sidecar annotation tracks for one subject, keyed by scorer
    name; includes the reserved truth track when present."""
    tracks = {}
    for path in sorted(Path(data_dir).glob(f"{subject_id}.*.csv")):
        scorer = path.name[len(subject_id) + 1:-len(".csv")]
        if scorer:
            tracks[scorer] = read_annotations(path)
    return tracks


def load_subject(data_dir: str | Path, subject_id: str,
                 pairs: Sequence[Sequence[str]] = BIPOLAR_PAIRS,
                 low_hz: float = 0.5, high_hz: float = 30.0,
                 order: int = 4,
                 artifact: ArtifactConfig = ArtifactConfig(),
                 ) -> tuple[SubjectData, AnnotationTrack | None]:
    """One subject from disk: preprocessed epochs with scorer labels,
    plus the ground-truth track when a truth sidecar exists."""
    data_dir = Path(data_dir)
    recording = read_edf(data_dir / f"{subject_id}.edf",
                         subject_id=subject_id)
    tracks = scorer_tracks(data_dir, subject_id)
    truth = tracks.pop(TRUTH_SCORER, None)
    if not tracks:
        if truth is None:
            raise DataError(f"subject {subject_id}: no annotation files "
                            f"in {data_dir}")
        tracks = {TRUTH_SCORER: truth}
    subject = assemble_subject(recording, tracks, pairs, low_hz=low_hz,
                               high_hz=high_hz, order=order,
                               artifact=artifact)
    return subject, truth


def load_cohort(data_dir: str | Path,
                pairs: Sequence[Sequence[str]] = BIPOLAR_PAIRS,
                low_hz: float = 0.5, high_hz: float = 30.0,
                order: int = 4,
                artifact: ArtifactConfig = ArtifactConfig(),
                ) -> tuple[list[SubjectData],
                           dict[str, AnnotationTrack | None]]:
    """Every subject in a data directory, one at a time to bound memory."""
    ids = discover_subjects(data_dir)
    if not ids:
        raise DataError(f"no EDF files in {data_dir}")
    subjects = []
    truths: dict[str, AnnotationTrack | None] = {}
    for subject_id in ids:
        subject, truth = load_subject(data_dir, subject_id, pairs,
                                      low_hz=low_hz, high_hz=high_hz,
                                      order=order, artifact=artifact)
        subjects.append(subject)
        truths[subject_id] = truth
    return subjects, truths
