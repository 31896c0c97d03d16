"""EDF round trips, bipolar derivations, and epoch labelling."""

import numpy as np
import pytest

from sleeptrend import edf
from sleeptrend.errors import (DataError, InconsistentRecordLength,
                               MalformedHeader, MissingChannel,
                               NegativeDuration, OverlappingIntervals,
                               UnsupportedTransducer)
from sleeptrend.labels import Label
from sleeptrend.recording import (AnnotationTrack, ChannelSignal, Recording,
                                  derive_bipolar, epoch_labels,
                                  read_annotations, read_edf,
                                  write_annotations, write_edf)


def make_recording(seed=0, duration_s=120.0, fs=256.0, amp=80.0):
    rng = np.random.default_rng(seed)
    n = int(duration_s * fs)
    channels = [ChannelSignal(label=lab, fs=fs,
                              samples=amp * rng.standard_normal(n))
                for lab in ("F3", "F4", "P3", "P4")]
    return Recording(subject_id="s01", duration_s=duration_s,
                     channels=channels)


class TestEdfRoundTrip:
    def test_samples_within_one_quantization_step(self, tmp_path):
        rec = make_recording(seed=1)
        path = tmp_path / "s01.edf"
        write_edf(rec, path)
        back = read_edf(path)
        assert back.subject_id == "s01"
        assert back.duration_s == rec.duration_s
        assert back.labels == rec.labels
        for ch, orig in zip(back.channels, rec.channels):
            assert ch.fs == orig.fs
            step = edf.quantization_step(orig.samples)
            assert np.max(np.abs(ch.samples - orig.samples)) <= step

    def test_write_is_deterministic(self, tmp_path):
        rec = make_recording(seed=2)
        write_edf(rec, tmp_path / "a.edf")
        write_edf(rec, tmp_path / "b.edf")
        assert (tmp_path / "a.edf").read_bytes() \
            == (tmp_path / "b.edf").read_bytes()

    def test_per_channel_rates_preserved(self, tmp_path):
        channels = [
            ChannelSignal(label="EEG", fs=256.0,
                          samples=np.sin(np.arange(2560) / 10.0) * 50),
            ChannelSignal(label="slow", fs=16.0,
                          samples=np.linspace(-40, 40, 160)),
        ]
        rec = Recording(subject_id="mix", duration_s=10.0, channels=channels)
        path = tmp_path / "mix.edf"
        write_edf(rec, path)
        back = read_edf(path)
        assert [ch.fs for ch in back.channels] == [256.0, 16.0]
        assert len(back.channel("slow").samples) == 160


def write_valid(tmp_path):
    rec = make_recording(seed=3, duration_s=4.0)
    path = tmp_path / "ok.edf"
    write_edf(rec, path)
    return path


class TestEdfErrors:
    def test_bad_version(self, tmp_path):
        path = write_valid(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0:8] = b"9       "
        path.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_edf(path)

    def test_header_size_mismatch(self, tmp_path):
        path = write_valid(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[184:192] = b"9999    "
        path.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_edf(path)

    def test_non_numeric_field(self, tmp_path):
        path = write_valid(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[236:244] = b"many    "
        path.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_edf(path)

    def test_truncated_payload(self, tmp_path):
        path = write_valid(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(InconsistentRecordLength):
            read_edf(path)

    def test_tiny_file(self, tmp_path):
        path = tmp_path / "tiny.edf"
        path.write_bytes(b"0")
        with pytest.raises(MalformedHeader):
            read_edf(path)

    def test_annotation_stream_rejected(self, tmp_path):
        path = write_valid(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[256:272] = b"EDF Annotations "
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedTransducer):
            read_edf(path)

    def test_degenerate_digital_range(self, tmp_path):
        path = write_valid(tmp_path)
        raw = bytearray(path.read_bytes())
        ns = 4
        # dig_min block sits after labels/transducers/units/phys blocks
        offset = 256 + ns * (16 + 80 + 8 + 8 + 8)
        raw[offset:offset + 8] = b"32767   "
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedTransducer):
            read_edf(path)


class TestRecordingTypes:
    def test_duplicate_labels_rejected(self):
        ch = ChannelSignal(label="F3", fs=10.0, samples=np.zeros(10))
        with pytest.raises(DataError):
            Recording(subject_id="x", duration_s=1.0, channels=[ch, ch])

    def test_length_must_match_duration(self):
        with pytest.raises(DataError):
            Recording(subject_id="x", duration_s=2.0, channels=[
                ChannelSignal(label="F3", fs=10.0, samples=np.zeros(10))])

    def test_mixed_rate_fs_accessor(self):
        rec = Recording(subject_id="x", duration_s=1.0, channels=[
            ChannelSignal(label="a", fs=10.0, samples=np.zeros(10)),
            ChannelSignal(label="b", fs=20.0, samples=np.zeros(20))])
        with pytest.raises(DataError):
            rec.fs


class TestBipolar:
    def test_difference_and_antisymmetry(self):
        rec = make_recording(seed=4, duration_s=2.0)
        fwd = derive_bipolar(rec, [("F3", "P3"), ("F4", "P4")])
        rev = derive_bipolar(rec, [("P3", "F3")])
        assert fwd.labels == ["F3-P3", "F4-P4"]
        expected = rec.channel("F3").samples - rec.channel("P3").samples
        assert np.array_equal(fwd.channel("F3-P3").samples, expected)
        assert np.array_equal(rev.channel("P3-F3").samples, -expected)

    def test_missing_channel(self):
        rec = make_recording(seed=5, duration_s=2.0)
        with pytest.raises(MissingChannel):
            derive_bipolar(rec, [("F3", "Cz")])


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        track = AnnotationTrack.from_rows([(120.0, 300.0), (900.0, 600.0)])
        path = tmp_path / "ann.csv"
        write_annotations(track, path)
        back = read_annotations(path)
        assert back.intervals == track.intervals

    def test_non_qs_rows_ignored(self, tmp_path):
        path = tmp_path / "ann.csv"
        path.write_text("onset_s,duration_s,label\n"
                        "0,60,QS\n60,60,Artifact\n120,60,AS\n")
        track = read_annotations(path)
        assert track.intervals == ((0.0, 60.0),)

    def test_rows_sorted_on_load(self, tmp_path):
        path = tmp_path / "ann.csv"
        path.write_text("onset_s,duration_s,label\n"
                        "600,60,QS\n0,60,QS\n")
        track = read_annotations(path)
        assert track.intervals == ((0.0, 60.0), (600.0, 60.0))

    def test_negative_duration(self):
        with pytest.raises(NegativeDuration):
            AnnotationTrack.from_rows([(0.0, -5.0)])

    def test_overlap(self):
        with pytest.raises(OverlappingIntervals):
            AnnotationTrack.from_rows([(0.0, 100.0), (60.0, 30.0)])

    def test_touching_intervals_allowed(self):
        track = AnnotationTrack.from_rows([(0.0, 60.0), (60.0, 60.0)])
        assert len(track.intervals) == 2

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("start,stop\n1,2\n")
        with pytest.raises(DataError):
            read_annotations(path)


class TestEpochLabels:
    def test_full_coverage_is_qs(self):
        track = AnnotationTrack.from_rows([(0.0, 120.0)])
        assert epoch_labels(track, 2) == [Label.QS, Label.QS]

    def test_partial_overlap_excluded(self):
        track = AnnotationTrack.from_rows([(0.0, 90.0)])
        assert epoch_labels(track, 3) == [Label.QS, Label.EXCLUDED, Label.AS]

    def test_boundary_alignment(self):
        track = AnnotationTrack.from_rows([(60.0, 60.0)])
        assert epoch_labels(track, 3) == [Label.AS, Label.QS, Label.AS]

    def test_interval_inside_epoch_excludes_it(self):
        track = AnnotationTrack.from_rows([(70.0, 10.0)])
        assert epoch_labels(track, 3) == [Label.AS, Label.EXCLUDED, Label.AS]

    def test_empty_track_is_all_as(self):
        track = AnnotationTrack.from_rows([])
        assert epoch_labels(track, 4) == [Label.AS] * 4
