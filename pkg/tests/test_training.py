"""Trainer tests: the Adam update against hand-worked values, plateau and
early-stop bookkeeping, dual-expert dataset assembly, grouped stratified
splitting, and the cross-validation harness on tiny synthetic subjects."""

import csv

import numpy as np
import pytest

from sleeptrend import nn, training
from sleeptrend.dsp import EPOCH_SAMPLES, EpochTensor
from sleeptrend.errors import (ConfigError, DataError, LengthMismatch,
                               MissingChannel, SingleClassDataset,
                               TooFewSubjects)
from sleeptrend.labels import Label
from sleeptrend.training import (AdamState, PlateauSchedule, SubjectData,
                                 TrainConfig, adam_step, build_dataset,
                                 dataset_arrays, fold_seed, infer_channel,
                                 loso, split_train_val, train, write_history)


def make_epoch(channel, index, rng, scale=10.0, valid=True, tone_hz=None):
    t = np.arange(EPOCH_SAMPLES) / 64.0
    x = scale * rng.standard_normal(EPOCH_SAMPLES)
    if tone_hz is not None:
        x = x + 30.0 * np.sin(2.0 * np.pi * tone_hz * t)
    return EpochTensor(samples=x.astype(np.float32), channel=channel,
                       epoch_index=index, valid=valid)


def make_subject(subject_id, labels_by_expert, rng, channels=("C1",),
                 invalid=(), tone_for_qs=False):
    n = len(next(iter(labels_by_expert.values())))
    epochs = {}
    for channel in channels:
        tensors = []
        for i in range(n):
            tone = None
            if tone_for_qs:
                first = next(iter(labels_by_expert.values()))
                tone = 2.0 if first[i] is Label.QS else None
            tensors.append(make_epoch(channel, i, rng, valid=i not in
                                      invalid, tone_hz=tone))
        epochs[channel] = tensors
    return SubjectData(subject_id=subject_id, epochs=epochs,
                       labels={k: list(v) for k, v in
                               labels_by_expert.items()}, n_epochs=n)


class TestAdam:
    def test_hand_worked_single_step(self):
        w = np.array([1.0])
        g = np.array([0.5])
        updated, state = adam_step(w, g, AdamState.fresh(w), TrainConfig())
        # bias correction makes the first step exactly lr * g/|g| up to eps
        assert updated[0] == pytest.approx(0.999, abs=1e-10)
        assert state.t == 1
        assert w[0] == 1.0  # input untouched

    def test_zero_gradient_is_a_no_op(self):
        w = np.array([0.3, -0.7])
        updated, _ = adam_step(w, np.zeros(2), AdamState.fresh(w),
                               TrainConfig())
        assert np.array_equal(updated, w)

    def test_odd_symmetry(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(20)
        g = rng.standard_normal(20)
        plus, _ = adam_step(w, g, AdamState.fresh(w), TrainConfig())
        minus, _ = adam_step(w, -g, AdamState.fresh(w), TrainConfig())
        assert np.array_equal(plus - w, -(minus - w))

    def test_first_step_bounded_by_lr(self):
        rng = np.random.default_rng(1)
        cfg = TrainConfig()
        for _ in range(20):
            w = rng.standard_normal(50)
            g = 10.0 ** rng.uniform(-6, 4, size=50) * np.sign(
                rng.standard_normal(50))
            updated, _ = adam_step(w, g, AdamState.fresh(w), cfg)
            assert np.all(np.abs(updated - w) <= cfg.lr * (1.0 + 1e-6))

    def test_shape_mismatch_rejected(self):
        w = np.zeros(3)
        with pytest.raises(LengthMismatch):
            adam_step(w, np.zeros(4), AdamState.fresh(w), TrainConfig())

    def test_state_accumulates(self):
        w = np.array([1.0])
        state = AdamState.fresh(w)
        cfg = TrainConfig()
        for expected_t in (1, 2, 3):
            w, state = adam_step(w, np.array([0.5]), state, cfg)
            assert state.t == expected_t
        # constant gradient keeps the step near lr each time
        assert w[0] == pytest.approx(1.0 - 3 * cfg.lr, abs=1e-6)


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.lr == 0.001 and cfg.batch_size == 64
        assert cfg.max_epochs == 500 and cfg.early_stop_patience == 35

    @pytest.mark.parametrize("kwargs", [
        {"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"batch_size": 0},
        {"inner_val_fraction": 0.0}, {"inner_val_fraction": 1.0},
        {"max_epochs": 0},
    ])
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestPlateauSchedule:
    def test_decreasing_then_flat_stops_at_patience(self):
        sched = PlateauSchedule(lr=0.001, patience=35)
        losses = [1.0 - 0.05 * i for i in range(11)] + [0.5] * 100
        stop = None
        for epoch, loss in enumerate(losses):
            sched.update(loss)
            if sched.should_stop:
                stop = epoch
                break
        assert stop == 45  # 10 + patience
        assert sched.best_epoch == 10
        assert sched.drop_epochs == [30]

    def test_flat_sequence_drops_lr_twice(self):
        sched = PlateauSchedule(lr=0.001, patience=1000)
        for _ in range(41):
            sched.update(1.0)
        assert sched.drop_epochs == [20, 40]
        assert sched.lr == pytest.approx(1e-5)

    def test_equal_loss_is_not_an_improvement(self):
        sched = PlateauSchedule(lr=0.1, patience=3)
        for loss in (0.5, 0.5, 0.5, 0.5):
            sched.update(loss)
        assert sched.should_stop
        assert sched.best_epoch == 0

    def test_improvement_resets_both_counters(self):
        sched = PlateauSchedule(lr=0.1, patience=5, plateau=3)
        for loss in (1.0, 1.0, 1.0, 0.9, 1.0, 1.0):
            sched.update(loss)
        # the improvement at epoch 3 rearmed the plateau counter
        assert sched.drop_epochs == []
        assert sched.since_improve == 2


class TestDataset:
    def test_agreement_duplicates_the_epoch(self):
        rng = np.random.default_rng(2)
        subject = make_subject("n1", {"e1": [Label.QS], "e2": [Label.QS]},
                               rng)
        ds = build_dataset([subject])
        assert len(ds) == 2
        assert ds.class_counts == {Label.QS: 2, Label.AS: 0}

    def test_disagreement_contributes_both_labels(self):
        rng = np.random.default_rng(3)
        subject = make_subject("n1", {"e1": [Label.QS], "e2": [Label.AS]},
                               rng)
        ds = build_dataset([subject])
        assert len(ds) == 2
        assert ds.class_counts == {Label.QS: 1, Label.AS: 1}
        assert {s.expert_id for s in ds.samples} == {"e1", "e2"}

    def test_excluded_label_is_skipped(self):
        rng = np.random.default_rng(4)
        subject = make_subject(
            "n1", {"e1": [Label.EXCLUDED], "e2": [Label.QS]}, rng)
        ds = build_dataset([subject])
        assert len(ds) == 1
        assert ds.samples[0].label is Label.QS

    def test_invalid_epochs_are_skipped(self):
        rng = np.random.default_rng(5)
        subject = make_subject(
            "n1", {"e1": [Label.QS, Label.AS], "e2": [Label.QS, Label.AS]},
            rng, invalid={1})
        ds = build_dataset([subject])
        assert len(ds) == 2
        assert all(s.epoch.epoch_index == 0 for s in ds.samples)

    def test_arrays_shape_and_classes(self):
        rng = np.random.default_rng(6)
        subject = make_subject(
            "n1", {"e1": [Label.QS, Label.AS], "e2": [Label.AS, Label.AS]},
            rng)
        x, y = dataset_arrays(build_dataset([subject]))
        assert x.shape == (4, 1, EPOCH_SAMPLES) and x.dtype == np.float32
        # sample order is channel, epoch, expert; QS maps to class 1
        assert y.tolist() == [1, 0, 0, 0]

    def test_mismatched_label_track_rejected(self):
        rng = np.random.default_rng(7)
        with pytest.raises(LengthMismatch):
            make_subject("n1", {"e1": [Label.QS], "e2": [Label.QS] * 2}, rng)


class TestSplit:
    def dataset(self, n_epochs=50, seed=8):
        rng = np.random.default_rng(seed)
        labels = [Label.QS if i % 2 else Label.AS for i in range(n_epochs)]
        subject = make_subject("n1", {"e1": labels, "e2": labels}, rng)
        return build_dataset([subject])

    def test_groups_never_straddle_the_split(self):
        ds = self.dataset()
        train_idx, val_idx = split_train_val(ds, 0.1, seed=0)
        train_groups = {ds.samples[i].group for i in train_idx}
        val_groups = {ds.samples[i].group for i in val_idx}
        assert not (train_groups & val_groups)
        assert len(train_idx) + len(val_idx) == len(ds)

    def test_fraction_is_respected_per_stratum(self):
        ds = self.dataset(n_epochs=40)  # 20 QS groups, 20 AS groups
        train_idx, val_idx = split_train_val(ds, 0.1, seed=1)
        val_labels = [ds.samples[i].label for i in val_idx]
        assert val_labels.count(Label.QS) == 4  # 2 groups x 2 experts
        assert val_labels.count(Label.AS) == 4

    def test_small_strata_send_at_least_one_each_way(self):
        rng = np.random.default_rng(9)
        labels = [Label.QS, Label.QS, Label.AS, Label.AS]
        subject = make_subject("n1", {"e1": labels}, rng)
        ds = build_dataset([subject])
        train_idx, val_idx = split_train_val(ds, 0.1, seed=2)
        train_labels = {ds.samples[i].label for i in train_idx}
        val_labels = {ds.samples[i].label for i in val_idx}
        assert train_labels == {Label.QS, Label.AS}
        assert val_labels == {Label.QS, Label.AS}

    def test_singleton_stratum_stays_in_train(self):
        rng = np.random.default_rng(10)
        subject = make_subject(
            "n1", {"e1": [Label.QS, Label.AS, Label.AS, Label.AS]}, rng)
        ds = build_dataset([subject])
        train_idx, val_idx = split_train_val(ds, 0.25, seed=3)
        assert Label.QS in {ds.samples[i].label for i in train_idx}
        assert {ds.samples[i].label for i in val_idx} == {Label.AS}

    def test_same_seed_same_split(self):
        ds = self.dataset()
        a = split_train_val(ds, 0.1, seed=4)
        b = split_train_val(ds, 0.1, seed=4)
        c = split_train_val(ds, 0.1, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])


class TestTrain:
    def toy_dataset(self, n=50):
        rng = np.random.default_rng(11)
        labels = [Label.QS if i % 2 else Label.AS for i in range(n)]
        subject = make_subject("n1", {"e1": labels}, rng, tone_for_qs=True)
        return build_dataset([subject])

    def test_single_class_rejected(self):
        rng = np.random.default_rng(12)
        subject = make_subject("n1", {"e1": [Label.QS] * 4}, rng)
        with pytest.raises(SingleClassDataset):
            train(build_dataset([subject]), TrainConfig())

    def test_empty_dataset_rejected(self):
        with pytest.raises(SingleClassDataset):
            train(build_dataset([]), TrainConfig())

    def test_learns_separable_toy_data(self):
        ds = self.toy_dataset()
        cfg = TrainConfig(max_epochs=200, seed=1)
        model, history = train(ds, cfg)
        assert min(history.train_loss) < 0.05
        assert history.best_epoch >= 0
        # returned parameters are the best-validation snapshot
        assert history.val_loss[history.best_epoch] == min(history.val_loss)

    def test_training_is_deterministic(self):
        ds = self.toy_dataset(n=12)
        cfg = TrainConfig(max_epochs=3, batch_size=8, seed=7)
        model_a, hist_a = train(ds, cfg)
        model_b, hist_b = train(ds, cfg)
        assert hist_a.train_loss == hist_b.train_loss
        assert hist_a.val_loss == hist_b.val_loss
        for la, lb in zip(model_a.params, model_b.params):
            for name in la:
                assert np.array_equal(la[name], lb[name])

    def test_history_csv_round_trip(self, tmp_path):
        ds = self.toy_dataset(n=12)
        cfg = TrainConfig(max_epochs=2, batch_size=8, seed=3)
        _, history = train(ds, cfg)
        path = tmp_path / "history.csv"
        write_history(history, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(history.train_loss)
        assert float(rows[0]["val_loss"]) == history.val_loss[0]
        assert float(rows[0]["lr"]) == 0.001


class TestInferChannel:
    def test_invalid_epochs_come_back_nan(self):
        rng = np.random.default_rng(13)
        epochs = [make_epoch("C1", i, rng, valid=i != 1) for i in range(3)]
        model = nn.build_model(nn.reference_architecture(), EPOCH_SAMPLES)
        probs = infer_channel(model, epochs)
        assert probs.shape == (3,)
        assert np.isnan(probs[1])
        assert np.all((probs[[0, 2]] >= 0) & (probs[[0, 2]] <= 1))


class TestLoso:
    def subjects(self, n=3, epochs=8):
        rng = np.random.default_rng(14)
        out = []
        for k in range(n):
            labels = [Label.QS if (i + k) % 2 else Label.AS
                      for i in range(epochs)]
            out.append(make_subject(
                f"n{k}", {"e1": labels, "e2": labels}, rng,
                channels=("C1", "C2"), invalid={3} if k == 0 else ()))
        return out

    def cfg(self):
        return TrainConfig(max_epochs=2, batch_size=16, seed=42)

    def test_one_fold_per_subject(self):
        folds = loso(self.subjects(), self.cfg())
        assert [f.held_out_subject for f in folds] == ["n0", "n1", "n2"]

    def test_no_leakage_into_training(self):
        for fold in loso(self.subjects(), self.cfg()):
            seen = {key[0] for key in fold.train_keys} \
                | {key[0] for key in fold.val_keys}
            assert fold.held_out_subject not in seen

    def test_predictions_cover_each_epoch_once(self):
        subjects = self.subjects()
        folds = loso(subjects, self.cfg())
        by_subject = {f.held_out_subject: f for f in folds}
        for subject in subjects:
            fold = by_subject[subject.subject_id]
            for channel, tensors in subject.epochs.items():
                probs = fold.predictions[channel]
                assert probs.shape == (subject.n_epochs,)
                for tensor, p in zip(tensors, probs):
                    assert np.isnan(p) == (not tensor.valid)

    def test_same_seed_reproduces_predictions(self):
        a = loso(self.subjects(), self.cfg())
        b = loso(self.subjects(), self.cfg())
        for fa, fb in zip(a, b):
            for channel in fa.predictions:
                assert np.array_equal(fa.predictions[channel],
                                      fb.predictions[channel],
                                      equal_nan=True)

    def test_fold_seeds_differ_by_subject(self):
        assert fold_seed(0, "n0") != fold_seed(0, "n1")
        assert fold_seed(0, "n0") == fold_seed(0, "n0")
        assert fold_seed(1, "n0") != fold_seed(0, "n0")

    def test_train_channel_filter(self):
        # training restricted to one channel, predictions still for all
        folds = loso(self.subjects(), self.cfg(), train_channels=["C2"])
        for fold in folds:
            assert {key[2] for key in fold.train_keys} == {"C2"}
            assert {key[2] for key in fold.val_keys} == {"C2"}
            assert sorted(fold.predictions) == ["C1", "C2"]

    def test_train_channel_must_exist(self):
        with pytest.raises(MissingChannel):
            loso(self.subjects(), self.cfg(), train_channels=["C9"])

    def test_too_few_subjects(self):
        with pytest.raises(TooFewSubjects):
            loso(self.subjects(n=1), self.cfg())

    def test_duplicate_subject_ids_rejected(self):
        subjects = self.subjects(n=2)
        subjects[1].subject_id = "n0"
        with pytest.raises(DataError, match="duplicate"):
            loso(subjects, self.cfg())

    def test_checkpoints_written_when_requested(self, tmp_path):
        folds = loso(self.subjects(n=2), self.cfg(), out_dir=tmp_path)
        for fold in folds:
            assert fold.checkpoint is not None and fold.checkpoint.exists()
            loaded, meta = nn.load_checkpoint(fold.checkpoint)
            assert meta["held_out_subject"] == fold.held_out_subject
            assert nn.count_params(loaded) == 5082
