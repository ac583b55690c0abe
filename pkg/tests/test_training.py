import numpy as np
import numpy.testing as npt
import pytest

from conftest import WIDE_SCHEMA, random_rating_sets
from semble.errors import ConfigError
from semble.model import ModelConfig, init_model
from semble.ratings import CharacteristicSchema, RatingSet
from semble.training import (
    MULTI_TASK_WEIGHTS,
    ScheduleStep,
    TrainData,
    TrainSchedule,
    train,
)


def small_data(rng, n=40, dim=6, schema=WIDE_SCHEMA):
    inputs = rng.normal(size=(n, dim))
    sets = random_rating_sets(rng, n, schema=schema)
    return TrainData(inputs, tuple(sets))


def model_for(data, seed=0, embedding_dim=8):
    return init_model(ModelConfig.for_features(
        input_dim=data.inputs.shape[1], embedding_dim=embedding_dim,
        hidden=(16,), seed=seed,
    ))


class TestSchedule:
    def test_multi_task_weights_verbatim(self):
        sched = TrainSchedule.multi_task((5, 5, 5))
        got = tuple((s.w_reg, s.w_sim) for s in sched.steps)
        assert got == MULTI_TASK_WEIGHTS
        assert got[2] == (0.0, 0.1)  # deliberately does not sum to 1

    def test_two_step_weights(self):
        sched = TrainSchedule.two_step_finetune((4, 6))
        assert [(s.w_reg, s.w_sim) for s in sched.steps] == [(1.0, 0.0), (0.0, 1.0)]

    def test_unknown_loss_rejected(self):
        with pytest.raises(ConfigError):
            TrainSchedule.similarity_only(5, similarity_loss="hinge")

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            ScheduleStep(-0.1, 0.5, 3)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            TrainSchedule("freestyle", (ScheduleStep(1.0, 0.0, 1),))


class TestTrainLoop:
    def test_zero_epochs_leaves_model_unchanged(self, rng):
        data = small_data(rng)
        model = model_for(data)
        before = model.checksum()
        train(model, data, TrainSchedule.regression_only(0, seed=1))
        assert model.checksum() == before

    def test_regression_training_reduces_loss(self, rng):
        data = small_data(rng, n=50)
        model = model_for(data)
        result = train(model, data, TrainSchedule.regression_only(
            200, seed=1, learning_rate=0.05, batch_size=16))
        first = result.history[0].train_loss
        last = result.history[-1].train_loss
        assert last < first

    def test_bit_reproducible(self, rng):
        data = small_data(rng)
        sched = TrainSchedule.multi_task((3, 3, 3), seed=42, batch_size=16)
        a = model_for(data, seed=5)
        train(a, data, sched)
        b = model_for(data, seed=5)
        train(b, data, sched)
        assert a.checksum() == b.checksum()

    def test_history_monotone_in_epoch(self, rng):
        data = small_data(rng)
        model = model_for(data)
        result = train(model, data, TrainSchedule.multi_task((2, 2, 2), seed=0, batch_size=16))
        epochs = [r.epoch for r in result.history]
        assert epochs == sorted(epochs)
        assert epochs[-1] == 6

    def test_multi_task_steps_recorded_with_table_weights(self, rng):
        data = small_data(rng)
        model = model_for(data)
        result = train(model, data, TrainSchedule.multi_task((2, 2, 2), seed=0, batch_size=16))
        by_step = {}
        for rec in result.history:
            if rec.step_index >= 0:
                by_step[rec.step_index] = (rec.w_reg, rec.w_sim)
        assert by_step == {0: (0.9, 0.1), 1: (0.5, 0.5), 2: (0.0, 0.1)}

    def test_unit_norm_after_every_update(self, rng):
        data = small_data(rng)
        model = model_for(data)
        train(model, data, TrainSchedule.multi_task((2, 2, 2), seed=0, batch_size=16))
        emb = model.embed_batch(data.inputs)
        npt.assert_allclose(np.linalg.norm(emb, axis=1), np.ones(len(data)), atol=1e-9)

    def test_degenerate_batches_skipped_and_counted(self, rng):
        # identical rating sets give a constant (all-zero) target row
        schema = CharacteristicSchema(("a", "b"), ((0.0, 10.0), (0.0, 10.0)))
        one = RatingSet(np.array([[1.0, 2.0]]), None, schema)
        sets = tuple(one for _ in range(12))
        data = TrainData(rng.normal(size=(12, 4)), sets)
        model = init_model(ModelConfig.for_features(4, 4, (8,), seed=0))
        before = model.checksum()
        result = train(model, data, TrainSchedule.similarity_only(
            2, similarity_loss="dm_pearson", seed=0, batch_size=12))
        assert result.total_skipped == 2
        assert model.checksum() == before

    def test_validation_history_populated(self, rng):
        data = small_data(rng, n=40)
        val = small_data(rng, n=12)
        model = model_for(data)
        result = train(model, data, TrainSchedule.regression_only(3, seed=0, batch_size=16),
                       validation=val)
        assert result.history[0].epoch == 0
        assert np.isfinite(result.history[0].val_loss)
        assert all(np.isfinite(r.val_loss) for r in result.history)

    def test_epoch_selection_rolls_back_to_best(self, rng):
        data = small_data(rng, n=40)
        val = small_data(rng, n=12)
        model = model_for(data)
        result = train(model, data,
                       TrainSchedule.regression_only(30, seed=0, learning_rate=0.05,
                                                     batch_size=16),
                       validation=val, select_epoch_by_val_loss=True)
        assert result.selected_epoch is not None
        assert 0 <= result.selected_epoch <= 30
        best = min(result.history, key=lambda r: r.val_loss)
        assert result.selected_epoch == best.epoch

    def test_prediction_rmse_improves_over_untrained(self, rng):
        from semble.model import predict_ratings
        from semble.pipeline import generate_synthetic

        ds = generate_synthetic(60, seed=8)
        records = list(ds.records)
        data = TrainData(ds.inputs(records),
                         tuple(r.rating_set for r in records))
        targets = data.mean_ratings()

        def rmse(model):
            pred = np.stack([
                v.values for v in predict_ratings(model, data.inputs, ds.schema)
            ])
            return float(np.sqrt(np.mean((pred - targets) ** 2)))

        untrained = model_for(data, seed=3)
        before = rmse(untrained)
        trained = model_for(data, seed=3)
        train(trained, data, TrainSchedule.regression_only(
            150, seed=3, learning_rate=0.1, batch_size=16))
        assert rmse(trained) < before

    def test_siamese_similarity_loss_trains(self, rng):
        # narrow score ranges keep the target distances inside the unit
        # sphere's reachable span, so the loss can actually be driven down
        narrow = CharacteristicSchema(tuple(f"c{i}" for i in range(9)),
                                      ((0.0, 0.5),) * 9)
        data = small_data(rng, n=32, schema=narrow)
        model = model_for(data)
        result = train(model, data, TrainSchedule.similarity_only(
            30, similarity_loss="siamese", seed=0, batch_size=16, learning_rate=0.05))
        losses = [r.train_loss for r in result.history]
        assert all(np.isfinite(v) for v in losses)
        assert np.mean(losses[-3:]) < np.mean(losses[:3])
