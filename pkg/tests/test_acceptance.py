"""Acceptance suite.

Each test implements one acceptance criterion at its stated tolerance
and prints a single pass/fail line (run with ``pytest -s`` to see the
lines as they happen). Heavy criteria share the module-scoped 600-item
synthetic dataset generated with the documented seed.
"""

import math
import time

import numpy as np
import pytest

from conftest import finite_difference, max_relative_error, random_distance_matrix
from semble import losses
from semble.annotations import mahalanobis_to_raters, param_entropy
from semble.cli import main as cli_main
from semble.data import save_dataset
from semble.model import ModelConfig, embedding_distance_matrix, init_model
from semble.pipeline import (
    CV_CONFIGS,
    PREDICTED_RATINGS,
    SEMI_SUPERVISED,
    TRUE_RATINGS,
    ExperimentSpec,
    cv_config,
    generate_synthetic,
    run_prediction_step,
    run_retrieval_step,
    validate_cv_configs,
)
from semble.ratings import (
    CharacteristicSchema,
    RatingSet,
    RatingVector,
    set_distance,
    set_distance_matrix,
)
from semble.retrieval import (
    DEFAULT_K_SET,
    build_index,
    hubness_index,
    hubness_skewness,
    k_occurrences,
    rating_correlation,
)
from semble.training import TrainData, TrainSchedule, train

DATASET_SEED = 20240601
TRAIN_SEED = 1
TREND_SEEDS = (101, 202, 303)

MODEL_WIDTHS = (64, 64)
EMBEDDING_DIM = 128
LEARNING_RATE = 0.1
MULTI_TASK_EPOCHS = (300, 40, 10)
PREDICTION_EPOCHS = 800


def report(criterion, label, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {criterion} ({label}): {status} | {detail}")
    assert ok, f"criterion {criterion} ({label}) failed: {detail}"


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(600, seed=DATASET_SEED)


def model_config(seed):
    return ModelConfig.for_features(input_dim=32, embedding_dim=EMBEDDING_DIM,
                                    hidden=MODEL_WIDTHS, seed=seed)


def group_arrays(dataset, records):
    inputs = dataset.inputs(records)
    true_dm = set_distance_matrix([r.rating_set for r in records]).entries
    return inputs, true_dm


def evaluate_embeddings(records, emb, true_dm):
    corr = rating_correlation(embedding_distance_matrix(emb), true_dm)
    hub = hubness_index(build_index([r.id for r in records], emb))
    return corr, hub


# -- criterion 1: gradient correctness ---------------------------------------


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    step = 1e-5
    worst = {}
    rng = np.random.default_rng(811)

    def check(name, analytic, func, x):
        numeric = finite_difference(func, x, step)
        err = max_relative_error(analytic, numeric)
        worst[name] = max(worst.get(name, 0.0), err)

    for batch in (4, 8, 16):
        for _ in range(7):
            t = random_distance_matrix(rng, batch, scale=2.0)
            p = random_distance_matrix(rng, batch)
            check("dm_logcosh", losses.dm_logcosh(p, t).gradient,
                  lambda x: losses.dm_logcosh(x, t).value, p)
            check("dm_pearson", losses.dm_pearson(p, t).gradient,
                  lambda x: losses.dm_pearson(x, t).value, p)
            check("dm_ranked_pearson", losses.dm_ranked_pearson(p, t).gradient,
                  lambda x: losses.dm_ranked_pearson(x, t).value, p)
            check("dm_kl", losses.dm_kl(p, t).gradient,
                  lambda x: losses.dm_kl(x, t).value, p)

            pred = rng.normal(size=(batch, 9))
            target = rng.normal(size=(batch, 9))
            check("logcosh_regression", losses.logcosh_regression(pred, target).gradient,
                  lambda x: losses.logcosh_regression(x, target).value, pred)

            a = rng.normal(size=(batch, 8))
            a /= np.linalg.norm(a, axis=1, keepdims=True)
            b = rng.normal(size=(batch, 8))
            b /= np.linalg.norm(b, axis=1, keepdims=True)
            d_true = rng.uniform(0.1, 1.9, size=batch)
            stacked = np.stack([a, b])
            check("siamese_distance_loss",
                  losses.siamese_distance_loss(a, b, d_true).gradient,
                  lambda s: losses.siamese_distance_loss(s[0], s[1], d_true).value,
                  stacked)

    elapsed = time.perf_counter() - start
    max_err = max(worst.values())
    ok = max_err < 1e-4 and elapsed < 30.0
    detail = (f"max rel err {max_err:.2e} over 21 instances x 6 losses, "
              f"B in (4,8,16), {elapsed:.1f}s")
    report(1, "gradient correctness", ok, detail)


# -- criterion 2: set-distance oracle equivalence -----------------------------


def test_criterion_2_set_distance_oracle():
    start = time.perf_counter()
    schema = CharacteristicSchema(tuple(f"c{i}" for i in range(9)),
                                  ((0.0, 10.0),) * 9)
    rng = np.random.default_rng(812)

    def oracle(a_rows, b_rows):
        def l2(u, v):
            return math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v)))
        fwd = sum(min(l2(u, v) for v in b_rows) for u in a_rows) / len(a_rows)
        bwd = sum(min(l2(v, u) for u in a_rows) for v in b_rows) / len(b_rows)
        return 0.5 * fwd + 0.5 * bwd

    max_err = 0.0
    for _ in range(1000):
        na, nb = rng.integers(1, 5, size=2)
        a = rng.uniform(0, 10, size=(na, 9))
        b = rng.uniform(0, 10, size=(nb, 9))
        got = set_distance(RatingSet(a, None, schema), RatingSet(b, None, schema))
        max_err = max(max_err, abs(got - oracle(a.tolist(), b.tolist())))

    two = CharacteristicSchema(("a", "b"), ((0.0, 10.0), (0.0, 10.0)))
    hand = set_distance(
        RatingSet(np.array([[1.0, 0.0], [0.0, 1.0]]), None, two),
        RatingSet(np.array([[0.0, 0.0]]), None, two),
    )
    elapsed = time.perf_counter() - start
    ok = max_err < 1e-9 and hand == 1.0 and elapsed < 5.0
    report(2, "set-distance oracle", ok,
           f"max |err| {max_err:.2e} over 1000 pairs, hand case {hand}, "
           f"{elapsed:.1f}s")


# -- criterion 3: hubness closed forms ----------------------------------------


def test_criterion_3_hubness_closed_forms():
    angles = 2.0 * np.pi * np.arange(100) / 100
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    index = build_index([f"c{i:03d}" for i in range(100)], circle)
    circle_value = hubness_index(index, DEFAULT_K_SET)

    counts = np.array([0.0, 0.0, 0.0, 10.0])
    skew = hubness_skewness(counts)
    single_k_index = math.exp(-abs(skew))

    rng = np.random.default_rng(813)
    conservation_ok = True
    for _ in range(5):
        n = int(rng.integers(20, 60))
        vectors = rng.normal(size=(n, 5))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        random_index = build_index([f"r{i}" for i in range(n)], vectors)
        for k in (1, 3, 7, 17):
            profile = k_occurrences(random_index, k)
            conservation_ok &= int(profile.counts.sum()) == k * n

    ok = (abs(circle_value - 1.0) < 1e-12
          and abs(skew - 1.1547) < 1e-3
          and abs(single_k_index - 0.3151) < 1e-3
          and conservation_ok)
    report(3, "hubness closed forms", ok,
           f"circle index {circle_value:.14f}, skew {skew:.4f}, "
           f"exp(-skew) {single_k_index:.4f}, conservation {conservation_ok}")


# -- criterion 4: end-to-end supervised ---------------------------------------


def test_criterion_4_end_to_end_supervised(dataset):
    start = time.perf_counter()
    train_records = dataset.group_records((0, 1, 2))
    test_records = dataset.group_records(4)
    test_inputs, test_dm = group_arrays(dataset, test_records)

    untrained = init_model(model_config(TRAIN_SEED))
    untrained_corr, _ = evaluate_embeddings(
        test_records, untrained.embed_batch(test_inputs), test_dm)

    model = init_model(model_config(TRAIN_SEED))
    schedule = TrainSchedule.multi_task(
        MULTI_TASK_EPOCHS, similarity_loss="dm_kl",
        learning_rate=LEARNING_RATE, seed=TRAIN_SEED)
    data = TrainData(dataset.inputs(train_records),
                     tuple(r.rating_set for r in train_records))
    train(model, data, schedule)
    corr, hub = evaluate_embeddings(
        test_records, model.embed_batch(test_inputs), test_dm)

    elapsed = time.perf_counter() - start
    ok = (corr >= 0.6 and hub >= 0.5 and untrained_corr <= 0.15
          and elapsed < 600.0)
    report(4, "end-to-end supervised", ok,
           f"corr {corr:.3f} (>=0.6), hubness {hub:.3f} (>=0.5), "
           f"untrained {untrained_corr:.3f} (<=0.15), {elapsed:.0f}s (<600)")


# -- criterion 5: semi-supervised trend ----------------------------------------


def test_criterion_5_semi_supervised_trend(dataset):
    cv = cv_config(2)
    test_records = dataset.group_records(cv.test_group)
    test_inputs, test_dm = group_arrays(dataset, test_records)
    pred_schedule = TrainSchedule.regression_only(
        PREDICTION_EPOCHS, learning_rate=LEARNING_RATE)
    retr_schedule = TrainSchedule.multi_task(
        MULTI_TASK_EPOCHS, similarity_loss="dm_kl", learning_rate=LEARNING_RATE)

    lines = []
    ok = True
    for seed in TREND_SEEDS:
        spec = ExperimentSpec(SEMI_SUPERVISED, model_config(0), pred_schedule,
                              retr_schedule, (cv.config_id,), seed=seed)
        supervised = run_retrieval_step(cv, spec, dataset, TRUE_RATINGS)
        prediction = run_prediction_step(cv, spec, dataset)
        semi = run_retrieval_step(cv, spec, dataset, PREDICTED_RATINGS,
                                  prediction.predictions)
        untrained = init_model(model_config(seed))
        untrained_corr, _ = evaluate_embeddings(
            test_records, untrained.embed_batch(test_inputs), test_dm)
        seed_ok = (semi.correlation >= 0.80 * supervised.correlation
                   and supervised.correlation >= 2.0 * untrained_corr
                   and semi.correlation >= 2.0 * untrained_corr)
        ok &= seed_ok
        lines.append(f"seed {seed}: semi {semi.correlation:.3f} vs "
                     f"0.8*sup {0.8 * supervised.correlation:.3f}, "
                     f"untrained {untrained_corr:.3f}")
    report(5, "semi-supervised trend", ok, "; ".join(lines))


# -- criterion 6: loss-family trend ---------------------------------------------


def test_criterion_6_loss_family_trend(dataset):
    cv = cv_config(2)
    train_records = dataset.group_records(cv.retrieval_train)
    test_records = dataset.group_records(cv.test_group)
    test_inputs, test_dm = group_arrays(dataset, test_records)
    data = TrainData(dataset.inputs(train_records),
                     tuple(r.rating_set for r in train_records))

    means = {}
    for loss_name in ("dm_kl", "dm_pearson", "dm_logcosh"):
        corrs, hubs = [], []
        for seed in TREND_SEEDS:
            model = init_model(model_config(seed))
            schedule = TrainSchedule.similarity_only(
                60, similarity_loss=loss_name,
                learning_rate=LEARNING_RATE, seed=seed)
            train(model, data, schedule)
            corr, hub = evaluate_embeddings(
                test_records, model.embed_batch(test_inputs), test_dm)
            corrs.append(corr)
            hubs.append(hub)
        means[loss_name] = (float(np.mean(corrs)), float(np.mean(hubs)))

    hub_direction = means["dm_kl"][1] > means["dm_pearson"][1]
    corr_direction = means["dm_pearson"][0] > means["dm_logcosh"][0]
    ok = hub_direction and corr_direction
    report(6, "loss-family trend", ok,
           f"hubness kl {means['dm_kl'][1]:.3f} > pearson {means['dm_pearson'][1]:.3f}: "
           f"{hub_direction}; corr pearson {means['dm_pearson'][0]:.3f} > "
           f"logcosh {means['dm_logcosh'][0]:.3f}: {corr_direction}")


# -- criterion 7: pipeline integrity --------------------------------------------


def test_criterion_7_pipeline_integrity(dataset, tmp_path):
    validate_cv_configs()
    table_ok = all(
        sorted((*c.prediction_train, *c.prediction_valid, c.test_group)) == [0, 1, 2, 3, 4]
        for c in CV_CONFIGS
    )

    data_dir = tmp_path / "ds"
    save_dataset(dataset, data_dir)
    outputs = []
    for name in ("runA", "runB"):
        out = tmp_path / name
        rc = cli_main([
            "pipeline", "--data", str(data_dir / "manifest.jsonl"),
            "--regime", "semi_supervised", "--configs", "2,5,6,8,9",
            "--seed", "3", "--out", str(out),
            "--pred-epochs", "30", "--retrieval-epochs", "10,5,5",
            "--embedding-dim", "32", "--hidden", "48", "--batch-size", "32",
        ])
        assert rc == 0
        outputs.append(out)

    results_lines = (outputs[0] / "results.csv").read_text().splitlines()
    got_configs = sorted({line.split(",")[0] for line in results_lines[1:]})
    configs_ok = got_configs == ["2", "5", "6", "8", "9"]
    regimes_ok = {line.split(",")[1] for line in results_lines[1:]} == {
        "supervised", "semi_supervised"}
    summary_text = (outputs[0] / "summary.csv").read_text()
    summary_ok = ("supervised" in summary_text
                  and "semi_supervised" in summary_text
                  and "semi_supervised_cost" in summary_text)

    csv_names = ["results.csv", "summary.csv"] + [
        f"results_config{c}.csv" for c in (2, 5, 6, 8, 9)
    ]
    identical = all(
        (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
        for name in csv_names
    )
    ok = table_ok and configs_ok and regimes_ok and summary_ok and identical
    report(7, "pipeline integrity", ok,
           f"table partitions {table_ok}, configs {got_configs}, "
           f"summary rows {summary_ok}, byte-identical rerun {identical}")


# -- criterion 8: annotation metrics --------------------------------------------


def test_criterion_8_annotation_metrics():
    wide = CharacteristicSchema(tuple(f"c{i}" for i in range(9)), ((0.0, 10.0),) * 9)
    rng = np.random.default_rng(818)
    votes = rng.uniform(0, 10, size=(5, 9))
    raters = RatingSet(votes, None, wide)
    zero_at_mean = mahalanobis_to_raters(votes.mean(axis=0), raters)

    one_dim = CharacteristicSchema(("x",), ((0.0, 10.0),))
    one_dim_raters = RatingSet(np.array([[1.0], [2.0], [3.0], [4.0]]), None, one_dim)
    one_dim_value = mahalanobis_to_raters(np.array([4.5]), one_dim_raters, ridge=0.0)

    five = CharacteristicSchema(("x",), ((1.0, 5.0),))
    constant = [RatingSet(np.array([[3.0]]), None, five) for _ in range(20)]
    uniform = [RatingSet(np.array([[float(v)]]), None, five)
               for v in (1, 2, 3, 4, 5) for _ in range(4)]
    entropy_constant = param_entropy(constant, 0, five)
    entropy_uniform = param_entropy(uniform, 0, five)

    ok = (zero_at_mean < 1e-9
          and abs(one_dim_value - 1.7889) < 1e-3
          and entropy_constant == 0.0
          and abs(entropy_uniform - 1.0) < 1e-12)
    report(8, "annotation metrics", ok,
           f"mahalanobis at mean {zero_at_mean:.2e}, 1-D case {one_dim_value:.4f} "
           f"(1.7889 +/- 1e-3), entropy constant {entropy_constant}, "
           f"uniform {entropy_uniform:.6f}")
