"""Pipeline tests: dataset preparation, phase orchestration, prediction
variants, noisy labels, functional pairing, visualization, and run
artifacts.  Hand-built two-variable circuits provide exact conditionals
to check the prediction paths against."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from llae import circuit as circuit_mod
from llae import pipeline
from llae.circuit import PartialAssignment, sample_joint_batch
from llae.codecs import DomainSpec, FeatureLayerSpec, fl_constraint, slice_fl
from llae.learn import BinaryDataset, LearnConfig
from llae.neural import LatentSpec, Layer, MlpNetwork, TrainConfig, init_mlp
from llae.pipeline import (
    ExperimentConfig,
    FunctionalPairs,
    ImageDataset,
    bits_to_decoder_input,
    build_domain_vtree,
    classify,
    classify_sampled,
    downsample_images,
    encode_functional,
    encode_images,
    load_digits14,
    make_fl_spec,
    make_functional_dataset,
    make_noisy_labels,
    map_predict_batch,
    run_experiment,
    run_phase1,
    run_phase2,
    sample_class_images,
    sampled_predict_batch,
    visualize_fl_variable,
)
from llae.vtree import build_balanced

from helpers import _Builder, oracle_evidence_prob


# ------------------------------------------------------ tiny fixed circuits


def tiny_fl_spec():
    """One neural bit + one binary label bit."""
    return FeatureLayerSpec([
        DomainSpec("image", 1, 2, "neural", False),
        DomainSpec("label", 1, 2, "one_hot_symbolic", False),
    ])


def label_follows_image_circuit(p_same_given_1=1.0, p_same_given_0=1.0):
    """Uniform Pr(x0); the label bit copies x0 with the given fidelities."""
    b = _Builder(build_balanced(2))
    e = []
    for x0, fid in ((True, p_same_given_1), (False, p_same_given_0)):
        if fid >= 1.0:
            sub = b.lit(1, 1, x0)
        elif fid <= 0.0:
            sub = b.lit(1, 1, not x0)
        else:
            sub = b.term(1, 1, fid if x0 else 1 - fid)
        e.append((b.lit(0, 0, x0), sub, 0.5))
    return b.circuit(b.dec(2, e))


def one_pixel_encoder():
    """Pixel 1 -> bit 1, pixel 0 -> bit 0 (tie broken to index 0)."""
    return MlpNetwork([Layer(np.array([[-1.0, 1.0]]), np.zeros(2), "identity")])


def one_pixel_decoder():
    return MlpNetwork([Layer(np.array([[-2.0], [2.0]]), np.zeros(1), "sigmoid")])


# ----------------------------------------------------------------- datasets


class TestDatasets:
    def test_downsample_average_pooling(self):
        img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        small = downsample_images(img, 2)
        assert small.shape == (1, 2, 2)
        assert small[0].tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_downsample_factor_one_is_identity(self):
        img = np.random.default_rng(0).random((2, 4, 4))
        assert np.array_equal(downsample_images(img, 1), img)

    def test_downsample_requires_divisible_sides(self):
        with pytest.raises(ValueError):
            downsample_images(np.zeros((1, 5, 5)), 2)

    def test_digits14_shapes_and_ranges(self):
        train, test = load_digits14(600, 200, rng=0)
        assert train.images.shape == (600, 196)
        assert test.images.shape == (200, 196)
        assert train.height == train.width == 14
        assert train.images.min() >= 0 and train.images.max() <= 1
        assert set(np.unique(test.labels)) <= set(range(10))
        assert len(set(np.unique(train.labels))) == 10

    def test_digits14_test_images_are_centered(self):
        _, test = load_digits14(600, 200, rng=1)
        frames = test.images.reshape(-1, 14, 14)
        assert np.all(frames[:, :3, :] == 0)
        assert np.all(frames[:, 11:, :] == 0)
        assert np.all(frames[:, :, :3] == 0)
        assert np.all(frames[:, :, 11:] == 0)

    def test_digits14_deterministic(self):
        a_train, a_test = load_digits14(300, 100, rng=7)
        b_train, b_test = load_digits14(300, 100, rng=7)
        assert np.array_equal(a_train.images, b_train.images)
        assert np.array_equal(a_test.labels, b_test.labels)

    def test_digits14_train_and_test_disjoint_pools(self):
        train, test = load_digits14(2000, 500, rng=3)
        # augmented frames may repeat pool images, but none may equal a
        # centered test frame
        test_set = {t.tobytes() for t in test.images}
        clashes = sum(t.tobytes() in test_set for t in train.images)
        assert clashes == 0

    def test_image_dataset_validation(self):
        with pytest.raises(ValueError):
            ImageDataset(np.zeros((2, 9)), np.zeros(3, dtype=int), 3, 3)
        with pytest.raises(ValueError):
            ImageDataset(np.full((2, 9), 1.5), np.zeros(2, dtype=int), 3, 3)


# ------------------------------------------------------------------- config


class TestExperimentConfig:
    def test_task_and_noise_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(task="segment")
        with pytest.raises(ValueError):
            ExperimentConfig(noise_k=10)
        ExperimentConfig(noise_k=9)

    def test_json_round_trip(self):
        cfg = ExperimentConfig(
            num_vars=8, task="xor", seed=3,
            train_config=TrainConfig(epochs=7, learning_rate=0.01),
            learn_config=LearnConfig(max_iterations=5),
        )
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg
        assert back.train_config.epochs == 7
        assert back.latent == LatentSpec(8, 2)

    def test_fl_spec_layouts(self):
        assert make_fl_spec(ExperimentConfig()).total_vars == 26
        assert make_fl_spec(ExperimentConfig(task="successor")).total_vars == 32
        assert make_fl_spec(ExperimentConfig(task="xor")).total_vars == 33
        plus = make_fl_spec(ExperimentConfig(task="plus"))
        assert plus.domain("result").cat_dim == 19
        assert plus.total_vars == 32 + 19


# ------------------------------------------------------------ encoding glue


class TestEncodingGlue:
    def test_binary_bits_are_argmax(self):
        lspec = LatentSpec(1, 2)
        bits = encode_images(one_pixel_encoder(), np.array([[1.0], [0.0]]),
                             lspec)
        assert bits.tolist() == [[1], [0]]

    def test_decoder_input_round_trip_binary(self):
        lspec = LatentSpec(4, 2)
        rng = np.random.default_rng(0)
        bits = (rng.random((6, 4)) > 0.5).astype(np.uint8)
        hot = bits_to_decoder_input(bits, lspec)
        assert hot.shape == (6, 8)
        assert np.array_equal(hot[:, 1::2], bits.astype(float))
        assert np.array_equal(hot[:, 0::2], 1.0 - bits)

    def test_wide_categories_pass_through(self):
        lspec = LatentSpec(2, 3)
        enc = init_mlp([4, 6], ["identity"], rng=1)
        imgs = np.random.default_rng(2).random((5, 4))
        bits = encode_images(enc, imgs, lspec)
        assert bits.shape == (5, 6)
        assert np.array_equal(
            bits.reshape(5, 2, 3).sum(axis=2), np.ones((5, 2)))
        assert np.array_equal(bits_to_decoder_input(bits, lspec),
                              bits.astype(float))


# ------------------------------------------------------------------ phase I


def small_config(**kw):
    defaults = dict(
        train_size=150, test_size=60, num_vars=6, hidden=48,
        train_config=TrainConfig(epochs=3, batch_size=32, learning_rate=0.02),
        learn_config=LearnConfig(max_iterations=8, size_penalty=0.005),
        sample_count=1, vis_samples=25,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestPhase1:
    def test_rows_match_spec_and_labels(self):
        cfg = small_config()
        train_ds, _ = pipeline.load_dataset(cfg)
        fl_spec = make_fl_spec(cfg)
        encoder, _, _, data = run_phase1(cfg, train_ds, fl_spec)
        assert data.num_vars == fl_spec.total_vars == 16
        label_bits = data.rows[:, 6:]
        assert np.array_equal(label_bits.sum(axis=1), np.ones(len(data)))
        assert np.array_equal(label_bits.argmax(axis=1), train_ds.labels)
        assert np.array_equal(
            data.rows[:, :6],
            encode_images(encoder, train_ds.images, cfg.latent))

    def test_single_example_overfit(self):
        from sklearn.datasets import load_digits

        img = (load_digits().images[3] / 16.0 > 0.5).astype(np.float64)
        ds = ImageDataset(img.reshape(1, 64), np.array([3]), 8, 8)
        cfg = ExperimentConfig(
            num_vars=8, hidden=48,
            train_config=TrainConfig(epochs=200, batch_size=1,
                                     learning_rate=0.05, kl_weight=0.0),
        )
        encoder, decoder, _, data = run_phase1(cfg, ds, make_fl_spec(cfg))
        bits = data.rows[0, :8]
        recon = pipeline.decode_image_bits(decoder, bits, cfg.latent)[0]
        x = ds.images[0]
        p = np.clip(recon, 1e-12, 1 - 1e-12)
        bce = float(-(x * np.log(p) + (1 - x) * np.log(1 - p)).mean())
        assert bce <= 0.05


# ----------------------------------------------------------------- phase II


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One small classification experiment shared across artifact tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = small_config()
    metrics = run_experiment(cfg, out)
    return cfg, out, metrics


class TestPhase2:
    def test_learned_circuit_validates_and_respects_constraint(self, trained_run):
        cfg, out, _ = trained_run
        import llae.vtree as vtree_mod

        vt = vtree_mod.load(out / "circuit.vtree")
        psdd = circuit_mod.load(out / "circuit.psdd", vt)
        assert circuit_mod.validate(psdd) == []
        # every non-one-hot label pattern has probability exactly zero
        n = psdd.num_vars
        patterns = ((np.arange(1024)[:, None] >> np.arange(10)) & 1).astype(np.int8)
        ev = np.full((1024, n), -1, dtype=np.int8)
        ev[:, 6:] = patterns
        logp = psdd.evaluate(ev)
        onehot = patterns.sum(axis=1) == 1
        assert np.all(np.isneginf(logp[~onehot]))
        assert abs(np.exp(logp[onehot]).sum() - 1.0) < 1e-9

    def test_training_score_monotone(self, trained_run):
        _, out, _ = trained_run
        entries = [json.loads(l) for l in
                   (out / "train_log.jsonl").read_text().splitlines()]
        scores = [e["train_score"] for e in entries]
        assert scores == sorted(scores)

    def test_run_phase2_rejects_nothing_on_good_data(self):
        rows = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
        data = BinaryDataset.from_rows(rows)
        vt = build_balanced(2)
        psdd = run_phase2(data, vt, LearnConfig(max_iterations=2))
        assert circuit_mod.validate(psdd) == []


# ----------------------------------------------------------- classification


class TestClassification:
    def test_label_copies_image_bit(self):
        psdd = label_follows_image_circuit()
        spec = tiny_fl_spec()
        for pixel, want in ((1.0, 1), (0.0, 0)):
            cat, zero = classify(psdd, one_pixel_encoder(), spec,
                                 LatentSpec(1, 2), np.array([pixel]))
            assert (cat, zero) == (want, False)

    def test_sampled_agrees_with_map_on_confident_rows(self):
        psdd = label_follows_image_circuit(p_same_given_1=0.95,
                                           p_same_given_0=0.95)
        spec = tiny_fl_spec()
        bits = np.ones((1000, 1), dtype=np.uint8)
        preds_map, _ = map_predict_batch(psdd, spec, {"image": bits}, "label")
        preds_s, _ = sampled_predict_batch(psdd, spec, {"image": bits},
                                           "label", rng=0)
        assert np.all(preds_map == 1)
        assert (preds_s == preds_map).mean() >= 0.9

    def test_zero_evidence_falls_back_with_flag(self):
        b = _Builder(build_balanced(2))
        psdd = b.circuit(
            b.dec(2, [(b.lit(0, 0, False), b.term(1, 1, 0.5), 1.0)]))
        cat, zero = classify(psdd, one_pixel_encoder(), tiny_fl_spec(),
                             LatentSpec(1, 2), np.array([1.0]))
        assert zero is True
        assert cat == 0

    def test_map_dominates_sampling_on_model_data(self):
        # draw labeled data from the model itself; the exact-MAP rule is
        # the Bayes classifier, so sampling cannot beat it beyond noise
        psdd = label_follows_image_circuit(p_same_given_1=0.8,
                                           p_same_given_0=0.7)
        spec = tiny_fl_spec()
        rows = sample_joint_batch(psdd, 1000, rng=5)
        bits, truth = rows[:, :1], rows[:, 1]
        preds_map, zero_m = map_predict_batch(psdd, spec, {"image": bits},
                                              "label")
        preds_s, zero_s = sampled_predict_batch(psdd, spec, {"image": bits},
                                                "label", rng=6)
        acc_map = pipeline._accuracy(preds_map, zero_m, truth)
        acc_s = pipeline._accuracy(preds_s, zero_s, truth)
        assert acc_map >= acc_s - 0.02

    def test_classify_sampled_single(self):
        psdd = label_follows_image_circuit()
        cat, zero = classify_sampled(psdd, one_pixel_encoder(), tiny_fl_spec(),
                                     LatentSpec(1, 2), np.array([1.0]), rng=0)
        assert (cat, zero) == (1, False)


class TestSampleClassImages:
    def test_pixel_range_and_support(self):
        psdd = label_follows_image_circuit(0.9, 0.8)
        spec = tiny_fl_spec()
        images = sample_class_images(psdd, one_pixel_decoder(), spec,
                                     LatentSpec(1, 2), 1, 40, rng=1)
        assert images.shape == (40, 1)
        assert np.all((images > 0) & (images < 1))

    def test_sampled_codes_follow_exact_conditional(self):
        psdd = label_follows_image_circuit(0.9, 0.8)
        spec = tiny_fl_spec()
        # Pr(x0=1 | label=1) by enumeration
        num = oracle_evidence_prob(psdd, [1, 1])
        den = oracle_evidence_prob(psdd, [-1, 1])
        want = num / den
        images = sample_class_images(psdd, one_pixel_decoder(), spec,
                                     LatentSpec(1, 2), 1, 4000, rng=2)
        # decoder maps bit 1 -> sigmoid(2), bit 0 -> sigmoid(-2)
        frac_one = float((images[:, 0] > 0.5).mean())
        assert abs(frac_one - want) < 0.03


# ------------------------------------------------------------- noisy labels


class TestNoisyLabels:
    def spec(self):
        return FeatureLayerSpec([
            DomainSpec("image", 3, 2, "neural", False),
            DomainSpec("label", 1, 10, "one_hot_symbolic", False),
        ])

    def data(self, n=40):
        rng = np.random.default_rng(0)
        rows = np.zeros((n, 13), dtype=np.uint8)
        rows[:, :3] = rng.integers(0, 2, size=(n, 3))
        rows[np.arange(n), 3 + rng.integers(0, 10, size=n)] = 1
        return BinaryDataset.from_rows(rows)

    def test_k0_is_identity(self):
        data = self.data()
        assert make_noisy_labels(data, self.spec(), 0, rng=1) is data

    def test_k1_sets_exactly_two_bits(self):
        data = self.data()
        noisy = make_noisy_labels(data, self.spec(), 1, rng=2)
        slices = noisy.rows[:, 3:]
        assert np.all(slices.sum(axis=1) == 2)
        # the true bit always survives
        assert np.all(slices[data.rows[:, 3:] == 1] == 1)
        # image bits untouched
        assert np.array_equal(noisy.rows[:, :3], data.rows[:, :3])

    def test_k9_saturates(self):
        noisy = make_noisy_labels(self.data(), self.spec(), 9, rng=3)
        assert np.all(noisy.rows[:, 3:] == 1)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            make_noisy_labels(self.data(), self.spec(), 10, rng=4)

    def test_noise_is_random_but_seeded(self):
        a = make_noisy_labels(self.data(), self.spec(), 2, rng=5)
        b = make_noisy_labels(self.data(), self.spec(), 2, rng=5)
        c = make_noisy_labels(self.data(), self.spec(), 2, rng=6)
        assert np.array_equal(a.rows, b.rows)
        assert not np.array_equal(a.rows, c.rows)


# --------------------------------------------------------- functional tasks


def toy_images(n=120):
    rng = np.random.default_rng(4)
    labels = np.repeat(np.arange(10), n // 10)
    images = rng.random((n, 9))
    return ImageDataset(images, labels, 3, 3)


class TestFunctionalDatasets:
    def test_successor_wraps(self):
        ds = toy_images()
        pairs = make_functional_dataset(ds, "successor", rng=0, count=300)
        la = ds.labels[pairs.first]
        lb = ds.labels[pairs.second]
        assert np.array_equal(lb, (la + 1) % 10)
        assert pairs.result is None
        assert (la == 9).any()

    def test_successor_no_wrap_option(self):
        ds = toy_images()
        pairs = make_functional_dataset(ds, "successor", rng=1, count=300,
                                        wrap=False)
        assert not (ds.labels[pairs.first] == 9).any()

    def test_xor_rows_follow_definition(self):
        ds = toy_images()
        pairs = make_functional_dataset(ds, "xor", rng=2, count=200)
        la = ds.labels[pairs.first]
        lb = ds.labels[pairs.second]
        assert set(np.unique(la)) <= {0, 1}
        assert np.array_equal(pairs.result, la ^ lb)

    def test_plus_results(self):
        ds = toy_images()
        pairs = make_functional_dataset(ds, "plus", rng=3, count=200)
        assert np.array_equal(pairs.result,
                              ds.labels[pairs.first] + ds.labels[pairs.second])
        assert pairs.result.max() <= 18

    def test_encoded_symbolic_slice_recomputable(self):
        ds = toy_images()
        cfg = ExperimentConfig(task="xor", num_vars=4)
        spec = make_fl_spec(cfg)
        enc = init_mlp([9, 8], ["identity"], rng=0)
        pairs = make_functional_dataset(ds, "xor", rng=5, count=100)
        data = encode_functional(enc, spec, cfg.latent, ds, pairs)
        assert data.num_vars == spec.total_vars
        result_bits = slice_fl(spec, data.rows)["result"]
        la = ds.labels[pairs.first]
        lb = ds.labels[pairs.second]
        assert np.array_equal(result_bits[:, 0], la ^ lb)

    def test_plus_spec_width(self):
        cfg = ExperimentConfig(task="plus", num_vars=4)
        spec = make_fl_spec(cfg)
        assert spec.domain("result").width == 19
        assert len(fl_constraint(spec)) == 1


# -------------------------------------------------------- FL visualization


class TestVisualization:
    def test_constant_decoder_gives_half_everywhere(self):
        psdd = label_follows_image_circuit(0.9, 0.8)
        dec = MlpNetwork([Layer(np.zeros((2, 5)), np.zeros(5), "sigmoid")])
        vis = visualize_fl_variable(psdd, dec, tiny_fl_spec(), LatentSpec(1, 2),
                                    0, sample_count=30, rng=0)
        assert not vis.constant
        assert np.allclose(vis.visual_true, 0.5, atol=1e-12)
        assert np.allclose(vis.visual_false, 0.5, atol=1e-12)

    def test_visuals_sum_to_one(self):
        psdd = label_follows_image_circuit(0.9, 0.8)
        vis = visualize_fl_variable(psdd, one_pixel_decoder(), tiny_fl_spec(),
                                    LatentSpec(1, 2), 0, sample_count=50, rng=1)
        assert np.allclose(vis.visual_true + vis.visual_false, 1.0, atol=1e-9)

    def test_degenerate_variable_reports_constant(self):
        b = _Builder(build_balanced(2))
        psdd = b.circuit(b.dec(2, [(b.lit(0, 0, True), b.term(1, 1, 0.5), 1.0)]))
        vis = visualize_fl_variable(psdd, one_pixel_decoder(), tiny_fl_spec(),
                                    LatentSpec(1, 2), 0, sample_count=10, rng=2)
        assert vis.constant
        assert vis.visual_true is None
        assert vis.probability_true == 1.0

    def test_default_sample_count_is_200(self):
        import inspect

        sig = inspect.signature(visualize_fl_variable)
        assert sig.parameters["sample_count"].default == 200


# -------------------------------------------------------------- experiments


class TestRunExperiment:
    def test_metrics_and_artifacts(self, trained_run):
        cfg, out, metrics = trained_run
        assert metrics["task"] == "classify"
        assert 0.0 <= metrics["accuracy_map"] <= 1.0
        assert 0.0 <= metrics["accuracy_sampled"] <= 1.0
        for name in ("metrics.json", "config.json", "fl_spec.json",
                     "circuit.psdd", "circuit.vtree", "encoder.llae",
                     "decoder.llae", "train_log.jsonl", "phase1_curve.json"):
            assert (out / name).exists(), name
        assert json.loads((out / "metrics.json").read_text()) == metrics
        assert list((out / "samples").glob("*.pgm"))

    def test_emitted_images_round_trip(self, trained_run):
        from llae.cli import read_pgm, write_pgm

        _, out, _ = trained_run
        some = sorted((out / "flvis").glob("*.pgm"))[:3] \
            + sorted((out / "samples").glob("*.pgm"))[:3]
        assert some
        for path in some:
            img = read_pgm(path)
            copy = path.parent / f"copy_{path.name}"
            write_pgm(img, copy)
            assert copy.read_bytes() == path.read_bytes()

    def test_noisy_task_runs_and_reports(self, tmp_path):
        cfg = small_config(task="noisy", noise_k=3,
                           train_size=120, test_size=40)
        metrics = run_experiment(cfg, tmp_path / "noisy")
        assert metrics["noise_k"] == 3
        assert 0.0 <= metrics["accuracy_map"] <= 1.0

    def test_xor_task_runs(self, tmp_path):
        cfg = small_config(task="xor", train_size=120, test_size=40,
                           num_vars=4)
        metrics = run_experiment(cfg, tmp_path / "xor")
        assert metrics["task"] == "xor"
        assert "accuracy_map" in metrics

    def test_successor_task_runs(self, tmp_path):
        cfg = small_config(task="successor", train_size=100, test_size=30,
                           num_vars=4)
        metrics = run_experiment(cfg, tmp_path / "succ")
        assert "accuracy_generated" in metrics

    def test_byte_determinism(self, tmp_path):
        cfg = small_config(train_size=100, test_size=30, num_vars=4,
                           learn_config=LearnConfig(max_iterations=4))
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        for name in ("metrics.json", "circuit.psdd", "circuit.vtree",
                     "encoder.llae", "decoder.llae", "config.json"):
            assert (tmp_path / "a" / name).read_bytes() \
                == (tmp_path / "b" / name).read_bytes(), name
