from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from labelcalib import (
    SceneSpec,
    ShiftModel,
    ValidationError,
    apply_shift,
    confusion_mixing,
    gen_scene,
    run_experiment,
)
from labelcalib.shiftsim import (
    ROLE_FIT_SCENE,
    derive_seed,
    load_sim_config,
    run_batch,
    run_sweep,
    split_heights,
    sweep_csv,
)


def uniform_spec(C=3, width=16, height=16, seed=0):
    return SceneSpec(
        width=width, height=height,
        class_frequencies=np.full(C, 1.0 / C), seed=seed,
    )


class TestDeriveSeed:
    def test_known_values_pinned(self):
        # splitmix64; role 0 / seed 0 is the published first output for
        # state 0x9E3779B97F4A7C15.
        assert derive_seed(0, 0) == 16294208416658607535
        assert derive_seed(0, 1) == 7960286522194355700

    def test_roles_decorrelate(self):
        seeds = {derive_seed(123, r) for r in range(4)}
        assert len(seeds) == 4


class TestGenScene:
    def test_one_hot_frequencies(self):
        spec = SceneSpec(
            width=4, height=3,
            class_frequencies=np.array([0.0, 0.0, 1.0]), seed=5,
        )
        np.testing.assert_array_equal(gen_scene(spec), np.full((3, 4), 2))

    def test_deterministic(self):
        spec = uniform_spec(seed=999)
        np.testing.assert_array_equal(gen_scene(spec), gen_scene(spec))

    def test_seed_changes_grid(self):
        a = gen_scene(uniform_spec(seed=1))
        b = gen_scene(uniform_spec(seed=2))
        assert not np.array_equal(a, b)

    def test_pinned_tiny_scene(self):
        spec = SceneSpec(
            width=2, height=2, class_frequencies=np.full(3, 1.0 / 3.0), seed=42
        )
        np.testing.assert_array_equal(gen_scene(spec), [[1, 0], [2, 0]])

    def test_uniform_shares_within_binomial_bound(self):
        C, n = 4, 100 * 100
        spec = SceneSpec(
            width=100, height=100, class_frequencies=np.full(C, 0.25), seed=7
        )
        shares = np.bincount(gen_scene(spec).reshape(-1), minlength=C) / n
        bound = 3.0 * np.sqrt(0.25 * 0.75 / n)
        assert np.all(np.abs(shares - 0.25) <= bound)

    def test_frequencies_must_be_a_distribution(self):
        with pytest.raises(ValidationError):
            SceneSpec(width=2, height=2, class_frequencies=np.array([0.5, 0.6]), seed=0)


class TestApplyShift:
    def test_sigma_zero_identity_mixing_is_one_hot(self):
        gt = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        model = ShiftModel(mixing=np.eye(3), noise_scale=0.0, seed=0)
        pm = apply_shift(gt, model)
        for i, y in enumerate(gt.reshape(-1)):
            np.testing.assert_array_equal(pm.pixels()[i], np.eye(3)[y])

    def test_sigma_zero_emits_rows_verbatim(self):
        T = np.array([[0.6, 0.3, 0.1], [0.5, 0.4, 0.1], [0.1, 0.2, 0.7]])
        gt = np.array([[0, 1, 2]], dtype=np.uint8)
        pm = apply_shift(gt, ShiftModel(mixing=T, noise_scale=0.0, seed=0))
        np.testing.assert_array_equal(pm.pixels(), T[gt.reshape(-1)])

    def test_jittered_outputs_stay_on_the_simplex(self):
        T = confusion_mixing(5, 0.45, 0.35)
        gt = gen_scene(uniform_spec(C=5, seed=3))
        pm = apply_shift(gt, ShiftModel(mixing=T, noise_scale=0.8, seed=3))
        px = pm.pixels()
        assert np.all(px >= 0.0)
        np.testing.assert_allclose(px.sum(axis=1), 1.0, atol=1e-12)

    def test_jitter_is_deterministic(self):
        gt = gen_scene(uniform_spec(seed=8))
        model = ShiftModel(mixing=confusion_mixing(3, 0.5, 0.3), noise_scale=0.4, seed=11)
        np.testing.assert_array_equal(
            apply_shift(gt, model).data, apply_shift(gt, model).data
        )

    def test_rejects_labels_outside_mixing(self):
        with pytest.raises(ValidationError):
            apply_shift(
                np.array([[5]], dtype=np.uint8),
                ShiftModel(mixing=np.eye(3), noise_scale=0.0, seed=0),
            )

    def test_mixing_rows_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            ShiftModel(mixing=np.array([[0.5, 0.4], [0.5, 0.5]]), noise_scale=0.0, seed=0)


class TestSplitHeights:
    def test_half_split(self):
        assert split_heights(128, 0.5) == (64, 64)

    def test_degenerate_rejected(self):
        with pytest.raises(ValidationError):
            split_heights(1, 0.5)
        with pytest.raises(ValidationError):
            split_heights(100, 0.999999)
        with pytest.raises(ValidationError):
            split_heights(100, 0.0)


class TestRunExperiment:
    def test_no_shift_no_noise_is_perfect(self):
        spec = uniform_spec(C=3, width=16, height=16, seed=4)
        model = ShiftModel(mixing=np.eye(3), noise_scale=0.0, seed=4)
        report = run_experiment(spec, model, 0.5)
        assert report.argmax_accuracy == 1.0
        assert report.calibrated_accuracy == 1.0
        assert report.argmax_miou == 1.0
        assert report.calibrated_miou == 1.0
        np.testing.assert_array_equal(report.prototypes.prototypes, np.eye(3))

    def test_sigma_zero_injective_argmax_matches_argmax_exactly(self):
        # Diagonally dominant rows: each predicted class has exactly one
        # source row, so prototypes reproduce rows and predictions coincide.
        T = np.array(
            [[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.2, 0.7]]
        )
        spec = uniform_spec(C=3, width=20, height=20, seed=6)
        model = ShiftModel(mixing=T, noise_scale=0.0, seed=6)
        report = run_experiment(spec, model, 0.25)
        assert report.calibrated_accuracy == report.argmax_accuracy
        assert report.flip_count == 0

    def test_sigma_zero_prototypes_match_closed_form(self):
        # Rows 0 and 1 both argmax to class 0; class 1 is never predicted.
        T = np.array([[0.6, 0.3, 0.1], [0.5, 0.4, 0.1], [0.1, 0.2, 0.7]])
        spec = uniform_spec(C=3, width=24, height=24, seed=9)
        model = ShiftModel(mixing=T, noise_scale=0.0, seed=9)
        report = run_experiment(spec, model, 0.5)

        fit_rows, _ = split_heights(spec.height, 0.5)
        fit_gt = gen_scene(
            replace(spec, height=fit_rows, seed=derive_seed(spec.seed, ROLE_FIT_SCENE))
        )
        counts = np.bincount(fit_gt.reshape(-1), minlength=3)
        w = counts * T.max(axis=1)  # per-source-row total vote weight
        expected_mu0 = (w[0] * T[0] + w[1] * T[1]) / (w[0] + w[1])
        np.testing.assert_allclose(report.prototypes.prototypes[0], expected_mu0, atol=1e-9)
        np.testing.assert_array_equal(report.prototypes.prototypes[1], [0.0, 1.0, 0.0])
        assert not report.prototypes.observed[1]
        np.testing.assert_allclose(report.prototypes.prototypes[2], T[2], atol=1e-9)

    def test_byte_identical_reports(self):
        spec = uniform_spec(C=4, width=12, height=12, seed=21)
        model = ShiftModel(mixing=confusion_mixing(4, 0.5, 0.3), noise_scale=0.5, seed=21)
        a = json.dumps(run_experiment(spec, model, 0.5).to_json_dict())
        b = json.dumps(run_experiment(spec, model, 0.5).to_json_dict())
        assert a == b

    def test_class_count_mismatch(self):
        with pytest.raises(ValidationError):
            run_experiment(
                uniform_spec(C=3),
                ShiftModel(mixing=np.eye(4), noise_scale=0.0, seed=0),
                0.5,
            )


class TestBatchAndSweep:
    def test_batch_aggregates_means(self):
        spec = uniform_spec(C=3, width=10, height=10)
        model = ShiftModel(mixing=np.eye(3), noise_scale=0.0, seed=0)
        reports, aggregate = run_batch(spec, model, 0.5, [0, 1, 2])
        assert len(reports) == 3
        assert aggregate["mean_argmax_accuracy"] == 1.0
        assert aggregate["mean_calibrated_accuracy"] == 1.0
        assert aggregate["mean_accuracy_margin"] == 0.0
        assert aggregate["seeds"] == [0, 1, 2]

    def test_sweep_covers_sigmas(self):
        spec = uniform_spec(C=3, width=10, height=10)
        model = ShiftModel(mixing=confusion_mixing(3, 0.6, 0.3), noise_scale=0.0, seed=5)
        reports = run_sweep(spec, model, 0.5, [0.0, 0.3])
        assert [r.shift.noise_scale for r in reports] == [0.0, 0.3]
        csv_text = sweep_csv(reports)
        lines = csv_text.splitlines()
        assert lines[0].startswith("sigma,")
        assert len(lines) == 3


class TestConfusionMixing:
    def test_structure(self):
        T = confusion_mixing(5, 0.45, 0.35)
        np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)
        for y in range(5):
            assert T[y, y] == 0.45
            assert T[y, (y + 1) % 5] == 0.35

    def test_mass_must_fit(self):
        with pytest.raises(ValidationError):
            confusion_mixing(3, 0.9, 0.2)


class TestSimConfig:
    def test_round_trip(self, tmp_path):
        doc = {
            "scene": uniform_spec(C=3, seed=9).to_json_dict(),
            "shift": ShiftModel(mixing=np.eye(3), noise_scale=0.2, seed=9).to_json_dict(),
            "holdout_fraction": 0.25,
            "seeds": [0, 1],
        }
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(doc))
        config = load_sim_config(path)
        assert config.holdout_fraction == 0.25
        assert config.seeds == (0, 1)
        assert config.sweep_sigmas is None
        assert config.scene.seed == 9

    def test_malformed_config_rejected(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps({"scene": {}}))
        with pytest.raises(ValidationError):
            load_sim_config(path)
