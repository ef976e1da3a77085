import math

import numpy as np
import pytest
import torch

from cssstn.models import (ClassifierConfig, Generator, GeneratorConfig,
                           SubjectClassifier, parameter_checksum)
from cssstn.training import (POOLED_TEMPLATE, PretrainConfig, TrainingDivergedError,
                             TransferConfig, VARIANTS, compute_class_templates,
                             content_loss, oversample_features, pretrain_classifier,
                             semantic_loss, style_loss, train_generator,
                             weighted_ce_loss)

from conftest import make_feature_set


class TestWeightedCrossEntropy:
    def test_target_hand_value(self):
        loss = weighted_ce_loss((0.2, 0.8), 1, weights=(1.0, 10.0))
        assert loss.item() == pytest.approx(10 * -math.log(0.8), abs=1e-6)

    def test_perfect_prediction_zero(self):
        assert weighted_ce_loss((0.0, 1.0), 1).item() == pytest.approx(0.0, abs=1e-6)

    def test_nontarget_hand_value(self):
        loss = weighted_ce_loss((0.5, 0.5), 0, weights=(1.0, 10.0))
        assert loss.item() == pytest.approx(-math.log(0.5), abs=1e-6)

    def test_zero_probability_clamped_finite(self):
        loss = weighted_ce_loss((1.0, 0.0), 1)
        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(10 * -math.log(1e-12))

    def test_batch_is_mean_of_singles(self):
        probs = torch.tensor([[0.2, 0.8], [0.5, 0.5]])
        labels = torch.tensor([1, 0])
        batch = weighted_ce_loss(probs, labels).item()
        singles = [weighted_ce_loss(probs[i], labels[i]).item() for i in range(2)]
        assert batch == pytest.approx(np.mean(singles), abs=1e-6)


class TestSemanticLoss:
    def test_perfect_prediction_zero(self):
        assert semantic_loss((0.0, 1.0), 1).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_hand_value(self):
        assert semantic_loss((0.5, 0.5), 1).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_equals_unit_weighted_ce(self):
        probs = torch.tensor([[0.3, 0.7], [0.9, 0.1]])
        labels = torch.tensor([1, 0])
        assert semantic_loss(probs, labels).item() == pytest.approx(
            weighted_ce_loss(probs, labels, weights=(1.0, 1.0)).item(), abs=1e-9)


class TestStyleLoss:
    def test_identical_features_zero(self):
        x = torch.randn(1, 3, 4, 4)
        assert style_loss(x, x).item() == pytest.approx(0.0, abs=1e-6)

    def test_nonnegative(self):
        torch.manual_seed(0)
        a, b = torch.randn(5, 2, 4, 4), torch.randn(1, 2, 4, 4)
        assert style_loss(a, b.expand(5, -1, -1, -1)).item() >= 0

    def test_closed_form_value(self):
        # softmax of ln(p) recovers p; KL((.5,.25,.25) || (.25,.5,.25))
        p = torch.log(torch.tensor([[0.5, 0.25, 0.25]]))
        q = torch.log(torch.tensor([[0.25, 0.5, 0.25]]))
        expected = 0.5 * math.log(2) - 0.25 * math.log(2)
        assert style_loss(p, q).item() == pytest.approx(expected, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            style_loss(torch.randn(1, 2, 4, 4), torch.randn(1, 2, 4, 5))


class TestContentLoss:
    def test_identical_zero(self):
        x = torch.randn(2, 3, 4, 4)
        assert content_loss(x, x).item() == pytest.approx(0.0, abs=1e-6)

    def test_constant_offset(self):
        x = torch.randn(2, 3, 4, 4)
        assert content_loss(x + 1.0, x).item() == pytest.approx(1.0, abs=1e-6)

    def test_matches_brute_force(self):
        torch.manual_seed(1)
        a, b = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        brute = float(np.mean((a.numpy() - b.numpy()) ** 2))
        assert content_loss(a, b).item() == pytest.approx(brute, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            content_loss(torch.randn(1, 2, 4, 4), torch.randn(2, 2, 4, 4))


class TestClassTemplates:
    def _classifier(self):
        torch.manual_seed(0)
        return SubjectClassifier(ClassifierConfig(in_channels=2, widths=(4, 4, 4),
                                                  hidden=8, input_size=16))

    def test_identical_samples_give_that_sample(self):
        feats = make_feature_set(n_per_class=3, seed=0)
        feats.values[feats.labels == 1] = feats.values[feats.labels == 1][0]
        templates = compute_class_templates(feats, self._classifier())
        expected = feats.values[feats.labels == 1][0]
        assert np.allclose(templates[1].input_template.numpy(), expected, atol=1e-6)

    def test_two_sample_mean(self):
        feats = make_feature_set(n_per_class=1, seed=1)
        templates = compute_class_templates(feats, self._classifier())
        pooled = templates[POOLED_TEMPLATE].input_template.numpy()
        assert np.allclose(pooled, feats.values.mean(axis=0), atol=1e-6)

    def test_matches_brute_force_accumulation(self):
        feats = make_feature_set(n_per_class=5, seed=2)
        templates = compute_class_templates(feats, self._classifier())
        for cls in (0, 1):
            acc = np.zeros(feats.values.shape[1:], dtype=np.float64)
            count = 0
            for v, y in zip(feats.values, feats.labels):
                if y == cls:
                    acc += v
                    count += 1
            assert np.allclose(templates[cls].input_template.numpy(),
                               acc / count, atol=1e-6)

    def test_feature_templates_cover_requested_layers(self):
        feats = make_feature_set(n_per_class=2)
        templates = compute_class_templates(feats, self._classifier(), layers=(1, 3))
        assert set(templates[0].feature_templates) == {1, 3}

    def test_feature_mean_mode_differs_from_input_mean(self):
        feats = make_feature_set(n_per_class=5, seed=3)
        model = self._classifier()
        by_input = compute_class_templates(feats, model, mode="input_mean")
        by_feature = compute_class_templates(feats, model, mode="feature_mean")
        # the network is nonlinear, so mean-then-extract != extract-then-mean
        assert not torch.allclose(by_input[1].feature_templates[1],
                                  by_feature[1].feature_templates[1])

    def test_empty_class_rejected(self):
        feats = make_feature_set(n_per_class=2)
        feats.labels[:] = 0
        with pytest.raises(ValueError):
            compute_class_templates(feats, self._classifier())

    def test_unknown_mode_rejected(self):
        feats = make_feature_set(n_per_class=2)
        with pytest.raises(ValueError):
            compute_class_templates(feats, self._classifier(), mode="median")


class TestTransferConfig:
    def test_all_losses_disabled_rejected(self):
        with pytest.raises(ValueError):
            TransferConfig(use_style=False, use_content=False, use_semantic=False)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TransferConfig(style_weight=-0.1)

    def test_invalid_layers_rejected(self):
        with pytest.raises(ValueError):
            TransferConfig(feature_layers=(4,))
        with pytest.raises(ValueError):
            TransferConfig(feature_layers=())

    def test_invalid_val_fraction_rejected(self):
        with pytest.raises(ValueError):
            TransferConfig(val_fraction=0.5)
        with pytest.raises(ValueError):
            TransferConfig(val_fraction=-0.1)

    def test_variant_flags(self):
        base = TransferConfig()
        assert not base.with_variant("no-cont").use_content
        assert not base.with_variant("no-style").use_style
        assert not base.with_variant("no-sem").use_semantic
        assert not base.with_variant("no-class").class_sensitive
        assert base.with_variant("layer2").feature_layers == (2,)
        assert base.with_variant("all-layers").feature_layers == (1, 2, 3)
        assert base.with_variant("full") == base

    def test_variant_names(self):
        assert VARIANTS["no-class"] == "CSSSTN w/o class"
        assert VARIANTS["layer2"] == "CSSSTN-A"
        assert VARIANTS["all-layers"] == "CSSSTN-B"

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            TransferConfig().with_variant("no-everything")


class TestOversampleFeatures:
    def test_balances_classes(self):
        feats = make_feature_set(n_per_class=4)
        feats.labels[:] = 0
        feats.labels[:2] = 1
        out = oversample_features(feats, seed=0)
        assert (out.labels == 1).sum() == (out.labels == 0).sum()

    def test_balanced_input_unchanged(self):
        feats = make_feature_set(n_per_class=4)
        out = oversample_features(feats, seed=0)
        assert out.n_trials == feats.n_trials


class TestPretrainClassifier:
    def _model(self, seed=0):
        torch.manual_seed(seed)
        return SubjectClassifier(ClassifierConfig(in_channels=2, widths=(4, 8, 8),
                                                  hidden=16, input_size=16))

    def test_separable_classes_learned(self):
        feats = make_feature_set(n_per_class=60, separation=2.0, seed=0)
        _, metrics = pretrain_classifier(feats, self._model(),
                                         PretrainConfig(epochs=20, patience=20, seed=0))
        assert max(m["val_balanced_accuracy"] for m in metrics) >= 0.95

    def test_shuffled_labels_stay_near_chance(self):
        feats = make_feature_set(n_per_class=60, separation=0.0, seed=1)
        _, metrics = pretrain_classifier(feats, self._model(),
                                         PretrainConfig(epochs=10, patience=10, seed=0))
        assert abs(metrics[-1]["val_balanced_accuracy"] - 0.5) <= 0.15

    def test_seeded_determinism(self):
        feats = make_feature_set(n_per_class=20, separation=0.3, seed=2)
        cfg = PretrainConfig(epochs=3, patience=3, seed=5)
        model_a, _ = pretrain_classifier(feats, self._model(seed=7), cfg)
        model_b, _ = pretrain_classifier(feats, self._model(seed=7), cfg)
        assert parameter_checksum(model_a) == parameter_checksum(model_b)

    def test_single_class_rejected(self):
        feats = make_feature_set(n_per_class=10)
        feats.labels[:] = 0
        with pytest.raises(ValueError):
            pretrain_classifier(feats, self._model())

    def test_augmentation_changes_training(self):
        from dataclasses import replace
        feats = make_feature_set(n_per_class=20, separation=0.5, seed=4)
        plain = PretrainConfig(epochs=2, patience=2, seed=0)
        model_a, _ = pretrain_classifier(feats, self._model(seed=1), plain)
        model_b, _ = pretrain_classifier(feats, self._model(seed=1),
                                         replace(plain, augment_sigma=0.5))
        assert parameter_checksum(model_a) != parameter_checksum(model_b)

    def test_augmented_training_still_learns(self):
        feats = make_feature_set(n_per_class=60, separation=2.0, seed=0)
        _, metrics = pretrain_classifier(
            feats, self._model(),
            PretrainConfig(epochs=20, patience=20, seed=0, augment_sigma=0.5))
        assert max(m["val_balanced_accuracy"] for m in metrics) >= 0.9

    def test_tiny_class_rejected(self):
        feats = make_feature_set(n_per_class=10)
        feats.labels[:] = 0
        feats.labels[0] = 1  # a single target cannot support a val split
        with pytest.raises(ValueError):
            pretrain_classifier(feats, self._model())

    def test_divergence_aborts(self):
        feats = make_feature_set(n_per_class=20, seed=3)
        feats.values[::2] = np.inf  # hit the training split regardless of fold draw
        with pytest.raises(TrainingDivergedError):
            pretrain_classifier(feats, self._model(),
                                PretrainConfig(epochs=2, patience=2, seed=0))


class TestTrainGenerator:
    def _setup(self, n_per_class=8, seed=0):
        torch.manual_seed(seed)
        clf_cfg = ClassifierConfig(in_channels=2, widths=(4, 4, 4), hidden=8,
                                   input_size=16)
        c_t = SubjectClassifier(clf_cfg)
        c_s = SubjectClassifier(clf_cfg)
        gen = Generator(GeneratorConfig(in_channels=2, widths=(4, 8), input_size=16))
        target = make_feature_set(n_per_class=n_per_class, separation=0.3, seed=seed)
        source = make_feature_set(n_per_class=n_per_class, separation=0.5,
                                  seed=seed + 1, subject_id="S02")
        templates = compute_class_templates(source, c_s, layers=(1, 2, 3))
        return target, c_t, c_s, gen, templates

    def test_classifiers_frozen(self):
        target, c_t, c_s, gen, templates = self._setup()
        before_s, before_t = parameter_checksum(c_s), parameter_checksum(c_t)
        train_generator(target, c_t, c_s, templates,
                        TransferConfig(epochs=2, patience=2, batch_size=8, seed=0),
                        generator=gen)
        assert parameter_checksum(c_s) == before_s
        assert parameter_checksum(c_t) == before_t

    def test_style_loss_decreases(self):
        target, c_t, c_s, gen, templates = self._setup(seed=1)
        _, history = train_generator(
            target, c_t, c_s, templates,
            TransferConfig(epochs=15, patience=15, batch_size=16, seed=0,
                           use_content=False, use_semantic=False),
            generator=gen)
        assert history[-1].style < history[0].style

    def test_content_only_descends_on_full_batch(self):
        target, c_t, c_s, gen, templates = self._setup(seed=2)
        n = target.n_trials
        _, history = train_generator(
            target, c_t, c_s, templates,
            TransferConfig(epochs=5, patience=5, batch_size=2 * n, seed=0,
                           use_style=False, use_semantic=False,
                           learning_rate=1e-4),
            generator=gen)
        values = [h.cont for h in history]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_class_sensitive_recorder(self):
        target, c_t, c_s, gen, templates = self._setup()
        recorder = []
        train_generator(target, c_t, c_s, templates,
                        TransferConfig(epochs=1, patience=1, batch_size=4, seed=0),
                        generator=gen, template_recorder=recorder)
        assert recorder
        assert all(used == label for label, used in recorder)

    def test_pooled_recorder_when_insensitive(self):
        target, c_t, c_s, gen, templates = self._setup()
        recorder = []
        train_generator(target, c_t, c_s, templates,
                        TransferConfig(epochs=1, patience=1, batch_size=4, seed=0,
                                       class_sensitive=False),
                        generator=gen, template_recorder=recorder)
        assert recorder
        assert all(used == POOLED_TEMPLATE for _, used in recorder)

    def test_total_is_weighted_sum_of_enabled_terms(self):
        target, c_t, c_s, gen, templates = self._setup(seed=3)
        _, history = train_generator(
            target, c_t, c_s, templates,
            TransferConfig(epochs=2, patience=2, batch_size=2 * target.n_trials,
                           seed=0, style_weight=2.0, content_weight=0.5,
                           semantic_weight=1.5),
            generator=gen)
        for h in history:
            expected = 2.0 * h.style + 0.5 * h.cont + 1.5 * h.sem
            assert h.total == pytest.approx(expected, rel=1e-5)

    def test_history_deterministic(self):
        cfg = TransferConfig(epochs=2, patience=2, batch_size=8, seed=4)
        runs = []
        for _ in range(2):
            target, c_t, c_s, gen, templates = self._setup(seed=5)
            _, history = train_generator(target, c_t, c_s, templates, cfg,
                                         generator=gen)
            runs.append([(h.style, h.cont, h.sem, h.total) for h in history])
        assert runs[0] == runs[1]

    def test_harmful_training_falls_back_to_init(self):
        # a source classifier that reads the raw features well gives the
        # identity initialization a strong held-out score; an absurd learning
        # rate then wrecks every trained epoch, so epoch selection keeps the
        # untrained initial state
        torch.manual_seed(0)
        clf_cfg = ClassifierConfig(in_channels=2, widths=(4, 8, 8), hidden=16,
                                   input_size=16)
        c_s = SubjectClassifier(clf_cfg)
        c_t = SubjectClassifier(clf_cfg)
        source = make_feature_set(n_per_class=60, separation=2.0, seed=7,
                                  subject_id="S02")
        target = make_feature_set(n_per_class=10, separation=2.0, seed=6)
        c_s, metrics = pretrain_classifier(
            source, c_s, PretrainConfig(epochs=20, patience=20, seed=0))
        assert max(m["val_balanced_accuracy"] for m in metrics) >= 0.9
        templates = compute_class_templates(source, c_s, layers=(1, 2, 3))
        gen = Generator(GeneratorConfig(in_channels=2, widths=(4, 8),
                                        input_size=16))
        before = parameter_checksum(gen)
        out, _ = train_generator(
            target, c_t, c_s, templates,
            TransferConfig(epochs=3, patience=3, batch_size=8, seed=0,
                           learning_rate=5.0),
            generator=gen)
        assert parameter_checksum(out) == before

    def test_train_loss_selection_when_validation_disabled(self):
        target, c_t, c_s, gen, templates = self._setup(n_per_class=10, seed=6)
        before = parameter_checksum(gen)
        out, _ = train_generator(
            target, c_t, c_s, templates,
            TransferConfig(epochs=3, patience=3, batch_size=8, seed=0,
                           learning_rate=5.0, val_fraction=0.0),
            generator=gen)
        assert parameter_checksum(out) != before

    def test_missing_template_layer_rejected(self):
        target, c_t, c_s, gen, _ = self._setup()
        source = make_feature_set(n_per_class=4, seed=9, subject_id="S02")
        templates = compute_class_templates(source, c_s, layers=(2,))
        with pytest.raises(ValueError):
            train_generator(target, c_t, c_s, templates,
                            TransferConfig(feature_layers=(1,), epochs=1, patience=1),
                            generator=gen)
