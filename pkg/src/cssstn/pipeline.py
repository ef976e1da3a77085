"""End-to-end experiment orchestration shared by the CLI and the test suite.

One experiment = pick a (target, source) subject pair, pretrain both
classifiers, build source class templates, fit the generator on the target
training split, then score the soft-voting ensemble on the held-out split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .evaluate import TransferReport, evaluate_transfer
from .models import ClassifierConfig, Generator, GeneratorConfig, SubjectClassifier
from .preprocess import PreprocessConfig, preprocess_pipeline
from .store import FeatureSet, stratified_folds
from .synthdata import SynthSpec, generate_subject
from .training import (PretrainConfig, TransferConfig, VARIANTS,
                       compute_class_templates, pretrain_classifier,
                       train_generator)


@dataclass(frozen=True)
class ExperimentConfig:
    classifier_widths: tuple = (8, 16, 32)
    classifier_hidden: int = 64
    generator_widths: tuple = (16, 32, 64)
    pretrain: PretrainConfig = PretrainConfig(epochs=40, patience=8)
    transfer: TransferConfig = TransferConfig(epochs=25, patience=25)
    variant: str = "full"
    n_folds: int = 2
    seed: int = 0


def synth_features(spec: SynthSpec, subject_index: int, seed: int,
                   preprocess_config: PreprocessConfig | None = None) -> FeatureSet:
    """Generate one synthetic subject and run the preprocessing pipeline."""
    epochs = generate_subject(spec, subject_index, seed)
    config = preprocess_config or PreprocessConfig(target_hz=spec.sampling_rate)
    return preprocess_pipeline(epochs, config)


def pretrain_subject(features: FeatureSet, cfg: ExperimentConfig,
                     seed: int | None = None):
    """Pretrain one subject classifier on the given features."""
    torch.manual_seed(cfg.seed if seed is None else seed)
    model = SubjectClassifier(ClassifierConfig(
        in_channels=features.values.shape[1],
        widths=cfg.classifier_widths,
        hidden=cfg.classifier_hidden,
    ))
    pre_cfg = replace(cfg.pretrain, seed=cfg.seed if seed is None else seed)
    return pretrain_classifier(features, model, pre_cfg)


def run_transfer_experiment(target_features: FeatureSet, source_features: FeatureSet,
                            cfg: ExperimentConfig,
                            template_recorder: list | None = None) -> TransferReport:
    """Cross-validated transfer run; per-fold ensemble and baseline scores."""
    transfer_cfg = replace(cfg.transfer, seed=cfg.seed).with_variant(cfg.variant)

    source_classifier, _ = pretrain_subject(source_features, cfg)
    templates = compute_class_templates(
        source_features, source_classifier,
        layers=(1, 2, 3), mode=transfer_cfg.template_mode)

    folds = stratified_folds(target_features.labels, k=cfg.n_folds, seed=cfg.seed)
    fold_acc, baseline_acc = [], []
    for train_idx, test_idx in folds:
        train_set = target_features.take(train_idx)
        test_set = target_features.take(test_idx)
        target_classifier, _ = pretrain_subject(train_set, cfg)
        torch.manual_seed(cfg.seed)
        generator = Generator(GeneratorConfig(
            in_channels=target_features.values.shape[1],
            widths=cfg.generator_widths,
        ))
        generator, _ = train_generator(
            train_set, target_classifier, source_classifier, templates,
            transfer_cfg, generator=generator, template_recorder=template_recorder)
        scores = evaluate_transfer(generator, target_classifier, source_classifier,
                                   test_set, train_indices=train_idx,
                                   test_indices=test_idx)
        fold_acc.append(scores["ensemble"])
        baseline_acc.append(scores["target_only"])

    return TransferReport(
        target_subject=target_features.subject_id,
        source_subject=source_features.subject_id,
        variant=cfg.variant,
        fold_accuracies=fold_acc,
        baseline_accuracies=baseline_acc,
        config={
            "variant": cfg.variant,
            "method": VARIANTS[cfg.variant],
            "n_folds": cfg.n_folds,
            "seed": cfg.seed,
            "classifier_widths": list(cfg.classifier_widths),
            "generator_widths": list(cfg.generator_widths),
        },
    )
