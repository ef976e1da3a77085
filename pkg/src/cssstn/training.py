"""Classifier pretraining and class-sensitive style-transfer training.

Pretraining minimizes inverse-frequency weighted cross-entropy. Transfer
training freezes both subject classifiers and fits the generator G against
up to three losses: a KL style loss toward per-class source templates, an
MSE content loss between source/target feature taps, and a cross-entropy
semantic loss on the source classifier's prediction for the generated
sample. Ablation variants toggle individual losses, class sensitivity and
the feature layers used.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .evaluate import ConfusionCounts, balanced_accuracy
from .models import Generator, GeneratorConfig, SubjectClassifier
from .store import FeatureSet, stratified_folds

LOG_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when a loss becomes NaN/Inf during optimization."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def weighted_ce_loss(probs, labels, weights=(1.0, 10.0)) -> torch.Tensor:
    """Class-weighted cross-entropy on probabilities: -w_k * log p_k.

    Accepts a single (K,) simplex vector or an (N, K) batch; batches are
    averaged. Probabilities are floored at 1e-12 before the log.
    """
    probs = torch.as_tensor(probs)
    single = probs.ndim == 1
    if single:
        probs = probs.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    w = torch.as_tensor(weights, dtype=probs.dtype)
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    loss = -w[labels] * torch.log(picked.clamp_min(LOG_FLOOR))
    return loss.mean()


def semantic_loss(probs, labels) -> torch.Tensor:
    """Unweighted cross-entropy on probabilities."""
    return weighted_ce_loss(probs, labels, weights=(1.0, 1.0))


def _flat_log_softmax(features: torch.Tensor) -> torch.Tensor:
    """Per-sample softmax over the flattened feature array, in log space."""
    return torch.log_softmax(features.reshape(features.shape[0], -1), dim=1)


def style_loss(features: torch.Tensor, template_features: torch.Tensor) -> torch.Tensor:
    """KL divergence between flattened-softmax feature distributions.

    KL(P_features || P_template), averaged over the batch. The template may
    be a single feature array broadcast across the batch or one per sample.
    """
    if features.shape[1:] != template_features.shape[1:]:
        raise ValueError(
            f"feature shape {tuple(features.shape)} does not match template "
            f"{tuple(template_features.shape)}"
        )
    log_p = _flat_log_softmax(features)
    log_q = _flat_log_softmax(template_features)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)
    return kl.mean()


def content_loss(features_a: torch.Tensor, features_b: torch.Tensor) -> torch.Tensor:
    """Mean squared element-wise difference between two feature taps."""
    if features_a.shape != features_b.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(features_a.shape)} vs {tuple(features_b.shape)}"
        )
    return torch.mean((features_a - features_b) ** 2)


@dataclass
class LossBreakdown:
    style: float = 0.0
    cont: float = 0.0
    sem: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Class templates
# ---------------------------------------------------------------------------

POOLED_TEMPLATE = "pooled"


@dataclass
class ClassTemplate:
    """Input-space class mean and its feature taps under the source classifier."""

    class_id: object  # 0, 1 or POOLED_TEMPLATE
    input_template: torch.Tensor          # (C, H, W)
    feature_templates: dict               # layer -> (1, ...) tensor


def _extract_template_features(model: SubjectClassifier, input_template: torch.Tensor,
                               layers) -> dict:
    model.eval()
    with torch.no_grad():
        _, feats = model(input_template.unsqueeze(0), return_features=True)
    return {layer: feats[layer] for layer in layers}


def compute_class_templates(features: FeatureSet, source_classifier: SubjectClassifier,
                            layers=(1,), mode: str = "input_mean") -> dict:
    """Per-class templates {0: ..., 1: ...} plus the pooled all-class template.

    mode "input_mean" averages inputs then extracts features; "feature_mean"
    averages the per-sample features instead.
    """
    if mode not in ("input_mean", "feature_mean"):
        raise ValueError(f"unknown template mode: {mode!r}")
    values = torch.as_tensor(features.values, dtype=torch.float32)
    labels = np.asarray(features.labels)
    templates = {}
    groups = {0: labels == 0, 1: labels == 1, POOLED_TEMPLATE: np.ones(len(labels), bool)}
    for class_id, mask in groups.items():
        if not mask.any():
            raise ValueError(f"class {class_id} has no samples to average")
        input_template = values[np.flatnonzero(mask)].mean(dim=0)
        if mode == "input_mean":
            feats = _extract_template_features(source_classifier, input_template, layers)
        else:
            source_classifier.eval()
            with torch.no_grad():
                _, all_feats = source_classifier(values[np.flatnonzero(mask)],
                                                 return_features=True)
            feats = {layer: all_feats[layer].mean(dim=0, keepdim=True) for layer in layers}
        templates[class_id] = ClassTemplate(class_id, input_template, feats)
    return templates


# ---------------------------------------------------------------------------
# Classifier pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    class_weights: tuple = (1.0, 10.0)
    val_folds: int = 5  # first stratified fold = 1/val_folds validation split
    # Gaussian training noise in per-pixel standardized units; regularizes
    # the small CNN toward margin-respecting boundaries on scarce data
    augment_sigma: float = 0.0
    seed: int = 0


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _balanced_accuracy_of(model: SubjectClassifier, values: torch.Tensor,
                          labels: np.ndarray) -> float:
    model.eval()
    with torch.no_grad():
        preds = model(values).argmax(dim=1).numpy()
    return balanced_accuracy(ConfusionCounts.from_predictions(labels, preds))


def pretrain_classifier(features: FeatureSet, model: SubjectClassifier,
                        config: PretrainConfig = PretrainConfig()):
    """Train a subject classifier; returns (model, per-epoch metrics).

    The model is left at the checkpoint with the best validation balanced
    accuracy. Training aborts on NaN loss.
    """
    labels = np.asarray(features.labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("pretraining requires both classes")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    k = min(config.val_folds, int(np.bincount(labels, minlength=2).min()))
    if k < 2:
        raise ValueError("pretraining needs at least 2 samples per class")
    train_idx, val_idx = stratified_folds(labels, k=k, seed=config.seed)[0]
    values = torch.as_tensor(features.values, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    model.set_input_stats(values[train_idx])

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best_state, best_acc, best_epoch = None, -1.0, -1
    metrics = []
    for epoch in range(config.epochs):
        model.train()
        epoch_loss, n_batches = 0.0, 0
        for batch in _iter_batches(len(train_idx), config.batch_size, rng):
            idx = train_idx[batch]
            x = values[idx]
            if config.augment_sigma > 0:
                x = x + config.augment_sigma * model.input_std * torch.randn_like(x)
            logits = model(x)
            probs = torch.softmax(logits, dim=1)
            loss = weighted_ce_loss(probs, y[idx], config.class_weights)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        val_acc = _balanced_accuracy_of(model, values[val_idx], labels[val_idx])
        metrics.append({"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches),
                        "val_balanced_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, metrics


# ---------------------------------------------------------------------------
# Generator training
# ---------------------------------------------------------------------------

VARIANTS = {
    "full": "CSSSTN",
    "no-cont": "CSSSTN w/o L_cont",
    "no-style": "CSSSTN w/o L_style",
    "no-sem": "CSSSTN w/o L_sem",
    "no-class": "CSSSTN w/o class",
    "layer2": "CSSSTN-A",
    "all-layers": "CSSSTN-B",
}


@dataclass(frozen=True)
class TransferConfig:
    use_style: bool = True
    use_content: bool = True
    use_semantic: bool = True
    class_sensitive: bool = True
    feature_layers: tuple = (1,)
    style_weight: float = 1.0
    content_weight: float = 1.0
    semantic_weight: float = 1.0
    template_mode: str = "input_mean"
    learning_rate: float = 2e-4
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    # fraction of the target training data held out to pick the best epoch;
    # the untrained generator is the first candidate, so a training run that
    # only hurts the held-out score falls back to the identity initialization
    val_fraction: float = 0.2
    # held-out scoring happens every eval_every epochs; a sparse checkpoint
    # grid keeps the max-selection bias of a small validation slice in check
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.use_style or self.use_content or self.use_semantic):
            raise ValueError("at least one loss must be enabled")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in [0, 0.5)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if min(self.style_weight, self.content_weight, self.semantic_weight) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.feature_layers or any(l not in (1, 2, 3) for l in self.feature_layers):
            raise ValueError("feature_layers must be a non-empty subset of {1, 2, 3}")

    def with_variant(self, name: str) -> "TransferConfig":
        """Apply one of the named ablation variants to this config."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        changes = {
            "full": {},
            "no-cont": {"use_content": False},
            "no-style": {"use_style": False},
            "no-sem": {"use_semantic": False},
            "no-class": {"class_sensitive": False},
            "layer2": {"feature_layers": (2,)},
            "all-layers": {"feature_layers": (1, 2, 3)},
        }[name]
        from dataclasses import replace
        return replace(self, **changes)


def oversample_features(features: FeatureSet, seed: int = 0) -> FeatureSet:
    """Duplicate target trials (with replacement) until the classes are 1:1."""
    labels = np.asarray(features.labels)
    target_idx = np.flatnonzero(labels == 1)
    nontarget_idx = np.flatnonzero(labels == 0)
    if len(target_idx) == 0 or len(nontarget_idx) == 0:
        raise ValueError("oversampling requires both classes to be present")
    deficit = len(nontarget_idx) - len(target_idx)
    if deficit <= 0:
        return features
    rng = np.random.default_rng(seed)
    extra = rng.choice(target_idx, size=deficit, replace=True)
    indices = np.concatenate([np.arange(len(labels)), extra])
    order = np.empty(len(indices), dtype=np.int64)
    ranks = features.acquisition_order[indices]
    order[np.lexsort((np.arange(len(indices)), ranks))] = np.arange(len(indices))
    return FeatureSet(values=features.values[indices], labels=labels[indices],
                      subject_id=features.subject_id, acquisition_order=order)


def _precompute_features(model: SubjectClassifier, values: torch.Tensor,
                         layers, batch_size: int = 128) -> dict:
    model.eval()
    out = {layer: [] for layer in layers}
    with torch.no_grad():
        for start in range(0, len(values), batch_size):
            _, feats = model(values[start:start + batch_size], return_features=True)
            for layer in layers:
                out[layer].append(feats[layer])
    return {layer: torch.cat(chunks) for layer, chunks in out.items()}


def train_generator(target_features: FeatureSet, target_classifier: SubjectClassifier,
                    source_classifier: SubjectClassifier, templates: dict,
                    config: TransferConfig = TransferConfig(),
                    generator: Generator | None = None,
                    template_recorder: list | None = None):
    """Fit the generator G on a target subject's features.

    ``templates`` comes from :func:`compute_class_templates` on the source
    subject. Both classifiers stay frozen. When ``template_recorder`` is
    given, a (sample_label, template_class_id) pair is appended for every
    training sample consumed, exposing the class-sensitivity decision.

    When ``config.val_fraction`` > 0 and both classes are populous enough, a
    stratified slice of the target data is held out; the generator is left
    at the epoch whose held-out ensemble score is highest. The score is the
    probability-weighted balanced accuracy of the soft vote (mean ensemble
    probability assigned to the true class, averaged per class) - a smooth
    surrogate that is far less noisy than hard balanced accuracy on a small
    slice. The untrained initial state counts as epoch -1, so training can
    never make the selected model worse than identity on the held-out
    slice. Without a validation slice the lowest training loss decides.

    Returns (generator, per-epoch LossBreakdown history).
    """
    layers = tuple(config.feature_layers)
    for layer in layers:
        for class_id in (0, 1, POOLED_TEMPLATE):
            if layer not in templates[class_id].feature_templates:
                raise ValueError(f"templates lack features for layer {layer}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    raw_labels = np.asarray(target_features.labels)
    k = int(round(1 / config.val_fraction)) if config.val_fraction > 0 else 0
    k = min(k, int(np.bincount(raw_labels, minlength=2).min()))
    val_set = None
    train_part = target_features
    if k >= 2:
        train_idx, val_idx = stratified_folds(raw_labels, k=k, seed=config.seed)[0]
        train_part = target_features.take(train_idx)
        val_set = oversample_features(target_features.take(val_idx),
                                      seed=config.seed)

    balanced = oversample_features(train_part, seed=config.seed)
    values = torch.as_tensor(balanced.values, dtype=torch.float32)
    labels = np.asarray(balanced.labels)
    y = torch.as_tensor(labels, dtype=torch.long)

    if generator is None:
        generator = Generator(GeneratorConfig(in_channels=values.shape[1]))
    for classifier in (target_classifier, source_classifier):
        classifier.eval()
        for p in classifier.parameters():
            p.requires_grad_(False)

    target_taps = _precompute_features(target_classifier, values, layers)
    # per-class template feature stack: row k = template of class k
    template_stack = {
        layer: torch.cat([templates[0].feature_templates[layer],
                          templates[1].feature_templates[layer]])
        for layer in layers
    }
    pooled = {layer: templates[POOLED_TEMPLATE].feature_templates[layer]
              for layer in layers}

    def batch_total(gen_feats, logits, y_batch, taps, idx):
        total = torch.zeros(())
        if config.use_style:
            sl = torch.zeros(())
            for layer in layers:
                if config.class_sensitive:
                    ref = template_stack[layer][y_batch]
                else:
                    ref = pooled[layer].expand(len(y_batch), *pooled[layer].shape[1:])
                sl = sl + style_loss(gen_feats[layer], ref)
            total = total + config.style_weight * sl
        if config.use_content:
            cl = torch.zeros(())
            for layer in layers:
                cl = cl + content_loss(gen_feats[layer], taps[layer][idx])
            total = total + config.content_weight * cl
        if config.use_semantic:
            probs = torch.softmax(logits, dim=1)
            total = total + config.semantic_weight * semantic_loss(probs, y_batch)
        return total

    if val_set is not None:
        val_values = torch.as_tensor(val_set.values, dtype=torch.float32)
        val_labels = np.asarray(val_set.labels)
        val_y = torch.as_tensor(val_labels, dtype=torch.long)
        val_taps = _precompute_features(target_classifier, val_values, layers)
        val_idx_all = torch.arange(len(val_values))
        with torch.no_grad():
            val_probs_t = torch.softmax(target_classifier(val_values), dim=1).numpy()

        def heldout_key() -> tuple:
            # sort key to minimize: (-soft balanced score, total loss)
            generator.eval()
            with torch.no_grad():
                generated = generator(val_values)
                logits, gen_feats = source_classifier(generated, return_features=True)
                probs_s = torch.softmax(logits, dim=1).numpy()
                total = batch_total(gen_feats, logits, val_y, val_taps,
                                    val_idx_all).item()
            vote = (val_probs_t + probs_s) / 2
            true_prob = vote[np.arange(len(val_labels)), val_labels]
            score = (true_prob[val_labels == 0].mean()
                     + true_prob[val_labels == 1].mean()) / 2
            return (-float(score), total)

    optimizer = torch.optim.Adam(generator.parameters(), lr=config.learning_rate)
    history: list[LossBreakdown] = []
    if val_set is not None:
        best_key = heldout_key()
        best_epoch = -1
        best_state = copy.deepcopy(generator.state_dict())
    else:
        best_key, best_epoch, best_state = (float("inf"),), -1, None
    for epoch in range(config.epochs):
        generator.train()
        sums = LossBreakdown()
        n_batches = 0
        for batch in _iter_batches(len(values), config.batch_size, rng):
            idx = torch.as_tensor(batch, dtype=torch.long)
            generated = generator(values[idx])
            logits, gen_feats = source_classifier(generated, return_features=True)

            total = torch.zeros(())
            parts = LossBreakdown()
            if config.use_style:
                sl = torch.zeros(())
                for layer in layers:
                    if config.class_sensitive:
                        ref = template_stack[layer][y[idx]]
                    else:
                        ref = pooled[layer].expand(len(idx), *pooled[layer].shape[1:])
                    sl = sl + style_loss(gen_feats[layer], ref)
                parts.style = sl.item()
                total = total + config.style_weight * sl
            if config.use_content:
                cl = torch.zeros(())
                for layer in layers:
                    cl = cl + content_loss(gen_feats[layer], target_taps[layer][idx])
                parts.cont = cl.item()
                total = total + config.content_weight * cl
            if config.use_semantic:
                probs = torch.softmax(logits, dim=1)
                sem = semantic_loss(probs, y[idx])
                parts.sem = sem.item()
                total = total + config.semantic_weight * sem
            if template_recorder is not None and config.use_style:
                used = y[idx].tolist() if config.class_sensitive else [POOLED_TEMPLATE] * len(idx)
                template_recorder.extend(zip(labels[batch].tolist(), used))

            if not math.isfinite(total.item()):
                raise TrainingDivergedError(f"non-finite transfer loss at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            parts.total = total.item()
            sums.style += parts.style
            sums.cont += parts.cont
            sums.sem += parts.sem
            sums.total += parts.total
            n_batches += 1
        epoch_mean = LossBreakdown(
            style=sums.style / n_batches, cont=sums.cont / n_batches,
            sem=sums.sem / n_batches, total=sums.total / n_batches)
        history.append(epoch_mean)
        at_checkpoint = (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1
        if val_set is not None and not at_checkpoint:
            continue
        key = heldout_key() if val_set is not None else (epoch_mean.total,)
        if key < best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(generator.state_dict())
        elif epoch - best_epoch >= config.patience:
            break
    if best_state is not None:
        generator.load_state_dict(best_state)
    generator.eval()
    return generator, history
