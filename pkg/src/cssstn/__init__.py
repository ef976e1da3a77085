"""Class-sensitive subject-to-subject style transfer for RSVP-EEG decoding."""

from .store import (EpochSet, FeatureSet, SplitSpec, downsample_nontargets,
                    load_epoch_store, load_feature_store, oversample_targets,
                    save_epoch_store, save_feature_store, stratified_folds, subset)
from .evaluate import (ConfusionCounts, TransferReport, balanced_accuracy,
                       evaluate_transfer, select_golden_subject, soft_vote)
from .training import (LossBreakdown, TransferConfig, PretrainConfig,
                       compute_class_templates, content_loss, pretrain_classifier,
                       semantic_loss, style_loss, train_generator, weighted_ce_loss)
from .models import (ClassifierConfig, Generator, GeneratorConfig, SelfAttention,
                     SubjectClassifier, classifier_forward, generator_forward,
                     load_checkpoint, save_checkpoint)
from .synthdata import SynthSpec, generate_subject, matched_filter_oracle

__version__ = "0.1.0"
