"""Subcommand-driven experiment runner.

Every subcommand writes a RunManifest into its output directory (opened
before the work starts, finalized after), takes a per-directory file lock
so concurrent runs cannot interleave writes, and reports failures as a
single machine-parseable line on stderr with a non-zero exit code.

The ``run`` subcommand executes the whole synthetic pipeline from one JSON
config: synth -> preprocess -> pretrain -> templates -> transfer ->
evaluate -> report, caching stage artifacts under a key derived from the
canonicalized config section plus the input checksums.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import click
import numpy as np
import torch
from filelock import FileLock

from . import __version__
from .evaluate import (TransferReport, balanced_accuracy, ConfusionCounts,
                       evaluate_transfer, save_reports, select_golden_subject)
from .models import load_checkpoint, save_checkpoint
from .pipeline import (ExperimentConfig, pretrain_subject,
                       run_transfer_experiment, synth_features)
from .preprocess import PreprocessConfig, preprocess_pipeline
from .store import (SplitSpec, load_epoch_store, load_feature_store,
                    save_epoch_store, save_feature_store, subset_features)
from .synthdata import SynthSpec, generate_subject
from .training import PretrainConfig, TransferConfig, VARIANTS


class StageError(RuntimeError):
    """A named pipeline stage failed; the stage name travels with the error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage={stage}: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Checksums, canonicalization, manifests
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for hashing configs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checksum_path(path) -> str:
    """SHA-256 over a file, or over all files of a directory in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Reproducibility record written alongside every run's outputs."""

    command: str
    config: dict
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    input_checksums: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    status: str = "running"

    def __post_init__(self):
        self.config_hash = hashlib.sha256(canonical_json(self.config).encode()).hexdigest()
        self.versions = {
            "cssstn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        }

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1))
        return path


class manifest_scope:
    """Lock the output directory and bracket the work with a RunManifest.

    Usage: ``with manifest_scope("synth", out, config, inputs) as m: ...``.
    The manifest is written once with status "running" before the body and
    finalized ("complete", wall-clock timing) after it.
    """

    def __init__(self, command: str, out_dir, config: dict,
                 inputs: dict | None = None, seeds: dict | None = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command=command, config=config,
                                    seeds=seeds or {})
        for name, path in (inputs or {}).items():
            self.manifest.input_checksums[name] = checksum_path(path)
        self.lock = FileLock(str(self.out_dir / ".lock"))

    def __enter__(self) -> RunManifest:
        self.lock.acquire(timeout=600)
        self.start = time.monotonic()
        self.manifest.write(self.out_dir)
        return self.manifest

    def __exit__(self, exc_type, exc, tb):
        self.manifest.timings["wall_seconds"] = time.monotonic() - self.start
        self.manifest.status = "complete" if exc_type is None else "failed"
        self.manifest.write(self.out_dir)
        self.lock.release()
        return False


def _fail(message: str) -> None:
    """Single-line machine-parseable error, then non-zero exit."""
    flat = " ".join(str(message).split())
    click.echo(f"error: {flat}", err=True)
    sys.exit(1)


def _apply_thread_env() -> None:
    threads = os.environ.get("CSSSTN_THREADS")
    if threads:
        torch.set_num_threads(int(threads))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@click.group()
def main():
    """CSSSTN experiment runner (synthetic RSVP-EEG transfer pipeline)."""
    _apply_thread_env()


def _command(func):
    """Wrap a command body so any exception becomes a one-line error."""
    import functools

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SystemExit:
            raise
        except Exception as exc:  # noqa: BLE001 - the CLI boundary
            _fail(f"{type(exc).__name__}: {exc}")
    return wrapper


def _parse_skills(text: str) -> tuple:
    return tuple(float(s) for s in text.split(","))


@main.command()
@click.option("--subjects", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--channels", default=8, show_default=True)
@click.option("--targets", default=60, show_default=True)
@click.option("--nontarget-ratio", default=10, show_default=True)
@click.option("--class-sep", default=5.0, show_default=True)
@click.option("--skills", default="1.0,0.3", show_default=True,
              help="comma-separated subject skill levels, cycled")
@click.option("--sampling-rate", default=250.0, show_default=True)
@_command
def synth(subjects, seed, out, channels, targets, nontarget_ratio, class_sep,
          skills, sampling_rate):
    """Generate synthetic subject epoch stores."""
    spec = SynthSpec(n_subjects=subjects, channels=channels, n_targets=targets,
                     nontarget_ratio=nontarget_ratio, class_sep=class_sep,
                     skills=_parse_skills(skills), sampling_rate=sampling_rate)
    config = dataclasses.asdict(spec)
    config["seed"] = seed
    with manifest_scope("synth", out, config, seeds={"seed": seed}) as manifest:
        for i in range(subjects):
            epochs = generate_subject(spec, i, seed)
            store = Path(out) / epochs.subject_id
            save_epoch_store(epochs, store)
            manifest.outputs.append(str(store))
    click.echo(f"wrote {subjects} epoch stores under {out}")


@main.command()
@click.option("--in", "in_store", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--target-hz", default=250.0, show_default=True)
@_command
def preprocess(in_store, out, target_hz):
    """Epoch store -> time-frequency feature store."""
    config = {"target_hz": target_hz, "in": str(in_store)}
    with manifest_scope("preprocess", out, config,
                        inputs={"epochs": in_store}) as manifest:
        epochs = load_epoch_store(in_store)
        features = preprocess_pipeline(epochs, PreprocessConfig(target_hz=target_hz))
        save_feature_store(features, out)
        manifest.outputs.append(str(out))
    click.echo(f"wrote feature store {out} shape {features.values.shape}")


@main.command()
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=40, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_command
def pretrain(features, out, epochs, seed):
    """Pretrain a subject classifier on one feature store."""
    config = {"epochs": epochs, "seed": seed, "features": str(features)}
    with manifest_scope("pretrain", out, config, inputs={"features": features},
                        seeds={"seed": seed}) as manifest:
        feats = load_feature_store(features)
        cfg = ExperimentConfig(seed=seed,
                               pretrain=PretrainConfig(epochs=epochs, seed=seed))
        model, metrics = pretrain_subject(feats, cfg)
        ckpt = Path(out) / "classifier"
        save_checkpoint(model, ckpt, seed=seed)
        (Path(out) / "metrics.json").write_text(json.dumps(metrics, indent=1))
        manifest.outputs.extend([str(ckpt), str(Path(out) / "metrics.json")])
    best = max(m["val_balanced_accuracy"] for m in metrics)
    click.echo(f"pretrained {feats.subject_id}: best val balanced accuracy {best:.3f}")


@main.command(name="select-golden")
@click.option("--features", "feature_dirs", multiple=True,
              type=click.Path(exists=True),
              help="feature stores, one per candidate subject")
@click.option("--table", type=click.Path(exists=True),
              help="precomputed JSON accuracy table {subject: [acc, ...]}")
@click.option("--out", type=click.Path(), default=None)
@click.option("--epochs", default=40, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_command
def select_golden(feature_dirs, table, out, epochs, seed):
    """Pick the source subject with the best averaged classifier accuracy.

    With --features, each candidate's classifier is pretrained and scored on
    every candidate's data; a subject's row is its classifier's accuracies
    across all subjects. With --table, the table is taken as given.
    """
    if table:
        accuracy_table = json.loads(Path(table).read_text())
    elif feature_dirs:
        sets = [load_feature_store(d) for d in feature_dirs]
        cfg = ExperimentConfig(seed=seed,
                               pretrain=PretrainConfig(epochs=epochs, seed=seed))
        accuracy_table = {}
        for fs in sets:
            model, _ = pretrain_subject(fs, cfg)
            model.eval()
            row = []
            for other in sets:
                with torch.no_grad():
                    preds = model(torch.as_tensor(other.values)).argmax(1).numpy()
                row.append(balanced_accuracy(
                    ConfusionCounts.from_predictions(other.labels, preds)))
            accuracy_table[fs.subject_id] = row
    else:
        raise ValueError("provide --features stores or a --table file")
    golden = select_golden_subject(accuracy_table)
    if out:
        config = {"epochs": epochs, "seed": seed,
                  "candidates": sorted(accuracy_table)}
        with manifest_scope("select-golden", out, config) as manifest:
            result = Path(out) / "golden.json"
            result.write_text(json.dumps(
                {"golden": golden, "table": accuracy_table}, indent=1))
            manifest.outputs.append(str(result))
    click.echo(golden)


def _experiment_config(seed, folds, pretrain_epochs, transfer_epochs, variant) -> ExperimentConfig:
    return ExperimentConfig(
        seed=seed, n_folds=folds, variant=variant,
        pretrain=PretrainConfig(epochs=pretrain_epochs, seed=seed),
        transfer=TransferConfig(epochs=transfer_epochs, patience=transfer_epochs,
                                batch_size=32, seed=seed),
    )


def _run_pair(target_dir, source_dir, out, variant, fraction, mode, seed, folds,
              pretrain_epochs, transfer_epochs, command: str) -> TransferReport:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    config = {"target": str(target_dir), "source": str(source_dir),
              "variant": variant, "fraction": fraction, "mode": mode,
              "seed": seed, "folds": folds, "pretrain_epochs": pretrain_epochs,
              "transfer_epochs": transfer_epochs}
    with manifest_scope(command, out, config,
                        inputs={"target": target_dir, "source": source_dir},
                        seeds={"seed": seed}) as manifest:
        target = load_feature_store(target_dir)
        source = load_feature_store(source_dir)
        if fraction < 1.0:
            target = subset_features(target, SplitSpec(mode=mode, fraction=fraction,
                                                       seed=seed))
        cfg = _experiment_config(seed, folds, pretrain_epochs, transfer_epochs, variant)
        report = run_transfer_experiment(target, source, cfg)
        csv_path, json_path = save_reports([report], out)
        manifest.outputs.extend([str(csv_path), str(json_path)])
    click.echo(f"{VARIANTS[variant]}: ensemble {report.mean:.3f} "
               f"baseline {report.baseline_mean:.3f}")
    return report


_pair_options = [
    click.option("--target", required=True, type=click.Path(exists=True)),
    click.option("--source", required=True, type=click.Path(exists=True)),
    click.option("--out", required=True, type=click.Path()),
    click.option("--fraction", default=1.0, show_default=True,
                 help="portion of target data to use"),
    click.option("--mode", default="earliest", show_default=True,
                 type=click.Choice(["earliest", "latest", "random"])),
    click.option("--seed", default=0, show_default=True),
    click.option("--folds", default=2, show_default=True),
    click.option("--pretrain-epochs", default=40, show_default=True),
    click.option("--transfer-epochs", default=25, show_default=True),
]


def _with_pair_options(func):
    for option in reversed(_pair_options):
        func = option(func)
    return func


@main.command()
@_with_pair_options
@click.option("--variant", default="full", show_default=True)
@_command
def transfer(target, source, out, fraction, mode, seed, folds, pretrain_epochs,
             transfer_epochs, variant):
    """Cross-validated style transfer from a target to a source subject."""
    _run_pair(target, source, out, variant, fraction, mode, seed, folds,
              pretrain_epochs, transfer_epochs, "transfer")


@main.command()
@_with_pair_options
@click.option("--variant", required=True,
              type=click.Choice(sorted(VARIANTS)))
@_command
def ablate(target, source, out, fraction, mode, seed, folds, pretrain_epochs,
           transfer_epochs, variant):
    """Run a single named ablation variant; the report carries its tag."""
    _run_pair(target, source, out, variant, fraction, mode, seed, folds,
              pretrain_epochs, transfer_epochs, "ablate")


@main.command()
@click.option("--generator", required=True, type=click.Path(exists=True))
@click.option("--target-classifier", required=True, type=click.Path(exists=True))
@click.option("--source-classifier", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@_command
def evaluate(generator, target_classifier, source_classifier, features, out):
    """Score the soft-voting ensemble of saved models on a feature store."""
    feats = load_feature_store(features)
    scores = evaluate_transfer(load_checkpoint(generator),
                               load_checkpoint(target_classifier),
                               load_checkpoint(source_classifier), feats)
    summary = {k: scores[k] for k in ("ensemble", "target_only", "source_on_generated")}
    if out:
        config = {"generator": str(generator), "features": str(features)}
        with manifest_scope("evaluate", out, config,
                            inputs={"features": features}) as manifest:
            path = Path(out) / "scores.json"
            path.write_text(json.dumps(summary, indent=1))
            manifest.outputs.append(str(path))
    click.echo(json.dumps(summary))


@main.command()
@click.option("--in", "run_dirs", multiple=True, required=True,
              type=click.Path(exists=True),
              help="run directories containing report.json")
@click.option("--out", required=True, type=click.Path())
@click.option("--golden", multiple=True, help="subject ids to mark golden")
@_command
def report(run_dirs, out, golden):
    """Aggregate per-run reports into one CSV/JSON pair."""
    reports = []
    for d in run_dirs:
        payload = json.loads((Path(d) / "report.json").read_text())
        reports.extend(TransferReport.from_dict(r) for r in payload)
    config = {"inputs": sorted(str(d) for d in run_dirs), "golden": sorted(golden)}
    with manifest_scope("report", out, config) as manifest:
        csv_path, json_path = save_reports(reports, out, golden_subjects=set(golden))
        manifest.outputs.extend([str(csv_path), str(json_path)])
    click.echo(f"aggregated {len(reports)} reports into {out}")


@main.command()
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--components", default=2, show_default=True)
@_command
def embed(features, out, components):
    """Export a principal-component projection of the features as CSV.

    Rows: trial index, label, then the first N principal scores. Useful for
    eyeballing class separation in feature space.
    """
    feats = load_feature_store(features)
    config = {"components": components, "features": str(features)}
    with manifest_scope("embed", out, config,
                        inputs={"features": features}) as manifest:
        flat = feats.values.reshape(feats.n_trials, -1).astype(np.float64)
        flat -= flat.mean(axis=0)
        _, _, vt = np.linalg.svd(flat, full_matrices=False)
        scores = flat @ vt[:components].T
        path = Path(out) / "embedding.csv"
        with path.open("w") as fh:
            fh.write("trial,label," + ",".join(f"pc{i+1}" for i in range(components)) + "\n")
            for i in range(feats.n_trials):
                row = ",".join(f"{v:.6f}" for v in scores[i])
                fh.write(f"{i},{feats.labels[i]},{row}\n")
        manifest.outputs.append(str(path))
    click.echo(f"wrote {path}")


# ---------------------------------------------------------------------------
# End-to-end config runner with stage caching
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "seed": None,
    "synth": {"subjects", "channels", "targets", "nontarget_ratio",
              "class_sep", "noise_sigma", "skills", "sampling_rate"},
    "preprocess": {"target_hz"},
    "experiment": {"classifier_widths", "generator_widths", "pretrain_epochs",
                   "transfer_epochs", "variant", "n_folds", "fraction", "mode",
                   "use_style", "use_content", "use_semantic"},
    "pair": {"target", "source"},
}


def _validate_config(config: dict) -> None:
    """Fail-closed: any key outside the schema is rejected."""
    unknown = set(config) - set(_CONFIG_SCHEMA)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in _CONFIG_SCHEMA.items():
        if allowed is None or section not in config:
            continue
        extra = set(config[section]) - allowed
        if extra:
            raise ValueError(f"unknown keys in config section {section!r}: {sorted(extra)}")


def _cache_dir(root: Path, stage: str, section: dict, input_checksums: list) -> Path:
    key = hashlib.sha256(
        (canonical_json(section) + "".join(input_checksums)).encode()).hexdigest()
    return root / stage / key


def _cached(cache: Path, build) -> Path:
    """Run ``build(dir)`` unless the cache directory is already complete."""
    done = cache / ".done"
    if done.is_file():
        return cache
    cache.mkdir(parents=True, exist_ok=True)
    build(cache)
    done.write_text("ok")
    return cache


def end_to_end(config_file, out_dir) -> TransferReport:
    """Run the full pipeline described by one JSON config document."""
    config = json.loads(Path(config_file).read_text())
    _validate_config(config)
    seed = int(config.get("seed", 0))
    out_dir = Path(out_dir)
    cache_root = Path(os.environ.get("CSSSTN_CACHE", out_dir / "cache"))

    synth_cfg = dict(config.get("synth", {}))
    spec = SynthSpec(
        n_subjects=synth_cfg.get("subjects", 2),
        channels=synth_cfg.get("channels", 8),
        n_targets=synth_cfg.get("targets", 60),
        nontarget_ratio=synth_cfg.get("nontarget_ratio", 10),
        class_sep=synth_cfg.get("class_sep", 5.0),
        noise_sigma=synth_cfg.get("noise_sigma", 1.0),
        skills=tuple(synth_cfg.get("skills", (1.0, 0.3))),
        sampling_rate=synth_cfg.get("sampling_rate", 250.0),
    )
    pre_cfg = dict(config.get("preprocess", {}))
    exp_cfg = dict(config.get("experiment", {}))
    pair = dict(config.get("pair", {"target": 1, "source": 0}))

    def stage(name, func, *args):
        try:
            return func(*args)
        except Exception as exc:
            raise StageError(name, exc) from exc

    # synth + preprocess per subject, cached on (config section, seed)
    def features_for(index: int) -> Path:
        section = {"synth": dataclasses.asdict(spec), "preprocess": pre_cfg,
                   "seed": seed, "subject": index}

        def build(path: Path):
            epochs = stage("synth", generate_subject, spec, index, seed)
            target_hz = pre_cfg.get("target_hz", spec.sampling_rate)
            feats = stage("preprocess", preprocess_pipeline, epochs,
                          PreprocessConfig(target_hz=target_hz))
            save_feature_store(feats, path / "features")
        return _cached(_cache_dir(cache_root, "features", section, []), build) / "features"

    target_store = features_for(int(pair.get("target", 1)))
    source_store = features_for(int(pair.get("source", 0)))

    with manifest_scope("run", out_dir, config, seeds={"seed": seed},
                        inputs={"target": target_store,
                                "source": source_store}) as manifest:
        target = load_feature_store(target_store)
        source = load_feature_store(source_store)
        fraction = float(exp_cfg.get("fraction", 1.0))
        if fraction < 1.0:
            target = subset_features(target, SplitSpec(
                mode=exp_cfg.get("mode", "earliest"), fraction=fraction, seed=seed))

        transfer_cfg = TransferConfig(
            epochs=exp_cfg.get("transfer_epochs", 25),
            patience=exp_cfg.get("transfer_epochs", 25),
            batch_size=32, seed=seed,
            use_style=exp_cfg.get("use_style", True),
            use_content=exp_cfg.get("use_content", True),
            use_semantic=exp_cfg.get("use_semantic", True),
        )
        cfg = ExperimentConfig(
            classifier_widths=tuple(exp_cfg.get("classifier_widths", (8, 16, 32))),
            generator_widths=tuple(exp_cfg.get("generator_widths", (16, 32, 64))),
            pretrain=PretrainConfig(epochs=exp_cfg.get("pretrain_epochs", 40), seed=seed),
            transfer=transfer_cfg,
            variant=exp_cfg.get("variant", "full"),
            n_folds=exp_cfg.get("n_folds", 2),
            seed=seed,
        )
        report = stage("transfer", run_transfer_experiment, target, source, cfg)
        csv_path, json_path = stage("report", save_reports, [report], out_dir)
        manifest.outputs.extend([str(csv_path), str(json_path)])
    return report


@main.command()
@click.argument("config_file", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_command
def run(config_file, out):
    """Full pipeline from a JSON config; stages are cached by config hash."""
    result = end_to_end(config_file, out)
    click.echo(f"{VARIANTS[result.variant]}: ensemble {result.mean:.3f} "
               f"baseline {result.baseline_mean:.3f}")


if __name__ == "__main__":
    main()
