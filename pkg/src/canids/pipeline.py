"""End-to-end fitting and evaluation of the two-stage detector."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import BASE_LABELS, NORMAL, FrameTable, LabelMap, fit_scaler, transform
from .detector import (
    ANOMALY_LABEL,
    STAGE1_TRAIN,
    STAGE2_TRAIN,
    MultiStageIds,
    build_stage1,
    build_stage2,
    calibrate_threshold,
    detect_batch,
    reconstruction_errors,
    train_stage1,
    train_stage2,
)
from .metrics import ConfusionMatrix, compute, macro_report
from .nn import TrainConfig
from .sampling import SamplingConfig, sample_and_balance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    train_fraction: float = 0.7
    validation_fraction: float = 0.1
    holdout: tuple[str, ...] = ()
    stage1: TrainConfig = STAGE1_TRAIN
    stage2: TrainConfig = STAGE2_TRAIN
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(fraction=0.3))
    stage2_activation: str = "relu"
    stage2_max_train: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdout"] = list(self.holdout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["holdout"] = tuple(d.get("holdout", ()))
        d["stage1"] = TrainConfig.from_dict(d["stage1"]) if "stage1" in d else STAGE1_TRAIN
        d["stage2"] = TrainConfig.from_dict(d["stage2"]) if "stage2" in d else STAGE2_TRAIN
        if "sampling" in d:
            d["sampling"] = SamplingConfig(**d["sampling"])
        return cls(**d)


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def split_indices(labels: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified shuffled split; returns sorted (train, test) index arrays."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, test = [], []
    for cls in sorted(set(labels.tolist())):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        cut = int(round(train_fraction * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_table(table: FrameTable, train_fraction: float, seed: int) -> tuple[FrameTable, FrameTable]:
    tr, te = split_indices(table.labels, train_fraction, seed)
    return table.subset(tr), table.subset(te)


def label_map_for(present: set[str], holdout: tuple[str, ...] = ()) -> LabelMap:
    """Base labels first in their canonical order, then any extra labels sorted."""
    names = [n for n in BASE_LABELS if n in present and n not in holdout]
    names += sorted(n for n in present if n not in BASE_LABELS and n not in holdout)
    return LabelMap(names)


@dataclass
class FitReport:
    config: dict
    labels: list[str]
    stage1_params: int
    stage2_params: int
    stage1_history: dict
    stage2_history: dict
    sampling: dict
    threshold: dict

    def to_json(self) -> dict:
        return asdict(self)


def fit_detector(train_table: FrameTable, config: PipelineConfig = PipelineConfig()) -> tuple[MultiStageIds, FitReport]:
    """Train both stages on a labelled training split.

    Held-out classes are dropped entirely. The scaler is fitted on what
    remains, stage 1 sees every remaining frame, and stage 2 sees the normal
    frames of the cluster-sampled, SMOTE-balanced set.
    """
    if not train_table.labelled:
        raise ValueError("training data must be labelled")
    table = train_table.where_not_label(*config.holdout) if config.holdout else train_table
    labels = label_map_for(set(table.labels.tolist()))
    if NORMAL not in labels:
        raise ValueError("training data contains no normal frames")
    s_split, s_model1, s_model2, s_train1, s_train2, s_sample, s_val2 = _seeds(config.seed, 7)

    scaler = fit_scaler(table.features)
    x = transform(scaler, table.features)
    y = labels.encode(table.labels)

    fit_idx, val_idx = split_indices(table.labels, 1.0 - config.validation_fraction, s_split)
    stage1 = build_stage1(len(labels), seed=s_model1)
    h1 = train_stage1(stage1, x[fit_idx], y[fit_idx], replace(config.stage1, seed=s_train1), (x[val_idx], y[val_idx]))
    log.info("stage 1 trained for %d epochs", h1.stopped_epoch)

    xb, yb, summary = sample_and_balance(x, table.labels, replace(config.sampling, seed=s_sample))
    normal = xb[yb == NORMAL]
    rng = np.random.default_rng(s_val2)
    normal = normal[rng.permutation(len(normal))]
    if config.stage2_max_train is not None:
        normal = normal[: config.stage2_max_train]
    n_val = int(round(config.validation_fraction * len(normal)))
    stage2 = build_stage2(seed=s_model2, activation=config.stage2_activation)
    h2 = train_stage2(stage2, normal[n_val:], None, replace(config.stage2, seed=s_train2), normal[:n_val])
    log.info("stage 2 trained for %d epochs on %d frames", h2.stopped_epoch, len(normal) - n_val)

    threshold = calibrate_threshold(reconstruction_errors(stage2, normal[n_val:]))
    ids = MultiStageIds(scaler, labels, stage1, stage2, threshold)
    summary["stage2_train_frames"] = len(normal) - n_val
    report = FitReport(
        config.to_dict(),
        list(labels.names),
        stage1.count_params(),
        stage2.count_params(),
        h1.to_dict(),
        h2.to_dict(),
        summary,
        {k: v for k, v in threshold.to_json().items() if k != "calibrated_at"},
    )
    return ids, report


def stage1_confusion(ids: MultiStageIds, table: FrameTable) -> ConfusionMatrix:
    """Classifier-only confusion matrix over frames whose class the classifier knows."""
    known = table.where_label(*ids.labels.names)
    probs = ids.stage1.predict(transform(ids.scaler, known.features))
    return ConfusionMatrix.from_labels(ids.labels.names, known.labels, ids.labels.decode(probs.argmax(axis=1)))


def evaluate(ids: MultiStageIds, table: FrameTable) -> dict:
    """Metrics for stage 1 alone, stage 2 alone and the full cascade.

    Stage 2 is scored on every frame as a binary normal-vs-attack detector,
    the way an anomaly gate is evaluated in isolation.
    """
    if not table.labelled:
        raise ValueError("evaluation needs labelled frames")
    result = detect_batch(ids, table.features)
    truth = table.labels
    pipeline_labels = list(ids.labels.names) + [ANOMALY_LABEL]
    pipeline_labels += sorted(set(truth.tolist()) - set(pipeline_labels))
    pipeline_cm = ConfusionMatrix.from_labels(pipeline_labels, truth, result.predicted)

    errors = reconstruction_errors(ids.stage2, transform(ids.scaler, table.features))
    flagged = errors > ids.threshold.threshold
    is_attack = truth != NORMAL
    binary = ConfusionMatrix.from_labels(
        [NORMAL, ANOMALY_LABEL],
        np.where(is_attack, ANOMALY_LABEL, NORMAL),
        np.where(flagged, ANOMALY_LABEL, NORMAL),
    )
    per_attack = {}
    for cls in sorted(set(truth[is_attack].tolist())):
        mask = truth == cls
        per_attack[cls] = {"frames": int(mask.sum()), "dr": float(flagged[mask].mean())}

    s1_cm = stage1_confusion(ids, table)
    s1_report = macro_report(s1_cm)
    nonnormal_pred = result.predicted != NORMAL
    pipeline_dr = float(nonnormal_pred[is_attack].mean()) if is_attack.any() else 0.0
    return {
        "frames": len(table),
        "stage1": s1_report,
        "stage2": {
            "threshold": ids.threshold.threshold,
            "binary": compute(binary, ANOMALY_LABEL).to_json(),
            "matrix": binary.matrix.tolist(),
            "per_attack": per_attack,
            "far": float(flagged[~is_attack].mean()) if (~is_attack).any() else 0.0,
        },
        "pipeline": {
            "report": macro_report(pipeline_cm),
            "attack_detection_rate": pipeline_dr,
            "false_alarm_rate": float(nonnormal_pred[~is_attack].mean()) if (~is_attack).any() else 0.0,
            "stage2_consulted": int((~np.isnan(result.errors)).sum()),
        },
    }
