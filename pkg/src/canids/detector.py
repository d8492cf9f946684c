"""Two-stage detector: a dense softmax classifier for known attack classes and an
LSTM autoencoder that flags anything the classifier lets through as normal but
cannot be reconstructed within a calibrated error threshold.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .codec import NORMAL, NUM_FEATURES, CanFrame, LabelMap, ScalerParams, to_features, transform
from .errors import (
    CorruptPayload,
    DuplicateLabel,
    EmptyInput,
    IoFailure,
    NonNormalSample,
    NotReady,
    VersionMismatch,
)
from .nn import (
    Dense,
    Dropout,
    EarlyStopping,
    Lstm,
    RepeatVector,
    SequentialModel,
    TrainConfig,
    TrainReport,
    deserialize,
    serialize,
    train,
)

STAGE1_HIDDEN = 16
STAGE2_DROPOUT = 0.2
STAGE1_TRAIN = TrainConfig(batch_size=256, max_epochs=10, shuffle=True, early_stopping=EarlyStopping(patience=3))
STAGE2_TRAIN = TrainConfig(batch_size=64, max_epochs=100, shuffle=True, early_stopping=EarlyStopping(patience=3))

BUNDLE_MAGIC = b"CANIDSBD"
BUNDLE_VERSION = 1
_BUNDLE_PREFIX = struct.Struct("<8sHHI")


def build_stage1(num_classes: int, seed: int = 0) -> SequentialModel:
    """9 -> 16 ReLU -> 16 ReLU -> softmax over ``num_classes``."""
    if num_classes < 2:
        raise ValueError(f"the classifier needs at least 2 classes, got {num_classes}")
    return SequentialModel(
        [Dense(STAGE1_HIDDEN, "relu"), Dense(STAGE1_HIDDEN, "relu"), Dense(num_classes, "softmax")],
        "categorical_crossentropy",
        (NUM_FEATURES,),
        seed=seed,
    )


def build_stage2(seed: int = 0, activation: str = "relu") -> SequentialModel:
    """LSTM autoencoder over one time step of 9 features (128-64 | 64-128 -> 9)."""
    return SequentialModel(
        [
            Lstm(128, return_sequences=True, activation=activation),
            Dropout(STAGE2_DROPOUT),
            Lstm(64, return_sequences=False, activation=activation),
            Dropout(STAGE2_DROPOUT),
            RepeatVector(1),
            Lstm(64, return_sequences=True, activation=activation),
            Dropout(STAGE2_DROPOUT),
            Lstm(128, return_sequences=True, activation=activation),
            Dropout(STAGE2_DROPOUT),
            Dense(NUM_FEATURES, "linear"),
        ],
        "mse",
        (1, NUM_FEATURES),
        seed=seed,
    )


def as_sequences(x: np.ndarray) -> np.ndarray:
    """[N x 9] -> [N x 1 x 9]; every frame is its own length-1 sequence."""
    return np.asarray(x, dtype=np.float64).reshape(-1, 1, NUM_FEATURES)


def train_stage1(
    model: SequentialModel,
    features: np.ndarray,
    codes: np.ndarray,
    config: TrainConfig = STAGE1_TRAIN,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainReport:
    codes = np.asarray(codes, dtype=np.int64)
    if len(np.unique(codes)) < 2:
        raise ValueError("the classifier cannot be trained on a single class")
    return train(model, features, codes, config, validation)


def train_stage2(
    model: SequentialModel,
    features: np.ndarray,
    labels: np.ndarray | None = None,
    config: TrainConfig = STAGE2_TRAIN,
    validation: np.ndarray | None = None,
) -> TrainReport:
    """Fit the autoencoder to reproduce normal traffic only."""
    if labels is not None:
        bad = np.flatnonzero(np.asarray(labels) != NORMAL)
        if len(bad):
            raise NonNormalSample(f"{len(bad)} non-normal sample(s) in autoencoder training data (first at index {bad[0]})")
    x = as_sequences(features)
    val = None if validation is None or len(validation) == 0 else (as_sequences(validation), as_sequences(validation))
    return train(model, x, x, config, val)


def reconstruction_errors(model: SequentialModel, features: np.ndarray) -> np.ndarray:
    """Mean squared reconstruction error over the 9 features, one value per row."""
    x = as_sequences(features)
    if len(x) == 0:
        return np.zeros(0)
    out = model.predict(x)
    return ((out - x) ** 2).mean(axis=(1, 2))


def reconstruction_error(model: SequentialModel, sample: np.ndarray) -> float:
    return float(reconstruction_errors(model, np.asarray(sample).reshape(1, NUM_FEATURES))[0])


@dataclass(frozen=True)
class ThresholdConfig:
    threshold: float
    train_error_mean: float
    train_error_std: float
    calibrated_at: str

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "train_error_mean": self.train_error_mean,
            "train_error_std": self.train_error_std,
            "calibrated_at": self.calibrated_at,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ThresholdConfig":
        return cls(float(doc["threshold"]), float(doc["train_error_mean"]), float(doc["train_error_std"]), doc["calibrated_at"])


def calibrate_threshold(train_errors, calibrated_at: str | None = None) -> ThresholdConfig:
    """Anomaly cutoff = mean + population standard deviation of training errors."""
    e = np.asarray(train_errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInput("no reconstruction errors to calibrate on")
    mean = float(e.mean())
    std = float(np.sqrt(((e - mean) ** 2).mean()))
    stamp = calibrated_at or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return ThresholdConfig(mean + std, mean, std, stamp)


class Verdict(str, Enum):
    SEEN_ATTACK = "seen_attack"
    ANOMALY = "anomaly"
    NORMAL = "normal"


ANOMALY_LABEL = "Anomaly"


@dataclass(frozen=True)
class DetectionOutcome:
    verdict: Verdict
    label: str | None
    stage1_distribution: tuple[float, ...]
    reconstruction_error: float | None = None

    @property
    def predicted(self) -> str:
        """Single prediction name: the attack class, ``Anomaly`` or ``Normal``."""
        if self.verdict is Verdict.SEEN_ATTACK:
            return self.label
        return ANOMALY_LABEL if self.verdict is Verdict.ANOMALY else NORMAL

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "label": self.label,
            "stage1_distribution": list(self.stage1_distribution),
            "reconstruction_error": self.reconstruction_error,
        }


@dataclass(frozen=True)
class BatchDetection:
    """Vectorized detection results; ``errors`` is NaN where stage 2 was skipped."""

    probabilities: np.ndarray
    stage1_codes: np.ndarray
    errors: np.ndarray
    verdicts: np.ndarray
    predicted: np.ndarray
    threshold: float

    def __len__(self) -> int:
        return len(self.verdicts)

    def outcome(self, i: int) -> DetectionOutcome:
        verdict = Verdict(self.verdicts[i])
        err = None if np.isnan(self.errors[i]) else float(self.errors[i])
        label = self.predicted[i] if verdict is Verdict.SEEN_ATTACK else None
        return DetectionOutcome(verdict, label, tuple(float(p) for p in self.probabilities[i]), err)

    def outcomes(self) -> list[DetectionOutcome]:
        return [self.outcome(i) for i in range(len(self))]


@dataclass(frozen=True)
class MultiStageIds:
    scaler: ScalerParams | None
    labels: LabelMap
    stage1: SequentialModel | None
    stage2: SequentialModel | None
    threshold: ThresholdConfig | None

    def check_ready(self) -> None:
        missing = []
        if self.scaler is None:
            missing.append("scaler")
        if self.stage1 is None or not self.stage1.trained:
            missing.append("stage-1 classifier")
        if self.stage2 is None or not self.stage2.trained:
            missing.append("stage-2 autoencoder")
        if self.threshold is None:
            missing.append("threshold")
        if missing:
            raise NotReady("detector is missing: " + ", ".join(missing))
        if NORMAL not in self.labels:
            raise NotReady("label map has no Normal class")
        if self.stage1.output_shape[-1] != len(self.labels):
            raise NotReady("classifier output width does not match the label map")

    def with_threshold(self, threshold: ThresholdConfig) -> "MultiStageIds":
        return replace(self, threshold=threshold)


def detect_batch(ids: MultiStageIds, features: np.ndarray, threshold: float | None = None) -> BatchDetection:
    """Run the cascade on raw (unscaled) N x 9 features.

    Stage 1's argmax (ties to the lowest code) decides; only frames it calls
    Normal are scored by stage 2, and an error strictly above the threshold
    makes them anomalies.
    """
    ids.check_ready()
    cut = ids.threshold.threshold if threshold is None else threshold
    x = transform(ids.scaler, np.asarray(features, dtype=np.float64).reshape(-1, NUM_FEATURES))
    probs = ids.stage1.predict(x) if len(x) else np.zeros((0, len(ids.labels)))
    codes = probs.argmax(axis=1) if len(x) else np.zeros(0, dtype=np.int64)
    normal_code = ids.labels.code(NORMAL)
    to_stage2 = codes == normal_code
    errors = np.full(len(x), np.nan)
    errors[to_stage2] = reconstruction_errors(ids.stage2, x[to_stage2])
    verdicts = np.where(to_stage2, np.where(errors > cut, Verdict.ANOMALY.value, Verdict.NORMAL.value), Verdict.SEEN_ATTACK.value)
    predicted = ids.labels.decode(codes)
    predicted[verdicts == Verdict.ANOMALY.value] = ANOMALY_LABEL
    return BatchDetection(probs, codes, errors, verdicts.astype(object), predicted, cut)


def detect(ids: MultiStageIds, frame: CanFrame) -> DetectionOutcome:
    return detect_batch(ids, to_features(frame)[None, :]).outcome(0)


def incorporate_new_attack(
    ids: MultiStageIds,
    confirmed_features: np.ndarray,
    new_label: str,
    prior_features: np.ndarray,
    prior_labels: np.ndarray,
    config: TrainConfig = STAGE1_TRAIN,
    seed: int = 0,
    validation_fraction: float = 0.1,
) -> MultiStageIds:
    """Add an analyst-confirmed attack class and retrain the classifier from scratch.

    Training data is the prior (raw) training set plus the confirmed frames
    under ``new_label``. Stage 2, the scaler and the threshold are unchanged.
    """
    confirmed = np.asarray(confirmed_features, dtype=np.float64).reshape(-1, NUM_FEATURES)
    if len(confirmed) == 0:
        raise EmptyInput("no confirmed samples to learn the new attack from")
    if new_label in ids.labels:
        raise DuplicateLabel(f"label {new_label!r} already exists")
    labels = ids.labels.extend(new_label)
    x = np.concatenate([np.asarray(prior_features, dtype=np.float64), confirmed])
    y = np.concatenate([labels.encode(prior_labels), np.full(len(confirmed), labels.code(new_label))])
    x = transform(ids.scaler, x)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = int(round(validation_fraction * len(x)))
    val, fit = order[:n_val], order[n_val:]
    model = build_stage1(len(labels), seed=seed)
    train_stage1(model, x[fit], y[fit], replace(config, seed=seed), (x[val], y[val]) if n_val else None)
    return replace(ids, labels=labels, stage1=model)


def bundle_bytes(ids: MultiStageIds, meta: dict | None = None) -> bytes:
    ids.check_ready()
    s1, s2 = serialize(ids.stage1), serialize(ids.stage2)
    header = {
        "version": BUNDLE_VERSION,
        "labels": list(ids.labels.names),
        "scaler": ids.scaler.to_json(),
        "threshold": ids.threshold.to_json(),
        "stage1_bytes": len(s1),
        "stage2_bytes": len(s2),
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _BUNDLE_PREFIX.pack(BUNDLE_MAGIC, BUNDLE_VERSION, 0, len(raw)) + raw + s1 + s2


def bundle_from_bytes(blob: bytes) -> tuple[MultiStageIds, dict]:
    if len(blob) < _BUNDLE_PREFIX.size:
        raise CorruptPayload("bundle is truncated")
    magic, version, _, hlen = _BUNDLE_PREFIX.unpack_from(blob, 0)
    if magic != BUNDLE_MAGIC:
        raise CorruptPayload("not a detector bundle (bad magic bytes)")
    if version > BUNDLE_VERSION:
        raise VersionMismatch(f"bundle version {version} is newer than supported {BUNDLE_VERSION}")
    pos = _BUNDLE_PREFIX.size
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable bundle header: {exc}") from exc
    pos += hlen
    n1, n2 = header["stage1_bytes"], header["stage2_bytes"]
    if len(blob) != pos + n1 + n2:
        raise CorruptPayload("bundle length does not match its header")
    ids = MultiStageIds(
        ScalerParams.from_json(header["scaler"]),
        LabelMap(header["labels"]),
        deserialize(blob[pos:pos + n1]),
        deserialize(blob[pos + n1:]),
        ThresholdConfig.from_json(header["threshold"]),
    )
    return ids, header.get("meta", {})


def save_bundle(ids: MultiStageIds, path: str | os.PathLike, meta: dict | None = None) -> int:
    blob = bundle_bytes(ids, meta)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write bundle {path}: {exc}") from exc
    return len(blob)


def load_bundle(path: str | os.PathLike) -> tuple[MultiStageIds, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read bundle {path}: {exc}") from exc
    return bundle_from_bytes(blob)
