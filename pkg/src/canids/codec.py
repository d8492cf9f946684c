"""CAN log parsing, frame decoding, feature extraction and standardization.

Feature order is fixed: ``[can_id, D0, D1, D2, D3, D4, D5, D6, D7]``. Timestamp
and DLC are never features.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import DuplicateLabel, EmptyInput, IoFailure, MalformedRecord, UnknownFlag, UnknownLabel, VersionMismatch

NUM_FEATURES = 9
MAX_STANDARD_ID = 0x7FF
FEATURE_NAMES = ("can_id", "D0", "D1", "D2", "D3", "D4", "D5", "D6", "D7")
CSV_COLUMNS = ("Timestamp", "CAN_ID", "DLC") + tuple(f"DATA{i}" for i in range(8)) + ("Flag",)
SCALER_VERSION = 1

NORMAL = "Normal"
BASE_LABELS = (NORMAL, "DoS", "FrameFuzzification", "Gear", "RPM")

_HEX_RE = re.compile(r"^[0-9A-Fa-f]+$")
_BYTE_RE = re.compile(r"^[0-9A-Fa-f]{1,2}$")


class LabelMap:
    """Ordered class names with contiguous integer codes starting at 0.

    The base five labels take codes 0-4; labels added at runtime append to the
    end, so existing codes never move.
    """

    def __init__(self, names: Iterable[str] = BASE_LABELS) -> None:
        names = tuple(names)
        if len(set(names)) != len(names):
            raise DuplicateLabel(f"duplicate labels in {names}")
        self._names = names
        self._codes = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._codes

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelMap) and other._names == self._names

    def __hash__(self) -> int:
        return hash(self._names)

    def __repr__(self) -> str:
        return f"LabelMap({list(self._names)})"

    def code(self, name: str) -> int:
        try:
            return self._codes[name]
        except KeyError:
            raise UnknownLabel(f"label {name!r} is not in {list(self._names)}") from None

    def name(self, code: int) -> str:
        return self._names[code]

    def encode(self, names: Iterable[str]) -> np.ndarray:
        return np.array([self.code(n) for n in names], dtype=np.int64)

    def decode(self, codes: Iterable[int]) -> np.ndarray:
        return np.array([self._names[int(c)] for c in codes], dtype=object)

    def extend(self, name: str) -> "LabelMap":
        if name in self._codes:
            raise DuplicateLabel(f"label {name!r} already exists")
        return LabelMap(self._names + (name,))

    def without(self, *names: str) -> "LabelMap":
        return LabelMap(n for n in self._names if n not in names)


@dataclass(frozen=True)
class RawCanRecord:
    timestamp: float
    can_id_hex: str
    dlc: int
    data_hex: tuple[str, ...]
    flag: str | None


@dataclass(frozen=True)
class CanFrame:
    can_id: int
    payload: tuple[int, ...]
    label: str | None = None
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.can_id <= MAX_STANDARD_ID:
            raise MalformedRecord(f"CAN id {self.can_id} is not an 11-bit identifier")
        if len(self.payload) != 8:
            raise MalformedRecord(f"payload must have 8 bytes, got {len(self.payload)}")
        if any(not 0 <= b <= 255 for b in self.payload):
            raise MalformedRecord(f"payload byte out of range in {self.payload}")


def _parse_csv(line: str) -> RawCanRecord:
    tokens = [t.strip() for t in line.split(",")]
    if len(tokens) < 3:
        raise MalformedRecord(f"too few fields: {line!r}")
    try:
        ts = float(tokens[0])
    except ValueError:
        raise MalformedRecord(f"bad timestamp {tokens[0]!r}") from None
    if not math.isfinite(ts) or ts < 0:
        raise MalformedRecord(f"timestamp must be non-negative, got {tokens[0]!r}")
    try:
        dlc = int(tokens[2])
    except ValueError:
        raise MalformedRecord(f"bad DLC {tokens[2]!r}") from None
    if not 0 <= dlc <= 8:
        raise MalformedRecord(f"DLC {dlc} outside 0-8")
    rest = tokens[3:]
    if len(rest) == dlc:
        flag = None
    elif len(rest) == dlc + 1:
        flag = rest[-1] or None
        rest = rest[:-1]
    else:
        raise MalformedRecord(f"expected {dlc} data fields for DLC {dlc}, found {len(rest) - 1}: {line!r}")
    return _make_record(ts, tokens[1], dlc, rest, flag)


_CANDUMP_LOG = re.compile(r"^\((?P<ts>[0-9.]+)\)\s+\S+\s+(?P<id>[0-9A-Fa-f]+)#(?P<data>[0-9A-Fa-f]*)(?:\s+(?P<flag>\S+))?$")
_CANDUMP_TXT = re.compile(
    r"^(?:\((?P<ts>[0-9.]+)\)\s+)?\S+\s+(?P<id>[0-9A-Fa-f]+)\s+\[(?P<dlc>\d)\]\s*(?P<data>(?:[0-9A-Fa-f]{2}\s*)*?)(?:\s+(?P<flag>[^0-9A-Fa-f\s]\S*))?\s*$"
)


def _parse_candump(line: str) -> RawCanRecord:
    line = line.strip()
    m = _CANDUMP_LOG.match(line)
    if m:
        data = m.group("data")
        if len(data) % 2:
            raise MalformedRecord(f"odd number of data hex digits: {line!r}")
        tokens = [data[i:i + 2] for i in range(0, len(data), 2)]
        return _make_record(float(m.group("ts")), m.group("id"), len(tokens), tokens, m.group("flag"))
    m = _CANDUMP_TXT.match(line)
    if m:
        tokens = m.group("data").split()
        dlc = int(m.group("dlc"))
        if len(tokens) != dlc:
            raise MalformedRecord(f"DLC {dlc} but {len(tokens)} data bytes: {line!r}")
        ts = float(m.group("ts")) if m.group("ts") else 0.0
        return _make_record(ts, m.group("id"), dlc, tokens, m.group("flag"))
    raise MalformedRecord(f"not a candump line: {line!r}")


def _make_record(ts: float, can_id: str, dlc: int, data: list[str], flag: str | None) -> RawCanRecord:
    if not _HEX_RE.match(can_id):
        raise MalformedRecord(f"CAN id {can_id!r} is not hexadecimal")
    if dlc > 8:
        raise MalformedRecord(f"DLC {dlc} outside 0-8")
    for tok in data:
        if not _BYTE_RE.match(tok):
            raise MalformedRecord(f"data token {tok!r} is not a hex byte")
    return RawCanRecord(ts, can_id, dlc, tuple(data), flag)


def parse_record(line: str, format: str = "csv") -> RawCanRecord:
    """Split one log line into a syntactically valid record; hex stays verbatim."""
    if not line or not line.strip():
        raise MalformedRecord("empty line")
    if format == "csv":
        return _parse_csv(line.strip())
    if format == "candump":
        return _parse_candump(line)
    raise ValueError(f"unknown record format {format!r}")


def decode_frame(rec: RawCanRecord, labeling: Mapping[str, str] | None) -> CanFrame | None:
    """Convert a record to a decimal frame, or None when data bytes are missing."""
    if rec.dlc < 8:
        return None
    can_id = int(rec.can_id_hex, 16)
    if can_id > MAX_STANDARD_ID:
        raise MalformedRecord(f"CAN id 0x{rec.can_id_hex} exceeds 11 bits")
    label = None
    if rec.flag is not None:
        if labeling is None or rec.flag not in labeling:
            raise UnknownFlag(f"flag {rec.flag!r} has no label mapping")
        label = labeling[rec.flag]
    return CanFrame(can_id, tuple(int(t, 16) for t in rec.data_hex), label, rec.timestamp)


def to_features(frame: CanFrame) -> np.ndarray:
    return np.array((frame.can_id,) + tuple(frame.payload), dtype=np.float64)


_FILE_HINTS = (("fuzz", "FrameFuzzification"), ("dos", "DoS"), ("gear", "Gear"), ("rpm", "RPM"))


def infer_attack_class(path: str | os.PathLike) -> str | None:
    """Attack class implied by a Car-Hacking style file name, e.g. ``gear_dataset.csv``."""
    stem = Path(path).name.lower()
    for hint, label in _FILE_HINTS:
        if hint in stem:
            return label
    return None


def file_labeling(attack_class: str | None, labels: Iterable[str] = BASE_LABELS) -> dict[str, str]:
    """Flag-token mapping for one capture file: R is normal, T is the file's attack.

    Full label names are also accepted as flags so that relabelled or
    continuous-learning corpora can be read with the same reader.
    """
    mapping = {name: name for name in labels}
    mapping["R"] = NORMAL
    if attack_class is not None:
        mapping["T"] = attack_class
    return mapping


@dataclass(frozen=True)
class FrameTable:
    """Columnar batch of decoded frames: raw decimal features plus labels."""

    features: np.ndarray
    labels: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    dropped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[1] != NUM_FEATURES:
            raise ValueError(f"features must be N x {NUM_FEATURES}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def labelled(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "FrameTable":
        return FrameTable(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            None if self.timestamps is None else self.timestamps[idx],
        )

    def where_label(self, *names: str) -> "FrameTable":
        return self.subset(np.isin(self.labels, names))

    def where_not_label(self, *names: str) -> "FrameTable":
        return self.subset(~np.isin(self.labels, names))

    def frames(self) -> Iterator[CanFrame]:
        for i, row in enumerate(self.features):
            yield CanFrame(
                int(row[0]),
                tuple(int(v) for v in row[1:]),
                None if self.labels is None else str(self.labels[i]),
                0.0 if self.timestamps is None else float(self.timestamps[i]),
            )

    @classmethod
    def from_frames(cls, frames: Iterable[CanFrame]) -> "FrameTable":
        frames = list(frames)
        feats = np.array([(f.can_id,) + tuple(f.payload) for f in frames], dtype=np.float64).reshape(-1, NUM_FEATURES)
        labelled = bool(frames) and all(f.label is not None for f in frames)
        labels = np.array([f.label for f in frames], dtype=object) if labelled else None
        return cls(feats, labels, np.array([f.timestamp for f in frames], dtype=np.float64))

    @classmethod
    def concat(cls, tables: Iterable["FrameTable"]) -> "FrameTable":
        tables = list(tables)
        if not tables:
            return cls(np.zeros((0, NUM_FEATURES)), np.array([], dtype=object), np.zeros(0))
        labels = None
        if all(t.labels is not None for t in tables):
            labels = np.concatenate([t.labels for t in tables]).astype(object)
        ts = None
        if all(t.timestamps is not None for t in tables):
            ts = np.concatenate([t.timestamps for t in tables])
        return cls(np.concatenate([t.features for t in tables]), labels, ts, sum(t.dropped for t in tables))


def _check_header(line: str) -> bool:
    """True when ``line`` is the canonical header; raises on reordered columns."""
    names = [t.strip() for t in line.strip().split(",")]
    if tuple(names) == CSV_COLUMNS or tuple(names) == CSV_COLUMNS[:-1]:
        return True
    if names and names[0] and not re.match(r"^[0-9.]", names[0]):
        if set(names) <= set(CSV_COLUMNS):
            raise MalformedRecord(f"columns {names} are not in the canonical order {list(CSV_COLUMNS)}")
        raise MalformedRecord(f"unrecognised header {names}")
    return False


def iter_frames(lines: Iterable[str], labeling: Mapping[str, str] | None, format: str = "csv") -> Iterator[CanFrame | None]:
    first = True
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if first and format == "csv":
            first = False
            if _check_header(line):
                continue
        first = False
        try:
            yield decode_frame(parse_record(line, format), labeling)
        except MalformedRecord as exc:
            raise MalformedRecord(f"line {lineno}: {exc}") from None


def read_frames(
    path: str | os.PathLike,
    attack_class: str | None = None,
    format: str = "csv",
    labels: Iterable[str] = BASE_LABELS,
) -> FrameTable:
    """Read a capture file into a FrameTable, dropping records with DLC < 8.

    The T flag maps to ``attack_class`` or, failing that, to the class implied
    by the file name.
    """
    if attack_class is None:
        attack_class = infer_attack_class(path)
    labeling = file_labeling(attack_class, labels)
    feats, labs, ts = [], [], []
    dropped = 0
    try:
        with open(path, encoding="utf-8") as fh:
            for frame in iter_frames(fh, labeling, format):
                if frame is None:
                    dropped += 1
                    continue
                feats.append((frame.can_id,) + frame.payload)
                labs.append(frame.label)
                ts.append(frame.timestamp)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    labelled = bool(labs) and all(lab is not None for lab in labs)
    if not labelled and any(lab is not None for lab in labs):
        raise MalformedRecord(f"{path}: some records carry a flag and some do not")
    return FrameTable(
        np.array(feats, dtype=np.float64).reshape(-1, NUM_FEATURES),
        np.array(labs, dtype=object) if labelled else None,
        np.array(ts, dtype=np.float64),
        dropped,
    )


def format_frame(frame: CanFrame, flag: str | None) -> str:
    fields = [f"{frame.timestamp:.6f}", f"{frame.can_id:04x}", "8"]
    fields += [f"{b:02x}" for b in frame.payload]
    if flag is not None:
        fields.append(flag)
    return ",".join(fields)


@dataclass(frozen=True)
class ScalerParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_json(self) -> dict:
        return {"version": SCALER_VERSION, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, doc: dict) -> "ScalerParams":
        if doc.get("version", 0) > SCALER_VERSION:
            raise VersionMismatch(f"scaler version {doc['version']} is newer than supported {SCALER_VERSION}")
        mean, std = doc["mean"], doc["std"]
        if len(mean) != NUM_FEATURES or len(std) != NUM_FEATURES:
            raise MalformedRecord("scaler must carry 9 means and 9 standard deviations")
        return cls(tuple(map(float, mean)), tuple(map(float, std)))


def fit_scaler(features: np.ndarray) -> ScalerParams:
    """Per-feature mean and population standard deviation.

    Constant columns get std 1 so they standardize to exactly 0.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot fit a scaler on no data")
    x = x.reshape(-1, NUM_FEATURES)
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    const = x.max(axis=0) == x.min(axis=0)
    mean[const] = x[0, const]
    std[const] = 1.0
    return ScalerParams(tuple(mean.tolist()), tuple(std.tolist()))


def transform(params: ScalerParams, fv: np.ndarray) -> np.ndarray:
    """Standardize one feature vector or an N x 9 batch."""
    return (np.asarray(fv, dtype=np.float64) - np.asarray(params.mean)) / np.asarray(params.std)


def save_scaler(params: ScalerParams, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(params.to_json(), indent=2), encoding="utf-8")


def load_scaler(path: str | os.PathLike) -> ScalerParams:
    return ScalerParams.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
