"""Seeded synthetic CAN traffic with labelled DoS, fuzzing and spoofing attacks.

Normal traffic is periodic per identifier. Each identifier's payload has fixed
byte positions (mostly zero) and varying positions modelled as bounded
counters or bounded noise. Attack frames are injected at fixed rates inside
time windows and carry their attack label, so generator output is ground
truth by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .codec import NORMAL, CanFrame, format_frame
from .errors import IoFailure, TargetNotInProfile

ATTACK_KINDS = ("DoS", "Fuzz", "RpmSpoof", "GearSpoof")
ATTACK_LABELS = {"DoS": "DoS", "Fuzz": "FrameFuzzification", "RpmSpoof": "RPM", "GearSpoof": "Gear"}
DEFAULT_INTERVAL_MS = {"DoS": 0.3, "Fuzz": 0.5, "RpmSpoof": 1.0, "GearSpoof": 1.0}
DEFAULT_TARGETS = {"RpmSpoof": 790, "GearSpoof": 1087}
# names follow the public Car-Hacking files so codec.infer_attack_class works on both
ATTACK_FILES = {
    "DoS": "DoS_dataset.csv",
    "Fuzz": "Fuzzy_dataset.csv",
    "GearSpoof": "gear_dataset.csv",
    "RpmSpoof": "RPM_dataset.csv",
}
PROFILE_VERSION = 1
DEFAULT_MIX = 0.1406


@dataclass(frozen=True)
class VaryingByte:
    kind: str  # "counter" or "noise"
    low: int
    high: int
    step: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("counter", "noise"):
            raise ValueError(f"unknown varying byte kind {self.kind!r}")
        if not 0 <= self.low <= self.high <= 255:
            raise ValueError(f"bad byte range [{self.low}, {self.high}]")


@dataclass(frozen=True)
class IdSchema:
    """Payload layout of one legitimate identifier."""

    can_id: int
    period_ms: float
    constants: dict[int, int]
    varying: dict[int, VaryingByte] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.can_id <= 0x7FF:
            raise ValueError(f"CAN id {self.can_id} does not fit 11 bits")
        if self.period_ms <= 0:
            raise ValueError("period must be positive")
        positions = set(self.constants) | set(self.varying)
        if positions != set(range(8)) or set(self.constants) & set(self.varying):
            raise ValueError(f"id {self.can_id}: every byte position needs exactly one rule")

    def __hash__(self) -> int:
        return hash((self.can_id, self.period_ms, tuple(sorted(self.constants.items())), tuple(sorted(self.varying.items()))))

    @property
    def zero_positions(self) -> tuple[int, ...]:
        return tuple(sorted(p for p, v in self.constants.items() if v == 0))

    def payload(self, index: int, phase: dict[int, int], rng: np.random.Generator) -> tuple[int, ...]:
        out = [0] * 8
        for pos, value in self.constants.items():
            out[pos] = value
        for pos in sorted(self.varying):
            vb = self.varying[pos]
            span = vb.high - vb.low + 1
            if vb.kind == "counter":
                out[pos] = vb.low + (phase[pos] + index * vb.step) % span
            else:
                out[pos] = int(rng.integers(vb.low, vb.high + 1))
        return tuple(out)

    def violates_mask(self, payload: Iterable[int]) -> bool:
        payload = tuple(payload)
        return any(payload[p] != v for p, v in self.constants.items())

    def conforms(self, payload: Iterable[int]) -> bool:
        payload = tuple(payload)
        if self.violates_mask(payload):
            return False
        return all(vb.low <= payload[p] <= vb.high for p, vb in self.varying.items())

    def to_json(self) -> dict:
        return {
            "can_id": self.can_id,
            "period_ms": self.period_ms,
            "constants": {str(p): v for p, v in sorted(self.constants.items())},
            "varying": {
                str(p): {"kind": vb.kind, "low": vb.low, "high": vb.high, "step": vb.step}
                for p, vb in sorted(self.varying.items())
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IdSchema":
        return cls(
            int(doc["can_id"]),
            float(doc["period_ms"]),
            {int(p): int(v) for p, v in doc.get("constants", {}).items()},
            {int(p): VaryingByte(**vb) for p, vb in doc.get("varying", {}).items()},
        )


@dataclass(frozen=True)
class VehicleProfile:
    name: str
    ids: tuple[IdSchema, ...]

    def __post_init__(self) -> None:
        if not self.ids:
            raise ValueError("a profile needs at least one identifier")
        seen = [s.can_id for s in self.ids]
        if len(set(seen)) != len(seen):
            raise ValueError("duplicate identifiers in profile")

    @property
    def id_set(self) -> frozenset[int]:
        return frozenset(s.can_id for s in self.ids)

    def schema(self, can_id: int) -> IdSchema:
        for s in self.ids:
            if s.can_id == can_id:
                return s
        raise TargetNotInProfile(f"CAN id {can_id} is not part of profile {self.name!r}")

    def to_json(self) -> dict:
        return {"version": PROFILE_VERSION, "name": self.name, "ids": [s.to_json() for s in self.ids]}

    @classmethod
    def from_json(cls, doc: dict) -> "VehicleProfile":
        if doc.get("version", 0) > PROFILE_VERSION:
            raise ValueError(f"profile version {doc['version']} is newer than supported")
        return cls(doc["name"], tuple(IdSchema.from_json(s) for s in doc["ids"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VehicleProfile":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _c(**kw) -> dict[int, int]:
    return {int(k[1:]): v for k, v in kw.items()}


def _counter(low, high, step=1):
    return VaryingByte("counter", low, high, step)


def _noise(low, high):
    return VaryingByte("noise", low, high)


def default_profile(name: str = "synthetic-sedan") -> VehicleProfile:
    """Ten-identifier synthetic vehicle; ids 399, 790, 880 and 1087 echo real captures."""
    return VehicleProfile(name, (
        IdSchema(399, 10.0, _c(d0=254, d2=0, d3=0, d4=0, d6=0, d7=0), {1: _counter(59, 94), 5: _counter(60, 74)}),
        IdSchema(608, 10.0, _c(d0=25, d1=33, d4=0, d5=0, d6=0, d7=0), {2: _noise(0, 30), 3: _counter(0, 255, 3)}),
        IdSchema(672, 20.0, _c(d0=64, d1=0, d2=0, d3=0, d5=0, d6=0), {4: _counter(0, 15), 7: _noise(0, 3)}),
        IdSchema(790, 10.0, _c(d0=0, d3=0, d4=0, d6=0), {1: _noise(20, 45), 2: _noise(30, 50), 5: _noise(10, 16), 7: _counter(0, 15)}),
        IdSchema(809, 10.0, _c(d0=215, d2=127, d3=20, d5=0, d6=0, d7=0), {1: _noise(120, 140), 4: _counter(16, 31)}),
        IdSchema(848, 20.0, _c(d0=5, d1=32, d3=0, d4=0, d6=0, d7=0), {2: _noise(52, 60), 5: _counter(0, 127, 2)}),
        IdSchema(880, 20.0, _c(d0=0, d1=64, d3=255, d5=0, d7=0), {2: _noise(90, 100), 4: _noise(110, 130), 6: _counter(0, 15)}),
        IdSchema(1087, 10.0, _c(d0=1, d2=1, d3=0, d4=0, d5=1), {1: _noise(0, 6), 6: _counter(240, 255), 7: _noise(0, 15)}),
        IdSchema(1088, 50.0, _c(d0=0, d1=0, d2=0, d3=0, d5=0, d6=0, d7=0), {4: _noise(0, 8)}),
        IdSchema(1349, 100.0, _c(d0=216, d3=138, d6=0, d7=0), {1: _noise(0, 255), 2: _noise(0, 255), 4: _noise(0, 255), 5: _noise(0, 255)}),
    ))


def variant_profile(base: VehicleProfile, name: str, seed: int) -> VehicleProfile:
    """Same identifier set and masks, different timing; models another vehicle of a similar make."""
    rng = np.random.default_rng(seed)
    ids = tuple(
        IdSchema(s.can_id, float(round(s.period_ms * rng.uniform(0.8, 1.25), 3)), dict(s.constants), dict(s.varying))
        for s in base.ids
    )
    return VehicleProfile(name, ids)


def _round_ts(t: float) -> float:
    return round(t, 6)


def gen_normal(
    profile: VehicleProfile,
    count: int | None = None,
    seed: int = 0,
    duration: float | None = None,
) -> list[CanFrame]:
    """Interleaved periodic normal traffic, either ``count`` frames or ``duration`` seconds."""
    if (count is None) == (duration is None):
        raise ValueError("give exactly one of count or duration")
    if count is not None and count <= 0:
        return []
    rng = np.random.default_rng(seed)
    rate = sum(1000.0 / s.period_ms for s in profile.ids)
    horizon = duration if duration is not None else count / rate * 1.05 + max(s.period_ms for s in profile.ids) / 1000.0
    events = []
    for order, schema in enumerate(profile.ids):
        period = schema.period_ms / 1000.0
        offset = rng.uniform(0.0, period)
        phase = {p: int(rng.integers(0, vb.high - vb.low + 1)) for p, vb in schema.varying.items()}
        n = int(math.floor((horizon - offset) / period)) + 1
        jitter = rng.uniform(-0.02, 0.02, size=max(n, 0)) * period
        for k in range(n):
            t = offset + k * period + jitter[k]
            if t < 0 or (duration is not None and t >= duration):
                continue
            events.append((_round_ts(t), order, k, schema, phase))
    events.sort(key=lambda e: (e[0], e[1]))
    if count is not None:
        events = events[:count]
    payload_rng = np.random.default_rng([seed, 1])
    return [CanFrame(s.can_id, s.payload(k, phase, payload_rng), NORMAL, t) for t, _, k, s, phase in events]


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    windows: tuple[tuple[float, float], ...] = ()
    rate_hz: float | None = None
    seed: int = 0
    target_id: int | None = None
    random_id_fraction: float = 0.5
    pool_size: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.random_id_fraction <= 1.0:
            raise ValueError("random_id_fraction must lie in [0, 1]")

    @property
    def label(self) -> str:
        return ATTACK_LABELS[self.kind]

    @property
    def effective_rate(self) -> float:
        return 1000.0 / DEFAULT_INTERVAL_MS[self.kind] if self.rate_hz is None else self.rate_hz

    def timestamps(self) -> list[float]:
        rate = self.effective_rate
        if rate <= 0:
            return []
        out = []
        for start, end in self.windows:
            n = int(math.floor((end - start) * rate + 1e-9))
            out.extend(_round_ts(start + j / rate) for j in range(n))
        return out


def _merge(stream: list[CanFrame], injected: list[CanFrame]) -> list[CanFrame]:
    if not injected:
        return list(stream)
    merged = [(f.timestamp, 0, i, f) for i, f in enumerate(stream)]
    merged += [(f.timestamp, 1, i, f) for i, f in enumerate(injected)]
    merged.sort(key=lambda e: e[:3])
    return [e[3] for e in merged]


def _require(spec: AttackSpec, *kinds: str) -> None:
    if spec.kind not in kinds:
        raise ValueError(f"expected an attack spec of kind {kinds}, got {spec.kind!r}")


def inject_dos(stream: list[CanFrame], spec: AttackSpec) -> list[CanFrame]:
    """Interleave highest-priority all-zero frames (id 0) at the attack rate."""
    _require(spec, "DoS")
    zeros = (0,) * 8
    return _merge(stream, [CanFrame(0, zeros, spec.label, t) for t in spec.timestamps()])


def fuzz_payload(schema: IdSchema, rng: np.random.Generator) -> tuple[int, ...]:
    """Random payload for a legitimate id, guaranteed to break its constant-byte mask."""
    payload = [int(v) for v in rng.integers(0, 256, size=8)]
    if not schema.violates_mask(payload):
        positions = schema.zero_positions or tuple(sorted(schema.constants))
        pos = positions[int(rng.integers(len(positions)))]
        payload[pos] = (schema.constants[pos] + int(rng.integers(1, 256))) % 256
    return tuple(payload)


def inject_fuzz(stream: list[CanFrame], spec: AttackSpec, profile: VehicleProfile) -> list[CanFrame]:
    """Mix of random unseen ids with random payloads and legitimate ids with mask-breaking payloads."""
    _require(spec, "Fuzz")
    times = spec.timestamps()
    rng = np.random.default_rng(spec.seed)
    n_random = int(round(spec.random_id_fraction * len(times)))
    is_random = np.zeros(len(times), dtype=bool)
    is_random[:n_random] = True
    rng.shuffle(is_random)
    unseen = np.array(sorted(set(range(1, 0x800)) - profile.id_set))
    maskable = [s for s in profile.ids if s.constants]
    out = []
    for t, rnd in zip(times, is_random):
        if rnd or not maskable:
            can_id = int(unseen[int(rng.integers(len(unseen)))])
            payload = tuple(int(v) for v in rng.integers(0, 256, size=8))
        else:
            schema = maskable[int(rng.integers(len(maskable)))]
            can_id, payload = schema.can_id, fuzz_payload(schema, rng)
        out.append(CanFrame(can_id, payload, spec.label, t))
    return _merge(stream, out)


def _far_value(vb: VaryingByte, rng: np.random.Generator) -> int:
    margin = max(32, vb.high - vb.low)
    choices = [v for v in range(256) if v < vb.low - margin or v > vb.high + margin]
    if not choices:
        choices = [v for v in range(256) if v < vb.low or v > vb.high]
    return int(choices[int(rng.integers(len(choices)))])


def fabricate_payloads(schema: IdSchema, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Payloads that keep the id's zero mask but push varying bytes out of their legitimate range."""
    pool = []
    phase = {p: 0 for p in schema.varying}
    movable = [p for p, vb in schema.varying.items() if vb.low > 0 or vb.high < 255]
    nonzero_consts = [p for p, v in schema.constants.items() if v != 0]
    while len(pool) < count:
        payload = list(schema.payload(int(rng.integers(0, 1 << 16)), phase, rng))
        if movable:
            k = int(rng.integers(1, min(3, len(movable)) + 1))
            for pos in rng.choice(movable, size=k, replace=False):
                payload[int(pos)] = _far_value(schema.varying[int(pos)], rng)
        else:
            pos = nonzero_consts[int(rng.integers(len(nonzero_consts)))] if nonzero_consts else int(rng.integers(8))
            payload[pos] = (payload[pos] + 128) % 256
        payload = tuple(payload)
        if not schema.conforms(payload) and payload not in pool:
            pool.append(payload)
    return pool


def inject_spoof(stream: list[CanFrame], spec: AttackSpec, profile: VehicleProfile) -> list[CanFrame]:
    """Inject fabricated payloads under one legitimate target id (RPM 790 or gear 1087 by default)."""
    _require(spec, "RpmSpoof", "GearSpoof")
    target = spec.target_id if spec.target_id is not None else DEFAULT_TARGETS[spec.kind]
    schema = profile.schema(target)
    rng = np.random.default_rng(spec.seed)
    pool = fabricate_payloads(schema, spec.pool_size, rng)
    times = spec.timestamps()
    picks = rng.integers(0, len(pool), size=len(times))
    return _merge(stream, [CanFrame(target, pool[int(k)], spec.label, t) for t, k in zip(times, picks)])


def inject(stream: list[CanFrame], spec: AttackSpec, profile: VehicleProfile) -> list[CanFrame]:
    if spec.kind == "DoS":
        return inject_dos(stream, spec)
    if spec.kind == "Fuzz":
        return inject_fuzz(stream, spec, profile)
    return inject_spoof(stream, spec, profile)


def burst_windows(n_frames: int, rate_hz: float, capture_end: float, bursts: int = 5) -> tuple[tuple[float, float], ...]:
    """Evenly spread bursts that together hold exactly ``n_frames`` injections at ``rate_hz``."""
    if n_frames <= 0:
        return ()
    bursts = max(1, min(bursts, n_frames))
    counts = [n_frames // bursts + (1 if j < n_frames % bursts else 0) for j in range(bursts)]
    windows = []
    for j, c in enumerate(counts):
        length = c / rate_hz
        start = max(0.0, capture_end * (j + 0.5) / bursts - length / 2)
        windows.append((start, start + length))
    return tuple(windows)


def attack_file(
    kind: str,
    profile: VehicleProfile,
    frames: int,
    mix: float = DEFAULT_MIX,
    seed: int = 0,
    bursts: int = 5,
) -> list[CanFrame]:
    """One capture of ``frames`` messages of which ``round(mix * frames)`` are ``kind`` attacks."""
    if not 0.0 <= mix < 1.0:
        raise ValueError("mix must lie in [0, 1)")
    n_attack = int(round(mix * frames))
    seeds = np.random.SeedSequence([seed, ATTACK_KINDS.index(kind)]).generate_state(2)
    normal = gen_normal(profile, count=frames - n_attack, seed=int(seeds[0]))
    end = normal[-1].timestamp if normal else 1.0
    spec = AttackSpec(kind, seed=int(seeds[1]))
    spec = AttackSpec(kind, burst_windows(n_attack, spec.effective_rate, end, bursts), seed=int(seeds[1]))
    return inject(normal, spec, profile)


def export(stream: Iterable[CanFrame], path: str | os.PathLike) -> Path:
    """Write frames in the Car-Hacking CSV layout with R/T flags (no header row)."""
    path = Path(path)
    lines = [format_frame(f, None if f.label is None else ("R" if f.label == NORMAL else "T")) for f in stream]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines))
            if lines:
                fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def generate_corpus(
    out_dir: str | os.PathLike,
    frames_per_file: int = 50_000,
    mix: float = DEFAULT_MIX,
    seed: int = 0,
    profile: VehicleProfile | None = None,
    kinds: Iterable[str] = ATTACK_KINDS,
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise IoFailure(f"output directory {out_dir} does not exist")
    profile = profile or default_profile()
    return {
        kind: export(attack_file(kind, profile, frames_per_file, mix, seed), out_dir / ATTACK_FILES[kind])
        for kind in kinds
    }


def corpus_frames(
    frames_per_file: int,
    mix: float = DEFAULT_MIX,
    seed: int = 0,
    profile: VehicleProfile | None = None,
    kinds: Iterable[str] = ATTACK_KINDS,
) -> list[CanFrame]:
    """In-memory equivalent of ``generate_corpus``: the four files concatenated."""
    profile = profile or default_profile()
    out: list[CanFrame] = []
    for kind in kinds:
        out.extend(attack_file(kind, profile, frames_per_file, mix, seed))
    return out
