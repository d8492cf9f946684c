"""In-process hierarchical federated learning: vehicles, edge aggregators and a central server.

Only parameter vectors, sample counts and summary statistics cross the
client boundary. Rounds are sequential and fully determined by the seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .codec import NORMAL, NUM_FEATURES, FrameTable, LabelMap, ScalerParams, transform
from .detector import (
    STAGE1_TRAIN,
    STAGE2_TRAIN,
    MultiStageIds,
    as_sequences,
    build_stage1,
    build_stage2,
    calibrate_threshold,
    reconstruction_errors,
)
from .errors import DuplicateLabel, EmptyInput, EmptyTopology, EmptyUpdates, LayoutMismatch
from .metrics import ConfusionMatrix, macro_report
from .nn import ParameterSet, SequentialModel, train
from .pipeline import label_map_for
from .sampling import SmoteConfig, smote
from .traffic import ATTACK_KINDS, VehicleProfile, attack_file, default_profile, variant_profile

STAGES = ("stage1", "stage2")
LOG_VERSION = 1


def profile_key(profile: VehicleProfile | str) -> str:
    """Grouping key: identical profiles share a key. Strings are taken as keys verbatim."""
    if isinstance(profile, str):
        return profile
    doc = json.dumps(profile.to_json(), sort_keys=True).encode()
    return hashlib.sha256(doc).hexdigest()[:12]


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class VehicleClient:
    client_id: str
    profile_key: str
    data: FrameTable = field(repr=False)
    ids: MultiStageIds | None = field(default=None, repr=False)

    @property
    def sample_count(self) -> int:
        return len(self.data)

    def normal_features(self) -> np.ndarray:
        return self.data.features[self.data.labels == NORMAL]


@dataclass
class EdgeAggregator:
    aggregator_id: str
    profile_keys: tuple[str, ...]
    client_ids: list[str]
    last_params: dict[str, ParameterSet] = field(default_factory=dict, repr=False)


@dataclass
class CentralServer:
    params: dict[str, ParameterSet]
    labels: LabelMap
    scaler: ScalerParams
    round: int = 0
    stage2_activation: str = "relu"

    def model(self, stage: str) -> SequentialModel:
        m = build_stage1(len(self.labels)) if stage == "stage1" else build_stage2(activation=self.stage2_activation)
        m.set_parameters(self.params[stage])
        m.trained = self.round > 0
        return m


@dataclass
class FederationTopology:
    server: CentralServer
    aggregators: list[EdgeAggregator]
    clients: dict[str, VehicleClient]
    seed: int

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "round": self.server.round,
            "labels": list(self.server.labels.names),
            "aggregators": [
                {"id": a.aggregator_id, "profile_keys": list(a.profile_keys), "clients": list(a.client_ids)}
                for a in self.aggregators
            ],
            "clients": [
                {"id": c.client_id, "profile_key": c.profile_key, "samples": c.sample_count}
                for c in self.clients.values()
            ],
            "global_digests": {s: p.digest() for s, p in self.server.params.items()},
        }


@dataclass(frozen=True)
class RoundConfig:
    clients_per_aggregator: int | None = None
    local_epochs: int = 1
    stage2_epochs: int = 1
    stage2_max_frames: int = 2000
    rounds: int = 5
    weighting: str = "samples"
    stages: tuple[str, ...] = STAGES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.weighting != "samples":
            raise ValueError("only sample-count weighting is supported")
        if self.clients_per_aggregator is not None and self.clients_per_aggregator < 1:
            raise ValueError("clients_per_aggregator must be positive")
        if min(self.local_epochs, self.stage2_epochs, self.rounds) < 0:
            raise ValueError("epoch and round counts must be non-negative")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return cls(**d)


@dataclass
class RoundReport:
    round: int
    selected: dict[str, list[str]]
    train_loss: dict[str, dict[str, float]]
    edge_digests: dict[str, dict[str, str]]
    global_digests: dict[str, str]
    thresholds: dict[str, float]
    metrics: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


class LocalUpdate(NamedTuple):
    params: ParameterSet
    sample_count: int
    train_loss: float | None


def _pooled_scaler(clients: Iterable[VehicleClient]) -> ScalerParams:
    """Global standardizer from per-client (count, mean, M2, min, max) summaries."""
    n, mean, m2 = 0, np.zeros(NUM_FEATURES), np.zeros(NUM_FEATURES)
    lo, hi = np.full(NUM_FEATURES, np.inf), np.full(NUM_FEATURES, -np.inf)
    for c in clients:
        x = c.data.features
        if len(x) == 0:
            continue
        nb, mb = len(x), x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        delta = mb - mean
        total = n + nb
        mean = mean + delta * nb / total
        m2 = m2 + m2b + delta**2 * n * nb / total
        n = total
        lo, hi = np.minimum(lo, x.min(axis=0)), np.maximum(hi, x.max(axis=0))
    if n == 0:
        raise EmptyInput("no client holds any frames")
    std = np.sqrt(m2 / n)
    const = lo == hi
    mean[const] = lo[const]
    std[const] = 1.0
    return ScalerParams(tuple(mean.tolist()), tuple(std.tolist()))


def _assign(keys: list[str], num_aggregators: int, capacity: int) -> list[int]:
    """Place whole profile groups on the emptiest aggregator, spilling only oversized groups."""
    groups: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    room = [capacity] * num_aggregators
    slot = [0] * len(keys)
    for members in groups.values():
        pending = list(members)
        while pending:
            target = max(range(num_aggregators), key=lambda a: (room[a], -a))
            take = pending[: room[target]]
            for i in take:
                slot[i] = target
            room[target] -= len(take)
            pending = pending[len(take):]
    return slot


def init_topology(
    num_aggregators: int,
    clients_per_aggregator: int,
    profiles: Sequence[VehicleProfile | str],
    datasets: Sequence[FrameTable],
    seed: int = 0,
    client_ids: Sequence[str] | None = None,
    stage2_activation: str = "relu",
) -> FederationTopology:
    """Group clients under edge aggregators by profile key and initialize the global models."""
    if not datasets or num_aggregators < 1 or clients_per_aggregator < 1:
        raise EmptyTopology("a federation needs at least one aggregator and one client")
    if len(profiles) != len(datasets):
        raise ValueError("one profile per dataset is required")
    if len(datasets) > num_aggregators * clients_per_aggregator:
        raise ValueError(f"{len(datasets)} clients exceed {num_aggregators} x {clients_per_aggregator} slots")
    ids = list(client_ids) if client_ids is not None else [f"v{i}" for i in range(len(datasets))]
    if len(set(ids)) != len(ids) or len(ids) != len(datasets):
        raise ValueError("client ids must be unique, one per dataset")
    for cid, table in zip(ids, datasets):
        if not table.labelled or len(table) == 0:
            raise EmptyTopology(f"client {cid} has no labelled frames")

    keys = [profile_key(p) for p in profiles]
    clients = {cid: VehicleClient(cid, key, table) for cid, key, table in zip(ids, keys, datasets)}
    slot = _assign(keys, num_aggregators, clients_per_aggregator)
    aggregators = []
    for a in range(num_aggregators):
        members = [ids[i] for i in range(len(ids)) if slot[i] == a]
        if not members:
            raise EmptyTopology(f"aggregator e{a} would have no clients")
        akeys = tuple(dict.fromkeys(clients[m].profile_key for m in members))
        aggregators.append(EdgeAggregator(f"e{a}", akeys, members))

    present = set().union(*(set(c.data.labels.tolist()) for c in clients.values()))
    labels = label_map_for(present)
    scaler = _pooled_scaler(clients.values())
    params = {
        "stage1": build_stage1(len(labels), seed=_seed(seed, 1)).get_parameters(),
        "stage2": build_stage2(seed=_seed(seed, 2), activation=stage2_activation).get_parameters(),
    }
    server = CentralServer(params, labels, scaler, 0, stage2_activation)
    topo = FederationTopology(server, aggregators, clients, seed)
    _distribute(topo)
    return topo


def _local_threshold(client: VehicleClient, stage2: SequentialModel, scaler: ScalerParams, stamp: str):
    normal = client.normal_features()
    if len(normal) == 0:
        return None
    return calibrate_threshold(reconstruction_errors(stage2, transform(scaler, normal)), calibrated_at=stamp)


def _distribute(topo: FederationTopology) -> None:
    """Every client, selected or not, receives the current global models and recalibrates locally."""
    server = topo.server
    for client in topo.clients.values():
        s1, s2 = server.model("stage1"), server.model("stage2")
        client.ids = MultiStageIds(server.scaler, server.labels, s1, s2, _local_threshold(client, s2, server.scaler, f"round {server.round}"))


def _stage2_rows(client: VehicleClient, scaler: ScalerParams, cap: int, seed: int) -> np.ndarray:
    x = transform(scaler, client.normal_features())
    if len(x) > cap:
        x = x[np.sort(np.random.default_rng(seed).permutation(len(x))[:cap])]
    return x


def local_train(
    client: VehicleClient,
    global_params: ParameterSet,
    local_epochs: int,
    stage: str = "stage1",
    seed: int = 0,
    stage2_max_frames: int = 2000,
) -> LocalUpdate:
    """Start from ``global_params`` and train on the client's own frames.

    The sample count is what the update is weighted by: all local frames for
    the classifier, the normal frames actually used for the autoencoder.
    """
    if client.ids is None:
        raise EmptyTopology(f"client {client.client_id} has not received a global model")
    model = client.ids.stage1 if stage == "stage1" else client.ids.stage2
    if global_params.layout != model.get_parameters().layout:
        raise LayoutMismatch(f"global {stage} layout does not match client {client.client_id}")
    model.set_parameters(global_params)
    scaler = client.ids.scaler
    if stage == "stage1":
        x, y = transform(scaler, client.data.features), client.ids.labels.encode(client.data.labels)
        base = STAGE1_TRAIN
    else:
        x = as_sequences(_stage2_rows(client, scaler, stage2_max_frames, seed))
        y = x
        base = STAGE2_TRAIN
    count = len(x)
    if local_epochs == 0 or count == 0:
        return LocalUpdate(global_params, count, None)
    cfg = replace(base, max_epochs=local_epochs, early_stopping=None, seed=seed)
    report = train(model, x, y, cfg)
    params = model.get_parameters()
    if stage == "stage1":
        params = _keep_absent_outputs(params, global_params, np.unique(y))
    return LocalUpdate(params, count, float(report.train_loss[-1]))


def _keep_absent_outputs(local: ParameterSet, incoming: ParameterSet, present: np.ndarray) -> ParameterSet:
    """Reset output weights of classes the client holds no frames of to the incoming values.

    A client cannot say anything about a class it never saw; letting its
    softmax drive that class down would erase it from the global model.
    """
    values = local.values.copy()
    out_layer = max(slot.layer for slot in local.layout)
    for slot in local.layout:
        if slot.layer != out_layer:
            continue
        absent = np.setdiff1d(np.arange(slot.shape[-1]), present)
        dst = values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        dst[..., absent] = incoming.tensor(slot.layer, slot.role)[..., absent]
    return local.with_values(values)


def _weighted_mean(updates: Sequence[tuple[ParameterSet, int]]) -> tuple[ParameterSet, int]:
    if not updates:
        raise EmptyUpdates("nothing to aggregate")
    first = updates[0][0]
    for ps, _ in updates[1:]:
        if not ps.compatible(first):
            raise LayoutMismatch("updates carry different parameter layouts")
    counts = np.array([c for _, c in updates], dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("sample counts must be non-negative")
    total = counts.sum()
    if total == 0:
        raise EmptyUpdates("all updates have zero samples")
    stacked = np.stack([ps.values for ps, _ in updates])
    return first.with_values((counts / total) @ stacked), int(total)


def edge_aggregate(updates: Sequence[tuple[ParameterSet, int]]) -> tuple[ParameterSet, int]:
    """Sample-count-weighted federated averaging; returns the aggregate and the summed count."""
    return _weighted_mean(updates)


def global_aggregate(edge_results: Sequence[tuple[ParameterSet, int]]) -> ParameterSet:
    return _weighted_mean(edge_results)[0]


def _select(agg: EdgeAggregator, count: int | None, rng: np.random.Generator) -> list[str]:
    if count is None or count >= len(agg.client_ids):
        return list(agg.client_ids)
    picks = rng.choice(len(agg.client_ids), size=count, replace=False)
    return [agg.client_ids[i] for i in sorted(picks)]


def global_metrics(topo: FederationTopology, holdout: FrameTable) -> dict:
    """Classifier macro report of the current global model on frames of known classes."""
    labels = topo.server.labels
    known = holdout.where_label(*labels.names)
    if len(known) == 0:
        raise EmptyInput("held-out corpus has no frames of known classes")
    probs = topo.server.model("stage1").predict(transform(topo.server.scaler, known.features))
    cm = ConfusionMatrix.from_labels(labels.names, known.labels, labels.decode(probs.argmax(axis=1)))
    return macro_report(cm)


def run_round(topo: FederationTopology, config: RoundConfig, holdout: FrameTable | None = None) -> RoundReport:
    """distribute -> select -> local train -> edge aggregate -> global aggregate -> redistribute."""
    server = topo.server
    r = server.round
    rng = np.random.default_rng(_seed(config.seed, topo.seed, r, 7))
    selected = {a.aggregator_id: _select(a, config.clients_per_aggregator, rng) for a in topo.aggregators}
    losses: dict[str, dict[str, float]] = {}
    edge_digests: dict[str, dict[str, str]] = {}
    new_params = dict(server.params)
    for si, stage in enumerate(STAGES):
        if stage not in config.stages:
            continue
        epochs = config.local_epochs if stage == "stage1" else config.stage2_epochs
        stage_seed = _seed(config.seed, topo.seed, r, si)
        edge_results = []
        for agg in topo.aggregators:
            updates = []
            for cid in selected[agg.aggregator_id]:
                up = local_train(topo.clients[cid], server.params[stage], epochs, stage, stage_seed, config.stage2_max_frames)
                if up.sample_count == 0:
                    continue
                updates.append((up.params, up.sample_count))
                if up.train_loss is not None:
                    losses.setdefault(cid, {})[stage] = up.train_loss
            if not updates:
                continue
            edge_params, total = edge_aggregate(updates)
            agg.last_params[stage] = edge_params
            edge_digests.setdefault(agg.aggregator_id, {})[stage] = edge_params.digest()
            edge_results.append((edge_params, total))
        if edge_results:
            new_params[stage] = global_aggregate(edge_results)
    server.params = new_params
    server.round = r + 1
    _distribute(topo)
    thresholds = {
        cid: c.ids.threshold.threshold for cid, c in topo.clients.items() if c.ids.threshold is not None
    }
    metrics = global_metrics(topo, holdout) if holdout is not None else None
    return RoundReport(
        r + 1,
        selected,
        losses,
        edge_digests,
        {s: p.digest() for s, p in server.params.items()},
        thresholds,
        metrics,
    )


def _widen_classifier(old: ParameterSet, num_classes: int, seed: int) -> ParameterSet:
    """Copy hidden layers and existing output columns; the new class keeps its fresh initialization."""
    fresh = build_stage1(num_classes, seed=seed).get_parameters()
    values = fresh.values.copy()
    for slot in fresh.layout:
        src = old.tensor(slot.layer, slot.role)
        dst = values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        if src.shape == slot.shape:
            dst[...] = src
        else:
            dst[..., : src.shape[-1]] = src
    return fresh.with_values(values)


def propagate_new_attack(
    topo: FederationTopology,
    confirmed_samples: np.ndarray,
    label_name: str,
    origin_client: str,
    origin_epochs: int = 5,
    seed: int | None = None,
) -> FederationTopology:
    """Register an analyst-confirmed attack class federation-wide.

    The global classifier is widened by one output, then fine-tuned at the
    origin on its own frames plus the confirmed ones (SMOTE-topped-up to its
    largest attack class). The server adopts that model as the new global
    classifier and pushes it, with the grown label map, to every client.
    The confirmed frames stay on the origin as training data for later rounds.
    """
    x = np.asarray(confirmed_samples, dtype=np.float64).reshape(-1, NUM_FEATURES)
    if len(x) == 0:
        raise EmptyInput("no confirmed samples to propagate")
    if origin_client not in topo.clients:
        raise KeyError(f"unknown client {origin_client!r}")
    server = topo.server
    if label_name in server.labels:
        raise DuplicateLabel(f"label {label_name!r} already exists")
    server.labels = server.labels.extend(label_name)
    server.params = dict(server.params)
    server.params["stage1"] = _widen_classifier(
        server.params["stage1"], len(server.labels), _seed(topo.seed, server.round, 11)
    )
    origin = topo.clients[origin_client]
    seed = _seed(topo.seed, server.round, 13) if seed is None else seed
    x = _balance_new_class(x, origin.data, seed)
    extra = FrameTable(x, np.full(len(x), label_name, dtype=object), np.zeros(len(x)))
    origin.data = FrameTable.concat([origin.data, extra])
    _distribute(topo)
    update = local_train(origin, server.params["stage1"], origin_epochs, "stage1", seed)
    server.params["stage1"] = update.params
    _distribute(topo)
    return topo


def _balance_new_class(x: np.ndarray, data: FrameTable, seed: int) -> np.ndarray:
    """Top the confirmed frames up to the origin's largest attack class with SMOTE."""
    attacks = data.labels[data.labels != NORMAL]
    target = max(np.unique(attacks, return_counts=True)[1].max() if len(attacks) else 0, len(x))
    if target == len(x) or len(x) < 2:
        return x
    synth = smote(x, SmoteConfig(int(target), min(5, len(x) - 1), seed)).points
    return np.concatenate([x, synth])


def simulate(
    topo: FederationTopology,
    config: RoundConfig,
    holdout: FrameTable | None = None,
) -> Iterable[dict]:
    """Yield the JSON-lines records of a run: topology, one line per round, final metrics."""
    yield {"type": "topology", "version": LOG_VERSION, "config": config.to_dict(), **topo.snapshot()}
    if config.rounds == 0:
        return
    for _ in range(config.rounds):
        yield {"type": "round", **run_round(topo, config, holdout).to_json()}
    final = {
        "type": "final",
        "round": topo.server.round,
        "labels": list(topo.server.labels.names),
        "global_digests": {s: p.digest() for s, p in topo.server.params.items()},
        "metrics": global_metrics(topo, holdout) if holdout is not None else None,
    }
    yield final


def client_baseline(
    client: VehicleClient,
    labels: LabelMap,
    scaler: ScalerParams,
    holdout: FrameTable,
    epochs: int,
    seed: int = 0,
) -> dict:
    """Macro report of a classifier trained on one client's data alone for ``epochs`` epochs."""
    model = build_stage1(len(labels), seed=seed)
    x, y = transform(scaler, client.data.features), labels.encode(client.data.labels)
    train(model, x, y, replace(STAGE1_TRAIN, max_epochs=epochs, early_stopping=None, seed=seed))
    known = holdout.where_label(*labels.names)
    probs = model.predict(transform(scaler, known.features))
    return macro_report(ConfusionMatrix.from_labels(labels.names, known.labels, labels.decode(probs.argmax(axis=1))))


def synthetic_federation(
    num_clients: int = 4,
    frames_per_client: int = 6000,
    seed: int = 0,
    holdout_frames: int = 4000,
) -> tuple[list[VehicleProfile], list[FrameTable], FrameTable]:
    """Non-IID partition: two vehicle profiles, each client sees two of the four attack kinds.

    Client i carries kinds i and i+1 (mod 4) so every kind lives on two
    clients and no client sees all of them. The held-out corpus mixes both
    profiles and all kinds.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    base = default_profile()
    profiles = [base, variant_profile(base, "synthetic-sedan-b", seed=_seed(seed, 99))]
    client_profiles, tables = [], []
    for i in range(num_clients):
        prof = profiles[(i * len(profiles)) // num_clients]
        kinds = (ATTACK_KINDS[i % 4], ATTACK_KINDS[(i + 1) % 4])
        frames = []
        for kind in kinds:
            frames += attack_file(kind, prof, frames_per_client // 2, seed=_seed(seed, i, 1))
        client_profiles.append(prof)
        tables.append(FrameTable.from_frames(frames))
    held = []
    per = holdout_frames // (len(profiles) * len(ATTACK_KINDS))
    for p, prof in enumerate(profiles):
        for kind in ATTACK_KINDS:
            held += attack_file(kind, prof, per, seed=_seed(seed, 1000 + p, 2))
    return client_profiles, tables, FrameTable.from_frames(held)
