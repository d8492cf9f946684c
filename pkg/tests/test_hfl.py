import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from canids import hfl, traffic
from canids.codec import FrameTable, fit_scaler, transform
from canids.detector import detect_batch
from canids.errors import DuplicateLabel, EmptyInput, EmptyTopology, EmptyUpdates, LayoutMismatch
from canids.hfl import (
    RoundConfig,
    edge_aggregate,
    global_aggregate,
    init_topology,
    local_train,
    profile_key,
    propagate_new_attack,
    run_round,
    simulate,
    synthetic_federation,
)
from canids.nn import Dense, ParameterSet, SequentialModel

TEMPLATE = SequentialModel([Dense(2)], "mse", (3,)).get_parameters()


def _ps(values):
    return TEMPLATE.with_values(np.asarray(values, dtype=float))


def _scalar_ps(v):
    return ParameterSet(np.array([float(v)]), ())


@pytest.fixture(scope="module")
def fed():
    return synthetic_federation(num_clients=4, frames_per_client=1200, seed=0, holdout_frames=800)


def _topo(fed, seed=0):
    profiles, tables, _ = fed
    return init_topology(2, 2, profiles, tables, seed=seed)


# aggregation

def test_equal_counts_midpoint():
    out, total = edge_aggregate([(_ps(np.zeros(8)), 5), (_ps(np.full(8, 2.0)), 5)])
    np.testing.assert_array_equal(out.values, np.ones(8))
    assert total == 10


def test_single_update_identity(rng):
    p = _ps(rng.normal(size=8))
    out, total = edge_aggregate([(p, 7)])
    np.testing.assert_array_equal(out.values, p.values)
    np.testing.assert_array_equal(global_aggregate([(p, 7)]).values, p.values)


def test_one_three_weighting():
    out, _ = edge_aggregate([(_scalar_ps(0.0), 1), (_scalar_ps(4.0), 3)])
    assert out.values[0] == 3.0


def test_aggregation_errors():
    with pytest.raises(EmptyUpdates):
        edge_aggregate([])
    with pytest.raises(EmptyUpdates):
        edge_aggregate([(_ps(np.zeros(8)), 0)])
    with pytest.raises(LayoutMismatch):
        edge_aggregate([(_ps(np.zeros(8)), 1), (_scalar_ps(1.0), 1)])


groups = st.lists(
    st.lists(st.tuples(st.integers(1, 5000), st.integers(0, 2**32 - 1)), min_size=1, max_size=4),
    min_size=1,
    max_size=3,
).filter(lambda g: sum(map(len, g)) <= 12)


@given(groups)
def test_hierarchical_equals_flat(g):
    leaves = [[(_ps(np.random.default_rng(s).normal(scale=10, size=8)), n) for n, s in grp] for grp in g]
    hier = global_aggregate([edge_aggregate(grp) for grp in leaves])
    flat, _ = edge_aggregate([u for grp in leaves for u in grp])
    np.testing.assert_allclose(hier.values, flat.values, rtol=0, atol=1e-12)


@given(groups, st.randoms(use_true_random=False))
def test_edge_order_irrelevant(g, rnd):
    edges = [edge_aggregate([(_ps(np.random.default_rng(s).normal(size=8)), n) for n, s in grp]) for grp in g]
    shuffled = list(edges)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(global_aggregate(edges).values, global_aggregate(shuffled).values, rtol=0, atol=1e-12)


# topology

def test_two_by_three_layout(fed):
    profiles, tables, _ = fed
    topo = init_topology(2, 3, profiles + profiles[:2], tables + tables[:2], seed=0)
    assert len(topo.clients) == 6
    attached = [c for a in topo.aggregators for c in a.client_ids]
    assert sorted(attached) == sorted(topo.clients)


def test_same_profile_same_aggregator(fed):
    topo = _topo(fed)
    for agg in topo.aggregators:
        assert len({topo.clients[c].profile_key for c in agg.client_ids}) == 1
    assert profile_key(fed[0][0]) == profile_key(traffic.default_profile())


def test_layout_deterministic(fed):
    assert _topo(fed).snapshot() == _topo(fed).snapshot()


def test_empty_topology(fed):
    with pytest.raises(EmptyTopology):
        init_topology(1, 1, [], [])
    with pytest.raises(ValueError):
        init_topology(1, 1, fed[0][:2], fed[1][:2])


def test_pooled_scaler_matches_central_fit(fed):
    topo = _topo(fed)
    central = fit_scaler(FrameTable.concat(fed[1]).features)
    np.testing.assert_allclose(topo.server.scaler.mean, central.mean, rtol=1e-12)
    np.testing.assert_allclose(topo.server.scaler.std, central.std, rtol=1e-12)


# local training

def test_zero_epochs_returns_global(fed):
    topo = _topo(fed)
    g = topo.server.params["stage1"]
    up = local_train(topo.clients["v0"], g, 0)
    assert up.params is g and up.sample_count == len(fed[1][0])


def test_layout_mismatch_rejected(fed):
    topo = _topo(fed)
    with pytest.raises(LayoutMismatch):
        local_train(topo.clients["v0"], TEMPLATE, 1)


def test_identical_clients_identical_params(fed):
    profiles, tables, _ = fed
    topo = init_topology(1, 2, [profiles[0]] * 2, [tables[0]] * 2, seed=3)
    g = topo.server.params["stage1"]
    a = local_train(topo.clients["v0"], g, 2, seed=9)
    b = local_train(topo.clients["v1"], g, 2, seed=9)
    np.testing.assert_array_equal(a.params.values, b.params.values)


def test_local_training_lowers_local_loss(fed):
    topo = _topo(fed)
    client = topo.clients["v1"]
    g = topo.server.params["stage1"]
    x = transform(topo.server.scaler, client.data.features)
    y = topo.server.labels.encode(client.data.labels)
    model = topo.server.model("stage1")
    before = model.evaluate_loss(x, y)
    model.set_parameters(local_train(client, g, 3, seed=1).params)
    assert model.evaluate_loss(x, y) < before


# rounds

def test_round_counter_and_report(fed):
    topo = _topo(fed)
    rep = run_round(topo, RoundConfig(local_epochs=1, stage2_max_frames=200), fed[2])
    assert topo.server.round == 1 and rep.round == 1
    assert set(rep.thresholds) == set(topo.clients)
    # only digests, counts and losses leave a client
    blob = json.dumps(rep.to_json())
    assert "features" not in blob
    assert all(isinstance(v, float) for d in rep.train_loss.values() for v in d.values())


def test_identical_data_full_participation(fed):
    profiles, tables, _ = fed
    topo = init_topology(2, 2, [profiles[0]] * 4, [tables[0]] * 4, seed=5)
    cfg = RoundConfig(local_epochs=1, stages=("stage1",), seed=2)
    g0 = topo.server.params["stage1"]
    solo = local_train(topo.clients["v2"], g0, 1, "stage1", hfl._seed(cfg.seed, topo.seed, 0, 0))
    run_round(topo, cfg)
    np.testing.assert_allclose(topo.server.params["stage1"].values, solo.params.values, rtol=0, atol=1e-12)


def test_partial_selection(fed):
    topo = _topo(fed)
    rep = run_round(topo, RoundConfig(clients_per_aggregator=1, local_epochs=1, stages=("stage1",)))
    assert all(len(v) == 1 for v in rep.selected.values())
    # unselected clients still hold the new global model
    digest = topo.server.params["stage1"].digest()
    assert all(c.ids.stage1.get_parameters().digest() == digest for c in topo.clients.values())


def test_simulation_deterministic(fed):
    cfg = RoundConfig(local_epochs=1, stage2_max_frames=150, rounds=2)
    a = list(simulate(_topo(fed), cfg, fed[2]))
    b = list(simulate(_topo(fed), cfg, fed[2]))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert [r["type"] for r in a] == ["topology", "round", "round", "final"]


def test_zero_rounds_snapshot_only(fed):
    recs = list(simulate(_topo(fed), RoundConfig(rounds=0)))
    assert len(recs) == 1 and recs[0]["type"] == "topology"


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(weighting="uniform")
    with pytest.raises(ValueError):
        RoundConfig(local_epochs=-1)
    cfg = RoundConfig(clients_per_aggregator=2, rounds=3)
    assert RoundConfig.from_dict(cfg.to_dict()) == cfg


# new-attack propagation

def _new_attack(seed, n=300, target=848):
    prof = traffic.default_profile()
    normal = traffic.gen_normal(prof, count=2000, seed=seed)
    spec = traffic.AttackSpec("RpmSpoof", ((0.5, 0.5 + n / 1000),), seed=seed, target_id=target)
    frames = [f for f in traffic.inject_spoof(normal, spec, prof) if f.label != "Normal"]
    return FrameTable.from_frames(frames).features


def test_propagation_grows_labels_everywhere(fed):
    topo = _topo(fed)
    before = topo.server.labels
    old_hidden = topo.server.params["stage1"].tensor(0, "kernel").copy()
    propagate_new_attack(topo, _new_attack(1), "BrakeSpoof", "v0", origin_epochs=0)
    assert len(topo.server.labels) == len(before) + 1
    assert topo.server.labels.names[:-1] == before.names
    for c in topo.clients.values():
        assert c.ids.labels == topo.server.labels
        assert c.ids.stage1.output_shape[-1] == len(before) + 1
    # with no fine-tuning the widened model keeps every old weight
    np.testing.assert_array_equal(topo.server.params["stage1"].tensor(0, "kernel"), old_hidden)
    assert "BrakeSpoof" in set(topo.clients["v0"].data.labels)
    assert "BrakeSpoof" not in set(topo.clients["v1"].data.labels)


def test_propagation_errors(fed):
    topo = _topo(fed)
    with pytest.raises(EmptyInput):
        propagate_new_attack(topo, np.zeros((0, 9)), "X", "v0")
    with pytest.raises(DuplicateLabel):
        propagate_new_attack(topo, _new_attack(1, 20), "DoS", "v0")
    with pytest.raises(KeyError):
        propagate_new_attack(topo, _new_attack(1, 20), "X", "nobody")


def test_rounds_after_propagation_keep_growing_map(fed):
    topo = _topo(fed)
    propagate_new_attack(topo, _new_attack(2), "BrakeSpoof", "v0", origin_epochs=2)
    run_round(topo, RoundConfig(local_epochs=1, stages=("stage1",)))
    assert topo.server.labels.names[-1] == "BrakeSpoof"
    assert topo.server.model("stage1").output_shape[-1] == 6


@pytest.mark.slow
@pytest.mark.xfail(reason="FedAvg dilutes a class held by a single client; retention is seed-dependent", strict=False)
def test_new_attack_reaches_other_clients_after_three_rounds():
    profiles, tables, hold = synthetic_federation(seed=1)
    topo = init_topology(2, 2, profiles, tables, seed=1)
    for _ in simulate(topo, RoundConfig(local_epochs=5, rounds=5), hold):
        pass
    confirmed, test = _new_attack(5, target=608), _new_attack(6, target=608)
    res = detect_batch(topo.clients["v0"].ids, confirmed)
    propagate_new_attack(topo, confirmed[res.verdicts == "anomaly"], "BrakeSpoof", "v0")
    for _ in range(3):
        run_round(topo, RoundConfig(local_epochs=1))
    for cid in ("v1", "v2", "v3"):
        assert (detect_batch(topo.clients[cid].ids, test).predicted == "BrakeSpoof").mean() >= 0.90
