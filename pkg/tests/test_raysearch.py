import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import radfield.raysearch as rs
from radfield.core import FrequencyConfig, Measurement, unit_to_direction
from radfield.field import EncodingConfig, FieldOutput, init_field_model
from radfield.io import load_raysearch, raysearch_to_dict, save_raysearch
from radfield.raysearch import (
    AssignmentMap,
    CandidatePoint,
    CountNet,
    DoaPrediction,
    RaySearchResult,
    VirtualTransmitterSet,
    assign_transmitters,
    cluster_candidates,
    density_cluster_labels,
    fit_count_net,
    locate_along_ray,
    predict_doas,
    search_candidates,
)
from radfield.sim import MATERIALS, Dataset, make_shoebox


def small_model(t_far=10.0, n_coarse=64, n_fine=64):
    rng = np.random.default_rng(3)
    return init_field_model(
        EncodingConfig(),
        np.zeros(3),
        np.full(3, 6.0),
        0.05,
        t_far,
        n_coarse,
        n_fine,
        2.4e9,
        rng,
    )


def spike_field(center, width, amplitude):
    """Stand-in forward pass: density is a bump at one ray depth."""

    def fake(model, which, batch):
        t = batch.depths
        sigma = amplitude * np.exp(-(((t - center) / width) ** 2))
        half = np.full_like(t, 0.5)
        return FieldOutput(half, half, sigma), None

    return fake


def make_candidates(positions):
    return [CandidatePoint(p, 0, k, 1.0) for k, p in enumerate(positions)]


def test_candidate_weight_must_be_positive():
    CandidatePoint(np.zeros(3), 0, 0, 0.5)
    with pytest.raises(ValueError):
        CandidatePoint(np.zeros(3), 0, 0, 0.0)
    with pytest.raises(ValueError):
        CandidatePoint(np.zeros(3), 0, 0, -1.0)


def test_locate_finds_density_spike(monkeypatch):
    model = small_model()
    monkeypatch.setattr(rs, "field_forward", spike_field(3.0, 0.02, 200.0))
    origin = np.array([0.5, 1.0, 1.5])
    direction = np.array([1.0, 0.0, 0.0])
    cand = locate_along_ray(model, origin, direction, measurement_id=7, doa_index=2)
    assert cand is not None
    assert cand.measurement_id == 7 and cand.doa_index == 2
    assert cand.weight >= rs.PEAK_WEIGHT_MIN
    assert_allclose(cand.position, origin + 3.0 * direction, atol=0.15)
    again = locate_along_ray(model, origin, direction, measurement_id=7, doa_index=2)
    assert_allclose(again.position, cand.position, rtol=0, atol=0)


def test_locate_returns_none_on_empty_field(monkeypatch):
    model = small_model()
    monkeypatch.setattr(rs, "field_forward", spike_field(3.0, 0.02, 0.0))
    assert locate_along_ray(model, np.zeros(3), np.array([1.0, 0, 0])) is None


def test_search_candidates_matches_single_ray(monkeypatch):
    model = small_model()
    monkeypatch.setattr(rs, "field_forward", spike_field(4.0, 0.05, 150.0))
    scene = make_shoebox((6.0, 6.0, 6.0), MATERIALS["pec"], (3.0, 3.0, 3.0))
    units = [
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
        np.array([0.0, 0.0, 1.0]),
    ]
    meas = [
        Measurement(np.full(3, 1.0), 1 + 0j, [unit_to_direction(u) for u in units]),
        Measurement(np.full(3, 1.5), 1 + 0j, [unit_to_direction(u) for u in units]),
    ]
    ds = Dataset(scene, FrequencyConfig(2.4e9), meas, ["train", "train"], seed=0)
    # chunk smaller than the ray count to cross a boundary
    got = search_candidates(model, ds, chunk_rays=4)
    assert len(got) == 6
    for cand in got:
        m = ds.measurements[cand.measurement_id]
        # compare against the stored unit, not the pristine one: the
        # azimuth/elevation round trip is not bit-exact
        single = locate_along_ray(
            model,
            m.position,
            m.doa_units()[cand.doa_index],
            measurement_id=cand.measurement_id,
            doa_index=cand.doa_index,
        )
        assert_allclose(cand.position, single.position, rtol=0, atol=0)
        assert cand.weight == single.weight


def test_cluster_repeated_point_forms_one_transmitter():
    pts = make_candidates([np.array([1.0, 2.0, 3.0])] * 5)
    vts = cluster_candidates(pts)
    assert vts.n_transmitters == 1
    assert_allclose(vts.centroids[0], [1.0, 2.0, 3.0], rtol=0, atol=0)
    assert vts.member_counts[0] == 5


def test_cluster_two_groups():
    rng = np.random.default_rng(11)
    a = np.array([0.5, 0.5, 0.5]) + 0.05 * rng.standard_normal((6, 3))
    b = np.array([5.0, 4.0, 2.0]) + 0.05 * rng.standard_normal((6, 3))
    vts = cluster_candidates(make_candidates(list(a) + list(b)))
    assert vts.n_transmitters == 2
    assert_allclose(vts.centroids[0], a.mean(axis=0), atol=1e-12)
    assert_allclose(vts.centroids[1], b.mean(axis=0), atol=1e-12)
    assert list(vts.member_counts) == [6, 6]


def test_cluster_drops_sparse_noise():
    cluster = [np.array([1.0, 1.0, 1.0]) + 0.01 * k for k in range(4)]
    strays = [np.array([3.0, 3.0, 3.0]), np.array([5.0, 1.0, 2.0])]
    vts = cluster_candidates(make_candidates(cluster + strays))
    assert vts.n_transmitters == 1
    assert vts.member_counts[0] == 4


def oracle_dbscan(pos, eps, min_pts):
    """Exhaustive reference: pairwise scans and fixpoint label merging."""
    n = pos.shape[0]
    close = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            close[i, j] = np.linalg.norm(pos[i] - pos[j]) <= eps
    core = close.sum(axis=1) >= min_pts
    labels = np.where(core, np.arange(n), -1)
    changed = True
    while changed:  # merge core labels until no pair disagrees
        changed = False
        for i in range(n):
            for j in range(n):
                if core[i] and core[j] and close[i, j] and labels[i] != labels[j]:
                    low = min(labels[i], labels[j])
                    labels[labels == max(labels[i], labels[j])] = low
                    changed = True
    for i in range(n):
        if core[i]:
            continue
        best = -1
        best_key = None
        for j in range(n):
            if core[j] and close[i, j]:
                key = (np.linalg.norm(pos[i] - pos[j]), tuple(pos[j]))
                if best_key is None or key < best_key:
                    best, best_key = j, key
        if best >= 0:
            labels[i] = labels[best]
    return labels


def as_partition(labels):
    groups = {}
    for idx, lab in enumerate(labels):
        if lab >= 0:
            groups.setdefault(lab, set()).add(idx)
    return {frozenset(g) for g in groups.values()}


def test_cluster_matches_exhaustive_reference():
    rng = np.random.default_rng(7)
    blobs = [
        rng.normal(center, 0.06, size=(12, 3))
        for center in ([1, 1, 1], [4, 2, 1], [2, 4, 2.5])
    ]
    scatter = rng.uniform(0.0, 5.0, size=(9, 3))
    pos = np.concatenate(blobs + [scatter])
    assert pos.shape[0] <= 50
    got = density_cluster_labels(pos, 0.25, 3)
    want = oracle_dbscan(pos, 0.25, 3)
    assert as_partition(got) == as_partition(want)
    assert set(np.flatnonzero(got == -1)) == set(np.flatnonzero(want == -1))


def test_cluster_permutation_invariant():
    rng = np.random.default_rng(19)
    pos = np.concatenate(
        [
            rng.normal([1, 1, 1], 0.05, size=(8, 3)),
            rng.normal([3, 3, 1], 0.05, size=(8, 3)),
            rng.uniform(0, 4, size=(6, 3)),
        ]
    )
    base = cluster_candidates(make_candidates(list(pos)))
    perm = rng.permutation(pos.shape[0])
    shuffled = cluster_candidates(make_candidates(list(pos[perm])))
    assert base.n_transmitters == shuffled.n_transmitters
    assert_allclose(base.centroids, shuffled.centroids, atol=1e-12)
    assert list(base.member_counts) == list(shuffled.member_counts)


def test_transmitter_set_validation():
    with pytest.raises(ValueError):
        VirtualTransmitterSet(np.zeros((2, 3)), np.array([3, 3]), 0.25)
    with pytest.raises(ValueError):
        VirtualTransmitterSet(np.array([[0.0, 0, 0], [5.0, 0, 0]]), np.array([3, 0]))


def rotated(u, axis_hint, angle):
    p = np.cross(u, axis_hint)
    p = p / np.linalg.norm(p)
    return math.cos(angle) * u + math.sin(angle) * p


def shoebox_dataset(measurements):
    scene = make_shoebox((8.0, 8.0, 4.0), MATERIALS["pec"], (4.0, 4.0, 2.0))
    return Dataset(
        scene,
        FrequencyConfig(2.4e9),
        measurements,
        ["train"] * len(measurements),
        seed=0,
    )


def test_assign_matches_within_tolerance():
    vts = VirtualTransmitterSet(
        np.array([[6.0, 1.0, 1.0], [1.0, 6.0, 1.0]]), np.array([4, 4])
    )
    pos = np.array([1.0, 1.0, 1.0])
    to_a = (vts.centroids[0] - pos) / np.linalg.norm(vts.centroids[0] - pos)
    to_b = (vts.centroids[1] - pos) / np.linalg.norm(vts.centroids[1] - pos)
    z = np.array([0.0, 0.0, 1.0])
    doas = [
        unit_to_direction(to_a),
        unit_to_direction(rotated(to_b, z, math.radians(1.0))),
        unit_to_direction(rotated(to_a, z, math.radians(5.0))),
    ]
    ds = shoebox_dataset([Measurement(pos, 1 + 0j, doas)])
    amap = assign_transmitters(ds, vts, math.radians(2.0))
    assert amap.assigned == [[0, 1]]
    assert amap.n_doas == [3] and amap.n_hits == [2]
    assert amap.matched_fraction() == pytest.approx(2.0 / 3.0)


def test_assign_dedupes_repeated_transmitter():
    vts = VirtualTransmitterSet(np.array([[6.0, 1.0, 1.0]]), np.array([4]))
    pos = np.array([1.0, 1.0, 1.0])
    toward = (vts.centroids[0] - pos) / np.linalg.norm(vts.centroids[0] - pos)
    z = np.array([0.0, 0.0, 1.0])
    doas = [
        unit_to_direction(toward),
        unit_to_direction(rotated(toward, z, math.radians(0.5))),
    ]
    ds = shoebox_dataset([Measurement(pos, 1 + 0j, doas)])
    amap = assign_transmitters(ds, vts, math.radians(2.0))
    assert amap.assigned == [[0]]
    assert amap.n_hits == [2]


def uniform_assignments(positions, per_measurement):
    return AssignmentMap(
        list(range(len(positions))),
        np.asarray(positions),
        [list(per_measurement) for _ in positions],
        [len(per_measurement) for _ in positions],
        [len(per_measurement) for _ in positions],
    )


def test_count_net_constant_when_counts_uniform():
    rng = np.random.default_rng(0)
    positions = rng.uniform(0, 5, size=(12, 3))
    amap = uniform_assignments(positions, [0, 1])
    net = fit_count_net(amap, np.zeros(3), np.full(3, 5.0))
    assert net.constant == 2.0
    assert net.count(np.array([1.0, 1.0, 1.0])) == 2


def test_count_net_requires_enough_measurements():
    amap = uniform_assignments(np.random.default_rng(0).uniform(0, 1, (5, 3)), [0])
    with pytest.raises(ValueError):
        fit_count_net(amap, np.zeros(3), np.ones(3))


def test_count_net_learns_position_pattern():
    rng = np.random.default_rng(5)
    positions = rng.uniform(0, 6, size=(40, 3))
    counts = np.where(positions[:, 0] < 3.0, 1, 5)
    assigned = [list(range(c)) for c in counts]
    amap = AssignmentMap(
        list(range(40)), positions, assigned, [int(c) for c in counts], [int(c) for c in counts]
    )
    net = fit_count_net(amap, np.zeros(3), np.full(3, 6.0), seed=2)
    predicted = np.array([net.count(p) for p in positions])
    assert np.mean(np.abs(predicted - counts) <= 1) >= 0.8

    again = fit_count_net(amap, np.zeros(3), np.full(3, 6.0), seed=2)
    assert all(
        np.array_equal(a, b) for a, b in zip(net.params.weights, again.params.weights)
    )


def test_count_net_rounding_floor():
    net = CountNet(None, 0.2, np.zeros(3), np.ones(3))
    assert net.count(np.full(3, 0.5)) == 1  # never predicts zero rays


def line_assignments():
    # eight receivers along +x, farther is later; distinct distances
    positions = np.array([[float(k + 1), 0.0, 0.0] for k in range(8)])
    assigned = []
    for k in range(8):
        ids = [0]
        if k < 3:
            ids.append(1)  # near voters
        elif k < 6:
            ids.append(2)  # far voters
        assigned.append(ids)
    n = [len(a) for a in assigned]
    return AssignmentMap(list(range(8)), positions, assigned, n, n)


def test_predict_doas_votes_and_tiebreaks():
    amap = line_assignments()
    vts = VirtualTransmitterSet(
        np.array([[0.0, 5.0, 0.0], [0.0, 0.0, 5.0], [5.0, 0.0, 0.0]]),
        np.array([3, 3, 3]),
    )
    query = np.zeros(3)
    # six nearest voters: all carry 0; 1 and 2 tie at three votes each,
    # but 1's voters sit nearer the query
    pred = predict_doas(query, amap, vts, CountNet(None, 2.0, np.zeros(3), np.ones(3)))
    assert pred.centroid_indices == [0, 1]
    assert not pred.short and pred.n_requested == 2
    assert_allclose(np.linalg.norm(pred.directions, axis=1), 1.0, atol=1e-12)
    expected = vts.centroids[1] / np.linalg.norm(vts.centroids[1])
    assert_allclose(pred.directions[1], expected, atol=1e-12)

    wanting = predict_doas(
        query, amap, vts, CountNet(None, 5.0, np.zeros(3), np.ones(3))
    )
    assert wanting.short and wanting.n_requested == 5
    assert wanting.centroid_indices == [0, 1, 2]
    assert wanting.directions.shape == (3, 3)


def test_predict_doas_lower_index_breaks_exact_ties():
    positions = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    amap = AssignmentMap(
        [0, 1, 2], positions, [[2, 1], [2, 1], [2, 1]], [2, 2, 2], [2, 2, 2]
    )
    vts = VirtualTransmitterSet(
        np.array([[0.0, 5.0, 0.0], [0.0, 0.0, 5.0], [5.0, 0.0, 0.0]]),
        np.array([3, 3, 3]),
    )
    pred = predict_doas(
        np.zeros(3), amap, vts, CountNet(None, 1.0, np.zeros(3), np.ones(3)), 3
    )
    assert pred.centroid_indices == [1]  # same votes, same voters: lower index


def test_raysearch_product_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    positions = rng.uniform(0, 6, size=(40, 3))
    counts = np.where(positions[:, 0] < 3.0, 1, 5)
    amap = AssignmentMap(
        list(range(40)),
        positions,
        [list(range(c)) for c in counts],
        [int(c) for c in counts],
        [int(c) for c in counts],
    )
    net = fit_count_net(amap, np.zeros(3), np.full(3, 6.0), seed=2, n_iterations=50)
    vts = VirtualTransmitterSet(
        np.array(
            [
                [1.0, 2.0, 0.5],
                [4.0, 4.0, 2.0],
                [-2.0, 1.0, 1.0],
                [7.0, 1.0, 2.5],
                [3.0, -3.0, 0.5],
            ]
        ),
        np.array([10, 30, 8, 5, 4]),
    )
    result = RaySearchResult(
        vts, amap, net, {"w_min": 0.05, "eps": 0.25, "k_neighbors": 6}
    )
    path = tmp_path / "search.json"
    save_raysearch(path, result)
    loaded = load_raysearch(path)
    assert raysearch_to_dict(loaded) == raysearch_to_dict(result)
    for a, b in zip(loaded.count_net.params.weights, net.params.weights):
        assert np.array_equal(a, b)  # repr round-trip is exact

    twice = tmp_path / "again.json"
    save_raysearch(twice, loaded)
    assert path.read_bytes() == twice.read_bytes()

    predictor = loaded.doa_predictor()
    dirs = predictor(np.array([5.0, 3.0, 1.0]))
    assert dirs.shape[1] == 3
    assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
