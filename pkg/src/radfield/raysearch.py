"""Virtual transmitter discovery from a trained field.

A trained field concentrates rendering weight near the points where energy
enters each recorded ray.  Marching every training ray through the fine
model turns those concentrations into candidate points; density clustering
collapses the candidates into a set of virtual transmitters; a small
regressor learns how many of them serve each part of the scene.  Together
these answer the question evaluation asks at an unvisited position: in
which directions should rays be cast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_position
from .field import (
    FieldModel,
    RaySampleBatch,
    compute_weights,
    field_forward,
    hierarchical_samples,
    merge_depths,
    stratified_samples,
)
from .mlp import (
    LayerSpec,
    MlpParameters,
    OptimizerState,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .sim import Dataset

PEAK_WEIGHT_MIN = 0.05
CLUSTER_EPS = 0.25
CLUSTER_MIN_PTS = 3
ANGLE_TOL = math.radians(2.0)
K_NEIGHBORS = 6
COUNT_NET_WIDTH = 64


@dataclass(frozen=True)
class CandidatePoint:
    """A probable energy source seen along one training ray.

    Carries the scene position of the peak rendering weight, which
    measurement and which of its arrival directions produced the ray, and
    the peak weight itself.
    """

    position: np.ndarray
    measurement_id: int
    doa_index: int
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "position", as_position(self.position))
        if not (self.weight > 0):
            raise ValueError("candidate weight must be positive")


@dataclass
class VirtualTransmitterSet:
    """Cluster centroids standing in for real and mirrored transmitters.

    Centroids are listed in lexicographic (x, y, z) order so the set is
    independent of candidate enumeration order.  Any two centroids must
    sit farther apart than the clustering radius that produced them.
    """

    centroids: np.ndarray  # (K, 3)
    member_counts: np.ndarray  # (K,)
    eps: float = CLUSTER_EPS

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)
        self.member_counts = np.asarray(self.member_counts, dtype=np.int64).reshape(-1)
        if self.centroids.shape[0] != self.member_counts.shape[0]:
            raise ValueError("one member count per centroid")
        if self.member_counts.size and self.member_counts.min() < 1:
            raise ValueError("member counts must be positive")
        for a in range(self.centroids.shape[0]):
            d = np.linalg.norm(self.centroids[a + 1 :] - self.centroids[a], axis=1)
            if d.size and d.min() <= self.eps:
                raise ValueError("centroids closer than the clustering radius")

    @property
    def n_transmitters(self) -> int:
        return self.centroids.shape[0]


@dataclass
class AssignmentMap:
    """Which virtual transmitters serve each training measurement.

    ``assigned`` holds centroid indices in first-use order with duplicates
    removed; ``n_hits`` counts arrival directions that matched anything
    (before deduplication) and ``n_doas`` how many were available, which
    together give the matched fraction.
    """

    measurement_ids: list[int]
    positions: np.ndarray  # (M, 3)
    assigned: list[list[int]]
    n_doas: list[int]
    n_hits: list[int]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        m = len(self.measurement_ids)
        if self.positions.shape[0] != m or len(self.assigned) != m:
            raise ValueError("per-measurement fields must share one length")
        if len(self.n_doas) != m or len(self.n_hits) != m:
            raise ValueError("per-measurement fields must share one length")
        for ids, total in zip(self.assigned, self.n_doas):
            if len(set(ids)) != len(ids):
                raise ValueError("assigned transmitter lists must be deduplicated")
            if len(ids) > total:
                raise ValueError("cannot assign more transmitters than directions")

    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.assigned], dtype=np.float64)

    def matched_fraction(self) -> float:
        total = sum(self.n_doas)
        return sum(self.n_hits) / total if total else 0.0


def _march(model: FieldModel, origins: np.ndarray, directions: np.ndarray):
    """Fine-model depths and rendering weights along rays, shape (R, N).

    Uses the deterministic inference sampling: coarse bin midpoints, then
    fine depths at stratified quantiles of the coarse weight profile.
    """
    r = origins.shape[0]
    depths = stratified_samples(model.t_near, model.t_far, model.n_coarse, r, None)
    batch = RaySampleBatch(
        origins,
        directions,
        depths,
        np.zeros(r, dtype=np.int64),
        model.t_near,
        model.t_far,
        model.bin_width,
    )
    out_c, _ = field_forward(model, "coarse", batch)
    _, _, w_c = compute_weights(out_c.sigma, batch.spacings())
    fine_depths = hierarchical_samples(
        batch.depths, w_c, model.n_fine, None, t_near=model.t_near, t_far=model.t_far
    )
    batch_f = batch.with_depths(merge_depths(batch.depths, fine_depths))
    out_f, _ = field_forward(model, "fine", batch_f)
    _, _, w_f = compute_weights(out_f.sigma, batch_f.spacings())
    return batch_f.depths, w_f


def locate_along_ray(
    model: FieldModel,
    origin,
    direction,
    w_min: float = PEAK_WEIGHT_MIN,
    measurement_id: int = 0,
    doa_index: int = 0,
) -> CandidatePoint | None:
    """Strongest-weight point along one ray, or None if nothing clears w_min.

    The ray is marched exactly as evaluation renders it, so the returned
    position is one of the fine sample points.
    """
    origin = as_position(origin)
    direction = np.asarray(direction, dtype=np.float64)
    depths, weights = _march(model, origin[None, :], direction[None, :])
    k = int(np.argmax(weights[0]))
    peak = float(weights[0, k])
    if peak < w_min:
        return None
    return CandidatePoint(
        origin + depths[0, k] * direction, measurement_id, doa_index, peak
    )


def search_candidates(
    model: FieldModel,
    dataset: Dataset,
    split: str = "train",
    w_min: float = PEAK_WEIGHT_MIN,
    chunk_rays: int = 256,
) -> list[CandidatePoint]:
    """March every (measurement, arrival direction) ray of a split.

    Returns at most one candidate per ray; rays whose peak weight falls
    below ``w_min`` contribute nothing.
    """
    origins, dirs, meta = [], [], []
    for i in dataset.indices(split):
        m = dataset.measurements[i]
        units = m.doa_units()
        for j in range(units.shape[0]):
            origins.append(m.position)
            dirs.append(units[j])
            meta.append((int(i), j))
    candidates: list[CandidatePoint] = []
    for lo in range(0, len(origins), chunk_rays):
        o = np.stack(origins[lo : lo + chunk_rays])
        d = np.stack(dirs[lo : lo + chunk_rays])
        depths, weights = _march(model, o, d)
        peak_idx = np.argmax(weights, axis=1)
        rows = np.arange(o.shape[0])
        peaks = weights[rows, peak_idx]
        pos = o + depths[rows, peak_idx][:, None] * d
        for r in range(o.shape[0]):
            if peaks[r] >= w_min:
                mid, doa = meta[lo + r]
                candidates.append(CandidatePoint(pos[r], mid, doa, float(peaks[r])))
    return candidates


def _eps_neighbors(pos: np.ndarray, eps: float, chunk: int = 512) -> list[np.ndarray]:
    """Per-point indices within eps (self included); chunked O(n^2) scan."""
    n = pos.shape[0]
    eps2 = eps * eps
    out: list[np.ndarray] = []
    for lo in range(0, n, chunk):
        d2 = ((pos[lo : lo + chunk, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        for row in d2 <= eps2:
            out.append(np.flatnonzero(row))
    return out


def density_cluster_labels(
    positions: np.ndarray, eps: float = CLUSTER_EPS, min_pts: int = CLUSTER_MIN_PTS
) -> np.ndarray:
    """Classic density clustering; returns a label per point, -1 for noise.

    A point with at least ``min_pts`` neighbors within ``eps`` (itself
    included) is a core point; core points whose neighborhoods overlap
    chain into one cluster; a non-core point within ``eps`` of any core
    point joins the cluster of its nearest core neighbor (ties to the
    lexicographically smallest core coordinate), everything else is noise.
    Labels are canonical: clusters are numbered in lexicographic order of
    their centroids, so the labeling does not depend on input order.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    n = pos.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = _eps_neighbors(pos, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    next_label = 0
    for seed in np.flatnonzero(core):
        if labels[seed] != -1:
            continue
        stack = [int(seed)]
        labels[seed] = next_label
        while stack:  # flood fill over core-core adjacency
            p = stack.pop()
            for q in neighbors[p]:
                if core[q] and labels[q] == -1:
                    labels[q] = next_label
                    stack.append(int(q))
        next_label += 1

    for p in np.flatnonzero(~core):
        cores = [int(q) for q in neighbors[p] if core[q]]
        if not cores:
            continue
        dist = np.linalg.norm(pos[cores] - pos[p], axis=1)
        best = min(
            range(len(cores)),
            key=lambda k: (dist[k], tuple(pos[cores[k]])),
        )
        labels[p] = labels[cores[best]]

    if next_label == 0:
        return labels
    centroids = np.stack(
        [pos[labels == c].mean(axis=0) for c in range(next_label)]
    )
    order = np.lexsort((centroids[:, 2], centroids[:, 1], centroids[:, 0]))
    remap = np.empty(next_label, dtype=np.int64)
    remap[order] = np.arange(next_label)
    keep = labels != -1
    labels[keep] = remap[labels[keep]]
    return labels


def cluster_candidates(
    points: list[CandidatePoint],
    eps: float = CLUSTER_EPS,
    min_pts: int = CLUSTER_MIN_PTS,
) -> VirtualTransmitterSet:
    """Collapse candidate points into virtual transmitters.

    Noise points (too sparse to form a cluster) are discarded; each
    cluster becomes one transmitter at the arithmetic mean of its members.
    """
    if not points:
        return VirtualTransmitterSet(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), eps)
    pos = np.stack([p.position for p in points])
    labels = density_cluster_labels(pos, eps, min_pts)
    n_clusters = int(labels.max()) + 1 if np.any(labels >= 0) else 0
    centroids = np.zeros((n_clusters, 3))
    counts = np.zeros(n_clusters, dtype=np.int64)
    for c in range(n_clusters):
        members = pos[labels == c]
        centroids[c] = members.mean(axis=0)
        counts[c] = members.shape[0]
    return VirtualTransmitterSet(centroids, counts, eps)


def assign_transmitters(
    dataset: Dataset,
    vts: VirtualTransmitterSet,
    angle_tol: float = ANGLE_TOL,
    split: str = "train",
) -> AssignmentMap:
    """Match each measurement's arrival directions to visible transmitters.

    A direction is matched to the centroid minimizing the angle between
    the recorded arrival direction and the receiver-to-centroid direction,
    but only when that angle is within ``angle_tol``; unmatched directions
    are dropped and repeats within one measurement are deduplicated.
    """
    if angle_tol <= 0:
        raise ValueError("angle tolerance must be positive")
    ids, positions, assigned, n_doas, n_hits = [], [], [], [], []
    for i in dataset.indices(split):
        m = dataset.measurements[i]
        units = m.doa_units()
        hits = 0
        chosen: list[int] = []
        if vts.n_transmitters and units.shape[0]:
            offsets = vts.centroids - m.position[None, :]
            norms = np.linalg.norm(offsets, axis=1)
            ok = norms > 1e-12  # a centroid at the receiver has no bearing
            toward = np.zeros_like(offsets)
            toward[ok] = offsets[ok] / norms[ok, None]
            cosines = np.clip(units @ toward.T, -1.0, 1.0)
            angles = np.where(ok[None, :], np.arccos(cosines), np.inf)
            best = np.argmin(angles, axis=1)
            for j in range(units.shape[0]):
                if angles[j, best[j]] <= angle_tol:
                    hits += 1
                    if int(best[j]) not in chosen:
                        chosen.append(int(best[j]))
        ids.append(int(i))
        positions.append(m.position)
        assigned.append(chosen)
        n_doas.append(units.shape[0])
        n_hits.append(hits)
    return AssignmentMap(ids, np.stack(positions), assigned, n_doas, n_hits)


@dataclass
class CountNet:
    """Position -> expected number of serving virtual transmitters.

    Either a small regressor over box-normalized positions or, when every
    training measurement saw the same count, a constant.
    """

    params: MlpParameters | None
    constant: float | None
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        self.box_min = as_position(self.box_min)
        self.box_max = as_position(self.box_max)
        if (self.params is None) == (self.constant is None):
            raise ValueError("exactly one of params or constant must be set")
        if np.any(self.box_max <= self.box_min):
            raise ValueError("normalization box must have positive extent")

    def expected(self, positions: np.ndarray) -> np.ndarray:
        """Raw regression output for (n, 3) positions."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if self.constant is not None:
            return np.full(positions.shape[0], self.constant)
        span = self.box_max - self.box_min
        x = 2.0 * (positions - self.box_min) / span - 1.0
        z, _ = mlp_forward(self.params, {"x": x})
        return np.asarray(z[:, 0], dtype=np.float64)

    def count(self, position) -> int:
        """Rounded prediction, never below one."""
        value = float(self.expected(as_position(position)[None, :])[0])
        return max(1, int(np.rint(value)))


def count_net_layers() -> tuple[LayerSpec, ...]:
    return (
        LayerSpec(("x",), COUNT_NET_WIDTH),
        LayerSpec(("prev",), COUNT_NET_WIDTH),
        LayerSpec(("prev",), 1, "linear"),
    )


def fit_count_net(
    assignments: AssignmentMap,
    box_min,
    box_max,
    seed: int = 0,
    n_iterations: int = 2000,
    learning_rate: float = 1e-2,
) -> CountNet:
    """Regress assigned-transmitter counts against measurement position.

    Full-batch squared-error descent in float64, so a given seed always
    produces the same parameters.  When every count is identical the
    regression degenerates and a constant predictor is returned instead.
    """
    m = len(assignments.measurement_ids)
    if m < 10:
        raise ValueError("count regression needs at least 10 measurements")
    counts = assignments.counts()
    box_min = as_position(box_min)
    box_max = as_position(box_max)
    if np.all(counts == counts[0]):
        return CountNet(None, float(counts[0]), box_min, box_max)

    rng = np.random.default_rng(seed)
    params = init_mlp(count_net_layers(), {"x": 3}, rng, dtype=np.float64)
    opt = OptimizerState.for_params(params)
    span = box_max - box_min
    x = 2.0 * (assignments.positions - box_min) / span - 1.0
    for _ in range(n_iterations):
        z, cache = mlp_forward(params, {"x": x})
        resid = z[:, 0] - counts
        d_out = (2.0 / m) * resid
        grads = mlp_backward(params, cache, d_out[:, None])
        adam_step(params, grads, opt, learning_rate)
    return CountNet(params, None, box_min, box_max)


@dataclass
class DoaPrediction:
    """Ray directions proposed for one unvisited position.

    ``short`` flags a prediction that wanted more transmitters than the
    neighborhood vote could supply.
    """

    directions: np.ndarray  # (N, 3) unit, position toward centroid
    centroid_indices: list[int]
    n_requested: int
    short: bool


def predict_doas(
    test_position,
    assignments: AssignmentMap,
    vts: VirtualTransmitterSet,
    count_net: CountNet,
    k_neighbors: int = K_NEIGHBORS,
) -> DoaPrediction:
    """Directions to cast at a position no measurement covers.

    The k nearest training measurements vote with their assigned
    transmitters and the count regressor decides how many of the tally to
    keep.  Ties in vote count go to the candidate whose voters sit nearer
    the query, then to the lower centroid index.
    """
    if k_neighbors < 1:
        raise ValueError("need at least one neighbor")
    pos = as_position(test_position)
    dist = np.linalg.norm(assignments.positions - pos[None, :], axis=1)
    nearest = np.argsort(dist, kind="stable")[: min(k_neighbors, dist.shape[0])]

    votes: dict[int, list[float]] = {}
    for idx in nearest:
        for c in assignments.assigned[idx]:
            entry = votes.setdefault(c, [0.0, 0.0])
            entry[0] += 1.0
            entry[1] += dist[idx]
    ranked = sorted(
        votes, key=lambda c: (-votes[c][0], votes[c][1] / votes[c][0], c)
    )

    n_requested = count_net.count(pos)
    chosen: list[int] = []
    for c in ranked:
        if len(chosen) == n_requested:
            break
        offset = vts.centroids[c] - pos
        if np.linalg.norm(offset) > 1e-12:
            chosen.append(c)
    directions = np.zeros((len(chosen), 3))
    for row, c in enumerate(chosen):
        offset = vts.centroids[c] - pos
        directions[row] = offset / np.linalg.norm(offset)
    return DoaPrediction(directions, chosen, n_requested, len(chosen) < n_requested)


@dataclass
class RaySearchResult:
    """Everything evaluation needs to cast rays without recorded directions."""

    transmitters: VirtualTransmitterSet
    assignments: AssignmentMap
    count_net: CountNet
    settings: dict

    def doa_predictor(self):
        """Closure mapping a position to (n, 3) unit ray directions."""
        k = int(self.settings.get("k_neighbors", K_NEIGHBORS))

        def predict(position):
            return predict_doas(
                position, self.assignments, self.transmitters, self.count_net, k
            ).directions

        return predict


def run_raysearch(
    model: FieldModel,
    dataset: Dataset,
    w_min: float = PEAK_WEIGHT_MIN,
    eps: float = CLUSTER_EPS,
    min_pts: int = CLUSTER_MIN_PTS,
    angle_tol: float = ANGLE_TOL,
    k_neighbors: int = K_NEIGHBORS,
    seed: int = 0,
) -> RaySearchResult:
    """Full pipeline: march rays, cluster, assign, fit the count regressor."""
    candidates = search_candidates(model, dataset, "train", w_min)
    if not candidates:
        raise RuntimeError("ray search found no candidate points above w_min")
    vts = cluster_candidates(candidates, eps, min_pts)
    if vts.n_transmitters == 0:
        raise RuntimeError("ray search candidates formed no clusters")
    assignments = assign_transmitters(dataset, vts, angle_tol)
    lo, hi = dataset.scene.bounds
    count_net = fit_count_net(assignments, lo, hi, seed=seed)
    settings = {
        "w_min": w_min,
        "eps": eps,
        "min_pts": min_pts,
        "angle_tol_rad": angle_tol,
        "k_neighbors": k_neighbors,
        "count_net_seed": seed,
    }
    return RaySearchResult(vts, assignments, count_net, settings)
