"""Image-method multipath simulator.

Propagation between a fixed transmitter and arbitrary receiver positions is
modeled as a sum of specular paths: the direct ray plus up to ``max_order``
reflections off planar convex surfaces.  Reflected paths are found by
mirroring the transmitter recursively across surfaces and unfolding the
straight segment from each image back to the receiver.  Every reflection
applies a Fresnel coefficient for a perpendicularly polarized wave.

All geometry runs in float64; results are deterministic for a given scene,
receiver, and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    VACUUM_PERMITTIVITY,
    ComplexValue,
    Direction,
    FrequencyConfig,
    Measurement,
    as_position,
    free_space_gain,
    multipath_sum,
    unit_to_direction,
)

# geometric tolerances, meters
COPLANAR_TOL = 1e-9
EDGE_TOL = 1e-9
ENDPOINT_TOL = 1e-9

CUBIC_FEET_PER_CUBIC_METER = 35.3147


class ShadowedReceiverError(RuntimeError):
    """No propagation path reaches the receiver."""


@dataclass(frozen=True)
class Material:
    """Electromagnetic surface material.

    ``kind`` is either ``"perfect_reflector"`` (reflection coefficient -1
    at all angles) or ``"dielectric"`` with relative permittivity and
    conductivity in S/m.
    """

    name: str
    kind: str = "dielectric"
    permittivity: float = 1.0
    conductivity: float = 0.0

    def __post_init__(self):
        if self.kind not in ("perfect_reflector", "dielectric"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        if self.kind == "dielectric":
            if self.permittivity < 1.0:
                raise ValueError("relative permittivity must be >= 1")
            if self.conductivity < 0.0:
                raise ValueError("conductivity must be >= 0")


# typical building materials around 2.4 GHz
MATERIALS = {
    "pec": Material("pec", "perfect_reflector"),
    "concrete": Material("concrete", "dielectric", 5.24, 0.123),
    "brick": Material("brick", "dielectric", 3.91, 0.023),
    "glass": Material("glass", "dielectric", 6.31, 0.023),
    "wood": Material("wood", "dielectric", 1.99, 0.012),
    "plasterboard": Material("plasterboard", "dielectric", 2.73, 0.036),
}


class Surface:
    """A planar convex polygon with a material.

    Vertices must be coplanar within 1e-9 m and enclose a nonzero area.
    The unit normal follows the vertex winding (right-hand rule); the
    reflection and intersection math is insensitive to its sign.
    """

    def __init__(self, vertices, material: Material):
        verts = np.asarray(vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 3:
            raise ValueError("vertices must have shape (n >= 3, 3)")
        self.vertices = verts
        self.material = material

        # Newell's method: robust normal whose magnitude is twice the area
        n = np.zeros(3)
        for i in range(len(verts)):
            a = verts[i]
            b = verts[(i + 1) % len(verts)]
            n[0] += (a[1] - b[1]) * (a[2] + b[2])
            n[1] += (a[2] - b[2]) * (a[0] + b[0])
            n[2] += (a[0] - b[0]) * (a[1] + b[1])
        area2 = float(np.linalg.norm(n))
        if area2 <= 1e-12:
            raise ValueError("degenerate surface: zero area")
        self.normal = n / area2
        self.area = 0.5 * area2
        self.offset = float(self.normal @ verts[0])

        dev = np.abs((verts - verts[0]) @ self.normal)
        if dev.max() > COPLANAR_TOL:
            raise ValueError(f"vertices not coplanar within {COPLANAR_TOL} m")

        # in-plane orthonormal basis for 2-D point-in-polygon tests
        e1 = verts[1] - verts[0]
        e1 = e1 / np.linalg.norm(e1)
        self._e1 = e1
        self._e2 = np.cross(self.normal, e1)
        self._verts2d = (verts - verts[0]) @ np.stack([self._e1, self._e2], axis=1)

        v2 = self._verts2d
        m = len(v2)
        cross_signs = []
        for i in range(m):
            a = v2[(i + 1) % m] - v2[i]
            b = v2[(i + 2) % m] - v2[(i + 1) % m]
            cr = a[0] * b[1] - a[1] * b[0]
            if abs(cr) > 1e-12:
                cross_signs.append(math.copysign(1.0, cr))
        if not cross_signs or min(cross_signs) != max(cross_signs):
            raise ValueError("surface polygon must be convex")
        self._winding = cross_signs[0]

        # inward edge normals scaled to unit length: distance-to-edge test
        edges = np.roll(v2, -1, axis=0) - v2
        lengths = np.linalg.norm(edges, axis=1)
        if lengths.min() <= 1e-12:
            raise ValueError("surface polygon has a zero-length edge")
        inward = np.stack([-edges[:, 1], edges[:, 0]], axis=1) * self._winding
        self._edge_normals = inward / lengths[:, None]
        self._edge_offsets = np.einsum("ij,ij->i", self._edge_normals, v2)

    def contains(self, point, tol: float = EDGE_TOL) -> bool:
        """True if an in-plane point lies inside the polygon within ``tol`` m."""
        p = np.asarray(point, dtype=np.float64) - self.vertices[0]
        p2 = np.array([p @ self._e1, p @ self._e2])
        dist = self._edge_normals @ p2 - self._edge_offsets
        return bool(dist.min() >= -tol)

    def mirror(self, point) -> np.ndarray:
        """Reflect a point across the surface plane."""
        p = np.asarray(point, dtype=np.float64)
        return p - 2.0 * (p @ self.normal - self.offset) * self.normal

    def plane_distance(self, point) -> float:
        return float(np.asarray(point) @ self.normal - self.offset)

    def distance(self, point) -> float:
        """Euclidean distance from a point to the polygon (not its plane)."""
        p = np.asarray(point, dtype=np.float64)
        d_plane = self.plane_distance(p)
        foot = p - d_plane * self.normal
        if self.contains(foot, tol=0.0):
            return abs(d_plane)
        best = math.inf
        verts = self.vertices
        for i in range(len(verts)):
            a = verts[i]
            b = verts[(i + 1) % len(verts)]
            ab = b - a
            t = float(np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0))
            best = min(best, float(np.linalg.norm(p - (a + t * ab))))
        return best

    def segment_intersection(self, p, q, endpoint_tol: float = ENDPOINT_TOL):
        """Intersection point of segment p->q with the polygon, or None.

        Intersections within ``endpoint_tol`` m of either endpoint are
        excluded, so segments that start or end on a surface do not count
        as hitting it.  Segments parallel to the plane never intersect.
        """
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        seg = q - p
        denom = float(seg @ self.normal)
        seg_len = float(np.linalg.norm(seg))
        if seg_len == 0.0 or abs(denom) < 1e-15 * seg_len:
            return None
        t = (self.offset - float(p @ self.normal)) / denom
        if t < 0.0 or t > 1.0:
            return None
        x = p + t * seg
        if np.linalg.norm(x - p) <= endpoint_tol or np.linalg.norm(x - q) <= endpoint_tol:
            return None
        if not self.contains(x):
            return None
        return x


@dataclass
class SceneGeometry:
    """Surfaces, a transmitter, and an axis-aligned bounding box.

    ``bounds`` defaults to the tight box around all surface vertices and
    the transmitter; scenes without surfaces need explicit bounds before
    dataset generation.
    """

    surfaces: list[Surface]
    transmitter: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.transmitter = as_position(self.transmitter)
        if self.bounds is None and self.surfaces:
            pts = np.concatenate(
                [s.vertices for s in self.surfaces] + [self.transmitter[None, :]]
            )
            self.bounds = (pts.min(axis=0), pts.max(axis=0))
        elif self.bounds is not None:
            lo = as_position(self.bounds[0])
            hi = as_position(self.bounds[1])
            if np.any(hi <= lo):
                raise ValueError("bounds must satisfy min < max per axis")
            self.bounds = (lo, hi)

    @property
    def volume_m3(self) -> float:
        if self.bounds is None:
            raise ValueError("scene has no bounds")
        lo, hi = self.bounds
        return float(np.prod(hi - lo))

    def blocked(self, p, q, endpoint_tol: float = ENDPOINT_TOL) -> bool:
        """True if any surface intersects the open segment p->q."""
        for s in self.surfaces:
            if s.segment_intersection(p, q, endpoint_tol) is not None:
                return True
        return False


def make_shoebox(dims, material: Material, transmitter) -> SceneGeometry:
    """Rectangular room [0, dims] with six walls of one material."""
    dx, dy, dz = (float(v) for v in dims)
    if min(dx, dy, dz) <= 0:
        raise ValueError("room dimensions must be positive")

    def rect(a, b, c, d):
        return Surface(np.array([a, b, c, d], dtype=np.float64), material)

    walls = [
        rect([0, 0, 0], [dx, 0, 0], [dx, dy, 0], [0, dy, 0]),  # floor z=0
        rect([0, 0, dz], [dx, 0, dz], [dx, dy, dz], [0, dy, dz]),  # ceiling
        rect([0, 0, 0], [0, dy, 0], [0, dy, dz], [0, 0, dz]),  # x=0
        rect([dx, 0, 0], [dx, dy, 0], [dx, dy, dz], [dx, 0, dz]),  # x=dx
        rect([0, 0, 0], [dx, 0, 0], [dx, 0, dz], [0, 0, dz]),  # y=0
        rect([0, dy, 0], [dx, dy, 0], [dx, dy, dz], [0, dy, dz]),  # y=dy
    ]
    return SceneGeometry(walls, as_position(transmitter))


@dataclass(frozen=True)
class ImageChain:
    """A mirrored transmitter: final image position plus the mirror chain."""

    sequence: tuple[int, ...]
    positions: np.ndarray  # (order + 1, 3): tx image after each mirror

    @property
    def order(self) -> int:
        return len(self.sequence)

    @property
    def image(self) -> np.ndarray:
        return self.positions[-1]


def enumerate_images(scene: SceneGeometry, max_order: int) -> list[ImageChain]:
    """All mirror-image chains up to ``max_order`` reflections.

    Consecutive reflections off the same surface are skipped (the image
    would coincide with its parent).  The order-0 chain (the transmitter
    itself, for the direct path) is included first; deeper orders follow
    in breadth-first, surface-index order.
    """
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    chains = [ImageChain((), scene.transmitter[None, :].copy())]
    frontier = chains[:]
    for _ in range(max_order):
        nxt = []
        for chain in frontier:
            last = chain.sequence[-1] if chain.sequence else -1
            for idx, s in enumerate(scene.surfaces):
                if idx == last:
                    continue
                pos = np.vstack([chain.positions, s.mirror(chain.image)])
                nxt.append(ImageChain(chain.sequence + (idx,), pos))
        chains.extend(nxt)
        frontier = nxt
    return chains


def reflection_coefficient(
    material: Material, incidence_angle_rad: float, frequency_hz: float
) -> ComplexValue:
    """Fresnel reflection coefficient, perpendicular (TE) polarization.

    The incidence angle is measured from the surface normal and must lie
    in [0, pi/2); grazing incidence raises.  A perfect reflector returns
    -1 regardless of angle.  For a dielectric with relative permittivity
    eps_r and conductivity sigma the effective permittivity is
    ``eta = eps_r - j sigma / (2 pi f eps0)`` and

        r = (cos t - sqrt(eta - sin^2 t)) / (cos t + sqrt(eta - sin^2 t)).
    """
    if not (0.0 <= incidence_angle_rad < math.pi / 2):
        raise ValueError("incidence angle must lie in [0, pi/2)")
    if material.kind == "perfect_reflector":
        return -1.0 + 0.0j
    if frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    eta = complex(
        material.permittivity,
        -material.conductivity / (2.0 * math.pi * frequency_hz * VACUUM_PERMITTIVITY),
    )
    ct = math.cos(incidence_angle_rad)
    st2 = math.sin(incidence_angle_rad) ** 2
    root = np.sqrt(eta - st2)  # principal branch: Re >= 0
    return complex((ct - root) / (ct + root))


@dataclass
class PathRecord:
    """One specular propagation path from the transmitter to a receiver."""

    order: int
    surface_indices: tuple[int, ...]
    reflection_points: np.ndarray  # (order, 3)
    total_length: float
    gain: ComplexValue
    arrival: Direction
    image_position: np.ndarray

    def __post_init__(self):
        if self.total_length <= 0:
            raise ValueError("path length must be positive")


def trace_path(
    scene: SceneGeometry,
    chain: ImageChain,
    receiver,
    frequency_hz: float,
) -> PathRecord | None:
    """Unfold one image chain into a physical path, or None if invalid.

    Walking backward from the receiver toward successive images yields the
    reflection points; the path is rejected if any reflection point misses
    its polygon, any segment is blocked by a surface, or the geometry is
    degenerate (zero-length segment, grazing reflection).
    """
    rx = as_position(receiver)
    seq = chain.sequence

    if not seq:
        d = float(np.linalg.norm(scene.transmitter - rx))
        if d <= ENDPOINT_TOL:
            raise ValueError("receiver coincides with the transmitter")
        if scene.blocked(scene.transmitter, rx):
            return None
        return PathRecord(
            order=0,
            surface_indices=(),
            reflection_points=np.zeros((0, 3)),
            total_length=d,
            gain=free_space_gain(d, frequency_hz),
            arrival=unit_to_direction(scene.transmitter - rx),
            image_position=scene.transmitter.copy(),
        )

    # backward unfolding: intersect rx->image_k with surface k, then the
    # found point with image_{k-1}, and so on down to the transmitter
    points_rev = []
    target = rx
    for m in range(len(seq), 0, -1):
        surf = scene.surfaces[seq[m - 1]]
        image = chain.positions[m]
        hit = _plane_point(surf, target, image)
        if hit is None or not surf.contains(hit):
            return None
        points_rev.append(hit)
        target = hit

    pts = [scene.transmitter] + points_rev[::-1] + [rx]
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        seg = float(np.linalg.norm(b - a))
        if seg <= ENDPOINT_TOL:
            return None
        total += seg

    for a, b in zip(pts[:-1], pts[1:]):
        if scene.blocked(a, b):
            return None

    gain = free_space_gain(total, frequency_hz)
    for m, sidx in enumerate(seq):
        surf = scene.surfaces[sidx]
        q = pts[m + 1]
        incoming = q - pts[m]
        incoming = incoming / np.linalg.norm(incoming)
        cos_t = abs(float(incoming @ surf.normal))
        theta = math.acos(min(1.0, cos_t))
        if theta >= math.pi / 2 - 1e-12:
            return None
        gain *= reflection_coefficient(surf.material, theta, frequency_hz)

    return PathRecord(
        order=len(seq),
        surface_indices=seq,
        reflection_points=np.array(points_rev[::-1]),
        total_length=total,
        gain=gain,
        arrival=unit_to_direction(pts[-2] - rx),
        image_position=chain.image.copy(),
    )


def _plane_point(surface: Surface, frm, to):
    """Point where segment frm->to crosses the surface plane, strictly interior."""
    seg = to - frm
    denom = float(seg @ surface.normal)
    seg_len = float(np.linalg.norm(seg))
    if seg_len == 0.0 or abs(denom) < 1e-15 * seg_len:
        return None
    t = (surface.offset - float(frm @ surface.normal)) / denom
    if t <= 1e-12 or t >= 1.0 - 1e-12:
        return None
    return frm + t * seg


def simulate_channel(
    scene: SceneGeometry,
    receiver,
    frequency_hz: float,
    max_order: int = 2,
    images: list[ImageChain] | None = None,
) -> tuple[ComplexValue, list[PathRecord]]:
    """Complex channel at a receiver as the coherent sum of valid paths.

    Returns the channel and the contributing paths sorted by increasing
    length.  Precomputed ``images`` (from :func:`enumerate_images`) can be
    passed to amortize enumeration over many receivers.  Raises
    ShadowedReceiverError when no path reaches the receiver.
    """
    if images is None:
        images = enumerate_images(scene, max_order)
    paths = []
    for chain in images:
        rec = trace_path(scene, chain, receiver, frequency_hz)
        if rec is not None:
            paths.append(rec)
    if not paths:
        raise ShadowedReceiverError("receiver is in complete shadow")
    paths.sort(key=lambda p: (p.total_length, p.order, p.surface_indices))
    return multipath_sum(p.gain for p in paths), paths


@dataclass
class Dataset:
    """Measurements over one scene: channels, arrival directions, a split."""

    scene: SceneGeometry
    frequency: FrequencyConfig
    measurements: list[Measurement]
    split: list[str]
    seed: int
    max_order: int = 2
    noise_snr_db: float | None = None
    noise_mode: str | None = None

    def __post_init__(self):
        if len(self.split) != len(self.measurements):
            raise ValueError("split length must match measurements")
        for s in self.split:
            if s not in ("train", "test"):
                raise ValueError(f"invalid split label {s!r}")

    def indices(self, which: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == which], dtype=int)

    def channels(self) -> np.ndarray:
        return np.array([m.channel for m in self.measurements], dtype=np.complex128)

    def positions(self) -> np.ndarray:
        return np.stack([m.position for m in self.measurements])

    @property
    def density_per_m3(self) -> float:
        return len(self.measurements) / self.scene.volume_m3

    @property
    def density_per_ft3(self) -> float:
        return self.density_per_m3 / CUBIC_FEET_PER_CUBIC_METER


def generate_dataset(
    scene: SceneGeometry,
    frequency: FrequencyConfig,
    n_receivers: int,
    train_fraction: float = 0.8,
    seed: int = 0,
    max_order: int = 2,
    min_clearance: float = 0.1,
) -> Dataset:
    """Simulate channels at receivers sampled uniformly inside the scene box.

    Positions closer than ``min_clearance`` to any surface or the
    transmitter are rejected and redrawn, as are fully shadowed positions;
    more than 1000 attempts for a single receiver raises.  The train/test
    split takes ``floor(n * train_fraction)`` receivers for training via a
    seed-derived permutation.  Each measurement carries the ground-truth
    arrival directions of its paths, ordered by increasing path length.
    """
    if scene.bounds is None:
        raise ValueError("scene needs bounds for receiver sampling")
    if not (0.0 <= train_fraction <= 1.0):
        raise ValueError("train_fraction must lie in [0, 1]")
    if n_receivers <= 0:
        raise ValueError("n_receivers must be positive")

    lo, hi = scene.bounds
    images = enumerate_images(scene, max_order)
    measurements = []
    for i in range(n_receivers):
        gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, i)))
        for attempt in range(1000):
            pos = gen.uniform(lo, hi)
            if np.linalg.norm(pos - scene.transmitter) < min_clearance:
                continue
            if any(s.distance(pos) < min_clearance for s in scene.surfaces):
                continue
            try:
                channel, paths = simulate_channel(
                    scene, pos, frequency.carrier_hz, max_order, images
                )
            except ShadowedReceiverError:
                continue
            measurements.append(
                Measurement(pos, channel, [p.arrival for p in paths])
            )
            break
        else:
            raise RuntimeError(
                f"receiver {i}: rejection sampling failed after 1000 attempts"
            )

    split_gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, 0)))
    perm = split_gen.permutation(n_receivers)
    n_train = math.floor(n_receivers * train_fraction)
    split = ["test"] * n_receivers
    for idx in perm[:n_train]:
        split[idx] = "train"

    return Dataset(
        scene=scene,
        frequency=frequency,
        measurements=measurements,
        split=split,
        seed=seed,
        max_order=max_order,
    )


def _noise_sigma(channels: np.ndarray, snr_db_level: float) -> float:
    power = float(np.mean(np.abs(channels) ** 2))
    if power == 0.0:
        raise ValueError("dataset has zero signal power")
    return math.sqrt(power * 10.0 ** (-snr_db_level / 10.0))


def add_noise(dataset: Dataset, snr_db_level: float, seed: int) -> Dataset:
    """Dataset copy with one fixed complex Gaussian noise draw per channel.

    Noise power is set relative to the mean channel power so the dataset's
    empirical SNR matches ``snr_db_level``.  An infinite SNR returns an
    unmodified copy.
    """
    clean = dataset.channels()
    if math.isinf(snr_db_level):
        noised = clean.copy()
    else:
        sigma = _noise_sigma(clean, snr_db_level)
        gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        noise = gen.standard_normal(len(clean)) + 1j * gen.standard_normal(len(clean))
        noised = clean + noise * (sigma / math.sqrt(2.0))
    measurements = [
        replace(m, channel=complex(h)) for m, h in zip(dataset.measurements, noised)
    ]
    return Dataset(
        scene=dataset.scene,
        frequency=dataset.frequency,
        measurements=measurements,
        split=list(dataset.split),
        seed=dataset.seed,
        max_order=dataset.max_order,
        noise_snr_db=snr_db_level,
        noise_mode="fixed",
    )


class PerDrawNoise:
    """Fresh noise realization per training iteration, deterministic in seed.

    ``channels_at(iteration)`` returns every channel with an independent
    complex Gaussian draw keyed by (seed, iteration): the same iteration
    always reproduces the same draw.
    """

    def __init__(self, dataset: Dataset, snr_db_level: float, seed: int):
        self.clean = dataset.channels()
        self.snr_db_level = snr_db_level
        self.seed = seed
        self.sigma = 0.0 if math.isinf(snr_db_level) else _noise_sigma(
            self.clean, snr_db_level
        )

    def channels_at(self, iteration: int) -> np.ndarray:
        if self.sigma == 0.0:
            return self.clean.copy()
        gen = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(1, iteration))
        )
        n = len(self.clean)
        noise = gen.standard_normal(n) + 1j * gen.standard_normal(n)
        return self.clean + noise * (self.sigma / math.sqrt(2.0))


def longest_path_length(dataset: Dataset) -> float:
    """Longest propagation path over every measurement of a dataset.

    Useful for choosing the far bound of the render interval: samples must
    reach the most distant virtual transmitter that contributes.
    """
    images = enumerate_images(dataset.scene, dataset.max_order)
    best = 0.0
    for m in dataset.measurements:
        _, paths = simulate_channel(
            dataset.scene, m.position, dataset.frequency.carrier_hz,
            dataset.max_order, images,
        )
        best = max(best, paths[-1].total_length)
    return best
