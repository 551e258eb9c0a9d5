"""File formats: scenes, datasets, checkpoints.

Everything written here is byte-stable: JSON is dumped with sorted keys and
fixed separators, arrays are stored as raw little-endian bytes in
name-sorted order, and no timestamps enter any payload.  Identical inputs
therefore produce identical files, which is what makes reproducibility
checks meaningful.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .baselines import DirectMlpModel, KnnModel
from .core import Direction, FrequencyConfig, Measurement
from .field import EncodingConfig, FieldModel
from .mlp import LayerSpec, MlpParameters
from .raysearch import (
    AssignmentMap,
    CountNet,
    RaySearchResult,
    VirtualTransmitterSet,
)
from .sim import Dataset, Material, SceneGeometry, Surface

MAGIC = b"RFBL"
BLOB_VERSION = 1


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_json(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def load_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def dump_json_line(fh, obj: Any) -> None:
    """One canonical-JSON record per line (for streaming logs)."""
    fh.write(canonical_json(obj))
    fh.write("\n")
    fh.flush()


# ------------------------------------------------------------- blob store


def save_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Binary container: JSON metadata plus named raw arrays.

    Arrays are written in sorted-name order as little-endian C-order bytes;
    the manifest (dtype, shape, offset) lives inside the metadata block.
    """
    manifest = {}
    payload = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest[name] = {
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payload.append(raw)
        offset += len(raw)
    head = canonical_json({"meta": meta, "arrays": manifest}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", BLOB_VERSION, 0))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def load_blob(path):
    """Read a container written by :func:`save_blob`: (meta, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a radfield blob (bad magic)")
        version, _ = struct.unpack("<HH", fh.read(4))
        if version != BLOB_VERSION:
            raise ValueError(f"{path}: unsupported blob version {version}")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(head_len).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for name, entry in head["arrays"].items():
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[name] = arr.reshape(entry["shape"]).copy()
    return head["meta"], arrays


# ----------------------------------------------------------------- scenes


def material_to_dict(m: Material) -> dict:
    return {
        "name": m.name,
        "kind": m.kind,
        "permittivity": m.permittivity,
        "conductivity": m.conductivity,
    }


def material_from_dict(d: dict) -> Material:
    return Material(d["name"], d["kind"], d.get("permittivity", 1.0), d.get("conductivity", 0.0))


def scene_to_dict(scene: SceneGeometry) -> dict:
    return {
        "format": "radfield-scene",
        "version": 1,
        "transmitter": list(scene.transmitter),
        "bounds": None
        if scene.bounds is None
        else [list(scene.bounds[0]), list(scene.bounds[1])],
        "surfaces": [
            {
                "vertices": s.vertices.tolist(),
                "material": material_to_dict(s.material),
            }
            for s in scene.surfaces
        ],
    }


def scene_from_dict(d: dict) -> SceneGeometry:
    if d.get("format") != "radfield-scene":
        raise ValueError("not a scene file")
    surfaces = [
        Surface(np.array(s["vertices"], dtype=np.float64), material_from_dict(s["material"]))
        for s in d["surfaces"]
    ]
    bounds = d.get("bounds")
    if bounds is not None:
        bounds = (np.array(bounds[0]), np.array(bounds[1]))
    return SceneGeometry(surfaces, np.array(d["transmitter"], dtype=np.float64), bounds)


def save_scene(path, scene: SceneGeometry) -> None:
    dump_json(path, scene_to_dict(scene))


def load_scene(path) -> SceneGeometry:
    return scene_from_dict(load_json(path))


# ---------------------------------------------------------------- datasets


def frequency_to_dict(fc: FrequencyConfig) -> dict:
    return {
        "carrier_hz": fc.carrier_hz,
        "subcarrier_spacing_hz": fc.subcarrier_spacing_hz,
        "subcarrier_range": None
        if fc.subcarrier_range is None
        else list(fc.subcarrier_range),
    }


def frequency_from_dict(d: dict) -> FrequencyConfig:
    rng = d.get("subcarrier_range")
    return FrequencyConfig(
        d["carrier_hz"],
        d.get("subcarrier_spacing_hz", 312.5e3),
        None if rng is None else (int(rng[0]), int(rng[1])),
    )


def dataset_to_dict(ds: Dataset) -> dict:
    records = []
    for m, split in zip(ds.measurements, ds.split):
        records.append(
            {
                "position": list(m.position),
                "channel": [m.channel.real, m.channel.imag],
                "doas": [[d.azimuth, d.elevation] for d in m.doas],
                "split": split,
            }
        )
    return {
        "format": "radfield-dataset",
        "version": 1,
        "scene": scene_to_dict(ds.scene),
        "frequency": frequency_to_dict(ds.frequency),
        "seed": ds.seed,
        "max_order": ds.max_order,
        "noise_snr_db": ds.noise_snr_db,
        "noise_mode": ds.noise_mode,
        "measurements": records,
    }


def dataset_from_dict(d: dict) -> Dataset:
    if d.get("format") != "radfield-dataset":
        raise ValueError("not a dataset file")
    measurements = []
    split = []
    for rec in d["measurements"]:
        measurements.append(
            Measurement(
                np.array(rec["position"], dtype=np.float64),
                complex(rec["channel"][0], rec["channel"][1]),
                [Direction(a, e) for a, e in rec["doas"]],
            )
        )
        split.append(rec["split"])
    return Dataset(
        scene=scene_from_dict(d["scene"]),
        frequency=frequency_from_dict(d["frequency"]),
        measurements=measurements,
        split=split,
        seed=d["seed"],
        max_order=d.get("max_order", 2),
        noise_snr_db=d.get("noise_snr_db"),
        noise_mode=d.get("noise_mode"),
    )


def save_dataset(path, ds: Dataset) -> None:
    dump_json(path, dataset_to_dict(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(load_json(path))


# -------------------------------------------------------------- checkpoints


def _layers_to_meta(layers) -> list:
    return [
        {"inputs": list(spec.inputs), "width": spec.width, "activation": spec.activation}
        for spec in layers
    ]


def _layers_from_meta(entries) -> tuple[LayerSpec, ...]:
    return tuple(
        LayerSpec(tuple(e["inputs"]), e["width"], e["activation"]) for e in entries
    )


def _params_arrays(prefix: str, params: MlpParameters, arrays: dict) -> None:
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"{prefix}/w{i:02d}"] = w
        arrays[f"{prefix}/b{i:02d}"] = b


def _params_from_arrays(prefix, layers, stream_dims, arrays) -> MlpParameters:
    weights = []
    biases = []
    for i in range(len(layers)):
        weights.append(arrays[f"{prefix}/w{i:02d}"])
        biases.append(arrays[f"{prefix}/b{i:02d}"])
    return MlpParameters(layers, dict(stream_dims), weights, biases)


def save_checkpoint(path, model: FieldModel, training: dict | None = None) -> None:
    """Write a model (and optionally the full training state) to one blob.

    ``training`` may carry iteration, learning rate, scheduler state, the
    train config, rng state, the loss history, and optimizer moment arrays
    under the ``optimizer`` key ({"coarse": (m list, v list), ...}).
    """
    training = dict(training or {})
    optimizer = training.pop("optimizer", None)
    arrays: dict[str, np.ndarray] = {}
    _params_arrays("coarse", model.coarse, arrays)
    _params_arrays("fine", model.fine, arrays)
    if optimizer is not None:
        for which, (ms, vs) in optimizer.items():
            for i, (m, v) in enumerate(zip(ms, vs)):
                arrays[f"opt/{which}/m{i:02d}"] = m
                arrays[f"opt/{which}/v{i:02d}"] = v
    history = training.pop("history", None)
    if history is not None:
        arrays["history"] = np.asarray(history, dtype=np.float64)
    meta = {
        "format": "radfield-checkpoint",
        "version": 1,
        "encoding": {
            "n_freq_position": model.enc.n_freq_position,
            "n_freq_direction": model.enc.n_freq_direction,
            "include_input": model.enc.include_input,
        },
        "layers": _layers_to_meta(model.coarse.layers),
        "stream_dims": model.coarse.stream_dims,
        "box_min": list(model.box_min),
        "box_max": list(model.box_max),
        "t_near": model.t_near,
        "t_far": model.t_far,
        "n_coarse": model.n_coarse,
        "n_fine": model.n_fine,
        "frequency_hz": model.frequency_hz,
        "has_optimizer": optimizer is not None,
        "training": training,
    }
    save_blob(path, meta, arrays)


def load_checkpoint(path):
    """Read a checkpoint: (FieldModel, training dict).

    The training dict mirrors what was passed to :func:`save_checkpoint`,
    with optimizer moments (if present) under ``optimizer`` and the loss
    history under ``history``.
    """
    meta, arrays = load_blob(path)
    if meta.get("format") != "radfield-checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    enc = EncodingConfig(**meta["encoding"])
    layers = _layers_from_meta(meta["layers"])
    dims = meta["stream_dims"]
    coarse = _params_from_arrays("coarse", layers, dims, arrays)
    fine = _params_from_arrays("fine", layers, dims, arrays)
    model = FieldModel(
        enc=enc,
        coarse=coarse,
        fine=fine,
        box_min=np.array(meta["box_min"]),
        box_max=np.array(meta["box_max"]),
        t_near=meta["t_near"],
        t_far=meta["t_far"],
        n_coarse=meta["n_coarse"],
        n_fine=meta["n_fine"],
        frequency_hz=meta["frequency_hz"],
    )
    training = dict(meta.get("training", {}))
    if meta.get("has_optimizer"):
        optimizer = {}
        for which in ("coarse", "fine"):
            ms, vs = [], []
            i = 0
            while f"opt/{which}/m{i:02d}" in arrays:
                ms.append(arrays[f"opt/{which}/m{i:02d}"])
                vs.append(arrays[f"opt/{which}/v{i:02d}"])
                i += 1
            if ms:
                optimizer[which] = (ms, vs)
        training["optimizer"] = optimizer
    if "history" in arrays:
        training["history"] = arrays["history"]
    return model, training


def _count_net_to_dict(cn: CountNet) -> dict:
    d: dict = {
        "box_min": cn.box_min.tolist(),
        "box_max": cn.box_max.tolist(),
    }
    if cn.constant is not None:
        d["constant"] = cn.constant
    else:
        d["layers"] = _layers_to_meta(cn.params.layers)
        d["stream_dims"] = cn.params.stream_dims
        d["weights"] = [w.tolist() for w in cn.params.weights]
        d["biases"] = [b.tolist() for b in cn.params.biases]
    return d


def _count_net_from_dict(d: dict) -> CountNet:
    if "constant" in d:
        return CountNet(None, d["constant"], np.array(d["box_min"]), np.array(d["box_max"]))
    params = MlpParameters(
        _layers_from_meta(d["layers"]),
        dict(d["stream_dims"]),
        [np.array(w, dtype=np.float64) for w in d["weights"]],
        [np.array(b, dtype=np.float64) for b in d["biases"]],
    )
    return CountNet(params, None, np.array(d["box_min"]), np.array(d["box_max"]))


def raysearch_to_dict(rs: RaySearchResult) -> dict:
    return {
        "format": "radfield-raysearch",
        "version": 1,
        "centroids": rs.transmitters.centroids.tolist(),
        "member_counts": rs.transmitters.member_counts.tolist(),
        "eps": rs.transmitters.eps,
        "assignments": {
            "measurement_ids": list(rs.assignments.measurement_ids),
            "positions": rs.assignments.positions.tolist(),
            "assigned": [list(a) for a in rs.assignments.assigned],
            "n_doas": list(rs.assignments.n_doas),
            "n_hits": list(rs.assignments.n_hits),
        },
        "count_net": _count_net_to_dict(rs.count_net),
        "settings": dict(rs.settings),
    }


def raysearch_from_dict(d: dict) -> RaySearchResult:
    if d.get("format") != "radfield-raysearch":
        raise ValueError("not a ray search product")
    transmitters = VirtualTransmitterSet(
        np.array(d["centroids"], dtype=np.float64).reshape(-1, 3),
        np.array(d["member_counts"], dtype=np.int64),
        d["eps"],
    )
    a = d["assignments"]
    assignments = AssignmentMap(
        [int(i) for i in a["measurement_ids"]],
        np.array(a["positions"], dtype=np.float64).reshape(-1, 3),
        [[int(c) for c in row] for row in a["assigned"]],
        [int(n) for n in a["n_doas"]],
        [int(n) for n in a["n_hits"]],
    )
    n_vt = transmitters.n_transmitters
    if any(c < 0 or c >= n_vt for row in assignments.assigned for c in row):
        raise ValueError("assignment references a transmitter outside the set")
    return RaySearchResult(
        transmitters, assignments, _count_net_from_dict(d["count_net"]), dict(d["settings"])
    )


def save_raysearch(path, rs: RaySearchResult) -> None:
    """Ray search product: JSON, exact float round-trip via repr."""
    dump_json(path, raysearch_to_dict(rs))


def load_raysearch(path) -> RaySearchResult:
    return raysearch_from_dict(load_json(path))


def save_baseline(path, model) -> None:
    """Baseline model file: the blob container with a model-kind tag."""
    if isinstance(model, KnnModel):
        meta = {"format": "radfield-baseline", "version": 1, "kind": "knn", "k": model.k}
        arrays = {"positions": model.positions, "channels": model.channels}
    elif isinstance(model, DirectMlpModel):
        meta = {
            "format": "radfield-baseline",
            "version": 1,
            "kind": "direct_mlp",
            "layers": _layers_to_meta(model.params.layers),
            "stream_dims": model.params.stream_dims,
            "channel_scale": model.channel_scale,
            "box_min": model.box_min.tolist(),
            "box_max": model.box_max.tolist(),
            "n_freq_position": model.n_freq_position,
            "include_input": model.include_input,
        }
        arrays = {}
        _params_arrays("mlp", model.params, arrays)
    else:
        raise TypeError(f"not a baseline model: {type(model).__name__}")
    save_blob(path, meta, arrays)


def load_baseline(path):
    meta, arrays = load_blob(path)
    if meta.get("format") != "radfield-baseline":
        raise ValueError(f"{path}: not a baseline model file")
    if meta["kind"] == "knn":
        return KnnModel(arrays["positions"], arrays["channels"], meta["k"])
    params = _params_from_arrays(
        "mlp", _layers_from_meta(meta["layers"]), meta["stream_dims"], arrays
    )
    return DirectMlpModel(
        params,
        meta["channel_scale"],
        np.array(meta["box_min"]),
        np.array(meta["box_max"]),
        n_freq_position=meta["n_freq_position"],
        include_input=meta["include_input"],
    )
