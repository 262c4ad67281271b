"""Deterministic binary container for trained cascade models.

Layout: magic, little-endian header length, JSON header (describes config,
schema, and every array's name/dtype/shape in payload order), raw array
payload, and a trailing sha256 over everything before it.  Identical
models serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .cascade import CascadeModel, PartModel, PartsStage, TrainConfig, Tree
from .errors import FormatError
from .features import FreakPattern
from .pose import Model3D
from .shapes import LandmarkSchema, Shape

MODEL_MAGIC = b"FACM"
MODEL_VERSION = 1

_TREE_FIELDS = (
    "node_landmark", "node_p1", "node_p2", "node_tau", "node_left",
    "node_right", "leaf_residual", "leaf_visibility",
)


class _ArrayPack:
    def __init__(self):
        self.entries = []
        self.blobs = []

    def add(self, name: str, arr: np.ndarray):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt, copy=False).tobytes(order="C")
        self.entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        self.blobs.append(data)

    def payload(self) -> bytes:
        return b"".join(self.blobs)


def _schema_dict(schema: LandmarkSchema) -> dict:
    d = {
        "names": schema.names,
        "parts": schema.parts.tolist(),
        "distinct": [bool(v) for v in schema.distinct],
        "mirror": schema.mirror.tolist(),
    }
    if schema.eyes is not None:
        d["eyes"] = schema.eyes
    return d


def _config_dict(cfg: TrainConfig) -> dict:
    return {
        "T": cfg.T, "K1": cfg.K1, "K2": cfg.K2, "depth": cfg.depth,
        "candidates_per_node": cfg.candidates_per_node,
        "shrinkage": cfg.shrinkage, "subsample": cfg.subsample,
        "early_stop_delta": cfg.early_stop_delta, "seed": cfg.seed,
        "Z": cfg.Z, "subset_size": cfg.subset_size,
        "tau_range": list(cfg.tau_range), "scale_floor": cfg.scale_floor,
        "coarse_to_fine": cfg.coarse_to_fine,
    }


def save_model(model: CascadeModel, path) -> None:
    pack = _ArrayPack()
    pack.add("mean_shape/coords", model.mean_shape.coords)
    pack.add("mean_shape/visibility", model.mean_shape.visibility)
    pack.add("mean_shape/annotated", model.mean_shape.annotated)
    pack.add("pattern/offsets", model.pattern.offsets)
    pack.add("pattern/rings", model.pattern.rings)
    if model.model3d is not None:
        pack.add("model3d/points", model.model3d.points)
        pack.add("model3d/normals", model.model3d.normals)
        pack.add("model3d/distinct", model.model3d.distinct.astype(np.uint8))
    stage_meta = []
    for si, stage in enumerate(model.stages):
        parts_meta = []
        for pi, pm in enumerate(stage.parts):
            pack.add(f"s{si}/p{pi}/landmarks", pm.landmarks)
            for ti, tree in enumerate(pm.trees):
                for f in _TREE_FIELDS:
                    pack.add(f"s{si}/p{pi}/t{ti}/{f}", getattr(tree, f))
            parts_meta.append({"n_trees": len(pm.trees)})
        stage_meta.append({
            "shrinkage": stage.shrinkage,
            "scale": stage.scale,
            "parts": parts_meta,
        })
    header = {
        "version": MODEL_VERSION,
        "init_mode": model.init_mode,
        "feature_mode": model.feature_mode,
        "config": _config_dict(model.config),
        "schema": _schema_dict(model.schema),
        "pattern_diameter": model.pattern.base_diameter,
        "has_model3d": model.model3d is not None,
        "model3d_names": model.model3d.names if model.model3d is not None else [],
        "stages": stage_meta,
        "training_log": model.training_log,
        "arrays": pack.entries,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    body = (
        MODEL_MAGIC
        + struct.pack("<q", len(header_bytes))
        + header_bytes
        + pack.payload()
    )
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_model(path) -> CascadeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MODEL_MAGIC) + 8 + 32:
        raise FormatError("truncated model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("model checksum mismatch")
    if body[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("bad model magic")
    (hlen,) = struct.unpack("<q", body[len(MODEL_MAGIC): len(MODEL_MAGIC) + 8])
    off = len(MODEL_MAGIC) + 8
    header = json.loads(body[off: off + hlen].decode("utf-8"))
    if header["version"] != MODEL_VERSION:
        raise FormatError(f"unsupported model version {header['version']}")
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = dt.itemsize * count
        arrays[entry["name"]] = np.frombuffer(
            body[off: off + nbytes], dtype=dt
        ).reshape(shape).copy()
        off += nbytes
    if off != len(body):
        raise FormatError("model payload length mismatch")

    sd = header["schema"]
    schema = LandmarkSchema(
        names=sd["names"], parts=np.asarray(sd["parts"]),
        distinct=np.asarray(sd["distinct"], dtype=bool),
        mirror=np.asarray(sd["mirror"]), eyes=sd.get("eyes"),
    )
    cfgd = header["config"]
    cfgd["tau_range"] = tuple(cfgd["tau_range"])
    config = TrainConfig(**cfgd)
    mean_shape = Shape(
        arrays["mean_shape/coords"], arrays["mean_shape/visibility"],
        arrays["mean_shape/annotated"],
    )
    pattern = FreakPattern(
        arrays["pattern/offsets"], arrays["pattern/rings"],
        header["pattern_diameter"],
    )
    model3d = None
    if header["has_model3d"]:
        model3d = Model3D(
            arrays["model3d/points"], arrays["model3d/normals"],
            arrays["model3d/distinct"].astype(bool),
            header.get("model3d_names", []),
        )
    stages = []
    for si, sm in enumerate(header["stages"]):
        parts = []
        for pi, pmeta in enumerate(sm["parts"]):
            trees = []
            for ti in range(pmeta["n_trees"]):
                kw = {
                    f: arrays[f"s{si}/p{pi}/t{ti}/{f}"] for f in _TREE_FIELDS
                }
                trees.append(Tree(**kw))
            parts.append(PartModel(arrays[f"s{si}/p{pi}/landmarks"], trees))
        stages.append(PartsStage(parts=parts, shrinkage=sm["shrinkage"],
                                 scale=sm["scale"]))
    return CascadeModel(
        stages=stages,
        init_mode=header["init_mode"],
        feature_mode=header["feature_mode"],
        schema=schema,
        mean_shape=mean_shape,
        pattern=pattern,
        config=config,
        model3d=model3d,
        training_log=header["training_log"],
    )
