"""On-disk formats for model artifacts, scenario datasets and meta state.

Every object is a directory holding ``manifest.json`` (sorted keys, human
readable) and ``arrays.bin``, the raw little-endian bytes of each named
array laid end to end.  The manifest records the format name and version,
an index of ``{name, dtype, shape, offset, nbytes}`` entries and the SHA-256
of the blob.  Loading checks the format, the version and the checksum
before any array is built.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .nets import ArchConfig, ModelArtifact
from .synthgen import Batch, ScenarioDataset, UniverseConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "arrays.bin"


class FormatError(ValueError):
    """Wrong format name or version."""


class ChecksumError(ValueError):
    """Blob does not match the checksum recorded in the manifest."""


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if hasattr(x, "to_dict"):
        return _plain(x.to_dict())
    return x


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")


def write_bundle(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``arrays`` plus ``meta`` under ``path``; the manifest is written last."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path / BLOB)
    manifest = {
        "format": kind,
        "version": FORMAT_VERSION,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "size": len(blob),
        "arrays": index,
        "meta": meta,
    }
    _dump_json(manifest, path / MANIFEST)
    return path


def read_bundle(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != kind:
        raise FormatError(f"{path}: expected a {kind!r} bundle, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {manifest.get('version')} is not supported (expected {FORMAT_VERSION})")
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["size"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"{path / BLOB}: checksum mismatch ({len(blob)} bytes, expected {manifest['size']})")
    arrays = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


# ---------------------------------------------------------------------------
# model artifacts


def save_artifact(artifact: ModelArtifact, path) -> Path:
    meta = {"arch": artifact.arch.to_dict(), "provenance": artifact.provenance, "history": list(artifact.history)}
    return write_bundle(path, "model-artifact", artifact.params, meta)


def load_artifact(path) -> ModelArtifact:
    arrays, meta = read_bundle(path, "model-artifact")
    arch = ArchConfig.from_dict(meta["arch"])
    return ModelArtifact(arch, arrays, meta["provenance"], tuple(meta["history"]))


# ---------------------------------------------------------------------------
# datasets

_DS_FIELDS = ("profiles", "sequences", "seq_mask", "labels", "partition")


def save_dataset(ds: ScenarioDataset, path) -> Path:
    meta = {
        "scenario_id": ds.scenario_id,
        "seed": ds.seed,
        "dims": {"profile_dim": int(ds.profiles.shape[1]), "max_seq_len": int(ds.sequences.shape[1])},
        "counts": ds.counts(),
        "info": ds.meta,
    }
    return write_bundle(path, "scenario-dataset", {f: getattr(ds, f) for f in _DS_FIELDS}, meta)


def load_dataset(path) -> ScenarioDataset:
    arrays, meta = read_bundle(path, "scenario-dataset")
    return ScenarioDataset(meta["scenario_id"], *(arrays[f] for f in _DS_FIELDS), seed=meta["seed"], meta=meta["info"])


def save_universe(datasets, path, cfg: UniverseConfig | None = None, seed: int | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        save_dataset(ds, path / f"scenario_{ds.scenario_id:03d}")
    index = {
        "scenarios": [ds.scenario_id for ds in datasets],
        "seed": seed,
        "universe": None if cfg is None else cfg.__dict__,
    }
    _dump_json(index, path / "universe.json")
    return path


def load_universe(path) -> list[ScenarioDataset]:
    path = Path(path)
    index = json.loads((path / "universe.json").read_text())
    return [load_dataset(path / f"scenario_{sid:03d}") for sid in index["scenarios"]]


# ---------------------------------------------------------------------------
# meta state


def save_meta_state(state, path) -> Path:
    path = Path(path)
    save_artifact(state.agnostic, path / "agnostic")
    arrays = {}
    for i, b in enumerate(state.archive):
        for name, a in zip(Batch._fields, b):
            arrays[f"archive{i:03d}.{name}"] = a
    write_bundle(path / "archive", "meta-archive", arrays, {"n": len(state.archive)})
    _dump_json({"format": "meta-state", "version": FORMAT_VERSION, "state": state.metadata()}, path / "state.json")
    return path


def load_meta_state(path):
    from .metaengine import MetaState

    path = Path(path)
    doc = json.loads((path / "state.json").read_text())
    if doc.get("format") != "meta-state" or doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a meta-state directory of version {FORMAT_VERSION}")
    info = doc["state"]
    arrays, meta = read_bundle(path / "archive", "meta-archive")
    archive = tuple(Batch(*(arrays[f"archive{i:03d}.{n}"] for n in Batch._fields)) for i in range(meta["n"]))
    info["archive_ids"] = tuple(info["archive_ids"])
    return MetaState(agnostic=load_artifact(path / "agnostic"), archive=archive, **info)
