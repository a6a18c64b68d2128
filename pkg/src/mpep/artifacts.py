"""Stage artifacts on disk: a versioned JSON document, a sidecar ``.npz``
of arrays and an optional pickle of in-memory objects, keyed by an input hash."""
from __future__ import annotations

import csv
import json
import pickle
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

VERSION = 1


class MissingArtifactError(FileNotFoundError):
    def __init__(self, stage: str, path):
        super().__init__(f"no artifact for stage {stage!r} under {path}; run that stage first")
        self.stage = stage


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class StageArtifact:
    stage: str
    input_hash: str
    payload: dict
    arrays: dict = dc_field(default_factory=dict)
    tables: dict = dc_field(default_factory=dict)   # name -> list of row dicts
    objects: dict = dc_field(default_factory=dict)
    version: int = VERSION
    config_hash: str = ""


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, stage: str) -> Path:
        return self.root / stage

    def meta(self, stage: str) -> dict | None:
        f = self.path(stage) / "artifact.json"
        if not f.exists():
            return None
        return json.loads(f.read_text())

    def is_fresh(self, stage: str, input_hash: str) -> bool:
        m = self.meta(stage)
        return bool(m) and m.get("input_hash") == input_hash and m.get("version") == VERSION

    def save(self, art: StageArtifact) -> Path:
        d = self.path(art.stage)
        d.mkdir(parents=True, exist_ok=True)
        if art.arrays:
            np.savez_compressed(d / "arrays.npz", **art.arrays)
        if art.objects:
            with open(d / "objects.pkl", "wb") as fh:
                pickle.dump(art.objects, fh)
        doc = {"stage": art.stage, "version": art.version, "input_hash": art.input_hash,
               "config_hash": art.config_hash, "payload": _jsonable(art.payload),
               "tables": _jsonable(art.tables), "arrays": sorted(art.arrays),
               "objects": sorted(art.objects)}
        # written last: its presence marks a complete artifact
        (d / "artifact.json").write_text(json.dumps(doc, indent=1, allow_nan=False))
        return d

    def load(self, stage: str, objects: bool = True) -> StageArtifact:
        m = self.meta(stage)
        if m is None:
            raise MissingArtifactError(stage, self.root)
        d = self.path(stage)
        arrays = {}
        if m["arrays"]:
            with np.load(d / "arrays.npz") as z:
                arrays = {k: z[k] for k in z.files}
        objs = {}
        if objects and m["objects"]:
            with open(d / "objects.pkl", "rb") as fh:
                objs = pickle.load(fh)
        return StageArtifact(m["stage"], m["input_hash"], m["payload"], arrays, m["tables"],
                             objs, m["version"], m.get("config_hash", ""))


def write_csv(path, rows: list[dict], columns: list[str] | None = None,
              comments: list[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.DictWriter(fh, columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
