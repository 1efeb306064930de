"""Checkpoint directory format.

``manifest.json``  config, vocabulary file name, tensor table (name, shape,
                   byte offset) and free-form metadata
``tensors.bin``    all tensors as little-endian float32, concatenated
``vocab.txt``      one wordpiece per line
``config.json``    copy of the manifest's config section

Saving what was loaded reproduces every file byte for byte.  Writes go to a
sibling staging directory that is swapped in at the end, so a failed write
leaves the previous checkpoint intact.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tokenizer import Vocabulary

FORMAT = "microbert-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
VOCAB = "vocab.txt"
CONFIG = "config.json"

_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


@dataclass
class Checkpoint:
    config: dict
    vocab: Vocabulary
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optimizer.")}

    def save(self, path) -> Path:
        return save_checkpoint(path, self)

    def identity(self) -> str:
        """Short content hash of the model tensors, used to label reports."""
        digest = hashlib.sha256()
        for name in sorted(self.model_tensors()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name], dtype=_LE_F32).tobytes())
        return digest.hexdigest()[:12]


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    staging = path.with_name(path.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        table = []
        offset = 0
        with open(staging / BLOB, "wb") as fh:
            for name, array in ckpt.tensors.items():
                data = np.ascontiguousarray(array, dtype=_LE_F32)
                fh.write(data.tobytes())
                table.append({"name": name, "shape": list(data.shape), "offset": offset})
                offset += data.nbytes
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "config": ckpt.config,
            "vocab": VOCAB,
            "tensors": table,
            "metadata": ckpt.metadata,
        }
        (staging / MANIFEST).write_text(_dumps(manifest), encoding="utf-8")
        (staging / CONFIG).write_text(_dumps(ckpt.config), encoding="utf-8")
        ckpt.vocab.save(staging / VOCAB)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    old: Optional[Path] = None
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(staging, path)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"{path}: no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    blob = np.fromfile(path / BLOB, dtype=_LE_F32)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        start = entry["offset"] // _LE_F32.itemsize
        count = int(np.prod(shape, dtype=np.int64))
        if start + count > blob.size:
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of {BLOB}")
        tensors[entry["name"]] = blob[start:start + count].reshape(shape).astype(np.float32)
    vocab = Vocabulary.load(path / manifest["vocab"])
    return Checkpoint(manifest["config"], vocab, tensors, manifest.get("metadata", {}))
