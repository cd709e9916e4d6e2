"""Checkpoint directories: JSON manifest + float32 LE parameter blob + vocab file.

Layout::

    <dir>/manifest.json   architecture, vocab hash, section table, CRC32
    <dir>/params.bin      parameters in manifest order, little-endian float32
    <dir>/vocab.txt       one token per line, UTF-8
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .model import EncoderConfig, EncoderModel, parameter_shapes
from .vocab import Vocabulary

FORMAT = "relkit-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: EncoderModel, path, training_config: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sections, chunks, offset = [], [], 0
    for name, value in model.params.items():
        raw = np.ascontiguousarray(value, dtype=_LE_F32).tobytes()
        sections.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_id": model.model_id,
        "architecture": model.config.to_dict(),
        "case_policy": model.vocab.case_policy,
        "vocab_hash": model.vocab.hash,
        "sections": sections,
        "blob_length": len(blob),
        "crc32": zlib.crc32(blob),
        "training_config": training_config,
    }
    (path / "params.bin").write_bytes(blob)
    model.vocab.save(path / "vocab.txt")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    manifest_path = Path(path) / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest.get('version')} unsupported (expected {VERSION})")
    return manifest


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> EncoderModel:
    path = Path(path)
    manifest = read_manifest(path)
    vocab = Vocabulary.load(path / "vocab.txt", manifest["case_policy"])
    if vocab.hash != manifest["vocab_hash"]:
        raise CheckpointError(f"{path}: vocab.txt does not match the manifest's vocab hash")
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"{path}: vocab hash {manifest['vocab_hash'][:12]} != expected {expected_vocab_hash[:12]}"
        )
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest["blob_length"]:
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_length']}")
    if zlib.crc32(blob) != manifest["crc32"]:
        raise CheckpointError(f"{path}: parameter blob failed its CRC32 check")

    config = EncoderConfig(**manifest["architecture"])
    shapes = parameter_shapes(config)
    params = {}
    for sec in manifest["sections"]:
        name = sec["name"]
        if name not in shapes or tuple(sec["shape"]) != shapes[name]:
            raise CheckpointError(f"{path}: section {name} does not fit the architecture")
        raw = blob[sec["offset"] : sec["offset"] + sec["nbytes"]]
        params[name] = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(shapes[name])
    if list(params) != list(shapes):
        raise CheckpointError(f"{path}: parameter sections incomplete or out of order")
    return EncoderModel(config, vocab, params, model_id=manifest.get("model_id"))
