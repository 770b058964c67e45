"""Checkpoint = JSON manifest (config + parameter index) + flat little-endian f32 blob."""

import json
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch

from config import CliConfig, config_from_dict, config_to_dict
from denoiser import MotionDenoiser
from errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
HASH_NAME = "manifest.sha256"


@dataclass
class Checkpoint:
    manifest: dict
    blob: bytes

    @property
    def config(self) -> CliConfig:
        return config_from_dict(self.manifest["config"])


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def pack_checkpoint(model: MotionDenoiser, cfg: CliConfig) -> Checkpoint:
    index, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        values = tensor.detach().cpu().numpy().astype("<f4", copy=False).ravel()
        index.append({"name": name, "offset": offset, "shape": list(tensor.shape)})
        chunks.append(values.tobytes())
        offset += values.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "parameters": index,
        "num_values": offset,
        "blob_sha256": _sha256(blob),
    }
    return Checkpoint(manifest=manifest, blob=blob)


def validate_checkpoint(ckpt: Checkpoint) -> None:
    m = ckpt.manifest
    if m.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {m.get('format_version')!r}")
    names = [p["name"] for p in m["parameters"]]
    if len(names) != len(set(names)):
        raise ValidationError("checkpoint lists a parameter more than once")
    expected_offset = 0
    for p in m["parameters"]:
        if p["offset"] != expected_offset:
            raise ValidationError(f"parameter {p['name']} offset {p['offset']} is not contiguous")
        expected_offset += int(np.prod(p["shape"], dtype=np.int64))
    if expected_offset != m["num_values"] or len(ckpt.blob) != 4 * expected_offset:
        raise ValidationError(f"blob holds {len(ckpt.blob) // 4} values, manifest declares {expected_offset}")
    if _sha256(ckpt.blob) != m["blob_sha256"]:
        raise ValidationError("blob hash does not match the manifest")


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text = json.dumps(ckpt.manifest, ensure_ascii=False, indent=2)
    (path / MANIFEST_NAME).write_text(text, encoding="utf-8")
    (path / BLOB_NAME).write_bytes(ckpt.blob)
    (path / HASH_NAME).write_text(_sha256(text.encode("utf-8")) + "\n", encoding="utf-8")
    logger.info("saved checkpoint to %s (blob %s)", path, ckpt.manifest["blob_sha256"][:12])
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    raw = (path / MANIFEST_NAME).read_bytes()
    hash_file = path / HASH_NAME
    if hash_file.exists() and hash_file.read_text(encoding="utf-8").strip() != _sha256(raw):
        raise ValidationError(f"{path / MANIFEST_NAME} does not match its recorded hash")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path / MANIFEST_NAME}: {e}") from e
    ckpt = Checkpoint(manifest=manifest, blob=(path / BLOB_NAME).read_bytes())
    validate_checkpoint(ckpt)
    logger.info("loaded checkpoint %s", path)
    return ckpt


def restore_model(ckpt: Checkpoint, dtype=torch.float32) -> MotionDenoiser:
    """Build the network described by the manifest and copy the blob into it."""
    validate_checkpoint(ckpt)
    cfg = ckpt.config
    model = MotionDenoiser(cfg.model, cfg.diffusion.layers)
    state = model.state_dict()
    declared = {p["name"]: p for p in ckpt.manifest["parameters"]}
    if set(declared) != set(state):
        missing = sorted(set(state) - set(declared))
        extra = sorted(set(declared) - set(state))
        raise ValidationError(f"manifest does not match the model (missing {missing}, unexpected {extra})")
    values = np.frombuffer(ckpt.blob, dtype="<f4")
    loaded = {}
    for name, tensor in state.items():
        p = declared[name]
        if list(tensor.shape) != p["shape"]:
            raise ValidationError(f"{name}: manifest shape {p['shape']} != model shape {list(tensor.shape)}")
        chunk = values[p["offset"]:p["offset"] + tensor.numel()].reshape(p["shape"])
        loaded[name] = torch.from_numpy(chunk.astype(np.float32))
    model.load_state_dict(loaded)
    return model.to(dtype)


def load_model(path: Union[str, Path]):
    ckpt = load_checkpoint(path)
    return restore_model(ckpt), ckpt.config
