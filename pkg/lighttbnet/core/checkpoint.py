"""Binary checkpoint format.

Layout (little-endian throughout):

    4 bytes   magic b"LTBN"
    uint16    format version (1)
    uint32    metadata length L
    L bytes   UTF-8 JSON metadata (model config, fold_id, epoch, val_auc, seed,
              preprocessing config)
    uint32    tensor count T
    T times:
      uint16  name length, then the UTF-8 name
      uint8   dtype code (1 = float32, 2 = float64)
      uint8   rank R, then R x uint32 dims
      payload in C order
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple
import io
import json
import os
import pathlib
import struct

import numpy as np

from .errors import (BadMagicError, CheckpointStructureError, ConfigError, TruncatedCheckpointError,
                     VersionMismatchError)
from .model import LightTBNet, ModelConfig, build, state_registry
from .tensor import precision
from .utils import logger

MAGIC = b"LTBN"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
SUFFIX = ".ltbn"


@dataclass
class Checkpoint:
    """Model configuration, selection metadata and the named tensor table."""
    model_config: ModelConfig
    tensors: List[Tuple[str, np.ndarray]]
    fold_id: Optional[int] = None
    epoch: int = 0
    val_auc: Optional[float] = None
    seed: int = 0
    preprocess: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LightTBNet, **metadata) -> "Checkpoint":
        """Snapshot (copy) the model's state registry."""
        tensors = [(name, np.array(array, copy=True)) for name, array in state_registry(model)]
        return cls(model.config, tensors, **metadata)

    def metadata(self) -> Dict[str, Any]:
        return {
            "model_config": self.model_config.to_dict(),
            "fold_id": self.fold_id,
            "epoch": self.epoch,
            "val_auc": self.val_auc,
            "seed": self.seed,
            "preprocess": self.preprocess,
            "extra": self.extra,
        }

    def state(self) -> Dict[str, np.ndarray]:
        return dict(self.tensors)

    def to_model(self) -> LightTBNet:
        """Rebuild the model from the embedded config and load the tensors (eval mode)."""
        dtype = self.tensors[0][1].dtype.type if self.tensors else np.float32
        with precision(dtype):
            model = build(self.model_config)
        _check_structure(model, self.tensors)
        model.load_state(self.state())
        return model.eval()


def _check_structure(model: LightTBNet, tensors: List[Tuple[str, np.ndarray]]) -> None:
    expected = [(name, array.shape) for name, array in state_registry(model)]
    stored = {name: array.shape for name, array in tensors}
    for name, shape in expected:
        if name not in stored:
            raise CheckpointStructureError(f"checkpoint is missing tensor '{name}'",
                                           {"missing": name, "expected_count": len(expected),
                                            "stored_count": len(tensors)})
        if tuple(stored[name]) != tuple(shape):
            raise CheckpointStructureError(f"tensor '{name}' has shape {tuple(stored[name])}, expected {shape}",
                                           {"name": name})
    if len(tensors) != len(expected):
        known = {name for name, _ in expected}
        unexpected = [name for name, _ in tensors if name not in known]
        raise CheckpointStructureError(f"checkpoint has {len(tensors)} tensors, model expects {len(expected)}",
                                       {"unexpected": unexpected})


def encode(checkpoint: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(checkpoint.metadata(), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(checkpoint.tensors)))
    for name, array in checkpoint.tensors:
        arr = np.ascontiguousarray(array)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointStructureError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(dtype, copy=False).tobytes(order="C"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}",
                                           {"offset": self.pos, "needed": n, "size": len(self.data)})
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)", {"magic": data[:4].hex()})
    reader = _Reader(data)
    reader.take(4, "magic")
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}",
                                   {"version": version})
    (meta_len,) = reader.unpack("<I", "metadata length")
    try:
        meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointStructureError(f"checkpoint metadata is not valid JSON: {e}")
    (count,) = reader.unpack("<I", "tensor count")

    tensors: List[Tuple[str, np.ndarray]] = []
    for i in range(count):
        (name_len,) = reader.unpack("<H", f"tensor {i} name length")
        name = reader.take(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = reader.unpack("<BB", f"tensor '{name}' header")
        if code not in CODE_DTYPES:
            raise CheckpointStructureError(f"tensor '{name}' has unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I", f"tensor '{name}' dims")
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(nbytes, f"tensor '{name}' payload")
        tensors.append((name, np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))))

    try:
        model_config = ModelConfig.from_dict(meta["model_config"]).validate()
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointStructureError(f"checkpoint metadata has no usable model_config: {e}")
    return Checkpoint(model_config, tensors, fold_id=meta.get("fold_id"), epoch=int(meta.get("epoch", 0)),
                      val_auc=meta.get("val_auc"), seed=int(meta.get("seed", 0)),
                      preprocess=meta.get("preprocess") or {}, extra=meta.get("extra") or {})


def save_checkpoint(checkpoint: Checkpoint, path: os.PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(checkpoint)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes, fold={checkpoint.fold_id}, "
                f"epoch={checkpoint.epoch}, val_auc={checkpoint.val_auc})")
    return path


def read_checkpoint(path: os.PathLike) -> Checkpoint:
    """Decode a checkpoint file without building a model."""
    with open(path, "rb") as f:
        data = f.read()
    return decode(data)


def load_checkpoint(path: os.PathLike) -> Tuple[LightTBNet, Checkpoint]:
    """Read a checkpoint and reconstruct its model in eval mode."""
    checkpoint = read_checkpoint(path)
    model = checkpoint.to_model()
    logger.debug(f"Loaded checkpoint {path}: fold={checkpoint.fold_id} epoch={checkpoint.epoch}")
    return model, checkpoint


def fold_checkpoint_path(out_dir: os.PathLike, fold_id: int) -> pathlib.Path:
    return pathlib.Path(out_dir) / f"fold{fold_id}{SUFFIX}"
