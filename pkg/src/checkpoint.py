"""Binary checkpoint: magic, format version, the model config text and its hash, then named arrays.

Layout (little-endian):
    b"FSAYOLO\\0" | u32 version | u32 len + config text | 64 B sha256 hex | u32 entry count
    per entry: u16 len + name | u8 itemsize (4 or 8) | u8 ndim | u32 dims... | raw data
"""

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

from src.model import Detector
from src.model import build
from src.model_config import ConfigError
from src.model_config import parse_model_config
from src.observability import get_logger
from src.observability import metrics
from src.tensor import ShapeError

logger = get_logger(__name__)

MAGIC = b"FSAYOLO\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Detector, path: str | Path) -> Path:
    path = Path(path)
    config_text = model.config.to_text().encode()
    state = model.state_dict()
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<I", FORMAT_VERSION))
    buffer.write(struct.pack("<I", len(config_text)))
    buffer.write(config_text)
    buffer.write(model.config.config_hash().encode("ascii"))
    buffer.write(struct.pack("<I", len(state)))
    for name, array in state.items():
        encoded = name.encode()
        itemsize = 8 if array.dtype == np.float64 else 4
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<BB", itemsize, array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array, dtype=f"<f{itemsize}").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    os.replace(tmp, path)
    metrics.increment("checkpoint.saved")
    logger.info(f"[save_checkpoint] {len(state)} arrays, {buffer.tell()} bytes to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointError(f"{self.source}: truncated at byte {self.offset} (wanted {n} more)")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Config text and state arrays, with the container validated but no model built."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    (text_len,) = reader.unpack("<I")
    try:
        config_text = reader.take(text_len).decode()
        stored_hash = reader.take(64).decode("ascii")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: corrupt config block") from None
    (count,) = reader.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode(errors="replace")
        itemsize, ndim = reader.unpack("<BB")
        if itemsize not in (4, 8):
            raise CheckpointError(f"{path}: entry {name!r} has unsupported item size {itemsize}")
        shape = reader.unpack(f"<{ndim}I")
        n_bytes = itemsize * int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(reader.take(n_bytes), dtype=f"<f{itemsize}").reshape(shape).copy()
    if reader.offset != len(reader.payload):
        raise CheckpointError(f"{path}: {len(reader.payload) - reader.offset} trailing bytes")
    if _hash_text(config_text) != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch")
    return config_text, state


def _hash_text(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()


def load_checkpoint(path: str | Path) -> Detector:
    config_text, state = read_checkpoint(path)
    try:
        config = parse_model_config(config_text, source=str(path))
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    if config.config_hash() != _hash_text(config_text):
        raise CheckpointError(f"{path}: config text is not in canonical form")
    model = build(config)
    try:
        model.load_state_dict(state)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    logger.info(f"[load_checkpoint] {model.num_parameters()} parameters from {path}")
    return model.eval()
