"""
Format de fichier BTXF.

Disposition (petit-boutiste):
    "BTXF"                      magie
    u32                         version du format
    u64 + octets UTF-8          en-tête JSON {config, metadata}
    puis par tenseur, noms triés:
        u32 + octets UTF-8      nom
        u8                      type (0 = float32, 1 = float64)
        u32                     rang
        u64 × rang              dimensions
        données brutes
"""

import json
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np
import structlog
from pydantic import ValidationError

from btxforge.core.transformer import Checkpoint
from btxforge.errors import CheckpointFormatError, ModelConfigError
from btxforge.utils.config import ModelConfig

logger = structlog.get_logger(__name__)

MAGIC = b"BTXF"
FORMAT_VERSION = 1

DTYPE_TAGS: Dict[str, int] = {"float32": 0, "float64": 1}
TAG_DTYPES = {tag: np.dtype(name).newbyteorder("<") for name, tag in DTYPE_TAGS.items()}


def _write_string(handle: BinaryIO, text: str, width: str) -> None:
    data = text.encode("utf-8")
    handle.write(struct.pack(f"<{width}", len(data)))
    handle.write(data)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Écrit un checkpoint au format BTXF.

    Args:
        checkpoint: Checkpoint à écrire
        path: Fichier de destination

    Returns:
        Chemin écrit
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"config": checkpoint.config.model_dump(mode="json"), "metadata": checkpoint.metadata},
        sort_keys=True,
    )

    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        _write_string(handle, header, "Q")
        for name in sorted(checkpoint.tensors):
            array = checkpoint.tensors[name]
            if array.dtype.name not in DTYPE_TAGS:
                raise CheckpointFormatError(f"unsupported dtype {array.dtype} for {name}")
            _write_string(handle, name, "I")
            handle.write(struct.pack("<BI", DTYPE_TAGS[array.dtype.name], array.ndim))
            handle.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            handle.write(np.ascontiguousarray(array, dtype=TAG_DTYPES[DTYPE_TAGS[array.dtype.name]]).tobytes())

    logger.info("checkpoint_saved", path=str(path), metadata=checkpoint.metadata, tensors=len(checkpoint.tensors))
    return path


class _Reader:
    """Lecture bornée d'un buffer, erreurs de format explicites."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated file at byte {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Lit un checkpoint BTXF.

    Raises:
        CheckpointFormatError: Magie, version, en-tête ou enregistrement invalide
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"{path}: no such checkpoint")
    reader = _Reader(path.read_bytes(), str(path))

    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")

    (header_len,) = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ModelConfig.model_validate(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValidationError) as e:
        raise CheckpointFormatError(f"{path}: invalid header ({e})") from e

    tensors: Dict[str, np.ndarray] = {}
    while not reader.exhausted:
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8", errors="replace")
        tag, rank = reader.unpack("<BI")
        if tag not in TAG_DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    try:
        checkpoint = Checkpoint(config=config, tensors=tensors, metadata=str(header.get("metadata", "")))
    except ModelConfigError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e

    logger.debug("checkpoint_loaded", path=str(path), metadata=checkpoint.metadata)
    return checkpoint
