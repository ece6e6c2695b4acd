"""
Model container files.

Layout, little-endian throughout:

    b"SNCB" | version u16 | descriptor length u32 | descriptor (UTF-8 JSON)
    | tensor table (count u32, then per tensor: name length u16, name,
      rank u8, dims u32 each, float32 payload)
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from ..exceptions import ContainerError
from ..ml.diffcomp import ParamBundle
from ..models.barrier import BarrierModel, NonSeqBarrierModel
from ..models.learned_dynamics import LearnedDynamics

logger = logging.getLogger(__name__)

MAGIC = b"SNCB"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f4"

AnyModel = Union[BarrierModel, NonSeqBarrierModel, LearnedDynamics]

_LOADERS = {
    "sncbf": BarrierModel,
    "nonseq-cbf": NonSeqBarrierModel,
    "learned_dynamics": LearnedDynamics,
}


@dataclass
class ModelContainer:
    descriptor: dict
    tensors: ParamBundle = field(default_factory=ParamBundle)
    version: int = FORMAT_VERSION


def encode_container(container: ModelContainer) -> bytes:
    text = json.dumps(container.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<HI", container.version, len(text))
    return header + text + container.tensors.to_bytes(PAYLOAD_DTYPE)


def decode_container(data: bytes) -> ModelContainer:
    if len(data) < 10:
        raise ContainerError(f"truncated container: {len(data)} bytes is shorter than the header")
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, length = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise ContainerError(f"container version {version} is not supported (this build reads {FORMAT_VERSION})")
    if 10 + length > len(data):
        raise ContainerError(f"truncated container: descriptor needs {length} bytes, {len(data) - 10} remain")
    try:
        descriptor = json.loads(data[10:10 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"unreadable descriptor: {e}") from e
    try:
        tensors, end = ParamBundle.from_bytes(data, PAYLOAD_DTYPE, offset=10 + length)
    except (ValueError, struct.error) as e:
        raise ContainerError(str(e)) from e
    if end != len(data):
        raise ContainerError(f"{len(data) - end} trailing bytes after the tensor table")
    return ModelContainer(descriptor, tensors, version)


def save_container(path: Union[str, Path], container: ModelContainer) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_container(container))
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e
    logger.info(f"Saved {container.descriptor.get('model', 'container')} with {len(container.tensors)} tensors to {path}")
    return path


def load_container(path: Union[str, Path]) -> ModelContainer:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    return decode_container(data)


def save_model(path: Union[str, Path], model: AnyModel) -> Path:
    return save_container(path, ModelContainer(model.descriptor(), model.tensors()))


def load_model(path: Union[str, Path]) -> AnyModel:
    container = load_container(path)
    name = container.descriptor.get("model")
    loader = _LOADERS.get(name)
    if loader is None:
        raise ContainerError(f"{path}: unknown model type {name!r}")
    try:
        return loader.from_tensors(container.descriptor, container.tensors)
    except (KeyError, ValueError) as e:
        raise ContainerError(f"{path}: descriptor does not match its tensors: {e}") from e
