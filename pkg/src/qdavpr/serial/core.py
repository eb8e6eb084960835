"""
Binary containers of the QdaVPR package.

Checkpoints (``QCKP``), precomputed backbone features (``QFEA``) and descriptor databases
(``QDAV``). All numbers are little endian, tensors are stored row major.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import torch
from numpy.typing import NDArray
from torch import Tensor

# typing_extensions for generic TypedDict support:
from typing_extensions import NotRequired, TypedDict

from qdavpr.config import ExperimentConfig, config_from_dict, config_to_dict
from qdavpr.data.manifest import ManifestRow, Split
from qdavpr.error import ParsingError, PathError
from qdavpr.retrieval import DescriptorIndex, RecallReport

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QCKP"
FEATURES_MAGIC = b"QFEA"
DESCRIPTORS_MAGIC = b"QDAV"
FORMAT_VERSION = 1

MODEL_NS = "model/"
ADVERSARIAL_NS = "adversarial/"
OPTIMIZER_NS = "optimizer/"

_DTYPES: dict[str, tuple[torch.dtype, str]] = {
    "float32": (torch.float32, "<f4"),
    "int64": (torch.int64, "<i8"),
}

####################################################################################################
### Types
####################################################################################################


class TensorEntry(TypedDict):
    name: str
    shape: list[int]
    dtype: str
    offset: int
    nbytes: int


class CheckpointHeader(TypedDict):
    format_version: int
    epoch: int
    best_metric: float | None
    config: dict[str, Any]
    tensors: list[TensorEntry]
    param_groups: NotRequired[list[dict[str, Any]]]


class RowStore(TypedDict):
    image_path: str
    place_id: int
    lat: float | None
    lon: float | None
    frame_id: int | None
    split: str


@dataclass
class CheckpointRecord:
    """
    Everything needed to resume training or to run inference.

    ``adversarial`` and ``optimizer`` are train-only and may be absent.
    """

    config: ExperimentConfig
    model: dict[str, Tensor]
    adversarial: dict[str, Tensor] | None = None
    optimizer: dict[str, Any] | None = None
    epoch: int = 0
    best_metric: float | None = None
    format_version: int = FORMAT_VERSION


####################################################################################################
### Checkpoints
####################################################################################################


def save_checkpoint(record: CheckpointRecord, path: Path | str) -> None:
    """Write a self describing checkpoint: magic, version, JSON header, tensor blobs."""
    tensors: dict[str, Tensor] = {MODEL_NS + k: v for k, v in record.model.items()}
    if record.adversarial is not None:
        tensors |= {ADVERSARIAL_NS + k: v for k, v in record.adversarial.items()}

    header = CheckpointHeader(
        format_version=FORMAT_VERSION,
        epoch=record.epoch,
        best_metric=record.best_metric,
        config=config_to_dict(record.config),
        tensors=[],
    )
    if record.optimizer is not None:
        for param_id, state in record.optimizer["state"].items():
            for key, value in state.items():
                tensors[f"{OPTIMIZER_NS}state/{param_id}/{key}"] = torch.as_tensor(value)
        header["param_groups"] = record.optimizer["param_groups"]

    blobs: list[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        dtype = "float32" if tensor.is_floating_point() else "int64"
        blob = tensor.detach().cpu().to(_DTYPES[dtype][0]).contiguous().numpy()
        raw = blob.astype(_DTYPES[dtype][1]).tobytes()
        header["tensors"].append(
            TensorEntry(
                name=name, shape=list(tensor.shape), dtype=dtype, offset=offset, nbytes=len(raw)
            )
        )
        blobs.append(raw)
        offset += len(raw)

    encoded = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<IQ", FORMAT_VERSION, len(encoded)))
        handle.write(encoded)
        for raw in blobs:
            handle.write(raw)
    logger.debug("Saved checkpoint with %d tensors to %s", len(blobs), path)


def load_checkpoint(path: Path | str) -> CheckpointRecord:
    path = Path(path)
    if not path.exists():
        raise PathError(f"Checkpoint `{path}` does not exist!")

    with open(path, "rb") as handle:
        _check_magic(handle, CHECKPOINT_MAGIC, path)
        version, header_size = struct.unpack("<IQ", _read(handle, 12, path))
        _check_version(version, path)
        try:
            header: CheckpointHeader = json.loads(_read(handle, header_size, path))
        except json.JSONDecodeError as err:
            raise ParsingError(f"Corrupt checkpoint header in `{path}`!") from err
        payload = handle.read()

    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ParsingError(f"Truncated tensor `{entry['name']}` in `{path}`!")
        array = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]][1]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())

    model = _namespace(tensors, MODEL_NS)
    adversarial = _namespace(tensors, ADVERSARIAL_NS)
    optimizer = None
    if "param_groups" in header:
        state: dict[int, dict[str, Tensor]] = {}
        for name, tensor in _namespace(tensors, OPTIMIZER_NS + "state/").items():
            param_id, key = name.split("/", 1)
            state.setdefault(int(param_id), {})[key] = tensor
        optimizer = {"state": state, "param_groups": header["param_groups"]}

    return CheckpointRecord(
        config=config_from_dict(ExperimentConfig, header["config"]),
        model=model,
        adversarial=adversarial or None,
        optimizer=optimizer,
        epoch=header["epoch"],
        best_metric=header["best_metric"],
        format_version=version,
    )


def strip_adversarial(src: Path | str, dst: Path | str) -> None:
    """Copy a checkpoint without the train-only adversarial and optimizer namespaces."""
    record = load_checkpoint(src)
    record.adversarial = None
    record.optimizer = None
    save_checkpoint(record, dst)


def _namespace(tensors: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


####################################################################################################
### Features
####################################################################################################

_FEATURES_HEADER = struct.Struct("<4sIQII")
_DESCRIPTORS_HEADER = struct.Struct("<4sIQI")


def write_features(features: NDArray[np.float32], path: Path | str) -> None:
    """Write a ``count x N x d`` block of precomputed local features."""
    if features.ndim != 3:
        raise ParsingError(f"Expected count x N x d features, got `{features.shape}`!")
    count, n_features, dim = features.shape
    with open(path, "wb") as handle:
        handle.write(_FEATURES_HEADER.pack(FEATURES_MAGIC, FORMAT_VERSION, count, n_features, dim))
        handle.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path: Path | str) -> NDArray[np.float32]:
    """Memory mapped ``count x N x d`` view of a features file."""
    path = Path(path)
    if not path.exists():
        raise PathError(f"Features file `{path}` does not exist!")
    with open(path, "rb") as handle:
        magic, version, count, n_features, dim = _FEATURES_HEADER.unpack(
            _read(handle, _FEATURES_HEADER.size, path)
        )
    _check_magic_value(magic, FEATURES_MAGIC, path)
    _check_version(version, path)
    expected = _FEATURES_HEADER.size + 4 * count * n_features * dim
    if path.stat().st_size != expected:
        raise ParsingError(
            f"Features file `{path}` has `{path.stat().st_size}` bytes, expected `{expected}`!"
        )
    return np.memmap(
        path, dtype="<f4", mode="r", offset=_FEATURES_HEADER.size, shape=(count, n_features, dim)
    )


####################################################################################################
### Descriptors
####################################################################################################


def write_descriptors(index: DescriptorIndex, path: Path | str) -> None:
    """Descriptor matrix followed by a length prefixed JSON block of the metadata rows."""
    rows = None if index.rows is None else [_row_store(row) for row in index.rows]
    metadata = json.dumps(rows).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(
            _DESCRIPTORS_HEADER.pack(DESCRIPTORS_MAGIC, FORMAT_VERSION, index.count, index.dim)
        )
        handle.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
        handle.write(struct.pack("<Q", len(metadata)))
        handle.write(metadata)


def read_descriptors(path: Path | str) -> DescriptorIndex:
    path = Path(path)
    if not path.exists():
        raise PathError(f"Descriptor file `{path}` does not exist!")
    with open(path, "rb") as handle:
        magic, version, count, dim = _DESCRIPTORS_HEADER.unpack(
            _read(handle, _DESCRIPTORS_HEADER.size, path)
        )
        _check_magic_value(magic, DESCRIPTORS_MAGIC, path)
        _check_version(version, path)
        raw = _read(handle, 4 * count * dim, path)
        (size,) = struct.unpack("<Q", _read(handle, 8, path))
        stores: list[RowStore] | None = json.loads(_read(handle, size, path))

    matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
    rows = None if stores is None else [_row_from_store(store) for store in stores]
    return DescriptorIndex(matrix=matrix, rows=rows)


def _row_store(row: ManifestRow) -> RowStore:
    return RowStore(
        image_path=row.image_path,
        place_id=row.place_id,
        lat=row.lat,
        lon=row.lon,
        frame_id=row.frame_id,
        split=row.split.value,
    )


def _row_from_store(store: RowStore) -> ManifestRow:
    return ManifestRow(
        image_path=store["image_path"],
        place_id=store["place_id"],
        lat=store["lat"],
        lon=store["lon"],
        frame_id=store["frame_id"],
        split=Split(store["split"]),
    )


####################################################################################################
### Reports
####################################################################################################


def write_recall_report(report: RecallReport, out_dir: Path | str) -> tuple[Path, Path]:
    """Write ``recall.txt`` (table) and ``recall.kv`` (``recall@N=value`` lines)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, key_values = out_dir / "recall.txt", out_dir / "recall.kv"
    table.write_text(report.table())
    key_values.write_text(report.key_values())
    return table, key_values


def read_recall_values(path: Path | str) -> dict[int, float]:
    result: dict[int, float] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            key, value = line.split("=", 1)
            result[int(key.removeprefix("recall@"))] = float(value)
        except ValueError as err:
            raise ParsingError(f"Malformed recall line `{line}`!") from err
    return result


####################################################################################################
### Helpers
####################################################################################################


def _read(handle: BinaryIO, size: int, path: Path) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise ParsingError(f"Unexpected end of file in `{path}`!")
    return data


def _check_magic(handle: BinaryIO, magic: bytes, path: Path) -> None:
    _check_magic_value(_read(handle, len(magic), path), magic, path)


def _check_magic_value(value: bytes, magic: bytes, path: Path) -> None:
    if value != magic:
        raise ParsingError(f"`{path}` is not a `{magic.decode()}` file!")


def _check_version(version: int, path: Path) -> None:
    if version != FORMAT_VERSION:
        raise ParsingError(
            f"Unsupported format version `{version}` in `{path}`, expected `{FORMAT_VERSION}`!"
        )
