"""Model directories: ``manifest.json`` plus one little-endian ``weights.bin``.

The layout is documented in FORMAT.md at the repository root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import LAYER_TENSORS, LayerWeights, Model, ModelConfig, layer_shapes

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class FormatError(Exception):
    code = "format"


class ChecksumError(FormatError):
    code = "checksum"


class ShapeError(FormatError):
    code = "shape"


class DtypeError(FormatError):
    code = "dtype"


class MissingTensorError(FormatError):
    code = "missing_tensor"


class LayoutError(FormatError):
    """Overlapping, out-of-bounds or duplicate tensor records."""

    code = "layout"


def _fnv1a_64_py(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


try:  # optional: the byte loop is ~100x faster compiled
    import numba

    @numba.njit(cache=True)
    def _fnv1a_64_nb(buf):
        h = np.uint64(_FNV_OFFSET)
        prime = np.uint64(_FNV_PRIME)
        for b in buf:
            h = (h ^ np.uint64(b)) * prime
        return h

    def fnv1a_64(data: bytes) -> int:
        return int(_fnv1a_64_nb(np.frombuffer(data, dtype=np.uint8)))

except ImportError:  # pragma: no cover
    fnv1a_64 = _fnv1a_64_py


def tensor_names(cfg: ModelConfig) -> list[str]:
    names = ["embedding"]
    for i in range(cfg.num_layers):
        names += [f"layers.{i}.{t}" for t in LAYER_TENSORS]
    return names


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    out = {"embedding": (cfg.vocab_size, cfg.hidden_size)}
    per_layer = layer_shapes(cfg)
    for i in range(cfg.num_layers):
        for t in LAYER_TENSORS:
            out[f"layers.{i}.{t}"] = per_layer[t]
    return out


def _model_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {"embedding": model.embedding}
    for i, lw in enumerate(model.layers):
        for t in LAYER_TENSORS:
            out[f"layers.{i}.{t}"] = getattr(lw, t)
    return out


def save_model(model: Model, path, dtype: str = "f32") -> Path:
    if dtype not in DTYPES:
        raise DtypeError(f"unknown dtype {dtype!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    npdt = DTYPES[dtype]
    tensors = _model_tensors(model)
    records, chunks, offset = [], [], 0
    for name in tensor_names(model.config):
        arr = np.ascontiguousarray(tensors[name], dtype=npdt)
        raw = arr.tobytes(order="C")
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "blob_length": len(blob),
        "blob_checksum": f"{fnv1a_64(blob):016x}",
        "tensors": records,
    }
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest at {mpath}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc


@dataclass
class ValidationReport:
    issues: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, err: type[FormatError], msg: str):
        self.issues.append((err.code, msg))

    def raise_first(self):
        if self.issues:
            code, msg = self.issues[0]
            for cls in (ChecksumError, ShapeError, DtypeError, MissingTensorError, LayoutError):
                if cls.code == code:
                    raise cls(msg)
            raise FormatError(msg)


def validate_manifest(path) -> ValidationReport:
    """Check a model directory's structure and checksum without decoding tensors."""
    path = Path(path)
    report = ValidationReport()
    man = read_manifest(path)
    if man.get("format_version") != FORMAT_VERSION:
        report.add(FormatError, f"unsupported format_version {man.get('format_version')!r}")
        return report
    try:
        cfg = ModelConfig.from_dict(man["config"])
    except (KeyError, TypeError, ValueError) as exc:
        report.add(FormatError, f"bad config: {exc}")
        return report

    blob_path = path / BLOB_NAME
    blob_size = blob_path.stat().st_size if blob_path.is_file() else -1
    if blob_size < 0:
        report.add(MissingTensorError, f"missing blob {blob_path}")
    else:
        blob = blob_path.read_bytes()
        if blob_size != man.get("blob_length"):
            report.add(ChecksumError, f"blob length {blob_size} != manifest {man.get('blob_length')}")
        elif f"{fnv1a_64(blob):016x}" != man.get("blob_checksum"):
            report.add(ChecksumError, "blob checksum mismatch")

    shapes = expected_shapes(cfg)
    seen, spans = set(), []
    for rec in man.get("tensors", []):
        name = rec.get("name")
        if name in seen:
            report.add(LayoutError, f"duplicate tensor {name}")
            continue
        seen.add(name)
        if rec.get("dtype") not in DTYPES:
            report.add(DtypeError, f"{name}: unknown dtype {rec.get('dtype')!r}")
            continue
        if name not in shapes:
            report.add(LayoutError, f"unexpected tensor {name}")
            continue
        shape = tuple(rec.get("shape", ()))
        if shape != shapes[name]:
            report.add(ShapeError, f"{name}: shape {shape} != expected {shapes[name]}")
            continue
        nbytes = int(np.prod(shape)) * DTYPES[rec["dtype"]].itemsize
        off, length = int(rec.get("byte_offset", -1)), int(rec.get("byte_length", -1))
        if length != nbytes:
            report.add(ShapeError, f"{name}: byte_length {length} != {nbytes}")
            continue
        if off < 0 or (blob_size >= 0 and off + length > blob_size):
            report.add(LayoutError, f"{name}: record [{off}, {off + length}) outside blob")
            continue
        spans.append((off, off + length, name))
    for name in shapes:
        if name not in seen:
            report.add(MissingTensorError, f"missing tensor {name}")
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            report.add(LayoutError, f"{an} overlaps {bn}")

    return report


def load_model(path) -> Model:
    """Load a model directory, upconverting every tensor to float64."""
    path = Path(path)
    report = validate_manifest(path)
    report.raise_first()
    man = read_manifest(path)
    cfg = ModelConfig.from_dict(man["config"])
    blob = (path / BLOB_NAME).read_bytes()
    tensors = {}
    for rec in man["tensors"]:
        dt = DTYPES[rec["dtype"]]
        off = rec["byte_offset"]
        arr = np.frombuffer(blob, dtype=dt, count=rec["byte_length"] // dt.itemsize, offset=off)
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    layers = tuple(
        LayerWeights(**{t: tensors[f"layers.{i}.{t}"] for t in LAYER_TENSORS})
        for i in range(cfg.num_layers)
    )
    return Model(cfg, tensors["embedding"], layers)

