"""Binary checkpoints for experts and routers, plus the JSON bank manifest.

Layout of a checkpoint file (all integers and floats little-endian)::

    magic   b"TTMOE\\x00"          6 bytes
    kind    b"E" | b"R"            1 byte   expert / router
    version                        1 byte
    u32     header length, then a UTF-8 JSON header
    payload (kind specific, below)
    sha256 of every preceding byte 32 bytes

An expert payload holds ``2 * n_layers`` tensor-train fragments (Q then V per
layer), then the head weight ``[d, C]`` and bias ``[C]``.  A fragment is a
u32-length-prefixed JSON header ``{d_in, d_out, input_factors,
output_factors, rank, alpha, precision}`` followed by its cores in chain
order, each row-major.  A router payload is ``w_gate``, ``b_gate``, ``w_noise``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from ttmoe.errors import CheckpointError
from ttmoe.model import ExpertAdapter, Head
from ttmoe.router import RouterParams
from ttmoe.tensor import PRECISIONS, precision_name
from ttmoe.tt import TtCores, TtShape

MAGIC = b"TTMOE\x00"
VERSION = 1
MANIFEST_SCHEMA = 1


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _write_json(buf, obj) -> None:
    blob = json.dumps(obj, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)


def _write_array(buf, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype=_le(a.dtype)).tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def json(self) -> dict:
        (n,) = struct.unpack("<I", self.take(4))
        try:
            return json.loads(self.take(n).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{self.path}: corrupt header") from exc

    def array(self, shape, dtype) -> np.ndarray:
        dt = _le(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype)).reshape(shape)


def write_tt_fragment(buf, tt: TtCores) -> None:
    _write_json(buf, {
        "d_in": tt.shape.d_in, "d_out": tt.shape.d_out,
        "input_factors": list(tt.shape.input_factors),
        "output_factors": list(tt.shape.output_factors),
        "rank": tt.shape.rank, "alpha": tt.alpha, "precision": precision_name(tt.dtype),
    })
    for core in tt.cores:
        _write_array(buf, core)


def read_tt_fragment(reader: _Reader, dtype) -> TtCores:
    head = reader.json()
    shape = TtShape(head["input_factors"], head["output_factors"], head["rank"])
    if (shape.d_in, shape.d_out) != (head["d_in"], head["d_out"]):
        raise CheckpointError(f"{reader.path}: fragment factors disagree with its dimensions")
    if PRECISIONS.get(head["precision"]) is not np.dtype(dtype).type:
        raise CheckpointError(f"{reader.path}: fragment precision {head['precision']} != file precision")
    cores = [reader.array(cs, dtype) for cs in shape.core_shapes]
    return TtCores(shape, cores, float(head["alpha"]))


def _finish(path, kind: bytes, header: dict, payload: bytes) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + kind + bytes([VERSION]))
    _write_json(buf, header)
    buf.write(payload)
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def _open(path, kind: bytes, precision: str | None) -> tuple[_Reader, dict, type]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 2 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    body, tail = data[:-32], data[-32:]
    reader = _Reader(body, path)
    reader.take(len(MAGIC))
    got_kind, version = reader.take(1), reader.take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    if got_kind != kind:
        raise CheckpointError(f"{path}: holds kind {got_kind!r}, expected {kind!r}")
    if hashlib.sha256(body).digest() != tail:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or modified)")
    header = reader.json()
    file_precision = header.get("precision")
    if file_precision not in PRECISIONS:
        raise CheckpointError(f"{path}: unknown precision {file_precision!r}")
    if precision is not None and precision != file_precision:
        raise CheckpointError(
            f"{path}: stored as {file_precision} but runtime precision is {precision}; refusing to cast"
        )
    return reader, header, PRECISIONS[file_precision]


def save_expert(path, adapter: ExpertAdapter) -> None:
    q0, v0 = adapter.q_cores[0], adapter.v_cores[0]
    header = {
        "expert_id": adapter.expert_id, "task_name": adapter.task_name,
        "num_classes": adapter.num_classes, "n_layers": len(adapter.q_cores),
        "config_hash": adapter.config_hash, "alpha": q0.alpha, "rank": q0.shape.rank,
        "q_factors": [list(q0.shape.input_factors), list(q0.shape.output_factors)],
        "v_factors": [list(v0.shape.input_factors), list(v0.shape.output_factors)],
        "d_model": adapter.head.weight.shape[0], "precision": precision_name(q0.dtype),
    }
    buf = io.BytesIO()
    for q, v in adapter.deltas:
        write_tt_fragment(buf, q)
        write_tt_fragment(buf, v)
    _write_array(buf, adapter.head.weight)
    _write_array(buf, adapter.head.bias)
    _finish(path, b"E", header, buf.getvalue())


def load_expert(path, config_hash: str | None = None, precision: str | None = None) -> ExpertAdapter:
    """Read an expert.  ``config_hash``/``precision`` are the runtime values to match."""
    reader, header, dtype = _open(path, b"E", precision)
    if config_hash is not None and header["config_hash"] != config_hash:
        raise CheckpointError(
            f"{path}: trained against base config {header['config_hash']}, runtime is {config_hash}"
        )
    q, v = [], []
    for _ in range(header["n_layers"]):
        q.append(read_tt_fragment(reader, dtype))
        v.append(read_tt_fragment(reader, dtype))
    d, c = header["d_model"], header["num_classes"]
    weight = reader.array((d, c), dtype)
    bias = reader.array((c,), dtype)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    weight.setflags(write=False)
    bias.setflags(write=False)
    return ExpertAdapter(header["expert_id"], header["task_name"], q, v, Head(weight, bias),
                         header["config_hash"])


def save_router(path, params: RouterParams) -> None:
    header = {"d": params.d, "n_experts": params.n_experts, "lam": params.lam,
              "expert_names": list(params.expert_names),
              "precision": precision_name(params.w_gate.dtype)}
    buf = io.BytesIO()
    for a in params.params:
        _write_array(buf, a)
    _finish(path, b"R", header, buf.getvalue())


def load_router(path, precision: str | None = None) -> RouterParams:
    reader, header, dtype = _open(path, b"R", precision)
    d, n = header["d"], header["n_experts"]
    w_gate = reader.array((d, n), dtype)
    b_gate = reader.array((n,), dtype)
    w_noise = reader.array((d, n), dtype)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return RouterParams(w_gate, b_gate, w_noise, list(header["expert_names"]), float(header["lam"]))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_bank_manifest(path, expert_paths, experts) -> None:
    path = Path(path)
    entries = []
    for p, e in zip(expert_paths, experts):
        rel = os.path.relpath(Path(p).resolve(), path.parent.resolve())
        entries.append({"path": rel, "task_name": e.task_name, "config_hash": e.config_hash,
                        "sha256": file_digest(p)})
    path.write_text(json.dumps({"schema_version": MANIFEST_SCHEMA, "experts": entries}, indent=2) + "\n")


def load_bank_manifest(path, config_hash: str | None = None, precision: str | None = None):
    """Return ``(expert_paths, experts)`` in manifest order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"bank manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise CheckpointError(f"{path}: unsupported manifest schema {manifest.get('schema_version')}")
    paths, experts = [], []
    for entry in manifest["experts"]:
        p = Path(entry["path"])
        p = p if p.is_absolute() else path.parent / p
        if file_digest(p) != entry["sha256"]:
            raise CheckpointError(f"{p}: contents differ from the manifest digest")
        expert = load_expert(p, config_hash, precision)
        if expert.config_hash != entry["config_hash"]:
            raise CheckpointError(f"{p}: config hash differs from the manifest")
        paths.append(p)
        experts.append(expert)
    return paths, experts
