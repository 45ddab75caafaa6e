"""File formats: raw float feature files, line-JSON annotations, checkpoints.

Everything roundtrips bit-exactly (payloads are little-endian float32) and
loading never repairs invalid data — bad files are errors, not warnings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

FEATURE_MAGIC = b"FVTG"
CHECKPOINT_MAGIC = b"FVCK"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed file or annotation."""


# --- in-memory sample types -------------------------------------------------


@dataclass
class FeatureSequence:
    """Per-clip feature rows plus validity mask and the clip duration."""

    data: np.ndarray  # (n_clips, dim) float64
    clip_len: float
    mask: np.ndarray | None = None  # (n_clips,) bool; None = all valid

    @property
    def n_clips(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class QueryTokens:
    """Word-level query feature rows."""

    data: np.ndarray  # (n_words, dim) float64
    mask: np.ndarray | None = None

    @property
    def n_words(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class Annotation:
    qid: str
    vid: str
    query_text: str
    duration: float
    clip_len: float
    relevant_windows: list[list[float]]
    relevant_clip_ids: list[int] = field(default_factory=list)
    saliency: list[float] | None = None

    @property
    def n_clips(self) -> int:
        return int(np.ceil(self.duration / self.clip_len))


def validate_annotation(ann: Annotation) -> Annotation:
    if ann.duration <= 0:
        raise DataError(f"{ann.qid}: duration must be positive")
    if ann.clip_len <= 0:
        raise DataError(f"{ann.qid}: clip_len must be positive")
    for win in ann.relevant_windows:
        if len(win) != 2:
            raise DataError(f"{ann.qid}: window must be [start, end]")
        s, e = float(win[0]), float(win[1])
        if s >= e:
            raise DataError(f"{ann.qid}: window start >= end ({s} >= {e})")
        if s < 0 or e > ann.duration:
            raise DataError(f"{ann.qid}: window [{s}, {e}] outside [0, {ann.duration}]")
    if ann.saliency is not None:
        if len(ann.saliency) != ann.n_clips:
            raise DataError(
                f"{ann.qid}: saliency length {len(ann.saliency)} != "
                f"clip count {ann.n_clips}"
            )
        for s in ann.saliency:
            if not (0.0 <= s <= 1.0):
                raise DataError(f"{ann.qid}: saliency value {s} outside [0, 1]")
    for cid in ann.relevant_clip_ids:
        if not (0 <= cid < ann.n_clips):
            raise DataError(f"{ann.qid}: relevant clip id {cid} out of range")
    return ann


# --- feature files ------------------------------------------------------------


def save_features(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise DataError("feature array must be 2-D (rows, dim)")
    header = FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_features(path: str | Path, clip_len: float | None = None):
    """Load a feature file; returns a FeatureSequence when clip_len is given,
    otherwise the raw float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic")
    version, rows, dim = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = 16 + rows * dim * 4
    if len(raw) != expected:
        raise DataError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    arr = np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, dim)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite feature values")
    if clip_len is None:
        return arr
    return FeatureSequence(data=arr.astype(np.float64), clip_len=clip_len)


# --- annotations ---------------------------------------------------------------


def load_annotations(path: str | Path) -> list[Annotation]:
    anns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: invalid JSON: {err}") from err
            try:
                ann = Annotation(
                    qid=str(obj["qid"]),
                    vid=str(obj["vid"]),
                    query_text=str(obj.get("query_text", "")),
                    duration=float(obj["duration"]),
                    clip_len=float(obj["clip_len"]),
                    relevant_windows=[
                        [float(a), float(b)] for a, b in obj["relevant_windows"]
                    ],
                    relevant_clip_ids=[int(c) for c in obj.get("relevant_clip_ids", [])],
                    saliency=(
                        [float(s) for s in obj["saliency"]]
                        if obj.get("saliency") is not None
                        else None
                    ),
                )
            except (KeyError, TypeError) as err:
                raise DataError(f"{path}:{lineno}: missing/invalid field: {err}") from err
            anns.append(validate_annotation(ann))
    return anns


def save_annotations(path: str | Path, anns: list[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in anns:
            obj = {
                "qid": ann.qid,
                "vid": ann.vid,
                "query_text": ann.query_text,
                "duration": ann.duration,
                "clip_len": ann.clip_len,
                "relevant_windows": ann.relevant_windows,
                "relevant_clip_ids": ann.relevant_clip_ids,
            }
            if ann.saliency is not None:
                obj["saliency"] = ann.saliency
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor],
    config: dict,
    optim_state: dict | None = None,
) -> None:
    """Named-tensor container: JSON header + packed little-endian float32.

    Layout: magic, version u32, header length u32, UTF-8 JSON header,
    concatenated tensor payloads in header order.
    """
    if not params:
        raise DataError("refusing to save an empty parameter table")
    entries = []
    payload = bytearray()
    # astype keeps 0-d shapes intact (ascontiguousarray would promote to 1-d)
    for name in sorted(params):
        arr = np.asarray(params[name].data).astype("<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    opt = None
    if optim_state is not None:
        opt = {"step": int(optim_state["step"]), "moments": []}
        for name in sorted(optim_state["m"]):
            m = np.asarray(optim_state["m"][name]).astype("<f4", order="C")
            v = np.asarray(optim_state["v"][name]).astype("<f4", order="C")
            opt["moments"].append({"name": name, "shape": list(m.shape)})
            payload += m.tobytes()
            payload += v.tobytes()
    header = json.dumps(
        {"config": config, "params": entries, "optim": opt},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path):
    """Returns (params: name->float32 ndarray, config: dict, optim: dict|None)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if not header["params"]:
        raise DataError(f"{path}: empty parameter table")
    offset = 12 + hlen

    def read_array(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr

    params = {}
    for entry in header["params"]:
        if entry["name"] in params:
            raise DataError(f"{path}: duplicate parameter {entry['name']!r}")
        params[entry["name"]] = read_array(entry["shape"])
    optim = None
    if header.get("optim") is not None:
        optim = {"step": int(header["optim"]["step"]), "m": {}, "v": {}}
        for entry in header["optim"]["moments"]:
            optim["m"][entry["name"]] = read_array(entry["shape"])
            optim["v"][entry["name"]] = read_array(entry["shape"])
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return params, header["config"], optim


def restore_params(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded float32 tensors into an existing parameter table.

    Every model parameter must be present with a matching shape; unknown
    names in the checkpoint are errors.
    """
    missing = sorted(set(params) - set(loaded))
    if missing:
        raise DataError(f"checkpoint missing parameters: {missing[:5]}")
    unknown = sorted(set(loaded) - set(params))
    if unknown:
        raise DataError(f"checkpoint has unknown parameters: {unknown[:5]}")
    for name, p in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise DataError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                f"model {p.data.shape}"
            )
        p.data = arr.astype(np.float64)
