"""Versioned persistence for tables, schedules and run reports.

Tables are a little-endian binary tensor file plus a JSON sidecar
(``<path>.json``); see FORMATS.md for the byte layout.  Schedules and reports
are JSON.  Every write goes to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dcs import CacheSchedule
from .errors import CorruptionError, UpgradeRequiredError, ValidationError
from .ofs import SensitivityTables
from .toy_dit import ToyDitConfig

TABLE_MAGIC = b"SODAETB\x00"
TABLE_VERSION = 1
SCHEDULE_VERSION = 1
REPORT_VERSION = 1
M_KINDS = 2
_HEADER = struct.Struct("<8s7I32s")
ABSENT_SENTINEL = np.uint32(0x7FC00000)  # float32 quiet NaN
_TENSORS = ("caching_mean", "caching_std", "pruning_mean", "pruning_std")


def _atomic_write(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path):
    return Path(str(path) + ".json")


def table_cell_counts(T, L, M, n_max, alpha_count):
    """(populated, sentinel) cell counts over all four tensors."""
    absent_c = L * M * sum(1 for t in range(1, T + 1) for n in range(1, n_max + 1) if t + n > T)
    absent_p = L * M * alpha_count  # t = T has no age-1 substitute
    total_c = T * L * M * n_max
    total_p = T * L * M * alpha_count
    populated = 2 * (total_c - absent_c) + 2 * (total_p - absent_p)
    return populated, 2 * absent_c + 2 * absent_p


def table_tensor_bytes(T, L, M, n_max, alpha_count):
    return 4 * 2 * T * L * M * (n_max + alpha_count)


def online_table_bytes(T, L, M, n_max, alpha_count):
    """Bytes of the mean tensors, which are all a run loads."""
    return 4 * T * L * M * (n_max + alpha_count)


def table_file_size(T, L, M, n_max, alpha_count):
    return _HEADER.size + table_tensor_bytes(T, L, M, n_max, alpha_count)


def _canonical(arr):
    a = np.ascontiguousarray(arr, dtype="<f4").copy()
    bits = a.view("<u4")
    bits[np.isnan(a)] = ABSENT_SENTINEL
    return a


def save_tables(tables: SensitivityTables, path):
    tables.validate()
    T, L, n_max = tables.T, tables.L, tables.n_max
    A = len(tables.alpha_grid)
    header = _HEADER.pack(TABLE_MAGIC, TABLE_VERSION, T, L, M_KINDS, n_max, A,
                          tables.sample_count, tables.model_fingerprint)
    body = b"".join(_canonical(getattr(tables, name)).tobytes() for name in _TENSORS)
    side = {
        "format_version": TABLE_VERSION,
        "model_fingerprint": tables.model_fingerprint.hex(),
        "config": tables.config.to_dict(),
        "n_range": [1, n_max],
        "alpha_grid": [float(a) for a in tables.alpha_grid],
        "sample_count": tables.sample_count,
        "absent_sentinel": "0x7fc00000",
        "tensor_order": list(_TENSORS),
        "index_order": "t, l, m, n|alpha",
        "meta": tables.meta,
    }
    _atomic_write(path, header + body)
    _atomic_write(sidecar_path(path), (json.dumps(side, indent=2, sort_keys=True) + "\n").encode())


def load_tables(path) -> SensitivityTables:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, T, L, M, n_max, A, S, fp = _HEADER.unpack_from(raw)
    if magic != TABLE_MAGIC:
        raise CorruptionError(f"{path}: bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise UpgradeRequiredError(
            f"{path}: table format version {version}, this build reads {TABLE_VERSION}"
        )
    if M != M_KINDS:
        raise CorruptionError(f"{path}: module count {M} != {M_KINDS}")
    expected = table_file_size(T, L, M, n_max, A)
    if len(raw) != expected:
        raise CorruptionError(f"{path}: size {len(raw)} bytes, layout requires {expected}")
    try:
        side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptionError(f"{path}: missing metadata sidecar") from None
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable sidecar ({exc})") from None
    if side.get("format_version") != TABLE_VERSION:
        raise UpgradeRequiredError(f"{path}: sidecar version {side.get('format_version')!r}")
    if side.get("model_fingerprint") != fp.hex():
        raise CorruptionError(f"{path}: fingerprint in header and sidecar disagree")
    grid = np.asarray(side["alpha_grid"], dtype=np.float64)
    if len(grid) != A or side["sample_count"] != S or side["n_range"] != [1, n_max]:
        raise CorruptionError(f"{path}: sidecar dimensions disagree with the header")
    config = ToyDitConfig.from_dict(side["config"])

    off = _HEADER.size
    arrays = {}
    for name in _TENSORS:
        last = n_max if name.startswith("caching") else A
        count = T * L * M * last
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(T, L, M, last)
        off += 4 * count
        nan = np.isnan(arr)
        if np.any(arr.view("<u4")[nan] != ABSENT_SENTINEL):
            raise CorruptionError(f"{path}: {name} holds a NaN that is not the absent sentinel")
        arrays[name] = arr.astype(np.float32)  # native, writable copy
    tables = SensitivityTables(
        alpha_grid=grid, n_max=n_max, sample_count=S, model_fingerprint=fp,
        config=config, meta=side.get("meta", {}), **arrays,
    )
    try:
        return tables.validate()
    except ValidationError as exc:
        raise CorruptionError(f"{path}: {exc}") from None


def schedule_to_dict(s: CacheSchedule):
    return {
        "version": SCHEDULE_VERSION,
        "total_steps": s.total_steps,
        "n_s": s.n_s,
        "anchors": list(s.anchors),
        "intervals": list(s.intervals),
        "total_cost": s.total_cost,
        "candidates": list(s.candidates),
        "phase_constrained": s.phase_constrained,
        "phase": list(s.phase),
        "xi": s.xi,
        "cost_mode": s.cost_mode,
    }


def schedule_from_dict(doc) -> CacheSchedule:
    if doc.get("version") != SCHEDULE_VERSION:
        raise UpgradeRequiredError(f"unsupported schedule version {doc.get('version')!r}")
    try:
        s = CacheSchedule(
            anchors=tuple(int(a) for a in doc["anchors"]),
            intervals=tuple(int(n) for n in doc["intervals"]),
            total_cost=float(doc["total_cost"]),
            candidates=tuple(int(c) for c in doc["candidates"]),
            phase_constrained=bool(doc["phase_constrained"]),
            xi=doc["xi"],
            cost_mode=doc["cost_mode"],
            phase=tuple(int(t) for t in doc.get("phase", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed schedule document: {exc}") from None
    if doc.get("n_s") != s.n_s:
        raise ValidationError(f"n_s={doc.get('n_s')} disagrees with {s.n_s} intervals")
    return s.validate(int(doc["total_steps"]))


def save_schedule(schedule: CacheSchedule, path):
    schedule.validate()
    text = json.dumps(schedule_to_dict(schedule), indent=2) + "\n"
    _atomic_write(path, text.encode())


def load_schedule(path) -> CacheSchedule:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return schedule_from_dict(doc)


def report_bytes(report):
    doc = {"version": REPORT_VERSION}
    doc.update(report.to_dict())
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


def save_report(report, path):
    _atomic_write(path, report_bytes(report))
