"""Deterministic file writers: CSV, JSON, and the binary snapshot format.

Floats are written with repr (shortest round-trip form), so identical runs
produce byte-identical files.  The binary snapshot layout is a little-endian
header (int64 n, int64 N, float64 t) followed by the n*(N+1) row-major
float64 state values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import StateField, ValidationError


def fmt(value) -> str:
    return repr(float(value))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):  # before int: bool is an int subclass
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isnan(v):
            return None
        if np.isinf(v):
            return 1e308 if v > 0 else -1e308
        return v
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_sanitize(obj), sort_keys=True, indent=2) + "\n")


def write_snapshot_csv(path, state: StateField):
    n = state.n
    header = ["x"] + [f"w_{i + 1}" for i in range(n)]
    rows = (
        [state.xs[q]] + [state.values[i, q] for i in range(n)]
        for q in range(state.xs.size)
    )
    write_csv(path, header, rows)


def write_norms_csv(path, traj):
    n = traj.norms_l2.shape[1]
    header = (
        ["t"]
        + [f"l2_{i + 1}" for i in range(n)]
        + [f"linf_{i + 1}" for i in range(n)]
    )
    rows = (
        [traj.times[s]]
        + [traj.norms_l2[s, i] for i in range(n)]
        + [traj.norms_linf[s, i] for i in range(n)]
        for s in range(traj.times.size)
    )
    write_csv(path, header, rows)


def write_binary_snapshot(path, state: StateField):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, npts = state.values.shape
    header = struct.pack("<qqd", n, npts - 1, float(state.t))
    path.write_bytes(header + state.values.astype("<f8").tobytes(order="C"))


def read_binary_snapshot(path) -> StateField:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ValidationError(f"binary snapshot {path} is truncated")
    n, N, t = struct.unpack("<qqd", raw[:24])
    values = np.frombuffer(raw[24:], dtype="<f8").reshape(n, N + 1).copy()
    return StateField(values, t, np.linspace(0.0, 1.0, N + 1))


def write_kernel_csv(path, kernel):
    header = ["x", "y", "i", "j", "K_ij"]
    xs = kernel.xs

    def rows():
        for p in range(kernel.NK + 1):
            for q in range(p + 1):
                idx = p * (p + 1) // 2 + q
                for i in range(kernel.n):
                    for j in range(kernel.n):
                        yield [xs[p], xs[q], i + 1, j + 1, kernel.values[i, j, idx]]

    write_csv(path, header, rows())


def write_source_csv(path, source):
    header = ["x", "i", "j", "S_ij"]
    n = source.k + source.m

    def rows():
        for q, x in enumerate(source.xs):
            for i in range(n):
                for j in range(n):
                    yield [x, i + 1, j + 1, source.values[i, j, q]]

    write_csv(path, header, rows())


def write_control_csv(path, signal, k: int):
    header = ["t"] + [f"W_{k + 1 + c}" for c in range(signal.m)]
    rows = (
        [signal.times[s]] + [signal.values[c, s] for c in range(signal.m)]
        for s in range(signal.times.size)
    )
    write_csv(path, header, rows)
