"""Exact nearest-neighbor backends.

The default backend is in-process (scipy k-d tree with a brute-force
reference). The environment variable ``EP_NN_KERNEL`` can redirect queries to
an external kernel:

    EP_NN_KERNEL=internal                  (default)
    EP_NN_KERNEL=shared-lib:/path/to/libnnkernel.so
    EP_NN_KERNEL=subprocess:/path/to/nnkernel

The external kernel speaks a framed binary protocol (magic ``NNK1`` + version
byte) or a C ABI; both return squared distances and lowest-index tie-broken
nearest indices.
"""
from __future__ import annotations

import ctypes
import os
import struct
import subprocess
import threading

import numpy as np
from scipy.spatial import cKDTree

MAGIC = b"NNK1"
VERSION = 1
OP_NN = 0
OP_CHAMFER = 1

STATUS_OK = 0
STATUS_EMPTY_REFERENCE = 1
STATUS_DIM_MISMATCH = 2


def nearest_sq_brute(query: np.ndarray, reference: np.ndarray, block: int = 4096):
    """Exact nearest neighbors by blocked brute force; ties break to the
    lowest reference index. Independent of any tree structure."""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if len(reference) == 0:
        raise ValueError("empty reference cloud")
    if query.shape[1] != reference.shape[1]:
        raise ValueError("dimension mismatch")
    out_d = np.empty(len(query), dtype=np.float64)
    out_i = np.empty(len(query), dtype=np.int64)
    for start in range(0, len(query), block):
        q = query[start:start + block]
        d2 = ((q[:, None, :] - reference[None, :, :]) ** 2).sum(axis=-1)
        idx = np.argmin(d2, axis=1)  # argmin returns the first (lowest) index
        out_i[start:start + len(q)] = idx
        out_d[start:start + len(q)] = d2[np.arange(len(q)), idx]
    return out_d, out_i


def _nearest_sq_internal(query: np.ndarray, reference: np.ndarray):
    if len(reference) == 0:
        raise ValueError("empty reference cloud")
    if query.shape[1] != reference.shape[1]:
        raise ValueError("dimension mismatch")
    if len(reference) <= 64:
        return nearest_sq_brute(query, reference)
    tree = cKDTree(reference)
    d, i = tree.query(query, k=1)
    return np.asarray(d, dtype=np.float64) ** 2, np.asarray(i, dtype=np.int64)


class _SharedLibBackend:
    """ctypes client for the nn-kernel shared library."""

    def __init__(self, path: str):
        self.lib = ctypes.CDLL(path)
        self.lib.nnk_build_tree.restype = ctypes.c_void_p
        self.lib.nnk_build_tree.argtypes = [
            ctypes.POINTER(ctypes.c_float), ctypes.c_uint32, ctypes.c_uint8]
        self.lib.nnk_query.restype = ctypes.c_int32
        self.lib.nnk_query.argtypes = [
            ctypes.c_void_p,
            ctypes.POINTER(ctypes.c_float), ctypes.c_uint32, ctypes.c_uint8,
            ctypes.POINTER(ctypes.c_float), ctypes.POINTER(ctypes.c_uint32)]
        self.lib.nnk_free.argtypes = [ctypes.c_void_p]
        self._lock = threading.Lock()

    def nearest_sq(self, query: np.ndarray, reference: np.ndarray):
        if len(reference) == 0:
            raise ValueError("empty reference cloud")
        if query.shape[1] != reference.shape[1]:
            raise ValueError("dimension mismatch")
        q = np.ascontiguousarray(query, dtype=np.float32)
        r = np.ascontiguousarray(reference, dtype=np.float32)
        dim = q.shape[1]
        dists = np.empty(len(q), dtype=np.float32)
        idx = np.empty(len(q), dtype=np.uint32)
        with self._lock:
            tree = self.lib.nnk_build_tree(
                r.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
                ctypes.c_uint32(len(r)), ctypes.c_uint8(dim))
            if not tree:
                raise RuntimeError("nnk_build_tree failed")
            try:
                status = self.lib.nnk_query(
                    tree,
                    q.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
                    ctypes.c_uint32(len(q)), ctypes.c_uint8(dim),
                    dists.ctypes.data_as(ctypes.POINTER(ctypes.c_float)),
                    idx.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)))
            finally:
                self.lib.nnk_free(tree)
        if status != STATUS_OK:
            raise RuntimeError(f"nnk_query failed with status {status}")
        return dists.astype(np.float64), idx.astype(np.int64)


def pack_cloud(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    count, dim = arr.shape
    return struct.pack("<IB", count, dim) + arr.tobytes()


class _SubprocessBackend:
    """Client for the nn-kernel standalone executable (stdin/stdout framing)."""

    def __init__(self, path: str):
        self.path = path
        self._proc = None
        self._lock = threading.Lock()

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                [self.path], stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._proc.stdout.read(n - len(buf))
            if not chunk:
                raise RuntimeError("nn-kernel subprocess closed its output")
            buf += chunk
        return buf

    def request_nn(self, query: np.ndarray, reference: np.ndarray):
        msg = MAGIC + bytes([VERSION, OP_NN]) + pack_cloud(query) + pack_cloud(reference)
        with self._lock:
            proc = self._ensure()
            proc.stdin.write(msg)
            proc.stdin.flush()
            head = self._read_exact(6)
            if head[:4] != MAGIC or head[4] != VERSION:
                raise RuntimeError("bad nn-kernel response framing")
            status = head[5]
            if status != STATUS_OK:
                raise ValueError(f"nn-kernel status {status}")
            (n,) = struct.unpack("<I", self._read_exact(4))
            dists = np.frombuffer(self._read_exact(4 * n), dtype="<f4")
            idx = np.frombuffer(self._read_exact(4 * n), dtype="<u4")
        return dists.astype(np.float64), idx.astype(np.int64)

    def nearest_sq(self, query: np.ndarray, reference: np.ndarray):
        if len(reference) == 0:
            raise ValueError("empty reference cloud")
        if query.shape[1] != reference.shape[1]:
            raise ValueError("dimension mismatch")
        return self.request_nn(query, reference)


_backend_cache: dict = {}


def _get_backend():
    selector = os.environ.get("EP_NN_KERNEL", "internal")
    if selector in _backend_cache:
        return _backend_cache[selector]
    if selector == "internal":
        backend = None
    elif selector.startswith("shared-lib:"):
        backend = _SharedLibBackend(selector.split(":", 1)[1])
    elif selector.startswith("subprocess:"):
        backend = _SubprocessBackend(selector.split(":", 1)[1])
    else:
        raise ValueError(f"unknown EP_NN_KERNEL value: {selector!r}")
    _backend_cache[selector] = backend
    return backend


def nearest_sq(query: np.ndarray, reference: np.ndarray):
    """Squared distance and index of the nearest reference point, per query
    point, using the configured backend."""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    backend = _get_backend()
    if backend is None:
        return _nearest_sq_internal(query, reference)
    return backend.nearest_sq(query, reference)
