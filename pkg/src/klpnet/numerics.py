"""Dense float64 array helpers, a finite-difference gradient checker and the
KLPT tensor container format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Functions here
never mutate their inputs.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

MAGIC = b"KLPT"


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def rng(seed) -> np.random.Generator:
    """Seeded generator backed by Philox (a counter-based 64-bit bit generator).

    ``seed`` may be an int or a tuple of ints; tuples are mixed through
    ``SeedSequence`` so that ``(seed, index)`` streams are independent.
    """
    if isinstance(seed, (tuple, list)):
        seed = np.random.SeedSequence([int(s) for s in seed])
    return np.random.Generator(np.random.Philox(seed))


def tensor(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def _log(x):
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return np.log(x)


_SCALAR_MAPS: dict[str, Callable] = {
    "tanh": np.tanh,
    "sigmoid": sigmoid,
    "relu": lambda x: np.maximum(x, 0.0),
    "exp": np.exp,
    "log": _log,
}


def elementwise(t, fn: str) -> np.ndarray:
    if fn not in _SCALAR_MAPS:
        raise ValueError(f"unknown map {fn!r}; expected one of {sorted(_SCALAR_MAPS)}")
    return _SCALAR_MAPS[fn](np.asarray(t, dtype=np.float64))


def concat(a, b, axis: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if i != ax and m != n:
            raise ShapeError(f"extents differ on axis {i}: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=ax)


def resample2x(t, direction: str) -> np.ndarray:
    """Nearest-neighbour 2x up-sampling or 2x2 mean pooling over the two
    leading (spatial) axes.  A trailing channel axis is optional."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim not in (2, 3):
        raise ShapeError(f"expected a 2-d or 3-d map, got shape {t.shape}")
    if direction == "up":
        return t.repeat(2, axis=0).repeat(2, axis=1)
    if direction == "down":
        h, w = t.shape[:2]
        if h % 2 or w % 2:
            raise ShapeError(f"cannot down-sample odd extents {t.shape[:2]}")
        blocks = t.reshape((h // 2, 2, w // 2, 2) + t.shape[2:])
        # fixed summation order: the four taps are added left to right
        s = blocks[:, 0, :, 0] + blocks[:, 0, :, 1] + blocks[:, 1, :, 0] + blocks[:, 1, :, 1]
        return s / 4.0
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


def numerical_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near component {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(f, x, analytic_grad, eps: float = 1e-5) -> float:
    """Largest componentwise ``|fd - an| / max(1, |fd|, |an|)`` between central
    differences of ``f`` at ``x`` and ``analytic_grad``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    an = np.asarray(analytic_grad, dtype=np.float64)
    fd = numerical_grad(f, x, eps)
    if fd.shape != an.shape:
        raise ShapeError(f"gradient shape {an.shape} does not match input {fd.shape}")
    if fd.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(an)))
    return float(np.max(np.abs(fd - an) / denom))


# -- KLPT container -----------------------------------------------------------

def encode_tensor(t) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    head = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one container at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad magic, not a KLPT tensor")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = start + 8 * count
    if end > len(buf):
        raise ValueError("truncated KLPT payload")
    arr = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, end


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, t) -> None:
    atomic_write(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Concatenate containers into ``path``; the JSON manifest beside it maps
    each name to its byte offset and length."""
    blob = bytearray()
    entries = {}
    for name, t in tensors.items():
        enc = encode_tensor(t)
        entries[name] = {"offset": len(blob), "length": len(enc)}
        blob += enc
    atomic_write(path, bytes(blob))
    atomic_write(manifest_path(path), json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n")


def load_archive(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    manifest = json.loads(manifest_path(path).read_text())
    out = {}
    for name, ent in manifest["entries"].items():
        arr, end = decode_tensor(blob, ent["offset"])
        if end - ent["offset"] != ent["length"]:
            raise ValueError(f"manifest length mismatch for {name!r}")
        out[name] = arr
    return out
