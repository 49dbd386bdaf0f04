"""Datasets, image readers and checkpoint persistence."""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParseError",
    "CheckpointError",
    "Dataset",
    "GroundTruth",
    "gen_synthetic",
    "sample_patches",
    "preprocess_split",
    "load_idx",
    "load_pgm",
    "save_matrix",
    "load_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "write_dataset_csv",
]

MAGIC = b"DLM1"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class ParseError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a P x M matrix")
        if np.any(self.samples < 0):
            raise ValueError("dataset entries must be nonnegative")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def split(self, n_first: int):
        return (Dataset(self.samples[:n_first], dict(self.meta, part="head")),
                Dataset(self.samples[n_first:], dict(self.meta, part="tail")))


@dataclass
class GroundTruth:
    D_true: np.ndarray
    codes: np.ndarray


def gen_synthetic(M: int, N: int, k: int, P: int, noise_sigma: float = 0.0, seed=None):
    """Nonnegative k-sparse combinations of a random unit-column dictionary.

    Returns ``(Dataset, GroundTruth)``.  Noise is Gaussian and the noisy
    samples are clamped at zero.
    """
    if min(M, N) < 1 or P < 0:
        raise ValueError("M and N must be positive and P nonnegative")
    if not 0 <= k <= N:
        raise ValueError("k must lie in [0, N]")
    rng = np.random.default_rng(seed)
    D = rng.uniform(0.0, 1.0, size=(M, N))
    D /= np.linalg.norm(D, axis=0)
    codes = np.zeros((P, N))
    for i in range(P):
        support = rng.choice(N, size=k, replace=False)
        codes[i, support] = rng.uniform(0.5, 1.5, size=k)
    X = codes @ D.T
    if noise_sigma > 0:
        X = np.maximum(X + rng.normal(0.0, noise_sigma, size=X.shape), 0.0)
    meta = {"source": "synthetic", "M": M, "N": N, "k": k, "P": P,
            "noise_sigma": noise_sigma, "seed": seed}
    return Dataset(X, meta), GroundTruth(D, codes)


def sample_patches(image, patch_edge: int, count: int, seed=None) -> np.ndarray:
    """``count`` random square patches, flattened row-major."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-d")
    h, w = img.shape
    if h < patch_edge or w < patch_edge:
        raise ValueError(f"image {h}x{w} is smaller than the {patch_edge}x{patch_edge} patch")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch_edge + 1, size=count)
    cols = rng.integers(0, w - patch_edge + 1, size=count)
    out = np.empty((count, patch_edge * patch_edge))
    for i, (r, c) in enumerate(zip(rows, cols)):
        out[i] = img[r:r + patch_edge, c:c + patch_edge].ravel()
    return out


def preprocess_split(patches, eps: float = 1e-12) -> Dataset:
    """Center, normalize and split each patch into positive/negative channels.

    Patches that are constant (zero after centering) are dropped; the number
    dropped is recorded in ``meta["dropped"]``.
    """
    X = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    X = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(X, axis=1)
    keep = norms > eps
    X = X[keep] / norms[keep, None]
    out = np.concatenate([np.maximum(X, 0.0), np.maximum(-X, 0.0)], axis=1)
    meta = {"source": "patches", "preprocessing": ["center", "normalize", "split"],
            "dropped": int((~keep).sum())}
    return Dataset(out, meta)


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise ParseError(f"truncated file while reading {what}", offset)
    return buf[offset:offset + n]


def load_idx(path) -> np.ndarray:
    """Read an IDX image (or label) file.

    Images come back as a ``(count, rows, cols)`` float array scaled to
    ``[0, 1]``; label files as a 1-d integer array.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic"))
    if magic == IDX_IMAGES:
        count, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, "header"))
        n = count * rows * cols
        if len(buf) - 16 != n:
            raise ParseError(
                f"payload has {len(buf) - 16} bytes, header declares {count}x{rows}x{cols}",
                16 + min(n, len(buf) - 16),
            )
        return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(count, rows, cols) / 255.0
    if magic == IDX_LABELS:
        (count,) = struct.unpack(">I", _read_exact(buf, 4, 4, "header"))
        if len(buf) - 8 != count:
            raise ParseError(f"payload has {len(buf) - 8} bytes, header declares {count}", 8)
        return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)
    raise ParseError(f"bad IDX magic 0x{magic:08x}", 0)


def _pgm_tokens(buf: bytes, pos: int, n: int):
    toks = []
    while len(toks) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", start)
        toks.append(buf[start:pos])
    return toks, pos


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) graymap scaled to ``[0, 1]``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    kind = buf[:2]
    if kind not in (b"P5", b"P2"):
        raise ParseError("not a PGM file", 0)
    (w, h, maxval), pos = _pgm_tokens(buf, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if kind == b"P2":
        vals, _ = _pgm_tokens(buf, pos, w * h)
        img = np.array([int(v) for v in vals], dtype=np.float64)
    else:
        pos += 1
        dtype = ">u2" if maxval > 255 else np.uint8
        size = w * h * np.dtype(dtype).itemsize
        img = np.frombuffer(_read_exact(buf, pos, size, "pixels"), dtype=dtype).astype(np.float64)
    return img.reshape(h, w) / maxval


def _matrix_bytes(A) -> bytes:
    A = np.asarray(A, dtype="<f8")
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValueError("only matrices and vectors can be stored")
    rows, cols = A.shape
    return MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(A).tobytes()


def _parse_matrix(buf: bytes, offset: int = 0):
    if buf[offset:offset + 4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic at offset {offset}")
    if len(buf) < offset + 12:
        raise CheckpointError("truncated checkpoint header")
    rows, cols = struct.unpack("<II", buf[offset + 4:offset + 12])
    n = rows * cols * 8
    end = offset + 12 + n
    if len(buf) < end:
        raise CheckpointError(f"checkpoint declares {rows}x{cols} but payload is short")
    A = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset + 12).reshape(rows, cols)
    return A.astype(np.float64), end


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_matrix(A, path) -> None:
    _atomic_write(path, _matrix_bytes(A))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    A, end = _parse_matrix(buf)
    if end != len(buf):
        raise CheckpointError(f"{len(buf) - end} trailing bytes after matrix")
    return A


_PARAM_MATRICES = ("F", "B", "H", "L")


def save_checkpoint(obj, path) -> None:
    """Persist a matrix or ``NetworkParams``.

    Matrices are a single DLM1 record.  Network parameters are a text header
    of ``key = value`` lines terminated by ``end``, followed by one DLM1
    record per component matrix in the order listed under ``matrices``.
    """
    from .topology import NetworkParams

    if not isinstance(obj, NetworkParams):
        save_matrix(obj, path)
        return
    header = io.StringIO()
    header.write("format = DLM1-network\n")
    header.write(f"gamma = {obj.gamma!r}\n")
    header.write(f"lam = {obj.lam!r}\n")
    header.write(f"matrices = {','.join(_PARAM_MATRICES)}\n")
    header.write("end\n")
    payload = header.getvalue().encode("ascii")
    payload += b"".join(_matrix_bytes(getattr(obj, k)) for k in _PARAM_MATRICES)
    _atomic_write(path, payload)


def load_checkpoint(path):
    from .topology import NetworkParams

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == MAGIC:
        A, end = _parse_matrix(buf)
        if end != len(buf):
            raise CheckpointError(f"{len(buf) - end} trailing bytes after matrix")
        return A
    marker = buf.find(b"end\n")
    if not buf.startswith(b"format = DLM1-network\n") or marker < 0:
        raise CheckpointError("not a DLM1 checkpoint")
    fields = {}
    for line in buf[:marker].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    offset = marker + 4
    mats = {}
    for name in fields.get("matrices", "").split(","):
        mats[name], offset = _parse_matrix(buf, offset)
    if offset != len(buf):
        raise CheckpointError("trailing bytes after network matrices")
    try:
        return NetworkParams(F=mats["F"], B=mats["B"], H=mats["H"], L=mats["L"].ravel(),
                             gamma=float(fields["gamma"]), lam=float(fields["lam"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc.args[0]}") from None


def write_dataset_csv(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_idx"] + [f"dim_{j}" for j in range(dataset.dim)])
        for i, row in enumerate(dataset.samples):
            w.writerow([i] + [repr(float(v)) for v in row])
