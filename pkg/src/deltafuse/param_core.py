"""Core parameter containers, checkpoint serialization and seeded randomness.

Everything in this package operates on named float64 numpy arrays grouped
into immutable ParamSets. Checkpoints use a small self-describing binary
format (documented in docs/checkpoint_format.md) that round-trips
bit-for-bit. Randomness comes from an explicit counter-based generator
(docs/rng.md) so every result reproduces exactly across platforms and
process boundaries.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import (
    EmptyParamSet,
    FormatError,
    MissingParameter,
    NonFiniteResult,
    ShapeMismatch,
    UnknownParameter,
)

MAGIC = b"DFCKPT01"

_U64 = np.uint64
_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea & Flood; public domain reference listing)
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# FNV-1a 64-bit
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def as_tensor(value) -> np.ndarray:
    """Convert value to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_metadata(metadata) -> dict:
    if metadata is None:
        return {}
    items = metadata.items() if hasattr(metadata, "items") else metadata
    out = {}
    for key, value in items:
        if not isinstance(key, str) or not isinstance(value, str):
            raise ValueError(f"metadata must map strings to strings, got {key!r}: {value!r}")
        out[key] = value
    return out


class ParamSet:
    """Immutable mapping from parameter name to float64 tensor.

    Iteration, flattening and serialization all follow lexicographic name
    order, so any two ParamSets with equal contents behave identically
    regardless of construction order. Values are validated to be finite on
    every construction; arithmetic therefore surfaces overflow as
    NonFiniteResult instead of silently propagating inf/NaN.

    An optional string-to-string metadata map carries free-form provenance
    (e.g. which checkpoints a delta came from). Metadata rides along on
    copies but is deliberately dropped by arithmetic, and never participates
    in equals().
    """

    __slots__ = ("_tensors", "_names", "_metadata")

    def __init__(self, tensors, metadata=None):
        items = tensors.items() if hasattr(tensors, "items") else tensors
        owned = {}
        for name, value in items:
            arr = as_tensor(value)
            if arr is value or arr.base is not None:
                arr = arr.copy()
            owned[name] = arr
        self._init_owned(owned, _check_metadata(metadata))

    @classmethod
    def _wrap(cls, owned: dict, metadata: dict | None = None) -> "ParamSet":
        # Internal: takes ownership of freshly computed arrays, no copy.
        self = object.__new__(cls)
        self._init_owned(owned, metadata or {})
        return self

    def _init_owned(self, owned: dict, metadata: dict) -> None:
        for name, arr in owned.items():
            if not isinstance(name, str) or not name:
                raise ValueError(f"parameter names must be non-empty strings, got {name!r}")
            # Names appear verbatim in text reports, one per line.
            if any(ord(c) < 32 or ord(c) == 127 for c in name):
                raise ValueError(f"parameter names must not contain control characters: {name!r}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteResult(f"non-finite values in tensor {name!r}")
            _freeze(arr)
        self._tensors = owned
        self._names = tuple(sorted(owned))
        self._metadata = metadata

    @property
    def names(self) -> tuple:
        return self._names

    @property
    def metadata(self) -> dict:
        return dict(self._metadata)

    def with_metadata(self, metadata) -> "ParamSet":
        """Same tensors (shared, still frozen) under a new metadata map."""
        return ParamSet._wrap(self._tensors, _check_metadata(metadata))

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingParameter(f"no parameter named {name!r}") from None

    def items(self):
        """Yield (name, tensor) pairs in lexicographic name order."""
        for name in self._names:
            yield name, self._tensors[name]

    def shapes(self) -> dict:
        return {name: self._tensors[name].shape for name in self._names}

    def size(self) -> int:
        """Total element count across all tensors."""
        return sum(t.size for t in self._tensors.values())

    def to_dict(self) -> dict:
        """Writable copies of every tensor, keyed by name."""
        return {name: self._tensors[name].copy() for name in self._names}

    def _require_same_names(self, other: "ParamSet") -> None:
        if self._names == other._names:
            return
        missing = sorted(set(self._names) - set(other._names))
        if missing:
            raise MissingParameter(f"missing parameters: {missing}")
        extra = sorted(set(other._names) - set(self._names))
        raise UnknownParameter(f"unexpected parameters: {extra}")

    def _binary(self, other: "ParamSet", op) -> "ParamSet":
        self._require_same_names(other)
        out = {}
        # Overflow to inf is reported as NonFiniteResult by _wrap, so the
        # numpy warning would be redundant noise.
        with np.errstate(over="ignore", invalid="ignore"):
            for name in self._names:
                a, b = self._tensors[name], other._tensors[name]
                if a.shape != b.shape:
                    raise ShapeMismatch(f"{name!r}: {a.shape} vs {b.shape}")
                out[name] = op(a, b)
        return ParamSet._wrap(out)

    def add(self, other: "ParamSet") -> "ParamSet":
        return self._binary(other, np.add)

    def subtract(self, other: "ParamSet") -> "ParamSet":
        return self._binary(other, np.subtract)

    def scale(self, factor: float) -> "ParamSet":
        factor = float(factor)
        with np.errstate(over="ignore", invalid="ignore"):
            return ParamSet._wrap({n: t * factor for n, t in self._tensors.items()})

    def dot(self, other: "ParamSet") -> float:
        self._require_same_names(other)
        total = 0.0
        for name in self._names:
            a, b = self._tensors[name], other._tensors[name]
            if a.shape != b.shape:
                raise ShapeMismatch(f"{name!r}: {a.shape} vs {b.shape}")
            total += float(np.dot(a.ravel(), b.ravel()))
        return total

    def l1_norm(self) -> float:
        return float(sum(np.abs(t).sum() for t in self._tensors.values()))

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.dot(t.ravel(), t.ravel())) for t in self._tensors.values())))

    def equals(self, other: "ParamSet") -> bool:
        """Exact equality: same names, shapes and bit-identical values."""
        if self._names != other._names:
            return False
        return all(
            self._tensors[n].shape == other._tensors[n].shape
            and np.array_equal(self._tensors[n], other._tensors[n])
            for n in self._names
        )

    def __repr__(self) -> str:
        return f"ParamSet({len(self._names)} tensors, {self.size()} elements)"


def zeros_like(params: ParamSet) -> ParamSet:
    return ParamSet._wrap({n: np.zeros_like(t) for n, t in params.items()})


def matmul(a, b) -> np.ndarray:
    """Product of two rank-2 tensors with explicit shape validation."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul requires rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def flatten_concat(params: ParamSet):
    """Flatten every tensor and concatenate in lexicographic name order.

    Returns (vector, schema) where schema is a list of (name, shape) pairs
    sufficient to invert the operation with unflatten. The round trip is
    exact in both directions.
    """
    schema = [(name, tensor.shape) for name, tensor in params.items()]
    if not schema:
        raise EmptyParamSet("cannot flatten an empty ParamSet")
    vector = np.concatenate([tensor.ravel() for _, tensor in params.items()])
    return vector, schema


def unflatten(vector: np.ndarray, schema) -> ParamSet:
    vector = as_tensor(vector)
    if vector.ndim != 1:
        raise ShapeMismatch(f"expected a 1-d vector, got shape {vector.shape}")
    schema = list(schema)
    if not schema:
        raise EmptyParamSet("schema describes no tensors")
    out = {}
    pos = 0
    for name, shape in schema:
        if name in out:
            raise ValueError(f"duplicate name in schema: {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        chunk = vector[pos:pos + count]
        if chunk.size != count:
            raise ShapeMismatch(f"vector too short for schema at {name!r}")
        out[name] = chunk.reshape(shape).copy()
        pos += count
    if pos != vector.size:
        raise ShapeMismatch(f"vector has {vector.size} elements, schema describes {pos}")
    return ParamSet._wrap(out)


# ---------------------------------------------------------------------------
# Checkpoint format
#
# offset  size          content
# 0       8             magic b"DFCKPT01"
# 8       8             header length H, unsigned little-endian
# 16      H             UTF-8 JSON header {"metadata": {...}, "tensors": {...}}
# 16+H    sum(nbytes)   payload: raw little-endian float64, C order,
#                       tensors contiguous in lexicographic name order
#
# Each header tensor entry is {"shape": [...], "offset": o, "nbytes": n} with
# offsets relative to the payload start. Saves are canonical (sorted JSON
# keys, minimal separators) so equal inputs produce identical files.
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write payload via a same-directory temp file and rename.

    Readers never observe a partial file: they see either the old content
    or the new, and a crash mid-write leaves the target untouched.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".write-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_checkpoint(path, params: ParamSet, metadata: dict | None = None) -> None:
    """Write params to path atomically in the checkpoint format above.

    metadata, when given, replaces params.metadata in the written header.
    """
    if metadata is None:
        metadata = params.metadata
    try:
        metadata = _check_metadata(metadata)
    except (ValueError, AttributeError, TypeError) as exc:
        raise FormatError(f"bad metadata: {exc}", field="metadata") from None
    entries = {}
    offset = 0
    for name, tensor in params.items():
        nbytes = tensor.size * 8
        entries[name] = {"shape": list(tensor.shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header = _canonical_json({"metadata": metadata, "tensors": entries})
    parts = [MAGIC, len(header).to_bytes(8, "little"), header]
    for _, tensor in params.items():
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FormatError("duplicate key in header", field=key)
        out[key] = value
    return out


def _require_keys(obj: dict, keys: set, where: str) -> None:
    for key in obj:
        if key not in keys:
            raise FormatError(f"unexpected key in {where}", field=key)
    for key in keys:
        if key not in obj:
            raise FormatError(f"missing key in {where}", field=key)


def _parse_header(data: bytes, n: int):
    """Validate the prefix and JSON header of a checkpoint.

    data must hold at least the first min(n, 16 + declared header length)
    bytes of the file; n is the true file size, so payload bounds are
    checked without the payload itself. Returns (metadata, entries,
    payload_start) with entries as (name, shape, count) tuples in
    lexicographic name order.
    """
    if n < 16:
        raise FormatError("file truncated before header length", offset=n)
    if data[:8] != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", offset=0)
    header_len = int.from_bytes(data[8:16], "little")
    payload_start = 16 + header_len
    if payload_start > n:
        raise FormatError("declared header length extends past end of file", offset=8)
    try:
        header = json.loads(
            data[16:payload_start].decode("utf-8"),
            object_pairs_hook=_reject_duplicate_keys,
        )
    except FormatError:
        raise
    except UnicodeDecodeError as exc:
        raise FormatError("header is not valid UTF-8", offset=16 + exc.start) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc.msg}", offset=16 + exc.pos) from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", offset=16)
    _require_keys(header, {"metadata", "tensors"}, "header")
    metadata = header["metadata"]
    if not isinstance(metadata, dict):
        raise FormatError("metadata must be a JSON object", field="metadata")
    for key, value in metadata.items():
        if not isinstance(value, str):
            raise FormatError("metadata values must be strings", field=key)
    tensors = header["tensors"]
    if not isinstance(tensors, dict):
        raise FormatError("tensors must be a JSON object", field="tensors")

    expected_offset = 0
    parsed = []
    for name in sorted(tensors):
        entry = tensors[name]
        if not isinstance(entry, dict):
            raise FormatError("tensor entry must be a JSON object", field=name)
        _require_keys(entry, {"shape", "offset", "nbytes"}, f"tensor {name!r}")
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise FormatError("shape must be a list of non-negative integers", field=name)
        count = 1
        for d in shape:
            count *= d
        for key in ("offset", "nbytes"):
            v = entry[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise FormatError(f"{key} must be a non-negative integer", field=name)
        if entry["nbytes"] != count * 8:
            raise FormatError("nbytes inconsistent with shape", field=name)
        if entry["offset"] != expected_offset:
            raise FormatError(
                "tensor offsets must be contiguous in lexicographic name order", field=name
            )
        parsed.append((name, tuple(shape), count))
        expected_offset += entry["nbytes"]

    if payload_start + expected_offset != n:
        raise FormatError(
            "payload size disagrees with header",
            offset=min(n, payload_start + expected_offset),
        )
    return metadata, parsed, payload_start


def read_header(path):
    """Read and validate a checkpoint header without touching the payload.

    Returns (metadata, entries) where entries is a list of
    (name, shape, nbytes) tuples in lexicographic name order. Only the
    prefix and header bytes are read; the payload's declared extent is
    still checked against the file size, so truncation is caught here.
    """
    with open(path, "rb") as fh:
        n = os.fstat(fh.fileno()).st_size
        prefix = fh.read(16)
        header_len = int.from_bytes(prefix[8:16], "little") if len(prefix) == 16 else 0
        data = prefix + fh.read(min(header_len, max(n - 16, 0)))
    metadata, parsed, _ = _parse_header(data, n)
    return metadata, [(name, shape, count * 8) for name, shape, count in parsed]


def load_checkpoint(path) -> ParamSet:
    """Read a checkpoint; header metadata comes back on the ParamSet.

    Raises FormatError identifying the byte offset of the first structural
    inconsistency, or the offending field name for header-level problems.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    metadata, parsed, payload_start = _parse_header(data, len(data))
    out = {}
    pos = payload_start
    for name, shape, count in parsed:
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        arr = values.astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError("tensor contains non-finite values", field=name)
        out[name] = arr
        pos += count * 8
    return ParamSet._wrap(out, metadata)


# ---------------------------------------------------------------------------
# Seeded randomness
#
# splitmix64: the k-th raw output for seed s is mix64(s + (k+1)*GAMMA) over
# uint64 arithmetic. Purely counter-based, so any block of outputs can be
# produced independently of generator state. docs/rng.md freezes the
# algorithm; tests pin the first 1000 outputs for seed 42.
# ---------------------------------------------------------------------------


def mix64(z: int) -> int:
    """Scalar splitmix64 finalizer on plain ints (mod 2**64)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
    z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
    return z ^ (z >> _U64(31))


def _raw_block(seed: int, start: int, count: int) -> np.ndarray:
    if count < 0:
        raise ValueError("count must be non-negative")
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return _mix64_array(_U64(seed & _MASK64) + idx * _U64(GAMMA))


def _to_unit_floats(raw: np.ndarray) -> np.ndarray:
    # 53-bit mantissa: values in [0, 1) on the 2**-53 grid.
    return (raw >> _U64(11)).astype(np.float64) * (2.0 ** -53)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def keyed_uniforms(seed: int, name: str, count: int, start: int = 0) -> np.ndarray:
    """Stateless uniforms in [0, 1) keyed by (seed, name, index).

    Equal to SeededRng(seed ^ fnv1a64(name)).uniforms(count); exists so
    per-tensor randomness never depends on iteration order.
    """
    return _to_unit_floats(_raw_block((seed & _MASK64) ^ fnv1a64(name), start, count))


class SeededRng:
    """Deterministic counter-based generator (splitmix64).

    The same seed yields the same sequence on every platform. The counter
    is exposed so a generator's position can be logged or restored.
    """

    algorithm = "splitmix64"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def raw(self, count: int) -> np.ndarray:
        """Next count raw uint64 outputs, advancing the counter."""
        block = _raw_block(self.seed, self.counter, count)
        self.counter += count
        return block

    def uniforms(self, count: int) -> np.ndarray:
        """Next count floats uniform on [0, 1)."""
        return _to_unit_floats(self.raw(count))

    def normals(self, count: int) -> np.ndarray:
        """Next count standard normal floats via Box-Muller.

        Always consumes an even number of uniforms so the counter
        advancement is a function of count alone.
        """
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        # 1 - u is in (0, 1], so the log is finite.
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        theta = (2.0 * np.pi) * u[pairs:]
        return np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:count]

    def integers(self, bound: int, count: int) -> np.ndarray:
        """Next count integers uniform on [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        idx = (self.uniforms(count) * bound).astype(np.int64)
        return np.minimum(idx, bound - 1)

    def spawn(self, key: str) -> "SeededRng":
        """Independent generator for a named substream."""
        return SeededRng(mix64(self.seed ^ fnv1a64(key)))

    def keyed_uniforms(self, name: str, count: int, start: int = 0) -> np.ndarray:
        """Stateless keyed uniforms; does not advance the counter."""
        return keyed_uniforms(self.seed, name, count, start)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self.counter})"
