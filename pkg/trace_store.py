"""
Trace Store

In-memory trace campaigns (`TraceSet`), the SVTR binary file format,
seeded train/validation/test splitting and CSV export.

SVTR v1 layout (little-endian):
    header  magic "SVTR" | version u32 | trace_count u64 | samples_per_trace u32 | flags u32
    records iv[16] | key[32] (if flags bit 0) | fixed u8 | samples f32[samples_per_trace]
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MAGIC = b"SVTR"
VERSION = 1
FLAG_KEYS = 0x1
HEADER = struct.Struct("<4sIQII")

PathLike = Union[str, Path]


class TraceFormatError(ValueError):
    """Malformed SVTR file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class TraceSet:
    """A campaign of traces. Arrays are read-only after construction."""
    samples: np.ndarray
    ivs: np.ndarray
    fixed: np.ndarray
    keys: Optional[np.ndarray] = None

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (traces x samples), got shape {samples.shape}")
        n = samples.shape[0]
        ivs = np.ascontiguousarray(self.ivs, dtype=np.uint8).reshape(n, 16)
        fixed = np.ascontiguousarray(self.fixed, dtype=bool).reshape(n)
        keys = None
        if self.keys is not None:
            keys = np.ascontiguousarray(self.keys, dtype=np.uint8).reshape(n, 32)
        for arr in (samples, ivs, fixed, keys):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "ivs", ivs)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "keys", keys)

    @classmethod
    def empty(cls, samples_per_trace: int, with_keys: bool = True) -> "TraceSet":
        return cls(
            samples=np.zeros((0, samples_per_trace), dtype=np.float32),
            ivs=np.zeros((0, 16), dtype=np.uint8),
            fixed=np.zeros(0, dtype=bool),
            keys=np.zeros((0, 32), dtype=np.uint8) if with_keys else None,
        )

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_traces(self) -> int:
        return len(self)

    @property
    def samples_per_trace(self) -> int:
        return self.samples.shape[1]

    @property
    def has_keys(self) -> bool:
        return self.keys is not None

    def subset(self, index) -> "TraceSet":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return TraceSet(
            samples=self.samples[index],
            ivs=self.ivs[index],
            fixed=self.fixed[index],
            keys=None if self.keys is None else self.keys[index],
        )

    def crop(self, start: int, stop: int) -> "TraceSet":
        """Samples [start, stop) of every trace."""
        if not 0 <= start < stop <= self.samples_per_trace:
            raise ValueError(f"crop window [{start}, {stop}) outside 0..{self.samples_per_trace}")
        return TraceSet(samples=np.ascontiguousarray(self.samples[:, start:stop]), ivs=self.ivs,
                        fixed=self.fixed, keys=self.keys)

    def group(self, fixed: bool) -> "TraceSet":
        return self.subset(np.flatnonzero(self.fixed == fixed))

    def key_bytes(self, i: int) -> bytes:
        if self.keys is None:
            raise ValueError("trace set carries no per-trace keys")
        return self.keys[i].tobytes()

    def iv_bytes(self, i: int) -> bytes:
        return self.ivs[i].tobytes()

    def equals(self, other: "TraceSet") -> bool:
        if len(self) != len(other) or self.samples_per_trace != other.samples_per_trace:
            return False
        if self.has_keys != other.has_keys:
            return False
        same_keys = self.keys is None or np.array_equal(self.keys, other.keys)
        return (same_keys
                and np.array_equal(self.ivs, other.ivs)
                and np.array_equal(self.fixed, other.fixed)
                and self.samples.tobytes() == other.samples.tobytes())


def concat(parts, samples_per_trace: int) -> TraceSet:
    parts = [p for p in parts if len(p)]
    if not parts:
        return TraceSet.empty(samples_per_trace)
    with_keys = all(p.has_keys for p in parts)
    return TraceSet(
        samples=np.concatenate([p.samples for p in parts]),
        ivs=np.concatenate([p.ivs for p in parts]),
        fixed=np.concatenate([p.fixed for p in parts]),
        keys=np.concatenate([p.keys for p in parts]) if with_keys else None,
    )


# ---------------------------------------------------------------------------
# SVTR files
# ---------------------------------------------------------------------------

def record_dtype(samples_per_trace: int, with_keys: bool) -> np.dtype:
    fields = [("iv", "u1", (16,))]
    if with_keys:
        fields.append(("key", "u1", (32,)))
    fields.append(("fixed", "u1"))
    if samples_per_trace:
        fields.append(("samples", "<f4", (samples_per_trace,)))
    return np.dtype(fields)


def save(ts: TraceSet, path: PathLike, include_keys: bool = True) -> Path:
    """Write `ts` as an SVTR v1 file."""
    path = Path(path)
    with_keys = include_keys and ts.has_keys
    dtype = record_dtype(ts.samples_per_trace, with_keys)
    records = np.zeros(len(ts), dtype=dtype)
    records["iv"] = ts.ivs
    if with_keys:
        records["key"] = ts.keys
    records["fixed"] = ts.fixed.astype(np.uint8)
    if ts.samples_per_trace:
        records["samples"] = ts.samples
    flags = FLAG_KEYS if with_keys else 0
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, len(ts), ts.samples_per_trace, flags))
        f.write(records.tobytes())
    logger.debug("Saved %d traces to %s", len(ts), path)
    return path


def read_header(data: bytes) -> Tuple[int, int, int]:
    if len(data) < HEADER.size:
        raise TraceFormatError("truncated header", len(data))
    magic, version, count, samples_per_trace, flags = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}", 4)
    if flags & ~FLAG_KEYS:
        raise TraceFormatError(f"unknown flag bits 0x{flags:08x}", 20)
    return count, samples_per_trace, flags


def load(path: PathLike) -> TraceSet:
    """Read an SVTR v1 file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    data = path.read_bytes()
    count, samples_per_trace, flags = read_header(data)
    with_keys = bool(flags & FLAG_KEYS)
    dtype = record_dtype(samples_per_trace, with_keys)
    body = len(data) - HEADER.size
    expected = count * dtype.itemsize
    if body < expected:
        complete = body // dtype.itemsize if dtype.itemsize else 0
        raise TraceFormatError(
            f"truncated: header declares {count} traces, file holds {complete}",
            HEADER.size + complete * dtype.itemsize)
    if body > expected:
        raise TraceFormatError("trailing bytes after last trace", HEADER.size + expected)
    records = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size)
    if samples_per_trace:
        samples = np.array(records["samples"], dtype=np.float32).reshape(count, samples_per_trace)
    else:
        samples = np.zeros((count, 0), dtype=np.float32)
    return TraceSet(
        samples=samples,
        ivs=np.array(records["iv"]),
        fixed=records["fixed"].astype(bool),
        keys=np.array(records["key"]) if with_keys else None,
    )


def export_csv(ts: TraceSet, path: PathLike) -> Path:
    """CSV export with header `iv,key,fixed,s0..sN`."""
    frame = pd.DataFrame(ts.samples, columns=[f"s{j}" for j in range(ts.samples_per_trace)])
    frame.insert(0, "fixed", ts.fixed.astype(int))
    keys = [k.tobytes().hex() for k in ts.keys] if ts.has_keys else [""] * len(ts)
    frame.insert(0, "key", keys)
    frame.insert(0, "iv", [iv.tobytes().hex() for iv in ts.ivs])
    frame.to_csv(path, index=False)
    return Path(path)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            raise ValueError(f"split fractions must be >= 0, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")

    @classmethod
    def from_ratio(cls, ratio: str, seed: int = 0) -> "SplitSpec":
        """Parse "64:16:20" or "80:20" (train:test)."""
        parts = [float(p) for p in ratio.split(":")]
        if len(parts) == 2:
            parts = [parts[0], 0.0, parts[1]]
        if len(parts) != 3 or sum(parts) <= 0:
            raise ValueError(f"invalid split ratio {ratio!r}")
        total = sum(parts)
        return cls(parts[0] / total, parts[1] / total, parts[2] / total, seed)

    def sizes(self, n: int) -> Tuple[int, int, int]:
        n_val = math.floor(n * self.val_frac + 1e-9)
        n_test = math.floor(n * self.test_frac + 1e-9)
        return n - n_val - n_test, n_val, n_test


def split(ts: TraceSet, spec: SplitSpec) -> Tuple[TraceSet, TraceSet, TraceSet]:
    """Seeded shuffle, then contiguous train/val/test partition."""
    n = len(ts)
    n_train, n_val, _ = spec.sizes(n)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
    order = rng.permutation(n)
    return (ts.subset(order[:n_train]),
            ts.subset(order[n_train:n_train + n_val]),
            ts.subset(order[n_train + n_val:]))
