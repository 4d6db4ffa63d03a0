"""Domain codecs and feature-layer assembly.

The feature layer (FL) is one flat vector of boolean variables, split
into contiguous per-domain slices in declaration order.  Each domain is
either `neural` (bits produced by the encoder's hard pass) or
`one_hot_symbolic` (bits produced by a symbolic codec).  Per-domain
width:

* cat_dim == 2               -> num_vars bits (one bit per variable)
* cat_dim > 2, uncompressed  -> num_vars * cat_dim indicator bits
* cat_dim > 2, compressed    -> num_vars * ceil(log2 cat_dim) code bits

Compression is plain big-endian binary coding of the category index;
invalid codes decode to an error rather than being excluded by a
constraint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .circuit import CompleteAssignment
from .errors import DecodeError


@dataclass(frozen=True)
class SymbolicCodec:
    """Fixed-width boolean code for a categorical value."""

    category_count: int
    binary_compression: bool = False

    def __post_init__(self):
        if self.category_count < 2:
            raise ValueError("category_count must be at least 2")

    @property
    def width(self) -> int:
        if self.binary_compression:
            return max(1, math.ceil(math.log2(self.category_count)))
        return self.category_count


def encode_symbol(codec: SymbolicCodec, y: int) -> np.ndarray:
    """Category index -> boolean vector (one-hot, or binary code when
    the codec compresses)."""
    y = int(y)
    if not 0 <= y < codec.category_count:
        raise ValueError(f"category {y} outside [0, {codec.category_count})")
    if codec.binary_compression:
        w = codec.width
        bits = (y >> np.arange(w - 1, -1, -1)) & 1  # big-endian
        return bits.astype(np.uint8)
    out = np.zeros(codec.category_count, dtype=np.uint8)
    out[y] = 1
    return out


def decode_symbol(codec: SymbolicCodec, bits) -> int:
    """Boolean code or score vector -> category index.

    Uncompressed codes decode by argmax (ties to the lowest index), so
    soft scores work too.  Compressed codes must be exact 0/1 bits; a
    code value >= k raises DecodeError.
    """
    arr = np.asarray(bits)
    if arr.ndim != 1 or len(arr) != codec.width:
        raise DecodeError(f"expected {codec.width} values, got shape {arr.shape}")
    if codec.binary_compression:
        if not np.isin(arr, (0, 1)).all():
            raise DecodeError("compressed codes must be exact 0/1 bits")
        value = 0
        for b in arr.astype(int):
            value = (value << 1) | b
        if value >= codec.category_count:
            raise DecodeError(
                f"code {value} has no category (k={codec.category_count})"
            )
        return value
    return int(np.argmax(arr))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    num_vars: int
    cat_dim: int
    codec: str  # "neural" | "one_hot_symbolic"
    compressed: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("domain name must be non-empty")
        if self.num_vars < 1:
            raise ValueError(f"domain {self.name!r}: num_vars must be >= 1")
        if self.cat_dim < 2:
            raise ValueError(f"domain {self.name!r}: cat_dim must be >= 2")
        if self.codec not in ("neural", "one_hot_symbolic"):
            raise ValueError(f"domain {self.name!r}: unknown codec {self.codec!r}")
        if self.compressed and self.codec != "one_hot_symbolic":
            raise ValueError(f"domain {self.name!r}: only symbolic domains compress")

    @property
    def width(self) -> int:
        if self.cat_dim == 2:
            return self.num_vars
        if self.compressed:
            return self.num_vars * math.ceil(math.log2(self.cat_dim))
        return self.num_vars * self.cat_dim

    def symbol_codec(self) -> SymbolicCodec:
        """Codec matching this domain's slice layout (symbolic domains)."""
        if self.codec != "one_hot_symbolic":
            raise ValueError(f"domain {self.name!r} is not symbolic")
        # cat_dim 2 always packs to a single bit, same as compression
        return SymbolicCodec(self.cat_dim, self.compressed or self.cat_dim == 2)


class FeatureLayerSpec:
    """Ordered domain list plus the derived index layout of the FL."""

    def __init__(self, domains: Iterable[DomainSpec]):
        self.domains: tuple[DomainSpec, ...] = tuple(domains)
        if not self.domains:
            raise ValueError("feature layer needs at least one domain")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate domain names in {names}")
        self._ranges: dict[str, tuple[int, int]] = {}
        start = 0
        for d in self.domains:
            self._ranges[d.name] = (start, start + d.width)
            start += d.width
        self.total_vars = start

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def domain_range(self, name: str) -> tuple[int, int]:
        return self._ranges[name]

    def __eq__(self, other):
        if not isinstance(other, FeatureLayerSpec):
            return NotImplemented
        return self.domains == other.domains

    def __repr__(self):
        parts = ", ".join(f"{d.name}[{d.width}]" for d in self.domains)
        return f"FeatureLayerSpec({parts}; total={self.total_vars})"

    def sampling_groups(self) -> tuple[tuple[int, ...], ...]:
        """Partition of [0, total_vars) into categorical units.

        Indicator-coded variables form one group of cat_dim bits; every
        other bit is its own group.  Used by generative sampling so a
        one-hot block is drawn as a single k-way choice.
        """
        groups: list[tuple[int, ...]] = []
        for d in self.domains:
            start, stop = self._ranges[d.name]
            if d.cat_dim > 2 and not d.compressed:
                for v in range(d.num_vars):
                    base = start + v * d.cat_dim
                    groups.append(tuple(range(base, base + d.cat_dim)))
            else:
                groups.extend((i,) for i in range(start, stop))
        return tuple(groups)

    def to_json(self) -> str:
        payload = {
            "domains": [
                {
                    "name": d.name,
                    "num_vars": d.num_vars,
                    "cat_dim": d.cat_dim,
                    "codec": d.codec,
                    "compressed": d.compressed,
                }
                for d in self.domains
            ]
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureLayerSpec":
        payload = json.loads(text)
        return cls(
            DomainSpec(
                name=d["name"],
                num_vars=int(d["num_vars"]),
                cat_dim=int(d["cat_dim"]),
                codec=d["codec"],
                compressed=bool(d.get("compressed", False)),
            )
            for d in payload["domains"]
        )


def assemble_fl(spec: FeatureLayerSpec,
                per_domain: Mapping[str, Sequence]) -> CompleteAssignment:
    """Concatenate per-domain bit vectors into one FL assignment."""
    missing = [d.name for d in spec.domains if d.name not in per_domain]
    if missing:
        raise ValueError(f"missing domain values for {missing}")
    extra = set(per_domain) - {d.name for d in spec.domains}
    if extra:
        raise ValueError(f"unknown domains {sorted(extra)}")
    out = np.zeros(spec.total_vars, dtype=np.uint8)
    for d in spec.domains:
        start, stop = spec.domain_range(d.name)
        bits = np.asarray(per_domain[d.name], dtype=np.uint8)
        if bits.shape != (stop - start,):
            raise ValueError(
                f"domain {d.name!r} expects {stop - start} bits, got shape {bits.shape}"
            )
        out[start:stop] = bits
    return CompleteAssignment(out)


def slice_fl(spec: FeatureLayerSpec, assignment) -> dict[str, np.ndarray]:
    """Inverse of assemble_fl: split one assignment into domain slices."""
    values = assignment.values if isinstance(assignment, CompleteAssignment) \
        else np.asarray(assignment, dtype=np.uint8)
    if values.shape[-1] != spec.total_vars:
        raise ValueError(
            f"assignment has {values.shape[-1]} variables, spec has {spec.total_vars}"
        )
    return {
        d.name: values[..., slice(*spec.domain_range(d.name))].copy()
        for d in spec.domains
    }


def fl_constraint(spec: FeatureLayerSpec) -> list[tuple[int, ...]]:
    """Exactly-one variable groups implied by indicator encodings.

    Compressed and binary domains contribute nothing: every code there
    is a valid assignment.
    """
    groups: list[tuple[int, ...]] = []
    for d in spec.domains:
        if d.cat_dim > 2 and not d.compressed:
            start, _ = spec.domain_range(d.name)
            for v in range(d.num_vars):
                base = start + v * d.cat_dim
                groups.append(tuple(range(base, base + d.cat_dim)))
    return groups


def encode_domain(spec: FeatureLayerSpec, name: str, categories) -> np.ndarray:
    """Encode one category index per domain variable into the slice bits."""
    d = spec.domain(name)
    codec = d.symbol_codec()
    if np.isscalar(categories) or isinstance(categories, (int, np.integer)):
        categories = [categories]
    cats = list(categories)
    if len(cats) != d.num_vars:
        raise ValueError(f"domain {name!r} has {d.num_vars} variables, got {len(cats)} values")
    return np.concatenate([encode_symbol(codec, y) for y in cats])


def decode_domain(spec: FeatureLayerSpec, name: str, bits) -> list[int]:
    """Decode a domain slice back to one category index per variable."""
    d = spec.domain(name)
    codec = d.symbol_codec()
    arr = np.asarray(bits)
    if arr.shape != (d.width,):
        raise ValueError(f"domain {name!r} slice has width {d.width}, got {arr.shape}")
    w = codec.width
    return [decode_symbol(codec, arr[i * w:(i + 1) * w]) for i in range(d.num_vars)]
