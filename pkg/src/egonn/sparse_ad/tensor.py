"""Sparse voxel tensors and coordinate lookup.

Coordinates are ``(N, 4)`` int64 rows ``(batch, i_rho, i_theta, i_z)``
expressed at the tensor's own stride level (a stride-4 tensor stores
``floor(base_index / 4)``). Rows are always kept sorted by their packed key,
which groups them by batch element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Var

_FIELD_BITS = 16
_OFFSET = 1 << (_FIELD_BITS - 1)
_LIMIT = _OFFSET - 16


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack ``(batch, a, b, c)`` rows into sortable int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    return ((c[:, 0] << 48) | ((c[:, 1] + _OFFSET) << 32)
            | ((c[:, 2] + _OFFSET) << 16) | (c[:, 3] + _OFFSET))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    mask = (1 << _FIELD_BITS) - 1
    return np.stack([k >> 48, ((k >> 32) & mask) - _OFFSET,
                     ((k >> 16) & mask) - _OFFSET, (k & mask) - _OFFSET], axis=1)


def check_coords(coords: np.ndarray) -> None:
    if len(coords) and (np.abs(coords[:, 1:]).max() >= _LIMIT or coords[:, 0].min() < 0
                        or coords[:, 0].max() >= _OFFSET):
        raise ValueError("voxel coordinates out of the packable range")


class CoordIndex:
    """Sorted-key lookup table mapping voxel coordinates to row numbers."""

    def __init__(self, keys: np.ndarray):
        self.keys = keys
        if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ValueError("coordinate keys must be strictly increasing (unique, sorted)")

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of each query key, or -1 where absent."""
        if len(self.keys) == 0:
            return np.full(len(query), -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, query)
        pos = np.minimum(pos, len(self.keys) - 1)
        return np.where(self.keys[pos] == query, pos, -1)


@dataclass(eq=False)
class SparseTensor:
    """Batch of voxel-coordinate → feature-row maps.

    ``stride`` is per axis ``(rho, theta, z)`` relative to the input grid and
    ``n_theta`` is the number of azimuth bins at this stride, used when
    neighbor lookups wrap around the circle.
    """

    coords: np.ndarray
    feats: Var
    stride: tuple[int, int, int]
    n_theta: int
    batch_size: int
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not isinstance(self.feats, Var):
            self.feats = Var(self.feats)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)
        if len(self.coords) != self.feats.shape[0]:
            raise ValueError(f"{len(self.coords)} coordinates but {self.feats.shape[0]} feature rows")

    @classmethod
    def from_coords(cls, coords, feats, stride=(1, 1, 1), n_theta: int = 360,
                    batch_size: int | None = None) -> "SparseTensor":
        """Build a tensor from unsorted unique coordinates, sorting rows by key."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        check_coords(coords)
        keys = pack_keys(coords)
        order = np.argsort(keys, kind="stable")
        if len(keys) > 1 and np.any(keys[order][1:] == keys[order][:-1]):
            raise ValueError("duplicate coordinates within a batch element")
        fv = feats.value if isinstance(feats, Var) else np.asarray(feats)
        if fv.ndim == 1:
            fv = fv[:, None]
        if batch_size is None:
            batch_size = int(coords[:, 0].max()) + 1 if len(coords) else 0
        from .functional import take_rows
        f = take_rows(feats, order) if isinstance(feats, Var) else Var(fv[order])
        t = cls(coords[order], f, tuple(stride), n_theta, batch_size)
        t.cache["keys"] = keys[order]
        return t

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def keys(self) -> np.ndarray:
        if "keys" not in self.cache:
            self.cache["keys"] = pack_keys(self.coords)
        return self.cache["keys"]

    @property
    def index(self) -> CoordIndex:
        if "index" not in self.cache:
            self.cache["index"] = CoordIndex(self.keys)
        return self.cache["index"]

    @property
    def batch_offsets(self) -> np.ndarray:
        """Row range ``[offsets[b], offsets[b+1])`` of each batch element."""
        if "offsets" not in self.cache:
            self.cache["offsets"] = np.searchsorted(
                self.coords[:, 0], np.arange(self.batch_size + 1), side="left")
        return self.cache["offsets"]

    def batch_counts(self) -> np.ndarray:
        return np.diff(self.batch_offsets)

    def with_feats(self, feats: Var) -> "SparseTensor":
        """Same coordinates (and cached lookup structures), new features."""
        return SparseTensor(self.coords, feats, self.stride, self.n_theta,
                            self.batch_size, self.cache)

    def split(self) -> list[np.ndarray]:
        """Per-batch feature arrays (values only)."""
        off = self.batch_offsets
        return [self.feats.value[off[b]:off[b + 1]] for b in range(self.batch_size)]
