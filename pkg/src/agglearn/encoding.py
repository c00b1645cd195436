"""Sparse encodings K(x) over single features and feature pairs.

Both encoders lay a row out as ``num_tables`` coordinates: one per feature
(tables ``0..F-1``), then one per pair ``i < j`` in lexicographic order.
``encode_rows`` returns that layout as an ``(n, num_tables)`` integer
matrix; ``-1`` marks a table the row does not contribute to (an
out-of-vocabulary modality).

Exact layout: single block ``i`` starts at ``offset_i`` and has ``d_i``
coordinates; pair block ``(i, j)`` has ``d_i * d_j`` coordinates stored
row-major, so modality pair ``(m_i, m_j)`` sits at
``offset_ij + m_i * d_j + m_j``.

Hashed layout: each feature value is hashed as
``blake2b-64(key=salt, str(i) + 0x1F + raw_value)``; a single coordinate is
that token hash mod ``p`` and a pair coordinate is
``combine(h_i, h_j) mod p`` with ``combine`` a splitmix64 mix. Colliding
coordinates add up.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import _hashing
from .data import Schema
from .errors import EncodingError


@dataclass(frozen=True)
class SparseVector:
    """Sorted distinct coordinates with their values."""

    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if c.shape != v.shape or c.ndim != 1:
            raise ValueError("coords and values must be 1-d and the same length")
        if c.size > 1 and np.any(np.diff(c) <= 0):
            raise ValueError("coords must be strictly increasing")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_coords(cls, coords, weights=None):
        """Sum ``weights`` (default 1) per coordinate; negative coords are skipped."""
        coords = np.asarray(coords, dtype=np.int64).ravel()
        if weights is None:
            weights = np.ones(coords.shape)
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), coords.shape).ravel()
        keep = coords >= 0
        uniq, inv = np.unique(coords[keep], return_inverse=True)
        return cls(uniq, np.bincount(inv, weights=weights[keep], minlength=uniq.size))

    def __len__(self):
        return self.coords.size

    def lookup(self, coords, default=0.0):
        """Values at ``coords``; ``default`` where absent."""
        return lookup(self.coords, self.values, coords, default)

    def to_dict(self):
        return dict(zip(self.coords.tolist(), self.values.tolist()))

    def dense(self, dim):
        out = np.zeros(dim)
        out[self.coords] = self.values
        return out


def lookup(keys, values, query, default=0.0):
    """Vectorized sorted-array map lookup."""
    query = np.asarray(query, dtype=np.int64)
    if keys.size == 0:
        return np.full(query.shape, default, dtype=np.float64)
    pos = np.searchsorted(keys, query)
    pos_c = np.minimum(pos, keys.size - 1)
    found = (keys[pos_c] == query) & (query >= 0)
    return np.where(found, values[pos_c], default)


def table_pairs(num_features):
    return list(combinations(range(num_features), 2))


def table_names(num_features):
    return [f"f{i}" for i in range(num_features)] + [
        f"p_{i}_{j}" for i, j in table_pairs(num_features)
    ]


class FeatureIndexMap:
    """Exact K(x) layout for given per-feature cardinalities."""

    kind = "exact"

    def __init__(self, cardinalities):
        self.cardinalities = np.asarray(cardinalities, dtype=np.int64)
        F = self.cardinalities.size
        self.num_features = F
        self.pairs = table_pairs(F)
        self.num_tables = F + len(self.pairs)
        sizes = list(self.cardinalities) + [
            self.cardinalities[i] * self.cardinalities[j] for i, j in self.pairs
        ]
        self.block_sizes = np.asarray(sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(np.int64)
        self.dim = int(self.offsets[-1])
        self.single_dim = int(self.offsets[F])
        self._pair_index = {p: F + t for t, p in enumerate(self.pairs)}

    @classmethod
    def from_schema(cls, schema: Schema):
        return cls(schema.cardinality)

    def __eq__(self, other):
        return isinstance(other, FeatureIndexMap) and np.array_equal(
            self.cardinalities, other.cardinalities)

    def __hash__(self):
        return hash(tuple(self.cardinalities.tolist()))

    def descriptor(self):
        return {"encoder": "exact",
                "cardinalities": " ".join(str(d) for d in self.cardinalities.tolist())}

    def _check(self, X):
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise EncodingError(
                f"expected rows of {self.num_features} features, got shape {X.shape}")
        bad = X >= self.cardinalities[None, :]
        bad |= X < -1
        if bad.any():
            feat = int(np.flatnonzero(bad.any(axis=0))[0])
            raise EncodingError(f"modality index out of range for feature {feat}")
        return X

    def encode_rows(self, X):
        X = self._check(X)
        n, F = X.shape
        cols = np.empty((n, self.num_tables), dtype=np.int64)
        oov = X < 0
        cols[:, :F] = np.where(oov, -1, X + self.offsets[:F])
        d = self.cardinalities
        for t, (i, j) in enumerate(self.pairs):
            c = self.offsets[F + t] + X[:, i] * d[j] + X[:, j]
            cols[:, F + t] = np.where(oov[:, i] | oov[:, j], -1, c)
        return cols

    def is_single(self, coords):
        return np.asarray(coords) < self.single_dim

    def table_of(self, coords):
        """Table index (0..num_tables-1) of each coordinate."""
        coords = np.asarray(coords, dtype=np.int64)
        if np.any((coords < 0) | (coords >= self.dim)):
            raise ValueError("coordinate out of range")
        return np.searchsorted(self.offsets, coords, side="right") - 1

    def coordinate_of(self, i, m):
        if not 0 <= i < self.num_features or not 0 <= m < self.cardinalities[i]:
            raise ValueError(f"invalid single (feature={i}, modality={m})")
        return int(self.offsets[i] + m)

    def coordinate_of_pair(self, i, j, m_i, m_j):
        t = self._pair_index.get((i, j))
        if t is None:
            raise ValueError(f"invalid pair ({i}, {j}); need 0 <= i < j < {self.num_features}")
        d = self.cardinalities
        if not (0 <= m_i < d[i] and 0 <= m_j < d[j]):
            raise ValueError(f"invalid modalities ({m_i}, {m_j}) for pair ({i}, {j})")
        return int(self.offsets[t] + m_i * d[j] + m_j)

    def decode(self, coordinate):
        """``(i, m)`` for a single coordinate, ``(i, j, m_i, m_j)`` for a pair."""
        t, fi, fj, mi, mj = (int(a[0]) for a in self.decode_many([coordinate]))
        if fj < 0:
            return (fi, mi)
        return (fi, fj, mi, mj)

    def decode_many(self, coords):
        """Arrays ``(table, feat_i, feat_j, mod_i, mod_j)``; ``-1`` for singles' j."""
        coords = np.asarray(coords, dtype=np.int64)
        t = self.table_of(coords)
        local = coords - self.offsets[t]
        F = self.num_features
        pi = np.array([i for i, _ in self.pairs] or [0], dtype=np.int64)
        pj = np.array([j for _, j in self.pairs] or [0], dtype=np.int64)
        is_pair = t >= F
        tp = np.where(is_pair, t - F, 0)
        fi = np.where(is_pair, pi[tp], t)
        fj = np.where(is_pair, pj[tp], -1)
        dj = self.cardinalities[np.where(is_pair, fj, 0)]
        mi = np.where(is_pair, local // np.maximum(dj, 1), local)
        mj = np.where(is_pair, local % np.maximum(dj, 1), -1)
        return t, fi, fj, mi, mj


@dataclass(frozen=True)
class HashedEncoderConfig:
    p: int
    salt: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("hash space size must be positive")


class HashedEncoder:
    """Hashing-trick K(x) over the raw values of a schema's vocabularies."""

    kind = "hashed"

    def __init__(self, schema: Schema, config: HashedEncoderConfig):
        self.schema = schema
        self.config = config
        self.p = int(config.p)
        self.dim = self.p
        self.num_features = schema.num_features
        self.pairs = table_pairs(self.num_features)
        self.num_tables = self.num_features + len(self.pairs)
        self.cardinalities = np.asarray(schema.cardinality, dtype=np.int64)
        self._tok = [
            np.array([_hashing.token_hash((i, raw), config.salt) for raw in schema.tokens(i)],
                     dtype=np.uint64)
            for i in range(self.num_features)
        ]

    def __eq__(self, other):
        return (isinstance(other, HashedEncoder) and self.config == other.config
                and self.schema.vocab == other.schema.vocab)

    def __hash__(self):
        return hash(self.config)

    def descriptor(self):
        return {"encoder": "hashed", "p": str(self.p), "salt": str(self.config.salt)}

    def encode_rows(self, X):
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise EncodingError(
                f"expected rows of {self.num_features} features, got shape {X.shape}")
        n, F = X.shape
        hashes = np.zeros((n, F), dtype=np.uint64)
        oov = X < 0
        for i in range(F):
            if np.any(X[:, i] >= self.cardinalities[i]) or np.any(X[:, i] < -1):
                raise EncodingError(f"modality index out of range for feature {i}")
            if n and self.cardinalities[i]:
                hashes[:, i] = self._tok[i][np.where(oov[:, i], 0, X[:, i])]
        p = np.uint64(self.p)
        cols = np.empty((n, self.num_tables), dtype=np.int64)
        cols[:, :F] = np.where(oov, -1, (hashes % p).astype(np.int64))
        for t, (i, j) in enumerate(self.pairs):
            h = (_hashing.combine(hashes[:, i], hashes[:, j]) % p).astype(np.int64)
            cols[:, F + t] = np.where(oov[:, i] | oov[:, j], -1, h)
        return cols


def encode(x, encoder) -> SparseVector:
    """K(x) of a single row as a sparse vector."""
    cols = encoder.encode_rows(np.asarray(x, dtype=np.int64)[None, :])
    return SparseVector.from_coords(cols[0])


def hashed_encode(x, schema: Schema, config: HashedEncoderConfig) -> SparseVector:
    return encode(x, HashedEncoder(schema, config))


def coordinate_of(index_map: FeatureIndexMap, i, m):
    return index_map.coordinate_of(i, m)


def coordinate_of_pair(index_map: FeatureIndexMap, i, j, m_i, m_j):
    return index_map.coordinate_of_pair(i, j, m_i, m_j)


def encoder_from_descriptor(desc, schema: Schema):
    if desc["encoder"] == "exact":
        cards = [int(v) for v in desc["cardinalities"].split()]
        if cards != schema.cardinality:
            raise EncodingError("cardinalities in descriptor do not match the vocabulary")
        return FeatureIndexMap(cards)
    if desc["encoder"] == "hashed":
        return HashedEncoder(schema, HashedEncoderConfig(int(desc["p"]), int(desc["salt"])))
    raise EncodingError(f"unknown encoder {desc['encoder']!r}")
