"""Data ingestion: interaction/keyphrase loading, binarization, per-user
train/val/test splitting, modality masking, and the deterministic toy
dataset used by the property and fixture tests.

All loaded structures are immutable after construction and safe to share
across threads read-only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIOS = (0.6, 0.2, 0.2)


class ParseError(ValueError):
    """Malformed input line; message carries the file and line number."""


class ValidationError(ValueError):
    """Well-formed input with an invalid value (e.g. rating out of range)."""


class ResolutionError(KeyError):
    """External ids that do not resolve against an existing id map."""


class IdMap:
    """Bijective external-id <-> dense-index map, first-appearance order."""

    def __init__(self, ids=()):
        self._ids = list(ids)
        self._index = {ext: i for i, ext in enumerate(self._ids)}
        if len(self._index) != len(self._ids):
            raise ValueError("duplicate external ids")

    def __len__(self):
        return len(self._ids)

    def __contains__(self, external):
        return external in self._index

    def __eq__(self, other):
        return isinstance(other, IdMap) and self._ids == other._ids

    def id_of(self, index):
        return self._ids[index]

    def index_of(self, external, create=False):
        idx = self._index.get(external)
        if idx is None:
            if not create:
                raise ResolutionError(external)
            idx = len(self._ids)
            self._ids.append(external)
            self._index[external] = idx
        return idx

    def ids(self):
        return list(self._ids)


class SparseBinaryMatrix:
    """Binary matrix held as per-row sorted unique column indices.

    Entries are implicitly 1; absence is 0. Rows are int64 arrays, strictly
    increasing, every index < n_cols.
    """

    def __init__(self, n_rows, n_cols, rows):
        if len(rows) != n_rows:
            raise ValueError(f"expected {n_rows} rows, got {len(rows)}")
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.rows = []
        for r, cols in enumerate(rows):
            cols = np.asarray(cols, dtype=np.int64)
            if cols.size:
                if cols[0] < 0 or cols[-1] >= n_cols:
                    raise ValueError(f"row {r}: column index out of range")
                if np.any(np.diff(cols) <= 0):
                    raise ValueError(f"row {r}: indices not strictly increasing")
            self.rows.append(cols)
        self._flat = None

    @classmethod
    def from_pairs(cls, pairs, n_rows, n_cols):
        """Build from (row, col) pairs; duplicates collapse to one entry."""
        per_row = [set() for _ in range(n_rows)]
        for r, c in pairs:
            per_row[r].add(c)
        return cls(n_rows, n_cols, [sorted(s) for s in per_row])

    @classmethod
    def empty(cls, n_rows, n_cols):
        return cls(n_rows, n_cols, [[] for _ in range(n_rows)])

    def row(self, r):
        return self.rows[r]

    def nnz(self):
        return sum(len(r) for r in self.rows)

    def flat(self):
        """(indices, indptr) concatenation for the kernel layer; cached."""
        if self._flat is None:
            indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
            for r, cols in enumerate(self.rows):
                indptr[r + 1] = indptr[r] + len(cols)
            indices = (np.concatenate(self.rows) if self.nnz()
                       else np.zeros(0, dtype=np.int64))
            self._flat = (indices.astype(np.int64), indptr)
        return self._flat

    def subset_flat(self, row_ids):
        """(indices, indptr) covering only the given rows, in that order."""
        chunks = [self.rows[r] for r in row_ids]
        indptr = np.zeros(len(row_ids) + 1, dtype=np.int64)
        for i, c in enumerate(chunks):
            indptr[i + 1] = indptr[i] + len(c)
        indices = (np.concatenate(chunks) if indptr[-1]
                   else np.zeros(0, dtype=np.int64))
        return indices.astype(np.int64), indptr

    def to_dense(self, dtype=np.float32):
        out = np.zeros((self.n_rows, self.n_cols), dtype=dtype)
        for r, cols in enumerate(self.rows):
            out[r, cols] = 1
        return out

    def column_counts(self):
        counts = np.zeros(self.n_cols, dtype=np.int64)
        for cols in self.rows:
            counts[cols] += 1
        return counts

    def __eq__(self, other):
        return (
            isinstance(other, SparseBinaryMatrix)
            and self.n_rows == other.n_rows
            and self.n_cols == other.n_cols
            and all(np.array_equal(a, b) for a, b in zip(self.rows, other.rows))
        )


@dataclass
class InteractionTable:
    """Raw parsed interactions plus their binarization."""

    user_ids: IdMap
    item_ids: IdMap
    records: list  # (user_index, item_index, rating), file order
    threshold: float
    matrix: SparseBinaryMatrix  # entry iff rating > threshold


@dataclass
class Dataset:
    r_train: SparseBinaryMatrix
    r_val: SparseBinaryMatrix
    r_test: SparseBinaryMatrix
    k_user: SparseBinaryMatrix
    k_item: SparseBinaryMatrix
    user_ids: IdMap
    item_ids: IdMap
    keyphrase_labels: IdMap
    interactions: InteractionTable | None = None
    split_seed: int = 0
    split_ratios: tuple = DEFAULT_SPLIT_RATIOS

    @property
    def n_users(self):
        return self.r_train.n_rows

    @property
    def n_items(self):
        return self.r_train.n_cols

    @property
    def n_keyphrases(self):
        return self.k_item.n_cols


@dataclass
class ModalityMask:
    """Per-user observation flags; every user has at least one modality."""

    r_observed: np.ndarray
    k_observed: np.ndarray

    def __post_init__(self):
        if not np.all(self.r_observed | self.k_observed):
            raise ValueError("every user needs at least one observed modality")

    @classmethod
    def fully_observed(cls, n_users):
        return cls(np.ones(n_users, bool), np.ones(n_users, bool))


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _split_fields(line):
    return line.split("\t") if "\t" in line else line.split(",")


def load_interactions(path, threshold, user_ids=None, item_ids=None):
    """Parse a (user, item, rating) file and binarize at rating > threshold.

    Id maps extend in first-appearance order; pre-seeded maps pin the index
    space (items with no interactions keep their slot). Comment lines start
    with '#'. Ratings outside [0, 5] are rejected.
    """
    user_ids = user_ids if user_ids is not None else IdMap()
    item_ids = item_ids if item_ids is not None else IdMap()
    records = []
    for lineno, line in _data_lines(path):
        fields = _split_fields(line)
        if len(fields) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        user_ext, item_ext, rating_str = fields
        try:
            rating = float(rating_str)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad rating {rating_str!r}") from None
        if not 0.0 <= rating <= 5.0:
            raise ValidationError(f"{path}:{lineno}: rating {rating} outside [0, 5]")
        u = user_ids.index_of(user_ext, create=True)
        i = item_ids.index_of(item_ext, create=True)
        records.append((u, i, rating))

    positives = [(u, i) for u, i, r in records if r > threshold]
    matrix = SparseBinaryMatrix.from_pairs(positives, len(user_ids), len(item_ids))
    return InteractionTable(user_ids, item_ids, records, threshold, matrix)


def load_keyphrases(path, row_ids, keyphrase_labels=None):
    """Parse a (row_id, keyphrase_label) file into a binary matrix.

    Row ids must resolve against the given map (unknown ids are collected
    and reported together). Labels extend `keyphrase_labels` in
    first-appearance order; duplicates collapse to one entry.
    """
    if keyphrase_labels is None:
        keyphrase_labels = IdMap()
    pairs = []
    unknown = []
    for lineno, line in _data_lines(path):
        fields = _split_fields(line)
        if len(fields) not in (2, 3):  # optional trailing "1" tolerated
            raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(fields)}")
        row_ext, label = fields[0], fields[1]
        if row_ext not in row_ids:
            unknown.append(row_ext)
            continue
        pairs.append((row_ids.index_of(row_ext), keyphrase_labels.index_of(label, create=True)))
    if unknown:
        raise ResolutionError(f"{path}: unknown row ids: {sorted(set(unknown))}")
    matrix = SparseBinaryMatrix.from_pairs(pairs, len(row_ids), len(keyphrase_labels))
    return matrix, keyphrase_labels


def split_interactions(matrix, ratios=DEFAULT_SPLIT_RATIOS, seed=0):
    """Per-user random partition of positives into train/val/test.

    Validation and test sizes are floor(n * ratio); users with fewer than
    3 interactions keep everything in train. Deterministic given seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    train_rows, val_rows, test_rows = [], [], []
    few = 0
    for u in range(matrix.n_rows):
        items = matrix.row(u)
        n = len(items)
        if n < 3:
            few += 1
            train_rows.append(items)
            val_rows.append([])
            test_rows.append([])
            # still consume the permutation so seeds stay aligned across users
            rng.permutation(n)
            continue
        perm = rng.permutation(n)
        n_val = int(n * ratios[1])
        n_test = int(n * ratios[2])
        val_rows.append(np.sort(items[perm[:n_val]]))
        test_rows.append(np.sort(items[perm[n_val:n_val + n_test]]))
        train_rows.append(np.sort(items[perm[n_val + n_test:]]))
    if few:
        log.warning("%d users with < 3 interactions assigned entirely to train", few)
    shape = (matrix.n_rows, matrix.n_cols)
    return (SparseBinaryMatrix(*shape, train_rows),
            SparseBinaryMatrix(*shape, val_rows),
            SparseBinaryMatrix(*shape, test_rows))


def split_dataset(interactions, k_user, k_item, keyphrase_labels,
                  ratios=DEFAULT_SPLIT_RATIOS, seed=0):
    """Assemble a Dataset from parsed interactions and keyphrase matrices."""
    if k_user.n_rows != len(interactions.user_ids):
        raise ValueError("user-keyphrase matrix row count mismatch")
    if k_item.n_rows != len(interactions.item_ids):
        raise ValueError("item-keyphrase matrix row count mismatch")
    if k_user.n_cols != k_item.n_cols:
        raise ValueError("keyphrase dimension mismatch between user and item matrices")
    r_train, r_val, r_test = split_interactions(interactions.matrix, ratios, seed)
    return Dataset(
        r_train=r_train, r_val=r_val, r_test=r_test,
        k_user=k_user, k_item=k_item,
        user_ids=interactions.user_ids, item_ids=interactions.item_ids,
        keyphrase_labels=keyphrase_labels,
        interactions=interactions, split_seed=seed, split_ratios=tuple(ratios),
    )


def apply_modality_mask(dataset, fully_observed_fraction, seed=0):
    """Mark a random user subset fully observed; split the rest evenly into
    r-only and k-only (r-only takes the odd remainder)."""
    if not 0.0 <= fully_observed_fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    n = dataset.n_users
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_full = int(round(fully_observed_fraction * n))
    rest = n - n_full
    n_r_only = rest - rest // 2
    r_observed = np.zeros(n, bool)
    k_observed = np.zeros(n, bool)
    full = order[:n_full]
    r_only = order[n_full:n_full + n_r_only]
    k_only = order[n_full + n_r_only:]
    r_observed[full] = True
    k_observed[full] = True
    r_observed[r_only] = True
    k_observed[k_only] = True
    return ModalityMask(r_observed, k_observed)


def derive_user_keyphrases(r_train, k_item):
    """User keyphrase usage as the union over training positives' keyphrases."""
    rows = []
    for u in range(r_train.n_rows):
        items = r_train.row(u)
        if len(items) == 0:
            rows.append([])
            continue
        merged = np.unique(np.concatenate([k_item.row(i) for i in items])) \
            if any(len(k_item.row(i)) for i in items) else np.zeros(0, np.int64)
        rows.append(merged)
    return SparseBinaryMatrix(r_train.n_rows, k_item.n_cols, rows)


def generate_toy_dataset(n_users=200, n_items=100, n_keyphrases=20,
                         n_clusters=4, seed=0, threshold=3.5):
    """Deterministic clustered fixture dataset.

    Users and items are assigned to clusters round-robin; a user's positives
    are drawn 90% from same-cluster items, item keyphrases concentrate on a
    per-cluster label block (at least one each), and user keyphrases are the
    union over training positives.
    """
    if n_clusters > min(n_users, n_items, n_keyphrases):
        raise ValueError("n_clusters must not exceed any dimension")
    rng = np.random.default_rng(seed)
    item_cluster = np.arange(n_items) % n_clusters
    kp_cluster = np.arange(n_keyphrases) % n_clusters

    k_item_rows = []
    for i in range(n_items):
        own = np.flatnonzero(kp_cluster == item_cluster[i])
        kps = {int(rng.choice(own))}
        for _ in range(int(rng.integers(0, 3))):
            pool = own if rng.random() < 0.8 else np.arange(n_keyphrases)
            kps.add(int(rng.choice(pool)))
        k_item_rows.append(sorted(kps))
    k_item = SparseBinaryMatrix(n_items, n_keyphrases, k_item_rows)

    user_ids = IdMap([f"u{u:04d}" for u in range(n_users)])
    item_ids = IdMap([f"i{i:04d}" for i in range(n_items)])
    keyphrase_labels = IdMap([f"kp{k:02d}" for k in range(n_keyphrases)])

    records = []
    for u in range(n_users):
        own = np.flatnonzero(item_cluster == (u % n_clusters))
        n_pos = int(rng.integers(12, 25))
        chosen = set()
        while len(chosen) < min(n_pos, n_items):
            pool = own if rng.random() < 0.9 else np.arange(n_items)
            chosen.add(int(rng.choice(pool)))
        for i in sorted(chosen):
            records.append((u, i, 5.0))

    matrix = SparseBinaryMatrix.from_pairs(
        [(u, i) for u, i, _ in records], n_users, n_items)
    interactions = InteractionTable(user_ids, item_ids, records, threshold, matrix)
    r_train, r_val, r_test = split_interactions(matrix, DEFAULT_SPLIT_RATIOS, seed)
    k_user = derive_user_keyphrases(r_train, k_item)
    return Dataset(
        r_train=r_train, r_val=r_val, r_test=r_test,
        k_user=k_user, k_item=k_item,
        user_ids=user_ids, item_ids=item_ids, keyphrase_labels=keyphrase_labels,
        interactions=interactions, split_seed=seed,
    )


BUNDLE_META = "meta.json"
BUNDLE_INTERACTIONS = "interactions.tsv"
BUNDLE_USER_KEYPHRASES = "user_keyphrases.tsv"
BUNDLE_ITEM_KEYPHRASES = "item_keyphrases.tsv"


def save_bundle(dataset, directory):
    """Write the dataset bundle directory (raw files + meta).

    Loading a bundle re-runs binarization and splitting with the recorded
    threshold/seed/ratios, which reproduces the matrices bit-for-bit.
    """
    if dataset.interactions is None:
        raise ValueError("dataset has no raw interaction table to save")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = dataset.interactions
    with open(directory / BUNDLE_INTERACTIONS, "w", encoding="utf-8") as fh:
        for u, i, rating in table.records:
            fh.write(f"{table.user_ids.id_of(u)}\t{table.item_ids.id_of(i)}\t{rating:g}\n")
    _write_keyphrase_file(directory / BUNDLE_USER_KEYPHRASES, dataset.k_user,
                          dataset.user_ids, dataset.keyphrase_labels)
    _write_keyphrase_file(directory / BUNDLE_ITEM_KEYPHRASES, dataset.k_item,
                          dataset.item_ids, dataset.keyphrase_labels)
    meta = {
        "format": 1,
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_keyphrases": dataset.n_keyphrases,
        "threshold": table.threshold,
        "seed": dataset.split_seed,
        "split_ratios": list(dataset.split_ratios),
        # id orders are part of the artifact: reloading must reproduce the
        # same index space even for rows absent from the raw files
        "user_ids": dataset.user_ids.ids(),
        "item_ids": dataset.item_ids.ids(),
        "keyphrase_labels": dataset.keyphrase_labels.ids(),
    }
    with open(directory / BUNDLE_META, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _write_keyphrase_file(path, matrix, row_ids, labels):
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(matrix.n_rows):
            for c in matrix.row(r):
                fh.write(f"{row_ids.id_of(r)}\t{labels.id_of(c)}\n")


def load_bundle(directory):
    directory = Path(directory)
    with open(directory / BUNDLE_META, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != 1:
        raise ValidationError(f"unsupported bundle format {meta.get('format')!r}")
    interactions = load_interactions(
        directory / BUNDLE_INTERACTIONS, meta["threshold"],
        user_ids=IdMap(meta["user_ids"]), item_ids=IdMap(meta["item_ids"]))
    labels = IdMap(meta["keyphrase_labels"])
    k_user, labels = load_keyphrases(
        directory / BUNDLE_USER_KEYPHRASES, interactions.user_ids, labels)
    k_item, labels = load_keyphrases(
        directory / BUNDLE_ITEM_KEYPHRASES, interactions.item_ids, labels)
    n_kp = len(labels)
    if k_user.n_cols != n_kp:
        k_user = SparseBinaryMatrix(k_user.n_rows, n_kp, k_user.rows)
    if k_item.n_cols != n_kp:
        k_item = SparseBinaryMatrix(k_item.n_rows, n_kp, k_item.rows)
    dims = (meta["n_users"], meta["n_items"], meta["n_keyphrases"])
    got = (len(interactions.user_ids), len(interactions.item_ids), n_kp)
    if dims != got:
        raise ValidationError(f"bundle dims {dims} do not match contents {got}")
    return split_dataset(interactions, k_user, k_item, labels,
                         tuple(meta["split_ratios"]), meta["seed"])
