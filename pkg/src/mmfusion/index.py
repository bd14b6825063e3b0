"""Sparse feature indexes, cosine retrieval and ranking metrics.

An index stores one sparse feature vector per image as the columns of a
``dim x n_images`` matrix. Image ids are the column positions ``0..N-1``.
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAGIC = b"MMFI"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_COUNT = struct.Struct("<I")
_CRC = struct.Struct("<I")


class IndexFormatError(ValueError):
    """An index file is malformed, truncated or of an unknown version."""


class ProtocolError(ValueError):
    """Ground truth does not satisfy an evaluation protocol.

    ``queries`` lists the offending query ids.
    """

    def __init__(self, message, queries=()):
        super().__init__(message)
        self.queries = list(queries)


class SparseIndex:
    """Immutable sparse index, columns are images.

    Parameters
    ----------
    matrix : array-like or scipy sparse matrix, shape (dim, n_images)
        Explicit zeros are dropped and coordinates sorted on construction.
    """

    def __init__(self, matrix):
        if sp.issparse(matrix):
            csc = sp.csc_matrix(matrix, dtype=np.float64, copy=True)
        else:
            arr = np.asarray(matrix, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"index matrix must be 2-D, got shape {arr.shape}")
            csc = sp.csc_matrix(arr)
        csc.eliminate_zeros()
        csc.sort_indices()
        self._csc = csc
        self._csr = csc.tocsr()
        self._norms = np.sqrt(np.asarray(csc.multiply(csc).sum(axis=0)).ravel())

    @property
    def dim(self):
        return self._csc.shape[0]

    @property
    def n_images(self):
        return self._csc.shape[1]

    @property
    def shape(self):
        return self._csc.shape

    @property
    def ids(self):
        return np.arange(self.n_images)

    @property
    def nnz(self):
        return self._csc.nnz

    @property
    def column_norms(self):
        return self._norms.copy()

    def column(self, j):
        """Sorted ``(coords, values)`` of image ``j``."""
        lo, hi = self._csc.indptr[j], self._csc.indptr[j + 1]
        return self._csc.indices[lo:hi].copy(), self._csc.data[lo:hi].copy()

    def to_dense(self):
        return self._csc.toarray()

    def to_sparse(self):
        return self._csc.copy()

    def density(self):
        size = self.dim * self.n_images
        return self.nnz / size if size else 0.0

    def __eq__(self, other):
        if not isinstance(other, SparseIndex):
            return NotImplemented
        if self.shape != other.shape:
            return False
        a, b = self._csc, other._csc
        return (
            np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    def __repr__(self):
        return f"SparseIndex(dim={self.dim}, n_images={self.n_images}, nnz={self.nnz})"


@dataclass(frozen=True)
class QueryVector:
    """Sparse query: strictly increasing coordinates with nonzero values."""

    dim: int
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        keep = values != 0
        coords, values = coords[keep], values[keep]
        order = np.argsort(coords, kind="stable")
        coords, values = coords[order], values[order]
        if coords.size and (np.any(np.diff(coords) == 0) or coords[0] < 0 or coords[-1] >= self.dim):
            raise ValueError("query coordinates must be distinct and within [0, dim)")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_dense(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        nz = np.flatnonzero(vec)
        return cls(vec.size, nz, vec[nz])

    @classmethod
    def from_index(cls, index, j):
        coords, values = index.column(j)
        return cls(index.dim, coords, values)

    @property
    def norm(self):
        return float(np.sqrt(np.dot(self.values, self.values)))

    def scaled(self, alpha):
        return QueryVector(self.dim, self.coords, self.values * alpha)


@dataclass(frozen=True)
class RankedResult:
    """Images sorted by descending score, ties by ascending id."""

    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    def top(self, k):
        return RankedResult(self.ids[:k], self.scores[:k])


def rank_scores(scores, ids=None):
    scores = np.asarray(scores, dtype=np.float64)
    if ids is None:
        ids = np.arange(scores.size)
    order = np.lexsort((ids, -scores))
    return RankedResult(np.asarray(ids)[order], scores[order])


def cosine_scores(index, q):
    """Cosine similarity of ``q`` against every image of ``index``.

    Only the inverted lists of the query's nonzero coordinates are visited.
    Images with an all-zero vector score 0.
    """
    if q.dim != index.dim:
        raise ValueError(f"query dim {q.dim} != index dim {index.dim}")
    qn = q.norm
    if qn == 0:
        raise ValueError("query vector has zero norm")
    csr = index._csr
    dots = np.zeros(index.n_images)
    for c, w in zip(q.coords, q.values):
        lo, hi = csr.indptr[c], csr.indptr[c + 1]
        dots[csr.indices[lo:hi]] += w * csr.data[lo:hi]
    norms = index._norms
    out = np.zeros(index.n_images)
    ok = norms > 0
    out[ok] = dots[ok] / (qn * norms[ok])
    return out


def query(index, q):
    """Rank every image of ``index`` by cosine similarity to ``q``."""
    return rank_scores(cosine_scores(index, q))


def similarity_matrix(index):
    """All-pairs cosine similarity between the images of ``index`` (dense)."""
    csc = index._csc
    gram = (csc.T @ csc).toarray()
    norms = index._norms
    inv = np.zeros_like(norms)
    inv[norms > 0] = 1.0 / norms[norms > 0]
    return gram * inv[:, None] * inv[None, :]


# --- ground truth and metrics -------------------------------------------------


@dataclass
class GroundTruth:
    """Relevant (and optionally excluded) image ids per query id."""

    relevant: dict
    excluded: dict = field(default_factory=dict)

    def queries(self):
        return list(self.relevant)

    def excluded_for(self, qid):
        return self.excluded.get(qid, set())

    @classmethod
    def from_labels(cls, labels):
        """Every image is a query; relevant = all images sharing its label (self included)."""
        labels = np.asarray(labels)
        groups = {}
        for i, lab in enumerate(labels.tolist()):
            groups.setdefault(lab, set()).add(i)
        return cls({i: set(groups[lab]) for i, lab in enumerate(labels.tolist())})


def _filtered(result, excluded):
    if not excluded:
        return result.ids
    mask = ~np.isin(result.ids, np.fromiter(excluded, dtype=np.int64, count=len(excluded)))
    return result.ids[mask]


def average_precision(result, relevant, excluded=()):
    """Mean of precision@rank over all relevant items.

    Excluded ids are removed from the ranking first; relevant items that
    never appear contribute zero.
    """
    relevant = set(relevant) - set(excluded)
    if not relevant:
        raise ProtocolError("relevant set is empty after exclusions")
    ids = _filtered(result, set(excluded))
    hits = np.isin(ids, np.fromiter(relevant, dtype=np.int64, count=len(relevant)))
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, ranks.size + 1) / ranks
    return float(precisions.sum() / len(relevant))


def mean_average_precision(results, truth):
    aps = [
        average_precision(results[q], truth.relevant[q], truth.excluded_for(q))
        for q in truth.queries()
    ]
    return float(np.mean(aps)) if aps else float("nan")


def cmc_rank1(results, truth):
    """Fraction of queries whose first non-excluded result is relevant."""
    hits = []
    for q in truth.queries():
        excluded = truth.excluded_for(q)
        relevant = set(truth.relevant[q]) - set(excluded)
        if not relevant:
            raise ProtocolError(f"query {q}: relevant set is empty after exclusions", [q])
        ids = _filtered(results[q], excluded)
        hits.append(bool(ids.size) and int(ids[0]) in relevant)
    return float(np.mean(hits)) if hits else float("nan")


def ns_score(results, truth):
    """Mean number of relevant images among the top 4 (range 0..4).

    Every query must have exactly four relevant images.
    """
    bad = [q for q in truth.queries() if len(truth.relevant[q]) != 4]
    if bad:
        raise ProtocolError(f"{len(bad)} queries do not have exactly 4 relevant images", bad)
    counts = [
        len(set(results[q].ids[:4].tolist()) & set(truth.relevant[q]))
        for q in truth.queries()
    ]
    return float(np.mean(counts)) if counts else float("nan")


def self_query_results(index, query_ids=None):
    """Use stored images as queries against their own index."""
    sims = similarity_matrix(index)
    if query_ids is None:
        query_ids = range(index.n_images)
    return {q: rank_scores(sims[q]) for q in query_ids}


def index_map(index, truth):
    """mAP of ``index`` with each ground-truth query taken from the index itself."""
    return mean_average_precision(self_query_results(index, truth.queries()), truth)


# --- file formats -------------------------------------------------------------


def save_index(index, destination):
    """Write ``index`` in the binary MMFI container (little-endian, CRC32 trailer)."""
    csc = index._csc
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, index.dim, index.n_images)]
    for j in range(index.n_images):
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        parts.append(_COUNT.pack(hi - lo))
        parts.append(csc.indices[lo:hi].astype("<u4").tobytes())
        parts.append(csc.data[lo:hi].astype("<f8").tobytes())
    payload = b"".join(parts)
    Path(destination).write_bytes(payload + _CRC.pack(zlib.crc32(payload)))


def load_index(source):
    blob = Path(source).read_bytes()
    if len(blob) < _HEADER.size + _CRC.size:
        raise IndexFormatError(f"{source}: file too short")
    payload, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    magic, version, dim, n = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"{source}: unsupported format version {version}")
    if zlib.crc32(payload) != crc:
        raise IndexFormatError(f"{source}: checksum mismatch (corrupt or truncated)")
    pos = _HEADER.size
    indptr = np.zeros(n + 1, dtype=np.int64)
    coords, values = [], []
    try:
        for j in range(n):
            (count,) = _COUNT.unpack_from(payload, pos)
            pos += _COUNT.size
            c = np.frombuffer(payload, dtype="<u4", count=count, offset=pos)
            pos += 4 * count
            v = np.frombuffer(payload, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            coords.append(c)
            values.append(v)
            indptr[j + 1] = indptr[j] + count
    except (struct.error, ValueError) as exc:
        raise IndexFormatError(f"{source}: truncated column data") from exc
    if pos != len(payload):
        raise IndexFormatError(f"{source}: {len(payload) - pos} trailing bytes")
    idx = np.concatenate(coords).astype(np.int32) if coords else np.zeros(0, np.int32)
    data = np.concatenate(values).astype(np.float64) if values else np.zeros(0)
    if idx.size and idx.max() >= dim:
        raise IndexFormatError(f"{source}: coordinate out of range")
    return SparseIndex(sp.csc_matrix((data, idx, indptr), shape=(dim, n)))


def write_run(path_or_file, results, top=None):
    """Write rankings as ``query_id image_id rank score`` lines."""
    lines = []
    for q, res in results.items():
        if top is not None:
            res = res.top(top)
        for r, (i, s) in enumerate(zip(res.ids, res.scores), start=1):
            lines.append(f"{q} {int(i)} {r} {s:.6f}\n")
    text = "".join(lines)
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text)


def read_run(path):
    """Parse a run file back into ``{query_id: RankedResult}`` (order as written)."""
    rows = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'query_id image_id rank score'")
        try:
            q, i, r, s = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        rows.setdefault(q, []).append((r, i, s))
    out = {}
    for q, items in rows.items():
        items.sort()
        out[q] = RankedResult(
            np.array([i for _, i, _ in items], dtype=np.int64),
            np.array([s for _, _, s in items]),
        )
    return out


def write_truth(path, truth):
    lines = []
    for q in truth.queries():
        ids = [str(i) for i in sorted(truth.relevant[q])]
        ids += [f"!{i}" for i in sorted(truth.excluded_for(q))]
        lines.append(f"{q}: {' '.join(ids)}\n")
    Path(path).write_text("".join(lines))


def read_truth(path):
    """Parse ``query_id: id1 id2 !excluded ...`` lines."""
    relevant, excluded = {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        head, sep, rest = line.partition(":")
        try:
            if not sep:
                raise ValueError("missing ':'")
            q = int(head)
            rel, exc = set(), set()
            for tok in rest.split():
                if tok.startswith("!"):
                    exc.add(int(tok[1:]))
                else:
                    rel.add(int(tok))
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: malformed ground-truth line ({err})") from None
        relevant[q] = rel
        if exc:
            excluded[q] = exc
    return GroundTruth(relevant, excluded)
