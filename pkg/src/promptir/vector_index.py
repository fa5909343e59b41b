"""Exact inner-product vector index.

No approximation anywhere: search is a full matrix-vector product plus an
exact sort. Ties break by ascending passage id. The index records the
fingerprint of the model that produced it; searches through a mismatched
model are rejected upstream.

Index file layout (little-endian): magic "DPTI" | u32 version | u32 d
| u64 count | u16 fingerprint_len | fingerprint utf-8 | f32 matrix
| per id: u16 len + utf-8 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .encoder import encode

INDEX_MAGIC = b"DPTI"
INDEX_VERSION = 1


@dataclass
class RetrievalResult:
    query_id: str
    ranking: list  # [(passage_id, score)], scores non-increasing


class VectorIndex:
    def __init__(self, vectors, passage_ids, fingerprint):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(passage_ids):
            raise ValueError("index rows must match passage id count")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("index contains non-finite vectors")
        self.vectors = vectors
        self.passage_ids = list(passage_ids)
        self.fingerprint = fingerprint
        # tie-break key: position of each row's pid in ascending pid order
        order = np.argsort(np.array(self.passage_ids))
        self._pid_rank = np.empty(len(order), dtype=np.int64)
        self._pid_rank[order] = np.arange(len(order))

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.passage_ids)


def encode_corpus(corpus, model, prompts, role="passage"):
    """Encode every passage in corpus order into a fresh index."""
    items = list(corpus.items()) if isinstance(corpus, dict) else list(corpus)
    vecs = np.empty((len(items), model.config.hidden_size), dtype=np.float64)
    pids = []
    for row, (pid, text) in enumerate(items):
        ids = model.vocab.encode(text, max_len=model.config.max_seq_len)
        try:
            vecs[row] = encode(model, prompts, ids, role=role)
        except Exception as exc:
            raise RuntimeError(f"failed to encode passage {pid}: {exc}") from exc
        pids.append(pid)
    return VectorIndex(vecs, pids, model.fingerprint())


def search(index, query_vector, k):
    """Exact top-k by inner product; ties by ascending passage id."""
    if k < 1:
        raise ValueError("search: k must be >= 1")
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(
            f"search: query dimension {q.shape} does not match index ({index.dim},)"
        )
    scores = index.vectors @ q
    order = np.lexsort((index._pid_rank, -scores))[:k]
    return [(index.passage_ids[int(i)], float(scores[int(i)])) for i in order]


def run_queries(index, model, prompts, queries, k, role="query"):
    """Search every (qid, text) query; returns RetrievalResults in order."""
    fp = model.fingerprint()
    if index.fingerprint != fp:
        raise ValueError(
            f"index was built with model {index.fingerprint[:12]}..., "
            f"got {fp[:12]}..."
        )
    results = []
    for qid, text in queries:
        ids = model.vocab.encode(text, max_len=model.config.max_seq_len)
        vec = encode(model, prompts, ids, role=role)
        results.append(RetrievalResult(query_id=qid, ranking=search(index, vec, k)))
    return results


def save_index(index, path):
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        fh.write(struct.pack("<I", index.dim))
        fh.write(struct.pack("<Q", len(index)))
        fp = index.fingerprint.encode("utf-8")
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
        for pid in index.passage_ids:
            pb = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(pb)))
            fh.write(pb)


def load_index(path):
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise ValueError("not a vector index file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        (dim,) = struct.unpack("<I", fh.read(4))
        (count,) = struct.unpack("<Q", fh.read(8))
        (fplen,) = struct.unpack("<H", fh.read(2))
        fingerprint = fh.read(fplen).decode("utf-8")
        vectors = np.frombuffer(fh.read(4 * count * dim), dtype="<f4")
        vectors = vectors.reshape(count, dim).astype(np.float64)
        pids = []
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            pids.append(fh.read(n).decode("utf-8"))
    return VectorIndex(vectors, pids, fingerprint)
