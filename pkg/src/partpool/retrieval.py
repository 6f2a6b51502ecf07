"""Descriptor extraction, gallery indexing, and retrieval metrics.

Evaluation follows the single-query cross-camera protocol: for each query,
gallery entries sharing both its identity and its camera are removed, the
rest are ranked, and CMC / mean average precision are computed over queries
that still have at least one correct match. Entries labeled identity -1 are
"junk": they are never filtered out and never count as correct.

Ranking inside evaluate() orders ties by the canonical (identity, camera,
path) key, so the reported metrics do not depend on gallery input order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, ImageSample
from .errors import ConfigError, DataError
from .model import Model

log = logging.getLogger(__name__)

JUNK_IDENTITY = -1


@dataclass
class Descriptor:
    vector: np.ndarray  # 1-D float64
    kind: str  # "G" (pooled parts) or "H" (reduced parts)
    p: int
    per_part_dim: int


@dataclass
class GalleryEntry:
    vector: np.ndarray
    identity: int
    camera: int
    path: str = ""


@dataclass
class GalleryIndex:
    entries: list[GalleryEntry]
    kind: str
    p: int
    per_part_dim: int

    @property
    def dim(self) -> int:
        return self.p * self.per_part_dim

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])


@dataclass
class EvalResult:
    cmc: np.ndarray  # index k-1 holds CMC at rank k
    mean_ap: float
    num_evaluated: int
    num_skipped: int

    def rank(self, k: int) -> float:
        if not 1 <= k <= len(self.cmc):
            raise ValueError(f"rank {k} outside the computed curve (1..{len(self.cmc)})")
        return float(self.cmc[k - 1])

    def to_json_dict(self, ranks) -> dict:
        return {
            "cmc": {str(k): self.rank(k) for k in ranks},
            "mAP": self.mean_ap,
            "evaluated": self.num_evaluated,
            "skipped": self.num_skipped,
        }


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def _prepare(model: Model, pixels: np.ndarray) -> np.ndarray:
    h, w = model.cfg.backbone.input_size
    if pixels.shape != (h, w, 3):
        raise DataError(
            f"image shape {pixels.shape} does not match the model input {(h, w, 3)}"
        )
    return (pixels - model.input_mean) / model.input_std


def extract_descriptor(model: Model, pixels: np.ndarray, kind: str = "G") -> Descriptor:
    """Descriptor for one [0, 1] image at the model's input size.

    Test-time preprocessing is normalization only; no flip."""
    if kind not in ("G", "H"):
        raise ConfigError(f"descriptor kind {kind!r} must be 'G' or 'H'")
    x = _prepare(model, pixels)[None]
    vec = model.descriptors(x, kind)[0]
    per = model.cfg.backbone.out_channels if kind == "G" else model.cfg.head.r
    return Descriptor(vector=vec, kind=kind, p=model.cfg.head.effective_p, per_part_dim=per)


def extract_split(model: Model, samples: list[ImageSample], kind: str,
                  batch_size: int = 64) -> np.ndarray:
    """Descriptors for a list of samples, batched, in list order."""
    if not samples:
        raise DataError("no samples to extract")
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = np.stack([_prepare(model, s.pixels) for s in chunk])
        out.append(model.descriptors(x, kind))
    return np.concatenate(out)


def build_index(manifest: DatasetManifest, model: Model, kind: str = "G",
                batch_size: int = 64) -> GalleryIndex:
    gallery = manifest.split("gallery")
    if not gallery:
        raise DataError("gallery split is empty")
    vectors = extract_split(model, gallery, kind, batch_size)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        bad = gallery[int(np.argmin(norms))].path
        raise DataError(f"gallery descriptor has zero norm ({bad})")
    per = model.cfg.backbone.out_channels if kind == "G" else model.cfg.head.r
    entries = [
        GalleryEntry(vector=v, identity=s.identity, camera=s.camera, path=s.path)
        for v, s in zip(vectors, gallery)
    ]
    return GalleryIndex(entries=entries, kind=kind,
                        p=model.cfg.head.effective_p, per_part_dim=per)


def query_descriptors(manifest: DatasetManifest, model: Model, kind: str = "G",
                      batch_size: int = 64):
    """(Descriptor-vector matrix, query samples) for the query split."""
    queries = manifest.split("query")
    if not queries:
        raise DataError("query split is empty")
    vectors = extract_split(model, queries, kind, batch_size)
    return vectors, queries


# ---------------------------------------------------------------------------
# ranking and metrics
# ---------------------------------------------------------------------------

def _similarities(query: np.ndarray, matrix: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        qn = np.linalg.norm(query)
        if qn == 0.0:
            raise DataError("query descriptor has zero norm")
        gn = np.linalg.norm(matrix, axis=1)
        if np.any(gn == 0.0):
            raise DataError("gallery descriptor has zero norm")
        return (matrix @ query) / (gn * qn)
    if metric == "euclidean":
        d = np.linalg.norm(matrix - query, axis=1)
        return -d  # larger is better, uniformly
    raise ConfigError(f"unknown metric {metric!r}")


def rank(query: Descriptor, index: GalleryIndex, metric: str = "cosine") -> np.ndarray:
    """Gallery indices sorted best-first; ties broken by ascending index."""
    if query.kind != index.kind:
        raise DataError(f"descriptor kind {query.kind} does not match index {index.kind}")
    if query.vector.shape != (index.dim,):
        raise DataError(
            f"descriptor dim {query.vector.shape[0]} does not match index {index.dim}"
        )
    sims = _similarities(query.vector, index.matrix(), metric)
    return np.argsort(-sims, kind="stable")


def evaluate(queries, index: GalleryIndex, ranks=(1, 5, 10),
             metric: str = "cosine") -> EvalResult:
    """CMC and mAP for queries given as (Descriptor, identity, camera) triples.

    Queries with no cross-camera correct match left after filtering are
    excluded from the averages and counted in num_skipped. Average precision
    is the mean of precision at each correct hit.
    """
    ranks = tuple(ranks)
    if not ranks or min(ranks) < 1:
        raise ConfigError("ranks must be positive")
    k_max = max(ranks)
    matrix = index.matrix()
    ids = np.array([e.identity for e in index.entries])
    cams = np.array([e.camera for e in index.entries])
    paths = [e.path for e in index.entries]

    cmc_acc = np.zeros(k_max)
    ap_acc = 0.0
    evaluated = 0
    skipped = 0
    for desc, q_id, q_cam in queries:
        if desc.kind != index.kind or desc.vector.shape != (index.dim,):
            raise DataError("query descriptor does not match the gallery index")
        sims = _similarities(desc.vector, matrix, metric)
        keep = ~((ids == q_id) & (cams == q_cam))
        good = keep & (ids == q_id)
        if not good.any():
            skipped += 1
            log.warning("query id=%d cam=%d has no cross-camera match; skipped", q_id, q_cam)
            continue
        kept = np.flatnonzero(keep)
        order = sorted(
            kept, key=lambda i: (-sims[i], ids[i], cams[i], paths[i])
        )
        correct = np.array([ids[i] == q_id for i in order])
        hits = np.flatnonzero(correct)
        first = hits[0]
        if first < k_max:
            cmc_acc[first:] += 1.0
        precisions = (np.arange(len(hits)) + 1.0) / (hits + 1.0)
        ap_acc += float(precisions.mean())
        evaluated += 1
    if evaluated == 0:
        raise DataError("no evaluable queries: every query lacked a cross-camera match")
    return EvalResult(
        cmc=cmc_acc / evaluated,
        mean_ap=ap_acc / evaluated,
        num_evaluated=evaluated,
        num_skipped=skipped,
    )


def evaluate_manifest(manifest: DatasetManifest, model: Model, kind: str = "G",
                      ranks=(1, 5, 10), metric: str = "cosine",
                      batch_size: int = 64) -> EvalResult:
    """End-to-end evaluation of a model on a manifest's query/gallery splits."""
    index = build_index(manifest, model, kind, batch_size)
    vectors, samples = query_descriptors(manifest, model, kind, batch_size)
    per = index.per_part_dim
    queries = [
        (Descriptor(vector=v, kind=kind, p=index.p, per_part_dim=per), s.identity, s.camera)
        for v, s in zip(vectors, samples)
    ]
    return evaluate(queries, index, ranks=ranks, metric=metric)
