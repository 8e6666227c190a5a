"""Target voice attribute similarity (TVAS) and its absolute form (ATVAS).

Reference speakers for a descriptor x are the speakers that appear as the
"more x" side of an annotation. Each gets weight ``occ_j / number_x``, the
share of x-annotations it is the target of. ATVAS of an edited embedding is
the weighted cosine similarity to the reference speakers' mean embeddings
(same gender as the source); TVAS at degree alpha is ATVAS(alpha) - ATVAS(0).
"""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import AnnotationTuple, EmbeddingStore, write_jsonl
from .editor import edit_once
from .errors import DataError
from .trainer import Checkpoint

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))

Verifier = Callable[[np.ndarray], np.ndarray]


def identity_verifier(vec: np.ndarray) -> np.ndarray:
    return vec


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine of a zero-norm vector")
    return float(a @ b / (na * nb))


@dataclass
class ReferenceTable:
    refs: dict[tuple[str, str], list[tuple[str, float]]]  # (gender, descriptor) -> [(speaker, eta)]
    means: dict[str, np.ndarray]  # speaker -> mean verification embedding

    def get(self, gender: str, descriptor: str) -> list[tuple[str, float]]:
        try:
            return self.refs[(gender, descriptor)]
        except KeyError:
            raise DataError(f"no reference speakers for {descriptor} ({gender})") from None

    def descriptors(self) -> list[str]:
        return sorted({d for _, d in self.refs})


def build_reference_table(tuples: Sequence[AnnotationTuple], store: EmbeddingStore,
                          verifier: Verifier = identity_verifier) -> ReferenceTable:
    occ: dict[tuple[str, str], Counter] = defaultdict(Counter)
    genders = store.genders()
    for t in tuples:
        if t.speaker_b not in genders:
            raise DataError(f"speaker {t.speaker_b} has no embeddings")
        for x in t.descriptors:
            occ[(genders[t.speaker_b], x)][t.speaker_b] += 1
    refs = {}
    for key in sorted(occ):
        counts = occ[key]
        number = sum(counts.values())
        refs[key] = [(spk, n / number) for spk, n in sorted(counts.items())]
    speakers = sorted({spk for lst in refs.values() for spk, _ in lst})
    means = {spk: np.asarray(verifier(store[spk].mean_embedding()), dtype=np.float64) for spk in speakers}
    return ReferenceTable(refs, means)


def reference_scores(e, refs: list[tuple[str, float]], table: ReferenceTable) -> np.ndarray:
    """Cosine scores of ``e`` against each reference mean."""
    return np.array([cosine(e, table.means[spk]) for spk, _ in refs])


def atvas(e, refs: list[tuple[str, float]], table: ReferenceTable) -> float:
    if not refs:
        raise DataError("empty reference list")
    weights = np.array([w for _, w in refs])
    return float(weights @ reference_scores(e, refs, table))


@dataclass
class TvasRow:
    descriptor: str
    alphas: list[float]
    atvas: list[float]  # averaged over sources
    tvas: list[float]
    score: float  # mean TVAS over the grid
    per_source: np.ndarray = field(repr=False, default=None)  # (alphas, sources) ATVAS
    scores: np.ndarray = field(repr=False, default=None)  # (alphas, sources, refs) cosines, per gender padded


@dataclass
class TvasReport:
    rows: list[TvasRow]

    def row(self, descriptor: str) -> TvasRow:
        for r in self.rows:
            if r.descriptor == descriptor:
                return r
        raise KeyError(descriptor)


@dataclass
class Source:
    vec: np.ndarray
    gender: str
    speaker: str = ""


def tvas_curve(ckpt: Checkpoint, sources: Sequence[Source], descriptor: str, table: ReferenceTable,
               grid: Sequence[float] = DEFAULT_GRID, mode: str | None = None,
               verifier: Verifier = identity_verifier) -> TvasRow:
    """Edit every source at every grid alpha; ATVAS is averaged over sources per alpha."""
    grid = [float(a) for a in grid]
    if 0.0 not in grid:
        raise DataError("alpha grid must contain 0")
    if not sources:
        raise DataError("no sources")
    per_source = np.zeros((len(grid), len(sources)))
    scores = []
    for i, a in enumerate(grid):
        row = []
        for j, src in enumerate(sources):
            refs = table.get(src.gender, descriptor)
            e = verifier(edit_once(ckpt, src.vec, descriptor, a, mode))
            o = reference_scores(e, refs, table)
            per_source[i, j] = float(np.array([w for _, w in refs]) @ o)
            row.append(o)
        scores.append(row)
    mean_atvas = per_source.mean(axis=1)
    base = mean_atvas[grid.index(0.0)]
    tvas = [float(v - base) for v in mean_atvas]
    return TvasRow(descriptor, grid, [float(v) for v in mean_atvas], tvas, float(np.mean(tvas)),
                   per_source, scores)


def sweep(ckpt: Checkpoint, sources: Sequence[Source], table: ReferenceTable, descriptors=None,
          grid: Sequence[float] = DEFAULT_GRID, mode: str | None = None,
          verifier: Verifier = identity_verifier, jobs: int = 1) -> TvasReport:
    """TVAS curves for several descriptors; rows keep the order of ``descriptors``."""
    descriptors = list(descriptors) if descriptors is not None else [
        d for d in ckpt.vocab.descriptors if any((g, d) in table.refs for g in ("F", "M"))
    ]
    if not descriptors:
        raise DataError("no descriptors to evaluate")

    def one(d):
        return tvas_curve(ckpt, sources, d, table, grid, mode, verifier)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(one, descriptors))
    else:
        rows = [one(d) for d in descriptors]
    return TvasReport(rows)


# -- export ------------------------------------------------------------------

def export_report(report: TvasReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["descriptor", "alpha", "atvas", "tvas"])
        for r in report.rows:
            for a, ab, rel in zip(r.alphas, r.atvas, r.tvas):
                w.writerow([r.descriptor, repr(a), repr(ab), repr(rel)])


def read_report(path) -> TvasReport:
    rows: dict[str, TvasRow] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            r = rows.setdefault(rec["descriptor"], TvasRow(rec["descriptor"], [], [], [], 0.0))
            r.alphas.append(float(rec["alpha"]))
            r.atvas.append(float(rec["atvas"]))
            r.tvas.append(float(rec["tvas"]))
    for r in rows.values():
        r.score = float(np.mean(r.tvas))
    return TvasReport(list(rows.values()))


def export_embedding_dump(ckpt: Checkpoint, sources: Sequence[Source], descriptors, path,
                          grid: Sequence[float] = DEFAULT_GRID, mode: str | None = None) -> int:
    """Write edited embeddings for external projection (t-SNE, PCA). Returns the row count."""
    records = (
        {"speaker": src.speaker, "descriptor": d, "alpha": float(a),
         "vec": [float(v) for v in edit_once(ckpt, src.vec, d, a, mode)]}
        for d in descriptors for a in grid for src in sources
    )
    records = list(records)
    write_jsonl(records, path)
    return len(records)
