"""Relative voice-attribute corpora: vocabularies, annotations, embeddings.

File formats
------------
Annotation file (UTF-8, tab separated, ``#`` starts a comment)::

    p225<TAB>p226<TAB>Bright,Thin
    p225<TAB>p233<TAB>Similar

Each line says that the second speaker shows the listed attributes more
prominently than the first. Embedding files are JSON Lines with one
utterance per line::

    {"speaker": "p225", "gender": "F", "utt": "u1", "dim": 4, "vec": [...]}

Vocabulary files hold one descriptor per line.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

SIMILAR = "Similar"
GENDERS = ("F", "M")
MAX_DESCRIPTORS_PER_TUPLE = 3

# Common voice attribute descriptors, most frequent first.
DEFAULT_DESCRIPTORS = (
    "Bright", "Thin", "Coarse", "Slim", "Low", "Pure",
    "Rich", "Magnetic", "Muddy", "Hoarse", "Round", "Flat",
    "Shrill", "Shriveled", "Muffled", "Soft", "Transparent", "Husky",
)


@dataclass(frozen=True)
class DescriptorVocab:
    """Ordered descriptor set with contiguous integer ids."""

    descriptors: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        descriptors = tuple(self.descriptors)
        if not descriptors:
            raise DataError("vocabulary is empty")
        lowered = [d.lower() for d in descriptors]
        dupes = [d for d, n in Counter(lowered).items() if n > 1]
        if dupes:
            raise DataError(f"duplicate descriptors in vocabulary: {dupes}")
        if SIMILAR.lower() in lowered:
            raise DataError(f"{SIMILAR!r} is reserved and cannot be a descriptor")
        for d in descriptors:
            if not d or d != d.strip() or any(c in d for c in ",\t\n"):
                raise DataError(f"invalid descriptor token {d!r}")
        object.__setattr__(self, "descriptors", descriptors)
        object.__setattr__(self, "id_of", {d: i for i, d in enumerate(descriptors)})
        object.__setattr__(self, "_folded", {d.lower(): d for d in descriptors})

    @classmethod
    def default(cls) -> DescriptorVocab:
        return cls(DEFAULT_DESCRIPTORS)

    @classmethod
    def from_file(cls, path) -> DescriptorVocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")))

    def to_file(self, path) -> None:
        Path(path).write_text("".join(d + "\n" for d in self.descriptors), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.descriptors)

    def __contains__(self, token) -> bool:
        return isinstance(token, str) and token.lower() in self._folded

    def canonical(self, token: str) -> str:
        """Return the vocabulary spelling of ``token`` (case-insensitive)."""
        try:
            return self._folded[token.lower()]
        except KeyError:
            raise DataError(f"unknown descriptor {token!r}") from None

    def index(self, token: str) -> int:
        return self.id_of[self.canonical(token)]


@dataclass
class SpeakerRecord:
    """All utterance embeddings of one speaker, stacked row-wise."""

    speaker_id: str
    gender: str
    utt_ids: list[str]
    vectors: np.ndarray  # (U, D)

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise DataError(f"speaker {self.speaker_id}: gender must be F or M, got {self.gender!r}")
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.utt_ids) != self.vectors.shape[0]:
            raise DataError(f"speaker {self.speaker_id}: utterance ids and vectors disagree")
        if not self.utt_ids:
            raise DataError(f"speaker {self.speaker_id} has no utterances")
        if len(set(self.utt_ids)) != len(self.utt_ids):
            raise DataError(f"speaker {self.speaker_id}: duplicate utterance ids")

    @property
    def utterances(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.utt_ids, self.vectors))

    def mean_embedding(self) -> np.ndarray:
        return self.vectors.mean(axis=0)


@dataclass
class EmbeddingStore:
    dim: int
    speakers: dict[str, SpeakerRecord]

    def __post_init__(self):
        if not self.speakers:
            raise DataError("embedding store is empty")
        for rec in self.speakers.values():
            if rec.vectors.shape[1] != self.dim:
                raise DataError(
                    f"speaker {rec.speaker_id}: dimension {rec.vectors.shape[1]} != {self.dim}"
                )

    def __contains__(self, speaker_id) -> bool:
        return speaker_id in self.speakers

    def __getitem__(self, speaker_id: str) -> SpeakerRecord:
        try:
            return self.speakers[speaker_id]
        except KeyError:
            raise DataError(f"unknown speaker {speaker_id!r}") from None

    def genders(self) -> dict[str, str]:
        return {sid: rec.gender for sid, rec in self.speakers.items()}

    def split_utterances(self, holdout: Iterable[str]) -> tuple[EmbeddingStore, EmbeddingStore]:
        """Split every speaker's utterances into (kept, held out) stores by utterance id."""
        holdout = set(holdout)
        kept, held = {}, {}
        for sid, rec in self.speakers.items():
            k = [i for i, u in enumerate(rec.utt_ids) if u not in holdout]
            h = [i for i, u in enumerate(rec.utt_ids) if u in holdout]
            if not k:
                raise DataError(f"speaker {sid} would keep no utterances")
            kept[sid] = SpeakerRecord(sid, rec.gender, [rec.utt_ids[i] for i in k], rec.vectors[k])
            if h:
                held[sid] = SpeakerRecord(sid, rec.gender, [rec.utt_ids[i] for i in h], rec.vectors[h])
        return EmbeddingStore(self.dim, kept), EmbeddingStore(self.dim, held)


@dataclass(frozen=True)
class AnnotationTuple:
    """Speaker B shows ``descriptors`` more prominently than speaker A.

    An empty descriptor tuple encodes the "Similar" label.
    """

    speaker_a: str
    speaker_b: str
    descriptors: tuple[str, ...]

    @property
    def is_similar(self) -> bool:
        return not self.descriptors

    @property
    def label(self) -> str:
        return SIMILAR if self.is_similar else ",".join(self.descriptors)


# -- annotations -------------------------------------------------------------

def parse_annotation_line(line: str, vocab: DescriptorVocab, lineno: int = 0) -> AnnotationTuple:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 3 or not all(p.strip() for p in parts):
        raise DataError(f"line {lineno}: expected 'speakerA<TAB>speakerB<TAB>label', got {line.rstrip()!r}")
    a, b, label = (p.strip() for p in parts)
    if a == b:
        raise DataError(f"line {lineno}: speaker {a} compared with itself")
    if label == SIMILAR:
        return AnnotationTuple(a, b, ())
    tokens = [t.strip() for t in label.split(",")]
    descriptors = []
    for tok in tokens:
        if tok not in vocab:
            raise DataError(f"line {lineno}: unknown descriptor {tok!r}")
        descriptors.append(vocab.canonical(tok))
    if len(set(descriptors)) != len(descriptors):
        raise DataError(f"line {lineno}: duplicate descriptor in {label!r}")
    if len(descriptors) > MAX_DESCRIPTORS_PER_TUPLE:
        raise DataError(f"line {lineno}: more than {MAX_DESCRIPTORS_PER_TUPLE} descriptors")
    return AnnotationTuple(a, b, tuple(descriptors))


def parse_annotations(path, vocab: DescriptorVocab, genders: dict[str, str] | None = None) -> list[AnnotationTuple]:
    """Read an annotation file, preserving line order.

    If ``genders`` is given, every pair must be same-gender and known.
    """
    tuples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            tup = parse_annotation_line(line, vocab, lineno)
            if genders is not None:
                ga, gb = genders.get(tup.speaker_a), genders.get(tup.speaker_b)
                if ga is None or gb is None:
                    raise DataError(f"line {lineno}: speaker without embeddings")
                if ga != gb:
                    raise DataError(f"line {lineno}: cross-gender pair {tup.speaker_a}/{tup.speaker_b}")
            tuples.append(tup)
    return tuples


def write_annotations(tuples: Iterable[AnnotationTuple], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tuples:
            f.write(f"{t.speaker_a}\t{t.speaker_b}\t{t.label}\n")


@dataclass
class StatsReport:
    num_tuples: int
    frequencies: dict[str, float]  # % of all descriptor occurrences
    counts: dict[str, int]
    length_shares: dict[int, float]  # % of non-Similar tuples with k descriptors
    similar_share: float  # % of all tuples

    @property
    def label_shares(self) -> dict[str, float]:
        """Occurrence shares rescaled to the non-Similar share of tuples.

        Together with ``similar_share`` these sum to 100, the convention of
        published per-descriptor frequency tables.
        """
        scale = (100.0 - self.similar_share) / 100.0
        return {d: f * scale for d, f in self.frequencies.items()}

    def format(self) -> str:
        lines = [f"tuples: {self.num_tuples}", f"Similar: {self.similar_share:.2f}%"]
        for k, share in sorted(self.length_shares.items()):
            lines.append(f"{k} descriptor(s): {share:.2f}%")
        for d, freq in self.frequencies.items():
            lines.append(f"{d:<12} {freq:6.2f}%  ({self.counts[d]}, {self.label_shares[d]:.2f}% of labels)")
        return "\n".join(lines)


def dataset_stats(tuples: Sequence[AnnotationTuple], vocab: DescriptorVocab) -> StatsReport:
    if not tuples:
        raise DataError("no tuples")
    counts = Counter(d for t in tuples for d in t.descriptors)
    total = sum(counts.values())
    lengths = Counter(len(t.descriptors) for t in tuples if not t.is_similar)
    n_desc_tuples = sum(lengths.values())
    ordered = sorted(vocab.descriptors, key=lambda d: (-counts[d], vocab.id_of[d]))
    return StatsReport(
        num_tuples=len(tuples),
        frequencies={d: 100.0 * counts[d] / total if total else 0.0 for d in ordered},
        counts={d: counts[d] for d in ordered},
        length_shares={
            k: 100.0 * lengths[k] / n_desc_tuples if n_desc_tuples else 0.0
            for k in range(1, MAX_DESCRIPTORS_PER_TUPLE + 1)
        },
        similar_share=100.0 * sum(t.is_similar for t in tuples) / len(tuples),
    )


# -- embeddings --------------------------------------------------------------

def load_embeddings(path) -> EmbeddingStore:
    """Load a JSON Lines embedding file. Extra keys per line are ignored."""
    rows: dict[str, dict] = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            for key in ("speaker", "gender", "utt", "vec"):
                if key not in obj:
                    raise DataError(f"{path}:{lineno}: missing {key!r}")
            vec = obj["vec"]
            d = obj.get("dim", len(vec))
            if d != len(vec):
                raise DataError(f"{path}:{lineno}: dim {d} but {len(vec)} values")
            if dim is None:
                dim = d
            elif d != dim:
                raise DataError(f"{path}:{lineno}: dimension mismatch ({d} != {dim})")
            spk = rows.setdefault(obj["speaker"], {"gender": obj["gender"], "utts": [], "vecs": []})
            if spk["gender"] != obj["gender"]:
                raise DataError(f"{path}:{lineno}: speaker {obj['speaker']} changes gender")
            if obj["utt"] in spk["utts"]:
                raise DataError(f"{path}:{lineno}: duplicate utterance {obj['speaker']}/{obj['utt']}")
            spk["utts"].append(obj["utt"])
            spk["vecs"].append(vec)
    if dim is None:
        raise DataError(f"{path}: no embeddings")
    speakers = {
        sid: SpeakerRecord(sid, r["gender"], r["utts"], np.array(r["vecs"], dtype=np.float64))
        for sid, r in rows.items()
    }
    return EmbeddingStore(dim, speakers)


def embedding_record(speaker: str, gender: str, utt: str, vec, **extra) -> dict:
    vec = [float(v) for v in vec]
    return {"speaker": speaker, "gender": gender, "utt": utt, "dim": len(vec), "vec": vec, **extra}


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def save_embeddings(store: EmbeddingStore, path) -> None:
    write_jsonl(
        (
            embedding_record(rec.speaker_id, rec.gender, u, v)
            for rec in store.speakers.values()
            for u, v in rec.utterances
        ),
        path,
    )


# -- synthetic corpora -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_speakers_per_gender: int = 20
    num_descriptors: int = 6
    dim: int = 32
    utterances_per_speaker: int = 4
    noise_scale: float = 0.05
    threshold: float = 2.0
    seed: int = 0
    coef_scale: float = 1.0
    base_norm: float = 3.0


@dataclass
class SyntheticGroundTruth:
    vocab: DescriptorVocab
    directions: np.ndarray  # (V, D), orthonormal rows
    coefficients: dict[str, np.ndarray]  # speaker -> (V,)
    base: np.ndarray
    noise_scale: float
    threshold: float

    def direction(self, descriptor: str) -> np.ndarray:
        return self.directions[self.vocab.index(descriptor)]

    def to_json(self) -> dict:
        return {
            "descriptors": list(self.vocab.descriptors),
            "directions": self.directions.tolist(),
            "coefficients": {k: v.tolist() for k, v in self.coefficients.items()},
            "base": self.base.tolist(),
            "noise_scale": self.noise_scale,
            "threshold": self.threshold,
        }


def synthetic_vocab(n: int) -> DescriptorVocab:
    names = list(DEFAULT_DESCRIPTORS[:n]) + [f"Attr{i}" for i in range(len(DEFAULT_DESCRIPTORS), n)]
    return DescriptorVocab(tuple(names))


def gram_schmidt(vectors: np.ndarray) -> np.ndarray:
    basis = []
    for v in vectors:
        w = v - sum((v @ b) * b for b in basis) if basis else v.copy()
        n = np.linalg.norm(w)
        if n < 1e-10:
            raise DataError("degenerate vectors in Gram-Schmidt")
        basis.append(w / n)
    return np.array(basis)


def relative_label(coef_a: np.ndarray, coef_b: np.ndarray, vocab: DescriptorVocab, threshold: float) -> tuple[str, ...]:
    """Descriptors whose coefficient rises by more than ``threshold`` from A to B.

    At most three are kept, largest rise first.
    """
    diff = coef_b - coef_a
    idx = [i for i in np.argsort(-diff, kind="stable") if diff[i] > threshold]
    return tuple(vocab.descriptors[i] for i in idx[:MAX_DESCRIPTORS_PER_TUPLE])


def generate_synthetic(spec: SyntheticSpec):
    """Build a corpus with planted, orthonormal attribute directions.

    Returns ``(store, tuples, vocab, truth)``. Every utterance embedding is
    ``base + sum_x a[s, x] * g_x + noise``; tuples cover every ordered
    same-gender pair.
    """
    V, D = spec.num_descriptors, spec.dim
    if V < 1 or D < V:
        raise DataError(f"need 1 <= V <= D, got V={V}, D={D}")
    if spec.num_speakers_per_gender < 2 or spec.utterances_per_speaker < 1:
        raise DataError("need at least 2 speakers per gender and 1 utterance per speaker")
    rng = np.random.default_rng(spec.seed)
    vocab = synthetic_vocab(V)
    raw = rng.standard_normal((V + 1, D))
    if D > V:
        basis = gram_schmidt(raw)
        directions, base = basis[:V], basis[V] * spec.base_norm
    else:
        directions = gram_schmidt(raw[:V])
        base = raw[V] / np.linalg.norm(raw[V]) * spec.base_norm

    speakers, coefficients, tuples = {}, {}, []
    for gender in GENDERS:
        ids = [f"{gender}{i:03d}" for i in range(spec.num_speakers_per_gender)]
        for sid in ids:
            a = rng.normal(0.0, spec.coef_scale, V)
            clean = base + a @ directions
            noise = rng.normal(0.0, 1.0, (spec.utterances_per_speaker, D)) * spec.noise_scale
            coefficients[sid] = a
            speakers[sid] = SpeakerRecord(
                sid, gender, [f"u{k}" for k in range(spec.utterances_per_speaker)], clean + noise
            )
        for sa in ids:
            for sb in ids:
                if sa != sb:
                    label = relative_label(coefficients[sa], coefficients[sb], vocab, spec.threshold)
                    tuples.append(AnnotationTuple(sa, sb, label))
    truth = SyntheticGroundTruth(vocab, directions, coefficients, base, spec.noise_scale, spec.threshold)
    return EmbeddingStore(D, speakers), tuples, vocab, truth


# -- batch sampling ----------------------------------------------------------

@dataclass
class Batch:
    s_a: np.ndarray  # (B, D)
    s_b: np.ndarray  # (B, D)
    x: np.ndarray  # (B,) descriptor ids

    def items(self) -> list[tuple[np.ndarray, np.ndarray, int]]:
        return [(a, b, int(x)) for a, b, x in zip(self.s_a, self.s_b, self.x)]

    def __len__(self) -> int:
        return len(self.x)


class BatchSampler:
    """Uniform sampler over non-Similar tuples.

    Per item: a tuple, then one of its descriptors, then one utterance for
    each speaker, all uniformly. All draws come from the caller's generator.
    """

    def __init__(self, store: EmbeddingStore, tuples: Sequence[AnnotationTuple], vocab: DescriptorVocab):
        self.tuples = [t for t in tuples if not t.is_similar]
        if not self.tuples:
            raise DataError("no non-Similar tuples to train on")
        for t in self.tuples:
            store[t.speaker_a], store[t.speaker_b]
        self.store = store
        self.desc_ids = [np.array([vocab.index(d) for d in t.descriptors]) for t in self.tuples]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        s_a, s_b, xs = [], [], []
        for _ in range(batch_size):
            k = int(rng.integers(len(self.tuples)))
            tup = self.tuples[k]
            ids = self.desc_ids[k]
            xs.append(int(ids[rng.integers(len(ids))]))
            ra, rb = self.store[tup.speaker_a], self.store[tup.speaker_b]
            s_a.append(ra.vectors[rng.integers(len(ra.utt_ids))])
            s_b.append(rb.vectors[rng.integers(len(rb.utt_ids))])
        return Batch(np.array(s_a), np.array(s_b), np.array(xs, dtype=np.int64))


def sample_training_batch(store, tuples, batch_size, rng, vocab) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Draw ``batch_size`` (s_A, s_B, descriptor id) training items."""
    return BatchSampler(store, tuples, vocab).sample(batch_size, rng).items()
