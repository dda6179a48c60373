"""Domain types, file formats and manifest operations.

File formats
------------
Binary embeddings::

    b"SVE1" | u32 dim | u32 count | count x (u16 id_len | id utf-8 | dim x f32)

all little-endian. TSV embeddings start with a ``#dim=<d>`` header line and then
hold ``id<TAB>v1 v2 ... vd`` rows. Manifests are TSV with the columns
``id speaker duration tempo tags``; ``-`` marks a missing speaker, a missing
duration or an empty tag set. Trial lists are ``label enroll test`` lines with
label in ``{1, 0, -}`` and score files are ``enroll test score`` lines.
"""

from __future__ import annotations

import contextlib
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    DataError,
    DimensionMismatchError,
    DuplicateIdError,
    FormatError,
    MalformedHeaderError,
    NonFiniteValueError,
    UnknownIdError,
    ZeroNormError,
)

MAGIC = b"SVE1"
TEMPO_FACTORS = (0.9, 1.0, 1.1)
AUGMENT_TAGS = frozenset({"noise", "rir", "tempo", "volume"})
MANIFEST_COLUMNS = ("id", "speaker", "duration", "tempo", "tags")

TARGET, NONTARGET, UNKNOWN = 1, 0, -1
_LABEL_TOKENS = {"1": TARGET, "0": NONTARGET, "-": UNKNOWN,
                 "target": TARGET, "nontarget": NONTARGET}
_LABEL_OUT = {TARGET: "1", NONTARGET: "0", UNKNOWN: "-"}


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "w") -> Iterator:
    """Open a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


class EmbeddingSet:
    """Ordered, id-indexed collection of fixed-dimension vectors.

    Vectors are kept as a read-only float64 matrix of shape ``(N, dim)``.
    """

    __slots__ = ("ids", "vectors", "index")

    def __init__(self, ids: Sequence[str], vectors, dim: int | None = None):
        ids = tuple(str(i) for i in ids)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.size == 0 and len(ids) == 0:
            if dim is None:
                dim = vectors.shape[1] if vectors.ndim == 2 else 0
            vectors = np.zeros((0, dim))
        if vectors.ndim != 2:
            raise DimensionMismatchError(f"vectors must be 2-D, got shape {vectors.shape}")
        if dim is not None and vectors.shape[1] != dim:
            raise DimensionMismatchError(f"expected dim {dim}, got {vectors.shape[1]}")
        if vectors.shape[0] != len(ids):
            raise DimensionMismatchError(f"{len(ids)} ids but {vectors.shape[0]} vectors")
        if len(ids) and vectors.shape[1] < 1:
            raise DimensionMismatchError("dim must be >= 1")
        index: dict[str, int] = {}
        for pos, utt in enumerate(ids):
            if utt in index:
                raise DuplicateIdError(f"duplicate embedding id {utt!r}")
            index[utt] = pos
        if not np.isfinite(vectors).all():
            row = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
            raise NonFiniteValueError(f"non-finite value in embedding {ids[row]!r}")
        vectors = np.array(vectors, dtype=np.float64, copy=True)
        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self.index = index

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, utt: str) -> bool:
        return utt in self.index

    def __getitem__(self, utt: str) -> np.ndarray:
        try:
            return self.vectors[self.index[utt]]
        except KeyError:
            raise UnknownIdError(f"unknown embedding id {utt!r}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.ids == other.ids and self.dim == other.dim
                and np.array_equal(self.vectors, other.vectors))

    def __repr__(self) -> str:
        return f"EmbeddingSet(N={len(self)}, dim={self.dim})"

    def positions(self, ids: Iterable[str]) -> np.ndarray:
        out = []
        for utt in ids:
            if utt not in self.index:
                raise UnknownIdError(f"unknown embedding id {utt!r}")
            out.append(self.index[utt])
        return np.asarray(out, dtype=np.intp)

    def subset(self, ids: Iterable[str]) -> "EmbeddingSet":
        ids = list(ids)
        return EmbeddingSet(ids, self.vectors[self.positions(ids)], dim=self.dim)

    def with_vectors(self, vectors) -> "EmbeddingSet":
        return EmbeddingSet(self.ids, vectors)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every vector to unit Euclidean norm."""
    norms = emb.norms()
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(f"zero-norm embedding {emb.ids[zero[0]]!r}")
    return emb.with_vectors(emb.vectors / norms[:, None])


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _load_binary(path: Path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != MAGIC:
            raise MalformedHeaderError(f"{path}: missing SVE1 header")
        dim, count = struct.unpack("<II", head[4:])
        if dim < 1:
            raise MalformedHeaderError(f"{path}: dim must be >= 1")
        ids, rows = [], np.empty((count, dim), dtype="<f4")
        for i in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
            ids.append(_read_exact(fh, n, "id").decode("utf-8"))
            rows[i] = np.frombuffer(_read_exact(fh, 4 * dim, "vector"), dtype="<f4")
        if fh.read(1):
            raise DimensionMismatchError(f"{path}: trailing bytes after {count} records")
    return EmbeddingSet(ids, rows.astype(np.float64), dim=dim)


_TSV_HEADER = re.compile(r"^#dim=(\d+)$")


def _load_tsv(path: Path) -> EmbeddingSet:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        m = _TSV_HEADER.match(first)
        if not m or int(m.group(1)) < 1:
            raise MalformedHeaderError(f"{path}: expected '#dim=<d>' header, got {first!r}")
        dim = int(m.group(1))
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            utt, sep, values = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{lineno}: missing TAB separator")
            try:
                vec = [float(v) for v in values.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(vec) != dim:
                raise DimensionMismatchError(f"{path}:{lineno}: {len(vec)} values, expected {dim}")
            ids.append(utt)
            rows.append(vec)
    return EmbeddingSet(ids, np.asarray(rows, dtype=np.float64).reshape(len(rows), dim), dim=dim)


def _guess_format(path: Path) -> str:
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == MAGIC else "tsv"


def load_embeddings(path: str | os.PathLike, format: str | None = None) -> EmbeddingSet:
    """Read an embedding file; ``format`` is ``"binary"``, ``"tsv"`` or sniffed."""
    path = Path(path)
    format = format or _guess_format(path)
    if format == "binary":
        return _load_binary(path)
    if format == "tsv":
        return _load_tsv(path)
    raise ValueError(f"unknown embedding format {format!r}")


def save_embeddings(emb: EmbeddingSet, path: str | os.PathLike, format: str = "binary") -> None:
    """Write ``emb``. The binary format stores float32, the TSV format exact reprs."""
    if format == "binary":
        with atomic_write(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", emb.dim, len(emb)))
            data = emb.vectors.astype("<f4")
            for utt, row in zip(emb.ids, data):
                raw = utt.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise DataError(f"id too long for binary format: {utt[:32]!r}...")
                fh.write(struct.pack("<H", len(raw)) + raw + row.tobytes())
    elif format == "tsv":
        with atomic_write(path) as fh:
            fh.write(f"#dim={emb.dim}\n")
            for utt, row in zip(emb.ids, emb.vectors):
                fh.write(utt + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown embedding format {format!r}")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str | None = None
    duration: float | None = None
    tempo: float = 1.0
    tags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.duration is not None and not (math.isfinite(self.duration) and self.duration > 0):
            raise DataError(f"utterance {self.id!r}: duration must be finite and > 0")
        if self.tempo not in TEMPO_FACTORS:
            raise DataError(f"utterance {self.id!r}: tempo {self.tempo} not in {TEMPO_FACTORS}")
        unknown = set(self.tags) - AUGMENT_TAGS
        if unknown:
            raise DataError(f"utterance {self.id!r}: unknown tags {sorted(unknown)}")
        object.__setattr__(self, "tags", frozenset(self.tags))


class Manifest:
    """Immutable ordered list of :class:`Utterance` records with unique ids."""

    __slots__ = ("records", "index")

    def __init__(self, records: Iterable[Utterance] = ()):
        records = tuple(records)
        index = {}
        for pos, rec in enumerate(records):
            if rec.id in index:
                raise DuplicateIdError(f"duplicate utterance id {rec.id!r}")
            index[rec.id] = pos
        self.records = records
        self.index = index

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, utt: str) -> bool:
        return utt in self.index

    def __getitem__(self, utt: str) -> Utterance:
        try:
            return self.records[self.index[utt]]
        except KeyError:
            raise UnknownIdError(f"utterance {utt!r} not in manifest") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.records == other.records

    def __repr__(self) -> str:
        return f"Manifest(n={len(self)}, speakers={len(self.speakers())})"

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def speakers(self) -> list[str]:
        """Distinct speaker labels in first-appearance order."""
        return list(dict.fromkeys(r.speaker for r in self.records if r.speaker is not None))

    def durations(self, ids: Iterable[str] | None = None) -> np.ndarray:
        recs = self.records if ids is None else [self[i] for i in ids]
        missing = [r.id for r in recs if r.duration is None]
        if missing:
            raise DataError(f"utterance {missing[0]!r} has no duration")
        return np.array([r.duration for r in recs], dtype=np.float64)


def load_manifest(path: str | os.PathLike) -> Manifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if lineno == 1 and tuple(cols) == MANIFEST_COLUMNS:
                continue
            if len(cols) != len(MANIFEST_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            utt, spk, dur, tempo, tags = cols
            try:
                records.append(Utterance(
                    id=utt,
                    speaker=None if spk == "-" else spk,
                    duration=None if dur == "-" else float(dur),
                    tempo=float(tempo),
                    tags=frozenset() if tags == "-" else frozenset(tags.split(",")),
                ))
            except ValueError as exc:
                if isinstance(exc, DataError):
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return Manifest(records)


def save_manifest(m: Manifest, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in m:
            fh.write("\t".join((
                r.id,
                "-" if r.speaker is None else r.speaker,
                "-" if r.duration is None else repr(r.duration),
                f"{r.tempo:g}",
                ",".join(sorted(r.tags)) or "-",
            )) + "\n")


def _suffix(factor: float) -> str:
    return f"#sp{factor:g}"


def augment_manifest(m: Manifest, factors: Sequence[float]) -> Manifest:
    """Append speed-perturbed copies that count as new speakers.

    Each factor adds one copy of every record: id and speaker get the
    ``#sp<factor>`` suffix and the duration becomes ``duration / factor``.
    """
    factors = list(factors)
    for f in factors:
        if f not in (0.9, 1.1):
            raise DataError(f"tempo factor {f} not in (0.9, 1.1)")
    if len(set(factors)) != len(factors):
        raise DataError("duplicate tempo factors")
    if not factors:
        return m
    for r in m:
        if r.tempo != 1.0:
            raise DataError(f"utterance {r.id!r} already tempo-perturbed ({r.tempo})")
    out = list(m.records)
    for f in factors:
        sfx = _suffix(f)
        for r in m:
            out.append(Utterance(
                id=r.id + sfx,
                speaker=None if r.speaker is None else r.speaker + sfx,
                duration=None if r.duration is None else r.duration / f,
                tempo=f,
                tags=r.tags | {"tempo"},
            ))
    return Manifest(out)


def augmented_counts(n_utterances: int, n_speakers: int, factors: Sequence[float]) -> tuple[int, int]:
    """Utterance and speaker counts after :func:`augment_manifest`, without records."""
    for f in factors:
        if f not in (0.9, 1.1):
            raise DataError(f"tempo factor {f} not in (0.9, 1.1)")
    mult = 1 + len(factors)
    return n_utterances * mult, n_speakers * mult


def filter_short(m: Manifest, min_duration: float) -> Manifest:
    """Keep records strictly longer than ``min_duration`` seconds."""
    if not min_duration >= 0:
        raise DataError("min_duration must be >= 0")
    return Manifest(r for r in m if _duration(r) > min_duration)


def truncate_durations(m: Manifest, cap: float) -> Manifest:
    if not (math.isfinite(cap) and cap > 0):
        raise DataError(f"duration cap must be finite and > 0, got {cap}")
    return Manifest(replace(r, duration=min(_duration(r), cap)) for r in m)


def _duration(r: Utterance) -> float:
    if r.duration is None:
        raise DataError(f"utterance {r.id!r} has no duration")
    return r.duration


# ---------------------------------------------------------------------------
# Trials and scores
# ---------------------------------------------------------------------------


class TrialList:
    """Enroll/test id pairs with labels ``1`` (target), ``0`` or ``-1`` (unknown)."""

    __slots__ = ("enroll", "test", "labels")

    def __init__(self, enroll: Sequence[str], test: Sequence[str], labels=None):
        enroll, test = tuple(enroll), tuple(test)
        if len(enroll) != len(test):
            raise AlignmentError("enroll and test id lists differ in length")
        if labels is None:
            labels = np.full(len(enroll), UNKNOWN, dtype=np.int8)
        labels = np.asarray(labels, dtype=np.int8).copy()
        if labels.shape != (len(enroll),):
            raise AlignmentError("labels do not match trial count")
        if not np.isin(labels, (TARGET, NONTARGET, UNKNOWN)).all():
            raise DataError("labels must be 1, 0 or -1")
        labels.setflags(write=False)
        self.enroll, self.test, self.labels = enroll, test, labels

    def __len__(self) -> int:
        return len(self.enroll)

    def __eq__(self, other):
        if not isinstance(other, TrialList):
            return NotImplemented
        return (self.enroll == other.enroll and self.test == other.test
                and np.array_equal(self.labels, other.labels))

    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.enroll, self.test))

    def target_mask(self) -> np.ndarray:
        """Boolean target mask; raises if any label is unknown."""
        if (self.labels == UNKNOWN).any():
            raise DataError("trial list has unknown labels")
        return self.labels == TARGET


def load_trials(path: str | os.PathLike) -> TrialList:
    enroll, test, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in _LABEL_TOKENS:
                raise FormatError(f"{path}:{lineno}: expected 'label enroll test'")
            labels.append(_LABEL_TOKENS[parts[0]])
            enroll.append(parts[1])
            test.append(parts[2])
    return TrialList(enroll, test, labels)


def save_trials(trials: TrialList, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        for e, t, lab in zip(trials.enroll, trials.test, trials.labels):
            fh.write(f"{_LABEL_OUT[int(lab)]} {e} {t}\n")


class ScoreSet:
    """One real score per trial, aligned to a trial list."""

    __slots__ = ("enroll", "test", "scores")

    def __init__(self, enroll: Sequence[str], test: Sequence[str], scores):
        enroll, test = tuple(enroll), tuple(test)
        scores = np.array(scores, dtype=np.float64).reshape(-1)
        if not (len(enroll) == len(test) == scores.size):
            raise AlignmentError("enroll, test and score lengths differ")
        if not np.isfinite(scores).all():
            raise NonFiniteValueError("non-finite score")
        scores.setflags(write=False)
        self.enroll, self.test, self.scores = enroll, test, scores

    @classmethod
    def for_trials(cls, trials: TrialList, scores) -> "ScoreSet":
        return cls(trials.enroll, trials.test, scores)

    def __len__(self) -> int:
        return self.scores.size

    def __eq__(self, other):
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return (self.enroll == other.enroll and self.test == other.test
                and np.array_equal(self.scores, other.scores))

    def __repr__(self) -> str:
        return f"ScoreSet(n={len(self)})"

    def check_aligned(self, other: "ScoreSet | TrialList", what: str = "score set") -> None:
        if self.enroll != other.enroll or self.test != other.test:
            raise AlignmentError(f"{what} is not aligned to the same trial order")


def load_scores(path: str | os.PathLike) -> ScoreSet:
    enroll, test, scores = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'enroll test score'")
            try:
                scores.append(float(parts[2]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {parts[2]!r}") from None
            enroll.append(parts[0])
            test.append(parts[1])
    return ScoreSet(enroll, test, scores)


def save_scores(scores: ScoreSet, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        for e, t, s in zip(scores.enroll, scores.test, scores.scores):
            fh.write(f"{e} {t} {s:.6f}\n")
