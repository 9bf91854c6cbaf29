"""Dataset ingestion, preprocessing, splits, and synthetic data.

The on-disk format is a CSV with header ``student_id,question_id,correct``
plus an optional trailing ``timestamp`` column. Internally question ids are
remapped to dense indices 0..Q-1 (sorted original ids, so the mapping is a
function of the record set and not of row order); the original ids are kept
for reports and re-emission.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (DatasetEmptyError, DimensionError, IngestError,
                     PartitionError)
from .nnops import sigmoid

MIN_RESPONSES = 20


def _stable_int(token: str) -> int:
    """Platform-independent 64-bit integer for seeding from string keys."""
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_rng(*keys) -> np.random.Generator:
    """Deterministic generator derived from a tuple of ints and strings.

    Every stochastic step in the package names its stream explicitly, e.g.
    derived_rng(seed, "epoch", 3, "batch", 0), so reruns are bit-identical
    and adding students or epochs does not perturb unrelated streams.
    """
    entropy = [k if isinstance(k, (int, np.integer)) else _stable_int(str(k))
               for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class Dataset:
    """Immutable response table with dense question indexing."""

    def __init__(self, question_ids, by_student):
        # by_student: student_id -> (question index array, correctness array)
        self._question_ids = tuple(str(q) for q in question_ids)
        self._by_student = {}
        q = len(self._question_ids)
        for sid in sorted(by_student):
            qidx, y = by_student[sid]
            qidx = np.asarray(qidx, dtype=np.int64)
            y = np.asarray(y, dtype=np.float64)
            if qidx.shape != y.shape:
                raise DimensionError(f"student {sid!r}: index/response mismatch")
            if qidx.size and (qidx.min() < 0 or qidx.max() >= q):
                raise DimensionError(f"student {sid!r}: question index out of range")
            if len(np.unique(qidx)) != qidx.size:
                raise DimensionError(f"student {sid!r}: duplicate question index")
            order = np.argsort(qidx)
            self._by_student[sid] = (qidx[order], y[order])
        self._student_ids = tuple(sorted(self._by_student))

    @property
    def num_questions(self) -> int:
        return len(self._question_ids)

    @property
    def num_students(self) -> int:
        return len(self._student_ids)

    @property
    def student_ids(self) -> tuple:
        return self._student_ids

    @property
    def question_ids(self) -> tuple:
        """Dense index -> original external id."""
        return self._question_ids

    def responses(self, student_id: str):
        """(question index array, correctness array) for one student."""
        return self._by_student[student_id]

    def num_responses(self, student_id: str) -> int:
        return self._by_student[student_id][0].size

    def response_matrix(self, students=None):
        """Dense (len(students), Q) matrix plus an answered mask.

        Unanswered cells hold NaN. Row order follows the given student list
        (default: all students in sorted order).
        """
        students = list(students) if students is not None else list(self._student_ids)
        mat = np.full((len(students), self.num_questions), np.nan)
        for row, sid in enumerate(students):
            qidx, y = self._by_student[sid]
            mat[row, qidx] = y
        return mat, ~np.isnan(mat)

    def to_csv(self, path) -> None:
        """Canonical re-emission: sorted rows, original question ids."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["student_id", "question_id", "correct"])
            for sid in self._student_ids:
                qidx, y = self._by_student[sid]
                rows = sorted((self._question_ids[j], int(v))
                              for j, v in zip(qidx, y))
                for qid, v in rows:
                    writer.writerow([sid, qid, v])


@dataclass(frozen=True)
class StudentPartition:
    """Disjoint split of one student's answered questions.

    ``omega`` is the pool the policy selects from; ``gamma`` is the held-out
    meta set used for the outer loss and the reported metrics.
    """

    omega: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.int64)
        gamma = np.asarray(self.gamma, dtype=np.int64)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "gamma", gamma)
        if omega.size == 0 or gamma.size == 0:
            raise PartitionError("both partition sides must be nonempty")
        if np.intersect1d(omega, gamma).size:
            raise PartitionError("selection pool and meta set overlap")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if not all(sets):
            raise PartitionError("fold has an empty split")
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise PartitionError("fold splits overlap")


def ingest_csv(path, min_responses: int = MIN_RESPONSES) -> Dataset:
    """Read a response CSV, dedupe, filter short students, densify indices.

    Duplicate (student, question) pairs keep the first occurrence in file
    order; students with fewer than ``min_responses`` deduped records are
    dropped; question ids are then remapped to dense indices.
    """
    seen = {}
    order = {}  # student -> list of (question_id, correct) in file order
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(1, "empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["student_id", "question_id", "correct"] or \
                len(header) > 4 or (len(header) == 4 and header[3] != "timestamp"):
            raise IngestError(1, f"unexpected header {header}")
        has_ts = len(header) == 4
        width = 4 if has_ts else 3
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise IngestError(line_no, f"expected {width} fields, got {len(row)}")
            sid = row[0].strip()
            qid = row[1].strip()
            correct = row[2].strip()
            if not sid or not qid:
                raise IngestError(line_no, "empty student or question id")
            if correct not in ("0", "1"):
                raise IngestError(line_no, f"correct must be 0 or 1, got {correct!r}")
            if has_ts:
                try:
                    float(row[3])
                except ValueError:
                    raise IngestError(line_no, f"bad timestamp {row[3]!r}") from None
            key = (sid, qid)
            if key in seen:
                continue  # keep-first dedupe
            seen[key] = True
            order.setdefault(sid, []).append((qid, int(correct)))

    kept = {sid: rows for sid, rows in order.items()
            if len(rows) >= min_responses}
    if not kept:
        raise DatasetEmptyError(
            f"no student has >= {min_responses} responses after dedupe")

    question_ids = sorted({qid for rows in kept.values() for qid, _ in rows})
    qmap = {qid: j for j, qid in enumerate(question_ids)}
    by_student = {}
    for sid, rows in kept.items():
        qidx = np.array([qmap[qid] for qid, _ in rows], dtype=np.int64)
        y = np.array([v for _, v in rows], dtype=np.float64)
        by_student[sid] = (qidx, y)
    return Dataset(question_ids, by_student)


def make_folds(dataset: Dataset, seed: int, num_folds: int = 5):
    """Deterministic student-level cross-validation folds.

    Each fold uses one fifth of the students for test, the next fifth for
    validation, and the rest for training; test sets are disjoint across
    folds and cover everyone.
    """
    ids = list(dataset.student_ids)
    if len(ids) < num_folds:
        raise PartitionError(
            f"need at least {num_folds} students, have {len(ids)}")
    rng = derived_rng(seed, "folds")
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    chunks = [list(c) for c in np.array_split(np.array(shuffled, dtype=object),
                                              num_folds)]
    folds = []
    for i in range(num_folds):
        test = chunks[i]
        val = chunks[(i + 1) % num_folds]
        train = [s for k, c in enumerate(chunks)
                 if k not in (i, (i + 1) % num_folds) for s in c]
        folds.append(FoldSplit(fold_index=i,
                               train=tuple(sorted(train)),
                               val=tuple(sorted(val)),
                               test=tuple(sorted(test))))
    return folds


def folds_to_json(folds, path=None) -> str:
    payload = {"folds": [{"fold_index": f.fold_index,
                          "train": list(f.train),
                          "val": list(f.val),
                          "test": list(f.test)} for f in folds]}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def folds_from_json(path):
    payload = json.loads(Path(path).read_text())
    return [FoldSplit(fold_index=f["fold_index"], train=tuple(f["train"]),
                      val=tuple(f["val"]), test=tuple(f["test"]))
            for f in payload["folds"]]


def partition_student(question_indices, ratio: float = 0.8,
                      rng: np.random.Generator | None = None) -> StudentPartition:
    """Uniformly random pool/meta split of one student's questions.

    The split depends only on the *set* of indices (they are sorted before
    shuffling), so it is stable under record reordering.
    """
    qidx = np.sort(np.asarray(question_indices, dtype=np.int64))
    if qidx.size < 2:
        raise PartitionError("need at least 2 responses to partition")
    if not 0.0 < ratio < 1.0:
        raise PartitionError(f"ratio must be in (0,1), got {ratio}")
    if rng is None:
        rng = np.random.default_rng()
    perm = rng.permutation(qidx.size)
    n_pool = int(np.floor(qidx.size * ratio))
    n_pool = min(max(n_pool, 1), qidx.size - 1)
    pool = qidx[perm[:n_pool]]
    meta = qidx[perm[n_pool:]]
    return StudentPartition(omega=np.sort(pool), gamma=np.sort(meta))


class EvalPartitionSet:
    """Fixed pool/meta partitions per (student, repetition).

    Built once per experiment and shared by every model under comparison so
    metric differences come from the policies, not the splits.
    """

    def __init__(self, partitions, repeats: int, seed: int, ratio: float):
        self._partitions = partitions  # (student_id, rep) -> StudentPartition
        self.repeats = int(repeats)
        self.seed = int(seed)
        self.ratio = float(ratio)

    def get(self, student_id: str, rep: int) -> StudentPartition:
        return self._partitions[(student_id, rep)]

    @property
    def students(self):
        return tuple(sorted({sid for sid, _ in self._partitions}))

    def to_json(self, path=None) -> str:
        per_student = {}
        for (sid, rep), part in sorted(self._partitions.items()):
            per_student.setdefault(sid, [None] * self.repeats)
            per_student[sid][rep] = {"omega": part.omega.tolist(),
                                     "gamma": part.gamma.tolist()}
        payload = {"repeats": self.repeats, "seed": self.seed,
                   "ratio": self.ratio, "partitions": per_student}
        text = json.dumps(payload, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "EvalPartitionSet":
        payload = json.loads(Path(path).read_text())
        partitions = {}
        for sid, reps in payload["partitions"].items():
            for rep, part in enumerate(reps):
                partitions[(sid, rep)] = StudentPartition(
                    omega=np.array(part["omega"], dtype=np.int64),
                    gamma=np.array(part["gamma"], dtype=np.int64))
        return cls(partitions, repeats=payload["repeats"],
                   seed=payload["seed"], ratio=payload["ratio"])


def make_eval_partitions(dataset: Dataset, students, repeats: int, seed: int,
                         ratio: float = 0.8) -> EvalPartitionSet:
    """R fixed partitions per student, derived from (seed, student, rep)."""
    if repeats < 1:
        raise PartitionError(f"repeats must be >= 1, got {repeats}")
    partitions = {}
    for sid in sorted(students):
        qidx, _ = dataset.responses(sid)
        for rep in range(repeats):
            rng = derived_rng(seed, "partition", sid, rep)
            partitions[(sid, rep)] = partition_student(qidx, ratio, rng)
    return EvalPartitionSet(partitions, repeats=repeats, seed=seed, ratio=ratio)


def generate_synthetic(num_students: int, num_questions: int, seed: int,
                       param_seed: int | None = None):
    """Full-matrix synthetic data from a 1PL model.

    Abilities and difficulties are standard normal; every student answers
    every question with P(correct) = sigmoid(theta - b). ``param_seed``
    lets tests hold the true parameters fixed while redrawing responses.
    Returns (Dataset, true_thetas, true_difficulties).
    """
    if num_students < 1 or num_questions < 1:
        raise PartitionError("need at least one student and one question")
    prng = derived_rng(param_seed if param_seed is not None else seed, "params")
    thetas = prng.standard_normal(num_students)
    difficulties = prng.standard_normal(num_questions)
    rrng = derived_rng(seed, "responses")
    probs = sigmoid(thetas[:, None] - difficulties[None, :])
    responses = (rrng.random((num_students, num_questions)) < probs)

    swidth = len(str(num_students - 1))
    qwidth = len(str(num_questions - 1))
    question_ids = [f"q{j:0{qwidth}d}" for j in range(num_questions)]
    by_student = {}
    all_q = np.arange(num_questions, dtype=np.int64)
    for i in range(num_students):
        sid = f"s{i:0{swidth}d}"
        by_student[sid] = (all_q.copy(), responses[i].astype(np.float64))
    dataset = Dataset(question_ids, by_student)
    return dataset, thetas, difficulties


def save_truth(path, thetas, difficulties) -> None:
    Path(path).write_text(json.dumps(
        {"thetas": np.asarray(thetas).tolist(),
         "difficulties": np.asarray(difficulties).tolist()}))


def load_truth(path):
    payload = json.loads(Path(path).read_text())
    return (np.array(payload["thetas"]), np.array(payload["difficulties"]))


@dataclass
class PaddedResponses:
    """Ragged per-student response lists packed into padded 2-D arrays.

    ``qidx`` and ``y`` are (batch, width); invalid slots are masked out by
    ``valid`` and hold index 0 / response 0, which every consumer weights
    by the mask.
    """

    qidx: np.ndarray
    y: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_lists(cls, qidx_lists, y_lists) -> "PaddedResponses":
        batch = len(qidx_lists)
        width = max((len(q) for q in qidx_lists), default=0)
        width = max(width, 1)
        qidx = np.zeros((batch, width), dtype=np.int64)
        y = np.zeros((batch, width), dtype=np.float64)
        valid = np.zeros((batch, width), dtype=bool)
        for i, (qs, ys) in enumerate(zip(qidx_lists, y_lists)):
            k = len(qs)
            if k:
                qidx[i, :k] = qs
                y[i, :k] = ys
                valid[i, :k] = True
        return cls(qidx=qidx, y=y, valid=valid)

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)
