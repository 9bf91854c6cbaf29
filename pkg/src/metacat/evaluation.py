"""Evaluation metrics and the selection-behavior studies.

Holds the rank-based AUC, greedy policy rollouts over fixed partitions,
the ability-recovery study, exposure/overlap statistics, the pairwise
mutual-information analysis of what each policy selects, and JSON/CSV
report emission.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, EvalPartitionSet, PaddedResponses, derived_rng
from .errors import ValidationError
from .models import map_ability_batch
from .training import make_episode_batch, play_episodes, restore_nets

EVAL_CHUNK = 256  # fixed rollout chunk grid, independent of worker count


def auc(labels, scores) -> float:
    """Rank AUC (Mann-Whitney with midrank ties) in O(m log m)."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValidationError("labels and scores must be equal-length 1-D")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValidationError("labels must be binary")
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValidationError("AUC undefined for single-class labels")
    ranks = rankdata(scores)
    u = ranks[labels == 1.0].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def _rollout_chunk(model, policy_net, cfg, dataset, chunk, per_student,
                   rep, chunk_idx):
    data = make_episode_batch(dataset, chunk, per_student)
    rng = derived_rng(cfg.seed, "eval-rollout", rep, chunk_idx)
    qidx, y, _ = play_episodes(
        model, cfg.policy, policy_net, data, cfg.n_questions,
        cfg.adapt_config(eval_mode=True), rng, None, greedy=True)
    return data, qidx, y


def eval_policy(dataset: Dataset, payload: dict, students,
                partitions: EvalPartitionSet, n_list, workers: int = 1):
    """Greedy rollouts with snapshots at each episode length in n_list.

    Accuracy is the mean over students of their meta-set accuracy; AUC
    pools every meta prediction in a repetition (per-student AUC can be
    undefined). Both are averaged over repetitions; single-class pooled
    repetitions are excluded from the AUC mean and counted. Returns
    (report, selections) with selections[(student_id, rep)] holding the
    administered question indices in order.
    """
    model, policy_net, _, cfg = restore_nets(payload)
    if model.num_questions != dataset.num_questions:
        raise ValidationError(
            f"checkpoint covers {model.num_questions} questions, dataset "
            f"has {dataset.num_questions}")
    n_list = sorted(set(int(n) for n in n_list))
    if n_list and n_list[0] < 0:
        raise ValidationError("episode snapshots must be >= 0")
    n_max = max(n_list) if n_list else 0
    cfg = _with_n(cfg, max(n_max, 1))

    students = sorted(students)
    chunks = [students[i:i + EVAL_CHUNK]
              for i in range(0, len(students), EVAL_CHUNK)]
    selections = {}
    acc_per_rep = {n: [] for n in n_list}
    auc_per_rep = {n: [] for n in n_list}
    undefined = {n: 0 for n in n_list}
    for rep in range(partitions.repeats):
        per_student = {sid: partitions.get(sid, rep) for sid in students}
        jobs = [(model, policy_net, cfg, dataset, chunk, per_student, rep, c)
                for c, chunk in enumerate(chunks)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda a: _rollout_chunk(*a), jobs))
        else:
            results = [_rollout_chunk(*job) for job in jobs]

        accs = {n: [] for n in n_list}
        labels = {n: [] for n in n_list}
        scores = {n: [] for n in n_list}
        for chunk, (data, qidx, y) in zip(chunks, results):
            for i, sid in enumerate(chunk):
                selections[(sid, rep)] = qidx[i].copy()
            batch = len(chunk)
            for n in n_list:
                admin = PaddedResponses(qidx[:, :n], y[:, :n],
                                        np.ones((batch, n), dtype=bool))
                local = model.adapt(admin, cfg.adapt_config(eval_mode=True))
                _, acc, probs = model.meta_loss(local, data.meta,
                                                eval_mode=True)
                accs[n].append(acc)
                labels[n].append(data.meta.y[data.meta.valid])
                scores[n].append(probs[data.meta.valid])
        for n in n_list:
            acc_per_rep[n].append(float(np.concatenate(accs[n]).mean()))
            try:
                auc_per_rep[n].append(auc(np.concatenate(labels[n]),
                                          np.concatenate(scores[n])))
            except ValidationError:
                undefined[n] += 1

    report = {"repeats": partitions.repeats, "n_list": n_list, "per_n": {}}
    for n in n_list:
        entry = {
            "accuracy": float(np.mean(acc_per_rep[n])),
            "accuracy_std": float(np.std(acc_per_rep[n])),
            "undefined_auc_reps": undefined[n],
        }
        if auc_per_rep[n]:
            entry["auc"] = float(np.mean(auc_per_rep[n]))
            entry["auc_std"] = float(np.std(auc_per_rep[n]))
        else:
            entry["auc"] = None
            entry["auc_std"] = None
        report["per_n"][n] = entry
    return report, selections


def _with_n(cfg, n):
    import dataclasses
    return dataclasses.replace(cfg, n_questions=n)


def ability_error_study(dataset: Dataset, selections, difficulties, n_list,
                        lam2: float = 1.0, prior_mean: float = 0.0) -> dict:
    """Squared error of few-question ability estimates vs full-data ones.

    ``selections`` maps (student_id, rep) to an ordered index array; the
    first n entries form the n-question estimate. When n exceeds a
    selection it falls back to the whole selection. The full-data
    reference uses every response the student gave.
    """
    difficulties = np.asarray(difficulties, dtype=np.float64)
    sids = sorted({sid for sid, _ in selections})
    full_packed = PaddedResponses.from_lists(
        *zip(*[[dataset.responses(sid)[0].tolist(),
                dataset.responses(sid)[1].tolist()] for sid in sids]))
    theta_full = dict(zip(sids, map_ability_batch(full_packed, difficulties,
                                                  lam2, prior_mean)))
    keys = sorted(selections)
    lookup = {}
    for sid in sids:
        qidx, y = dataset.responses(sid)
        lookup[sid] = dict(zip(qidx.tolist(), y.tolist()))
    per_n = {}
    for n in sorted(set(int(n) for n in n_list)):
        q_lists, y_lists = [], []
        for sid, rep in keys:
            picked = selections[(sid, rep)][:n] if n > 0 else []
            q_lists.append([int(q) for q in picked])
            y_lists.append([lookup[sid][int(q)] for q in picked])
        packed = PaddedResponses.from_lists(q_lists, y_lists)
        theta_n = map_ability_batch(packed, difficulties, lam2, prior_mean)
        err = [(theta_n[i] - theta_full[sid]) ** 2
               for i, (sid, _) in enumerate(keys)]
        per_n[n] = float(np.mean(err))
    return {"per_n": per_n, "lam2": lam2, "prior_mean": prior_mean,
            "num_students": len(sids), "num_episodes": len(keys)}


def exposure_and_overlap(selections, num_questions: int, n: int,
                         max_pairs: int = 1_000_000, seed: int = 0) -> dict:
    """Per-question exposure rates and mean pairwise selection overlap.

    ``selections`` is an iterable of size-n index collections, one per
    student episode. All unordered pairs enter the overlap mean unless
    there are more than max_pairs, in which case a fixed-seed subsample
    is used.
    """
    rows = [np.asarray(sorted(s), dtype=np.int64) for s in selections]
    if any(r.size != n or len(set(r.tolist())) != n for r in rows):
        raise ValidationError(f"every selection must hold n={n} distinct "
                              "questions")
    num_students = len(rows)
    if num_students == 0:
        raise ValidationError("no selections given")
    counts = np.zeros(num_questions, dtype=np.int64)
    member = np.zeros((num_students, num_questions), dtype=bool)
    for i, r in enumerate(rows):
        if r.size and (r[-1] >= num_questions or r[0] < 0):
            raise ValidationError("selection index out of range")
        counts[r] += 1
        member[i, r] = True
    rates = counts / num_students

    total_pairs = num_students * (num_students - 1) // 2
    subsampled = total_pairs > max_pairs
    if total_pairs == 0:
        mean_overlap = None
        used_pairs = 0
    elif subsampled:
        rng = derived_rng(seed, "overlap-pairs")
        a = rng.integers(0, num_students, size=max_pairs)
        b = rng.integers(0, num_students - 1, size=max_pairs)
        b = np.where(b >= a, b + 1, b)  # distinct partner per draw
        inter = (member[a] & member[b]).sum(axis=1)
        mean_overlap = float(inter.mean() / n)
        used_pairs = max_pairs
    else:
        a, b = np.triu_indices(num_students, k=1)
        inter = (member[a] & member[b]).sum(axis=1)
        mean_overlap = float(inter.mean() / n)
        used_pairs = total_pairs

    return {
        "counts": counts.tolist(),
        "exposure": rates.tolist(),
        "median_rate": float(np.median(rates)),
        "frac_over_20pct": float((rates > 0.20).mean()),
        "mean_overlap": mean_overlap,
        "num_pairs": used_pairs,
        "subsampled": subsampled,
        "num_students": num_students,
        "n": n,
    }


def mutual_information(dataset: Dataset, j: int, k: int) -> float:
    """Plug-in mutual information between two questions' outcomes.

    Computed over students who answered both, from the 2x2 joint count
    table with natural log and 0*log(0) = 0. Nonnegative by construction;
    floating-point dust below zero is clamped.
    """
    mat, answered = dataset.response_matrix()
    both = answered[:, j] & answered[:, k]
    m = int(both.sum())
    if m == 0:
        raise ValidationError(f"no student answered both {j} and {k}")
    a = mat[both, j].astype(np.int64)
    b = mat[both, k].astype(np.int64)
    joint = np.zeros((2, 2))
    np.add.at(joint, (a, b), 1.0)
    joint /= m
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for x in range(2):
        for z in range(2):
            if joint[x, z] > 0.0:
                mi += joint[x, z] * math.log(joint[x, z] / (pa[x] * pb[z]))
    return max(mi, 0.0)


def mi_analysis(dataset: Dataset, selections_per_method: dict,
                num_bins: int = 10) -> dict:
    """Weighted-MI deciles and where each method's selections land.

    The weighted MI of question j sums MI(j,k) over k != j, weighted by
    the fraction of students who answered k; pairs with no co-respondents
    contribute zero and are counted. Questions are ranked into
    ``num_bins`` equal-count bins (1 = lowest, num_bins = highest).
    """
    num_q = dataset.num_questions
    if num_q < num_bins:
        raise ValidationError(f"need at least {num_bins} questions")
    mat, answered = dataset.response_matrix()
    p_answer = answered.mean(axis=0)

    # all Q^2 joint tables at once via 0/1 membership matmuls
    ones = (answered & (mat == 1.0)).astype(np.float64)
    zeros = (answered & (mat == 0.0)).astype(np.float64)
    c11 = ones.T @ ones
    c10 = ones.T @ zeros
    c01 = zeros.T @ ones
    c00 = zeros.T @ zeros
    m = c11 + c10 + c01 + c00
    pa1, pa0 = c11 + c10, c01 + c00
    pb1, pb0 = c11 + c01, c10 + c00
    mi_cache = np.zeros((num_q, num_q))
    with np.errstate(divide="ignore", invalid="ignore"):
        for c, ra, rb in ((c11, pa1, pb1), (c10, pa1, pb0),
                          (c01, pa0, pb1), (c00, pa0, pb0)):
            term = (c / m) * np.log(c * m / (ra * rb))
            mi_cache += np.where(c > 0.0, term, 0.0)
    defined = m > 0.0
    mi_cache = np.where(defined, np.maximum(mi_cache, 0.0), 0.0)
    off_diag = ~np.eye(num_q, dtype=bool)
    undefined_pairs = int((~defined & off_diag).sum()) // 2

    weights = np.tile(p_answer, (num_q, 1))
    np.fill_diagonal(weights, 0.0)
    weighted = (mi_cache * weights).sum(axis=1)

    order = np.argsort(weighted, kind="stable")
    bins = np.empty(num_q, dtype=np.int64)
    for b, grp in enumerate(np.array_split(order, num_bins)):
        bins[grp] = b + 1

    methods = {}
    for name, sel in selections_per_method.items():
        flat = np.concatenate([np.asarray(s, dtype=np.int64).ravel()
                               for s in sel])
        if flat.size == 0:
            raise ValidationError(f"method {name!r} has no selections")
        hist = np.zeros(num_bins)
        np.add.at(hist, bins[flat] - 1, 1.0)
        methods[name] = (hist / flat.size).tolist()

    return {
        "weighted_mi": weighted.tolist(),
        "bin": bins.tolist(),
        "methods": methods,
        "undefined_pairs": undefined_pairs,
        "num_bins": num_bins,
    }


def emit_report(report, path, fmt: str = "json") -> None:
    """Write a report deterministically as JSON, or rows as CSV.

    CSV expects a list of flat dicts (or a dict carrying ``rows`` and
    optionally ``columns``); the column list is written both as a comment
    line and as the CSV header. JSON dumps any report dict with sorted
    keys.
    """
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return
    if fmt != "csv":
        raise ValidationError(f"unknown report format {fmt!r}")
    if isinstance(report, dict):
        rows = report.get("rows", [])
        columns = report.get("columns")
    else:
        rows = list(report)
        columns = None
    if columns is None:
        columns = sorted({k for row in rows for k in row})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# columns: " + ",".join(columns) + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def selections_to_json(selections) -> dict:
    """{(student_id, rep): indices} -> nested JSON-ready dict."""
    doc = {}
    for (sid, rep), picked in sorted(selections.items()):
        doc.setdefault(sid, {})[str(rep)] = [int(q) for q in picked]
    return doc


def selections_from_json(doc: dict) -> dict:
    out = {}
    for sid, reps in doc.items():
        for rep, picked in reps.items():
            out[(sid, int(rep))] = np.asarray(picked, dtype=np.int64)
    return out


def metrics_rows(report: dict, method: str, fold: int) -> list:
    """Flatten an eval_policy report into plot-ready CSV rows."""
    rows = []
    for n in report["n_list"]:
        entry = report["per_n"][n]
        rows.append({"method": method, "n": n, "fold": fold,
                     "accuracy": entry["accuracy"],
                     "accuracy_std": entry["accuracy_std"],
                     "auc": entry["auc"], "auc_std": entry["auc_std"]})
    return rows
