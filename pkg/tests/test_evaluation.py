"""Metric and study tests, with brute-force oracles where cheap."""

import json
import math

import numpy as np
import pytest

from metacat import evaluation
from metacat.data import (Dataset, generate_synthetic, make_eval_partitions,
                          make_folds)
from metacat.errors import ValidationError
from metacat.evaluation import (ability_error_study, auc, emit_report,
                                eval_policy, exposure_and_overlap,
                                metrics_rows, mi_analysis,
                                mutual_information)
from metacat.models import map_ability_batch
from metacat.training import TrainConfig, train


def brute_auc(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([1, 0], [0.9, 0.1]) == 1.0

    def test_all_tied_within_class(self):
        assert auc([1, 0, 1, 0], [0.8, 0.8, 0.3, 0.3]) == 0.5

    def test_inverted_ranking(self):
        assert auc([1, 0], [0.1, 0.9]) == 0.0

    def test_matches_pairwise_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=m)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # coarse grid forces plenty of ties
            scores = rng.integers(0, 5, size=m) / 4.0
            assert auc(labels, scores) == brute_auc(labels, scores)

    def test_single_class_raises(self):
        with pytest.raises(ValidationError):
            auc([1, 1], [0.5, 0.6])

    def test_non_binary_labels_raise(self):
        with pytest.raises(ValidationError):
            auc([1, 2], [0.5, 0.6])


@pytest.fixture(scope="module")
def trained_setup():
    dataset, _, _ = generate_synthetic(60, 15, seed=40)
    fold = make_folds(dataset, seed=40)[0]
    cfg = TrainConfig(model="biirt", policy="random", n_questions=4,
                      batch_size=32, max_epochs=1, patience=5, seed=40)
    best, _ = train(dataset, fold, cfg)
    parts = make_eval_partitions(dataset, fold.test, 2, seed=40)
    return dataset, fold, best, parts


class TestEvalPolicy:
    def test_n0_equals_unadapted(self, trained_setup):
        dataset, fold, best, parts = trained_setup
        report, _ = eval_policy(dataset, best, fold.test, parts, [0, 2])
        from metacat.training import make_episode_batch, restore_nets
        model = restore_nets(best)[0]
        accs = []
        for rep in range(2):
            per = {sid: parts.get(sid, rep) for sid in fold.test}
            data = make_episode_batch(dataset, sorted(fold.test), per)
            _, acc, _ = model.meta_loss(model.init_local(len(fold.test)),
                                        data.meta, eval_mode=True)
            accs.append(float(acc.mean()))
        assert report["per_n"][0]["accuracy"] == pytest.approx(
            float(np.mean(accs)), abs=1e-12)

    def test_deterministic_and_bounded(self, trained_setup):
        dataset, fold, best, parts = trained_setup
        r1, s1 = eval_policy(dataset, best, fold.test, parts, [2, 4])
        r2, s2 = eval_policy(dataset, best, fold.test, parts, [2, 4])
        assert r1 == r2
        assert set(s1) == set(s2)
        for key in s1:
            assert np.array_equal(s1[key], s2[key])
        for n in (2, 4):
            entry = r1["per_n"][n]
            assert 0.0 <= entry["accuracy"] <= 1.0
            assert 0.0 <= entry["auc"] <= 1.0

    def test_selections_stay_in_pool(self, trained_setup):
        dataset, fold, best, parts = trained_setup
        _, selections = eval_policy(dataset, best, fold.test, parts, [4])
        for (sid, rep), picked in selections.items():
            assert len(set(picked.tolist())) == 4
            assert set(picked.tolist()) <= set(
                parts.get(sid, rep).omega.tolist())

    def test_workers_do_not_change_results(self, trained_setup):
        dataset, fold, best, parts = trained_setup
        r1, s1 = eval_policy(dataset, best, fold.test, parts, [3])
        r2, s2 = eval_policy(dataset, best, fold.test, parts, [3],
                             workers=3)
        assert r1 == r2
        for key in s1:
            assert np.array_equal(s1[key], s2[key])

    def test_question_count_mismatch(self, trained_setup):
        dataset, fold, best, parts = trained_setup
        other, _, _ = generate_synthetic(30, 9, seed=1)
        with pytest.raises(ValidationError):
            eval_policy(other, best, list(other.student_ids)[:5], parts, [1])

    def test_active_rollout_matches_manual_replay(self):
        from metacat.models import AdaptConfig
        from metacat.policies import select_active
        from metacat.data import PaddedResponses
        from metacat.training import restore_nets
        dataset, _, _ = generate_synthetic(60, 15, seed=41)
        fold = make_folds(dataset, seed=41)[0]
        cfg = TrainConfig(model="biirt", policy="active", n_questions=4,
                          batch_size=32, max_epochs=1, patience=5, seed=41)
        best, _ = train(dataset, fold, cfg)
        parts = make_eval_partitions(dataset, fold.test, 1, seed=41)
        _, selections = eval_policy(dataset, best, fold.test, parts, [4])

        model = restore_nets(best)[0]
        sid = sorted(fold.test)[0]
        part = parts.get(sid, 0)
        qidx_all, y_all = dataset.responses(sid)
        lookup = dict(zip(qidx_all.tolist(), y_all.tolist()))
        avail = np.zeros((1, 15), dtype=bool)
        avail[0, part.omega] = True
        local = model.init_local(1)
        picked = []
        for _ in range(4):
            a = int(select_active(local[:, 0], model.params["difficulty"],
                                  avail)[0])
            picked.append(a)
            avail[0, a] = False
            admin = PaddedResponses.from_lists(
                [picked], [[lookup[q] for q in picked]])
            local = model.adapt(admin, AdaptConfig(num_steps=5, lr=0.1,
                                                   eval_mode=True))
        assert picked == selections[(sid, 0)].tolist()


class TestAbilityErrorStudy:
    def _difficulties(self, num_q, seed=0):
        return np.random.default_rng(seed).standard_normal(num_q)

    def test_full_selection_zero_error(self):
        dataset, _, _ = generate_synthetic(12, 10, seed=50)
        diffs = self._difficulties(10)
        selections = {(sid, 0): dataset.responses(sid)[0]
                      for sid in dataset.student_ids}
        report = ability_error_study(dataset, selections, diffs, [10],
                                     lam2=0.5)
        assert report["per_n"][10] == 0.0

    def test_n0_is_prior_baseline(self):
        dataset, _, _ = generate_synthetic(12, 10, seed=51)
        diffs = self._difficulties(10, seed=1)
        selections = {(sid, 0): dataset.responses(sid)[0]
                      for sid in dataset.student_ids}
        report = ability_error_study(dataset, selections, diffs, [0],
                                     lam2=0.5, prior_mean=0.3)
        sids = sorted(dataset.student_ids)
        from metacat.data import PaddedResponses
        packed = PaddedResponses.from_lists(
            [dataset.responses(s)[0].tolist() for s in sids],
            [dataset.responses(s)[1].tolist() for s in sids])
        full = map_ability_batch(packed, diffs, 0.5, 0.3)
        assert report["per_n"][0] == pytest.approx(
            float(((0.3 - full) ** 2).mean()), abs=1e-12)

    def test_a_few_questions_beat_the_prior(self):
        dataset, _, diffs = generate_synthetic(100, 20, seed=52)
        rng = np.random.default_rng(3)
        selections = {}
        for sid in dataset.student_ids:
            qidx, _ = dataset.responses(sid)
            selections[(sid, 0)] = rng.permutation(qidx)[:5]
        report = ability_error_study(dataset, selections, diffs, [0, 5],
                                     lam2=1.0)
        assert report["per_n"][5] < report["per_n"][0]


class TestExposureOverlap:
    def test_identical_selections(self):
        report = exposure_and_overlap([[0, 1], [0, 1], [0, 1]], 5, 2)
        assert report["exposure"][0] == 1.0 and report["exposure"][1] == 1.0
        assert report["mean_overlap"] == 1.0
        assert report["frac_over_20pct"] == pytest.approx(2 / 5)

    def test_hand_enumerated_overlap(self):
        # pairs: ({a,b},{a,c}) share 1 of 2, the other two pairs nothing
        report = exposure_and_overlap([[0, 1], [0, 2], [3, 4]], 6, 2)
        assert report["mean_overlap"] == pytest.approx(1 / 6)
        assert report["counts"][:5] == [2, 1, 1, 1, 1]

    def test_counting_identity(self):
        rng = np.random.default_rng(8)
        sels = [rng.choice(12, size=4, replace=False) for _ in range(37)]
        report = exposure_and_overlap(sels, 12, 4)
        assert sum(report["counts"]) == 4 * 37
        assert sum(report["exposure"]) == pytest.approx(4.0, abs=1e-12)

    def test_subsampled_pairs(self):
        rng = np.random.default_rng(9)
        sels = [rng.choice(10, size=3, replace=False) for _ in range(60)]
        full = exposure_and_overlap(sels, 10, 3)
        sub = exposure_and_overlap(sels, 10, 3, max_pairs=100)
        assert sub["subsampled"] and not full["subsampled"]
        assert sub["num_pairs"] == 100
        assert abs(sub["mean_overlap"] - full["mean_overlap"]) < 0.15

    def test_single_student_no_pairs(self):
        report = exposure_and_overlap([[1, 2]], 4, 2)
        assert report["mean_overlap"] is None

    def test_wrong_size_raises(self):
        with pytest.raises(ValidationError):
            exposure_and_overlap([[0, 1], [2]], 4, 2)
        with pytest.raises(ValidationError):
            exposure_and_overlap([[1, 1]], 4, 2)


def column_dataset(columns):
    """Dataset where student i answers question j with columns[j][i]."""
    num_s = len(columns[0])
    by_student = {}
    for i in range(num_s):
        qidx = [j for j, col in enumerate(columns) if col[i] is not None]
        y = [float(columns[j][i]) for j in qidx]
        by_student[f"s{i:03d}"] = (np.array(qidx), np.array(y))
    qids = [f"q{j:03d}" for j in range(len(columns))]
    return Dataset(qids, by_student)


class TestMutualInformation:
    def test_independent_columns(self):
        ds = column_dataset([[1, 1, 0, 0], [1, 0, 1, 0]])
        assert mutual_information(ds, 0, 1) == 0.0

    def test_identical_columns(self):
        ds = column_dataset([[1, 1, 0, 0], [1, 1, 0, 0]])
        assert mutual_information(ds, 0, 1) == pytest.approx(math.log(2),
                                                            abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(12)
        cols = [rng.integers(0, 2, size=30).tolist() for _ in range(4)]
        ds = column_dataset(cols)
        for j in range(4):
            for k in range(j + 1, 4):
                assert mutual_information(ds, j, k) \
                    == mutual_information(ds, k, j)

    def test_nonnegative_on_random_tables(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            m = int(rng.integers(2, 12))
            cols = [rng.integers(0, 2, size=m).tolist() for _ in range(2)]
            ds = column_dataset(cols)
            assert mutual_information(ds, 0, 1) >= 0.0

    def test_no_corespondents_raises(self):
        ds = column_dataset([[1, None], [None, 0]])
        with pytest.raises(ValidationError):
            mutual_information(ds, 0, 1)


class TestMiAnalysis:
    def test_ten_questions_one_per_bin(self):
        rng = np.random.default_rng(14)
        cols = [rng.integers(0, 2, size=25).tolist() for _ in range(10)]
        ds = column_dataset(cols)
        report = mi_analysis(ds, {"r": [[0, 1]]})
        assert sorted(report["bin"]) == list(range(1, 11))

    def test_matches_scalar_route(self):
        rng = np.random.default_rng(15)
        cols = [rng.integers(0, 2, size=20).tolist() for _ in range(12)]
        ds = column_dataset(cols)
        report = mi_analysis(ds, {"r": [[0]]})
        _, answered = ds.response_matrix()
        p = answered.mean(axis=0)
        for j in range(12):
            expect = sum(p[k] * mutual_information(ds, j, k)
                         for k in range(12) if k != j)
            assert report["weighted_mi"][j] == pytest.approx(expect,
                                                             abs=1e-12)

    def test_uniform_selections_spread(self):
        rng = np.random.default_rng(16)
        cols = [rng.integers(0, 2, size=40).tolist() for _ in range(20)]
        ds = column_dataset(cols)
        draws = rng.integers(0, 20, size=20000)
        report = mi_analysis(ds, {"uniform": [draws]})
        stderr = math.sqrt(0.1 * 0.9 / 20000)
        for frac in report["methods"]["uniform"]:
            assert abs(frac - 0.1) < 3 * stderr + 1e-12

    def test_top_bin_policy(self):
        rng = np.random.default_rng(17)
        cols = [rng.integers(0, 2, size=40).tolist() for _ in range(10)]
        ds = column_dataset(cols)
        probe = mi_analysis(ds, {"r": [[0]]})
        top = int(np.argmax(probe["weighted_mi"]))
        report = mi_analysis(ds, {"greedy-mi": [[top]] * 50})
        assert report["methods"]["greedy-mi"][9] == 1.0
        assert sum(report["methods"]["greedy-mi"]) == pytest.approx(1.0)

    def test_disjoint_answering_counts_undefined(self):
        # questions 0 and 1 are answered by disjoint student halves
        ds = column_dataset([[1, 0, None, None], [None, None, 1, 0]]
                            + [[1, 0, 1, 0] for _ in range(8)])
        report = mi_analysis(ds, {"r": [[2]]})
        assert report["undefined_pairs"] == 1


class TestEmitReport:
    def test_json_round_trip(self, tmp_path):
        report = {"per_n": {2: {"accuracy": 0.7}}, "n_list": [2]}
        path = tmp_path / "r.json"
        emit_report(report, path, "json")
        back = json.loads(path.read_text())
        assert back["per_n"]["2"]["accuracy"] == 0.7

    def test_csv_rows_and_header(self, tmp_path):
        rows = [{"method": "random", "n": 2, "fold": 0,
                 "accuracy": 0.71, "auc": 0.66}]
        path = tmp_path / "r.csv"
        emit_report({"rows": rows,
                     "columns": ["method", "n", "fold", "accuracy", "auc"]},
                    path, "csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "# columns: method,n,fold,accuracy,auc"
        assert lines[1] == "method,n,fold,accuracy,auc"
        assert lines[2] == "random,2,0,0.71,0.66"

    def test_empty_csv_is_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        emit_report({"rows": [], "columns": ["a", "b"]}, path, "csv")
        assert path.read_text().splitlines() == ["# columns: a,b", "a,b"]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValidationError):
            emit_report({}, tmp_path / "x", "yaml")

    def test_metrics_rows_flatten(self):
        report = {"n_list": [1, 3],
                  "per_n": {1: {"accuracy": 0.6, "accuracy_std": 0.01,
                                "auc": 0.55, "auc_std": 0.02},
                            3: {"accuracy": 0.7, "accuracy_std": 0.01,
                                "auc": 0.65, "auc_std": 0.02}}}
        rows = metrics_rows(report, "random", 0)
        assert rows[0]["n"] == 1 and rows[1]["accuracy"] == 0.7
        assert all(r["method"] == "random" for r in rows)
