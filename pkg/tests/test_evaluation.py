import json

import numpy as np
import pytest

from ovvad import data, evaluation, model
from ovvad.errors import DataError, UsageError
from ovvad.evaluation import UndefinedMetric, expand_scores, pr_auc, roc_auc


def roc_all_pairs_oracle(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by explicit enumeration."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ap_threshold_oracle(scores, labels):
    """Step AP by full rescan at every unique threshold, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int(labels.sum())
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        mask = scores >= thr
        tp = int(labels[mask].sum())
        fp = int(mask.sum()) - tp
        recall = tp / pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_instance(rng):
    n = int(rng.integers(2, 65))
    labels = rng.integers(0, 2, n)
    if labels.sum() == 0:
        labels[int(rng.integers(0, n))] = 1
    if labels.sum() == n:
        labels[int(rng.integers(0, n))] = 0
    if rng.integers(0, 2):  # coarse grid forces plenty of ties
        scores = rng.integers(0, 5, n).astype(np.float64)
    else:
        scores = rng.standard_normal(n)
    return scores, labels


class TestRocAuc:
    def test_worked_example(self):
        assert abs(roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 0.75) < 1e-4
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_exact_oracle_match(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores, labels = random_instance(rng)
            assert roc_auc(scores, labels) == roc_all_pairs_oracle(scores, labels)

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(1)
        n = 4000
        scores = rng.standard_normal(n)
        labels = rng.integers(0, 2, n)
        # 3-sigma binomial-style bound on the rank statistic
        assert abs(roc_auc(scores, labels) - 0.5) < 3.0 / np.sqrt(n)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            scores, labels = random_instance(rng)
            base = roc_auc(scores, labels)
            assert roc_auc(np.arctan(scores), labels) == base
            assert roc_auc(3.0 * scores + 11.0, labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetric):
            roc_auc([0.1, 0.2], [1, 1])


class TestPrAuc:
    def test_worked_example(self):
        got = pr_auc([0.9, 0.8, 0.7], [1, 0, 1])
        assert abs(got - 0.8333) < 1e-4

    def test_perfect_ranking(self):
        assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_exact_oracle_match(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            scores, labels = random_instance(rng)
            assert pr_auc(scores, labels) == ap_threshold_oracle(scores, labels)

    def test_no_positives_rejected(self):
        with pytest.raises(UndefinedMetric):
            pr_auc([0.5, 0.4], [0, 0])


class TestExpandScores:
    def test_stride_one_identity(self):
        s = np.array([0.2, 0.7, 0.4])
        assert np.array_equal(expand_scores(s, 1, 3), s)

    def test_truncation_arithmetic(self):
        out = expand_scores([0.1, 0.2, 0.3], 16, 40)
        assert out.shape == (40,)
        assert np.all(out[:16] == 0.1)
        assert np.all(out[16:32] == 0.2)
        assert np.all(out[32:] == 0.3)

    def test_index_cover(self):
        rng = np.random.default_rng(4)
        scores = rng.standard_normal(9)
        stride = 7
        out = expand_scores(scores, stride, 60)
        for i in range(60):
            assert out[i] == scores[i // stride]

    def test_rejects_impossible_counts(self):
        with pytest.raises(ValueError):
            expand_scores([0.1, 0.2, 0.3], 16, 2)
        with pytest.raises(ValueError):
            expand_scores([0.1], 4, 9)


def handcrafted_perfect_setup(tmp_path, all_base=False):
    """A corpus plus parameters whose detector reproduces the ground truth.

    Features carry the label in coordinate 0 (+5 anomalous, -5 normal); the
    detector weights read it off through the GeLU (positive branch linear).
    """
    rng = np.random.default_rng(5)
    c = 4
    out = tmp_path / "corpus"
    (out / "features").mkdir(parents=True)
    class_names = ["alpha", "beta"]
    is_base = [True, True] if all_base else [True, False]
    emb = np.zeros((2, c))
    emb[0, 1] = 1.0
    emb[1, 2] = 1.0
    data.write_features(data.FeatureSequence(emb, stride=1), out / "catalog.ovff")
    (out / "catalog.json").write_text(json.dumps(
        {"class_names": class_names, "is_base": is_base, "embeddings_path": "catalog.ovff"}))
    know = np.eye(2, c)
    data.write_features(data.FeatureSequence(know, stride=1), out / "knowledge.ovff")
    (out / "knowledge.json").write_text(json.dumps(
        {"groups": ["normal", "abnormal"], "phrases": ["n", "a"], "embeddings_path": "knowledge.ovff"}))

    videos = []
    for i, label in enumerate(["normal", "alpha", "beta", "normal"]):
        n = 10
        feats = rng.standard_normal((n, c)) * 0.01
        gt = np.zeros(n, dtype=int)
        if label != "normal":
            gt[3:7] = 1
            feats[:, 0] = -5.0
            feats[gt == 1, 0] = 5.0
            # align the class channel so the classifier is also perfect
            feats[gt == 1, 1 + class_names.index(label)] = 5.0
        else:
            feats[:, 0] = -5.0
        rel = f"features/v{i}.ovff"
        data.write_features(data.FeatureSequence(feats), out / rel)
        videos.append({"id": f"v{i}", "feature_path": rel, "label": label,
                       "split": "test", "frame_gt": [int(x) for x in gt]})
    (out / "manifest.json").write_text(json.dumps({
        "videos": videos, "feature_dim": c,
        "class_catalog_path": "catalog.json", "knowledge_bank_path": "knowledge.json"}))
    manifest = data.load_manifest(out / "manifest.json")
    catalog = model.load_class_catalog(out / "catalog.json")

    mcfg = model.ModelConfig(use_ta=False, use_ski=False, hidden=2)
    params = model.ModelParams(
        ln_gamma=np.ones(c), ln_beta=np.zeros(c),
        w1=np.array([[1.0, 0.0]] + [[0.0, 0.0]] * (c - 1)),  # hidden0 = gelu(x0)
        b1=np.zeros(2),
        w2=np.array([[1.0], [0.0]]),
        b2=np.zeros(1),
        prompt_offset=np.zeros(c),
        knowledge=know.astype(np.float64),
    )
    return manifest, catalog, params, mcfg


class TestEvaluate:
    def test_perfect_detector_decouples_tasks(self, tmp_path):
        manifest, catalog, params, mcfg = handcrafted_perfect_setup(tmp_path)
        report = evaluation.evaluate(params, manifest, catalog, mcfg)
        assert report.auc == 1.0
        assert report.ap == 1.0
        assert report.acc == 1.0
        assert report.confusion.tolist() == [[1, 0], [0, 1]]

    def test_all_base_catalog_reports_novel_na(self, tmp_path):
        manifest, catalog, params, mcfg = handcrafted_perfect_setup(tmp_path, all_base=True)
        report = evaluation.evaluate(params, manifest, catalog, mcfg)
        assert report.auc_novel is None
        assert report.acc_novel is None
        assert report.auc_base == 1.0

    def test_breakdown_positive_sets_union(self, tmp_path):
        man = data.gen_synthetic(
            data.SyntheticConfig(c=8, videos_per_class=4, n_normal=6, seed=6), tmp_path
        )
        base_pos = novel_pos = all_pos = 0
        for rec in man.split("test"):
            gt = np.array(rec.frame_gt)
            all_pos += gt.sum()
            if rec.label.startswith("base"):
                base_pos += gt.sum()
            elif rec.label.startswith("novel"):
                novel_pos += gt.sum()
        assert base_pos + novel_pos == all_pos
        assert base_pos > 0 and novel_pos > 0

    def test_missing_gt_excluded_and_reported(self, tmp_path):
        manifest, catalog, params, mcfg = handcrafted_perfect_setup(tmp_path)
        manifest.videos[1].frame_gt = None
        report = evaluation.evaluate(params, manifest, catalog, mcfg)
        assert report.excluded == ["v1"]
        assert report.auc == 1.0  # remaining videos still perfectly ranked

    def test_write_report_artifacts(self, tmp_path):
        manifest, catalog, params, mcfg = handcrafted_perfect_setup(tmp_path)
        report = evaluation.evaluate(params, manifest, catalog, mcfg)
        out = tmp_path / "out"
        evaluation.write_report(report, out)
        raw = json.loads((out / "report.json").read_text())
        assert raw["auc"] == 1.0
        assert raw["confusion"] == [[1, 0], [0, 1]]
        roc_lines = (out / "roc_curve.csv").read_text().strip().splitlines()
        assert roc_lines[0] == "threshold,fpr,tpr"
        assert len(roc_lines) > 2
        pr_lines = (out / "pr_curve.csv").read_text().strip().splitlines()
        assert pr_lines[0] == "threshold,recall,precision"
        conf_lines = (out / "confusion.csv").read_text().strip().splitlines()
        assert conf_lines[1].startswith("alpha,1,0")

    def test_worker_count_env(self, monkeypatch, tmp_path):
        manifest, catalog, params, mcfg = handcrafted_perfect_setup(tmp_path)
        monkeypatch.setenv("OVVAD_THREADS", "2")
        report = evaluation.evaluate(params, manifest, catalog, mcfg)
        assert report.auc == 1.0
        monkeypatch.setenv("OVVAD_THREADS", "0")
        assert evaluation.worker_count() >= 1
        monkeypatch.setenv("OVVAD_THREADS", "nope")
        with pytest.raises(UsageError):
            evaluation.worker_count()
