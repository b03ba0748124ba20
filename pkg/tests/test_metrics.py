import numpy as np
import pytest

from ehrfusion.metrics import auc, auprc, delong_test, subgroup_metrics


def brute_force_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) == 0]
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_auc_perfect_separation():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_all_ties():
    assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_auc_hand_case():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = rng.integers(4, 51)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[1] = 0, 1
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        assert auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.random(80)
    labels = rng.integers(0, 2, size=80)
    labels[:2] = [0, 1]
    logit = np.log(scores / (1 - scores))
    assert auc(scores, labels) == pytest.approx(auc(logit, labels), abs=1e-12)


def test_auc_rejects_single_class():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auprc_perfect():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auprc_single_positive_ranked_first():
    assert auprc([0.9, 0.5, 0.4, 0.3], [1, 0, 0, 0]) == 1.0


def test_auprc_hand_computed_step_curve():
    # order: pos(0.9), neg(0.8), pos(0.7), neg(0.1)
    # AP = 1/2 * 1 + 1/2 * (2/3) = 0.8333...
    got = auprc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
    assert got == pytest.approx(1 / 2 + 1 / 3, abs=1e-12)


def test_auprc_null_model_near_positive_rate():
    rng = np.random.default_rng(2)
    n = 2000
    labels = (rng.random(n) < 0.25).astype(int)
    scores = rng.random(n)
    assert abs(auprc(scores, labels) - labels.mean()) < 0.05


def test_auprc_requires_a_positive():
    with pytest.raises(ValueError):
        auprc([0.5, 0.6], [0, 0])


def test_delong_identical_scores_p_one():
    rng = np.random.default_rng(3)
    scores = rng.random(60)
    labels = rng.integers(0, 2, size=60)
    labels[:2] = [0, 1]
    p, a, b = delong_test(scores, scores, labels)
    assert p == 1.0
    assert a == b


def test_delong_aucs_match_auc_operation():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, size=100)
    labels[:2] = [0, 1]
    sa, sb = rng.random(100), rng.random(100)
    p, a, b = delong_test(sa, sb, labels)
    assert a == pytest.approx(auc(sa, labels), abs=1e-12)
    assert b == pytest.approx(auc(sb, labels), abs=1e-12)
    assert 0 < p <= 1


def test_delong_perfect_vs_random_significant():
    rng = np.random.default_rng(5)
    n = 200
    labels = np.array([1] * 50 + [0] * 150)
    perfect = np.where(labels == 1, 1.0, 0.0) + rng.normal(0, 1e-3, n)
    random_scores = rng.random(n)
    p, a, b = delong_test(perfect, random_scores, labels)
    assert a > 0.99
    assert p < 1e-3


def test_delong_symmetry():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 2, size=120)
    labels[:2] = [0, 1]
    sa = rng.random(120) + 0.3 * labels
    sb = rng.random(120)
    p_ab, a1, b1 = delong_test(sa, sb, labels)
    p_ba, a2, b2 = delong_test(sb, sa, labels)
    assert p_ab == pytest.approx(p_ba, rel=1e-12)
    assert a1 == b2 and b1 == a2


def test_delong_variance_against_bootstrap():
    # Paired-difference variance within 20% of a 2000-replicate bootstrap.
    rng = np.random.default_rng(7)
    n = 200
    labels = (rng.random(n) < 0.3).astype(int)
    labels[:2] = [0, 1]
    base = rng.normal(size=n)
    sa = base + 0.8 * labels + rng.normal(0, 0.6, n)
    sb = base + 0.5 * labels + rng.normal(0, 0.8, n)

    from ehrfusion.metrics import _placements
    v10a, v01a, auc_a = _placements(sa, labels)
    v10b, v01b, auc_b = _placements(sb, labels)
    m, nn = v10a.size, v01a.size
    s10 = np.cov(np.stack([v10a, v10b]), ddof=1)
    s01 = np.cov(np.stack([v01a, v01b]), ddof=1)
    s = s10 / m + s01 / nn
    var_delong = s[0, 0] + s[1, 1] - 2 * s[0, 1]

    diffs = []
    for _ in range(2000):
        idx = rng.integers(0, n, size=n)
        y = labels[idx]
        if y.sum() in (0, n):
            continue
        diffs.append(auc(sa[idx], y) - auc(sb[idx], y))
    var_boot = np.var(diffs, ddof=1)
    assert abs(var_delong - var_boot) / var_boot < 0.2


def test_subgroup_metrics_single_group_equals_global():
    rng = np.random.default_rng(8)
    scores = rng.random(100)
    labels = rng.integers(0, 2, size=100)
    labels[:2] = [0, 1]
    out = subgroup_metrics(scores, labels, np.array(["all"] * 100))
    assert out["all"]["auc"] == pytest.approx(auc(scores, labels))
    assert out["all"]["n"] == 100


def test_subgroup_metrics_symmetric_groups_close():
    rng = np.random.default_rng(9)
    n = 4000
    labels = rng.integers(0, 2, size=n)
    scores = labels * 0.5 + rng.normal(0, 0.5, n)
    groups = np.array(["F", "M"] * (n // 2))
    out = subgroup_metrics(scores, labels, groups)
    assert abs(out["F"]["auc"] - out["M"]["auc"]) < 0.04


def test_subgroup_metrics_degenerate_group_flagged():
    out = subgroup_metrics([0.1, 0.9, 0.5], [0, 0, 1],
                           np.array(["a", "a", "b"]))
    assert out["a"]["auc"] is None
    assert out["b"]["auc"] is None
    assert out["a"]["n"] == 2
