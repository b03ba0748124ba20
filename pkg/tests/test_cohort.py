import json

import numpy as np
import pytest

from ehrfusion.cohort import (
    CohortConfig,
    DAYS_PER_MONTH,
    FoldPlan,
    PatientRecord,
    apply_exclusion_window,
    code_vocabulary,
    exclude_by_measurement_count,
    generate_synthetic_cohort,
    lab_normalization_stats,
    read_cohort,
    split_folds,
    truncate_codes,
    write_cohort,
    write_embedding_file,
)
from ehrfusion.codes import load_embeddings


def small_cfg(**kw):
    defaults = dict(seed=13, n_patients=120, positive_rate=0.2,
                    max_history_days=4 * 365)
    defaults.update(kw)
    return CohortConfig(**defaults)


def test_generation_deterministic():
    a = generate_synthetic_cohort(small_cfg())
    b = generate_synthetic_cohort(small_cfg())
    assert len(a) == len(b) == 120
    for pa, pb in zip(a, b):
        assert pa.to_json_obj() == pb.to_json_obj()


def test_cohort_size_and_positive_count():
    cfg = CohortConfig(seed=1, n_patients=4694, positive_rate=0.114,
                       max_history_days=600)
    cohort = generate_synthetic_cohort(cfg)
    assert len(cohort) == 4694
    assert sum(p.label for p in cohort) == round(4694 * 0.114)


def test_infeasible_configs_rejected():
    with pytest.raises(ValueError):
        CohortConfig(seed=1, n_patients=100, positive_rate=0.0)
    with pytest.raises(ValueError):
        CohortConfig(seed=1, n_patients=100, positive_rate=1.5)
    with pytest.raises(ValueError):
        CohortConfig(seed=1, n_patients=100, lab_effect=2.0)


def test_controls_matched_on_sex_distribution():
    cohort = generate_synthetic_cohort(small_cfg(n_patients=600))
    cases = [p for p in cohort if p.label == 1]
    controls = [p for p in cohort if p.label == 0]
    f_cases = np.mean([p.sex == "F" for p in cases])
    f_controls = np.mean([p.sex == "F" for p in controls])
    assert abs(f_cases - f_controls) < 0.12
    age_gap = abs(np.mean([p.age_at_anchor for p in cases]) -
                  np.mean([p.age_at_anchor for p in controls]))
    assert age_gap < 3.0


def one_patient(events_days):
    return PatientRecord(id="x", sex="F", age_at_anchor=60.0, anchor_date="2019-01-01",
                         code_events=[(d, "K86") for d in events_days],
                         lab_events=[(d, "Glucose", 100.0) for d in events_days],
                         label=0)


def test_exclusion_window_boundaries():
    cohort = [one_patient([100, 200])]
    out = apply_exclusion_window(cohort, 6)
    assert [t for t, _ in out[0].code_events] == [200]   # 100 < 182.6 removed
    assert [t for t, _, _ in out[0].lab_events] == [200]
    assert 100 < 6 * DAYS_PER_MONTH < 200


def test_exclusion_window_monotone():
    cohort = generate_synthetic_cohort(small_cfg())
    for months_a, months_b in [(6, 9), (9, 12), (6, 12)]:
        wa = apply_exclusion_window(cohort, months_a)
        wb = apply_exclusion_window(cohort, months_b)
        for pa, pb in zip(wa, wb):
            assert len(pb.code_events) <= len(pa.code_events)
            assert len(pb.lab_events) <= len(pa.lab_events)


def test_icd_truncation():
    p = PatientRecord(id="x", sex="F", age_at_anchor=60.0, anchor_date="2019-01-01",
                      code_events=[(300, "C25.0"), (400, "K86")], lab_events=[], label=1)
    out = truncate_codes([p])[0]
    assert [c for _, c in out.code_events] == ["C25", "K86"]


def test_code_frequency_filter():
    patients = []
    for i in range(100):
        codes = [(300, "E11")]
        if i < 4:  # 4% carrier rate: below threshold
            codes.append((400, "Q99"))
        patients.append(PatientRecord(id=f"p{i}", sex="F", age_at_anchor=60.0,
                                      anchor_date="2019-01-01", code_events=codes,
                                      lab_events=[(300, "Glucose", 100.0)], label=i % 2))
    vocab = code_vocabulary(patients, {p.id for p in patients})
    assert "E11" in vocab and "Q99" not in vocab


def test_measurement_count_policies():
    rich = one_patient([200, 300, 400])
    single = one_patient([250])
    single.id = "y"
    mixed = PatientRecord(id="z", sex="M", age_at_anchor=70.0, anchor_date="2019-01-01",
                          code_events=[],
                          lab_events=[(200, "Glucose", 99.0), (300, "Glucose", 98.0),
                                      (250, "ALT", 30.0)],
                          label=0)
    cohort = [rich, single, mixed]
    assert {p.id for p in exclude_by_measurement_count(cohort, "all")} == {"x", "z"}
    assert {p.id for p in exclude_by_measurement_count(cohort, "any")} == {"x"}
    with pytest.raises(ValueError):
        exclude_by_measurement_count(cohort, "some")


def test_normalization_train_only_and_standard():
    cohort = generate_synthetic_cohort(small_cfg())
    train_ids = {p.id for p in cohort[:80]}
    stats = lab_normalization_stats(cohort, train_ids)
    vals = [(v - stats[lab][0]) / stats[lab][1]
            for p in cohort if p.id in train_ids
            for _, lab, v in p.lab_events if lab == "Glucose"]
    assert abs(np.mean(vals)) < 1e-9
    assert abs(np.std(vals) - 1.0) < 1e-9


def test_normalization_ignores_test_partition():
    cohort = generate_synthetic_cohort(small_cfg())
    train_ids = {p.id for p in cohort[:80]}
    stats_before = lab_normalization_stats(cohort, train_ids)
    vocab_before = code_vocabulary(cohort, train_ids)
    for p in cohort[80:]:  # perturb held-out patients arbitrarily
        p.lab_events = [(t, lab, v * 100 + 7) for t, lab, v in p.lab_events]
        p.code_events = [(t, "Z99") for t, _ in p.code_events]
    assert lab_normalization_stats(cohort, train_ids) == stats_before
    assert code_vocabulary(cohort, train_ids) == vocab_before


def test_split_folds_stratified_partition():
    cfg = small_cfg(n_patients=100, positive_rate=0.2)
    cohort = generate_synthetic_cohort(cfg)
    plan = split_folds(cohort, seed=5)
    all_test = []
    for fold in plan.folds:
        assert len(fold["test"]) == 20
        test_pos = sum(1 for p in cohort if p.id in set(fold["test"]) and p.label == 1)
        assert test_pos == 4
        assert len(fold["train"]) == 64
        assert len(fold["val"]) == 16
        assert not (set(fold["train"]) & set(fold["val"]))
        assert not (set(fold["train"]) & set(fold["test"]))
        all_test.extend(fold["test"])
    assert sorted(all_test) == sorted(p.id for p in cohort)


def test_split_folds_deterministic_and_stratified_within_1pct():
    cohort = generate_synthetic_cohort(small_cfg(n_patients=500, positive_rate=0.114))
    p1 = split_folds(cohort, seed=9)
    p2 = split_folds(cohort, seed=9)
    assert p1.to_dict() == p2.to_dict()
    rate = np.mean([p.label for p in cohort])
    by_id = {p.id: p.label for p in cohort}
    for fold in p1.folds:
        for part in ("train", "val", "test"):
            part_rate = np.mean([by_id[pid] for pid in fold[part]])
            assert abs(part_rate - rate) < 0.01 + 1.0 / len(fold[part])


def test_split_rejects_tiny_cohort():
    cohort = generate_synthetic_cohort(small_cfg())[:3]
    with pytest.raises(ValueError):
        split_folds(cohort, seed=1)


def test_cohort_file_round_trip(tmp_path):
    cohort = generate_synthetic_cohort(small_cfg(n_patients=25))
    path = tmp_path / "cohort.jsonl"
    write_cohort(path, cohort, {"config_hash": "abc", "seed": 13})
    again, header = read_cohort(path)
    assert header["config_hash"] == "abc"
    assert header["schema_version"] == 1
    assert [p.to_json_obj() for p in again] == [p.to_json_obj() for p in cohort]
    # times serialized as non-negative integers
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        obj = json.loads(fh.readline())
    assert all(isinstance(t, int) and t >= 0 for t, _ in obj["code_events"])


def test_embedding_file_round_trip(tmp_path):
    path = tmp_path / "emb.tsv"
    write_embedding_file(path, ["K86", "E11", "K85"], dim=50, seed=3)
    table = load_embeddings(path, expected_dim=50)
    assert table.vocab == ["E11", "K85", "K86"]
    assert table.vectors.shape == (3, 50)


def test_interaction_signal_marginals_matched():
    # The interaction code and drift are class-independent marginally.
    cfg = small_cfg(n_patients=3000, positive_rate=0.3, lab_effect=0.0,
                    code_effect=0.0, interaction_effect=1.0)
    cohort = generate_synthetic_cohort(cfg)
    has_code = {p.id: any(c.startswith("E88") for _, c in p.code_events) for p in cohort}
    cases = [p for p in cohort if p.label == 1]
    controls = [p for p in cohort if p.label == 0]
    rate_case = np.mean([has_code[p.id] for p in cases])
    rate_ctrl = np.mean([has_code[p.id] for p in controls])
    assert abs(rate_case - 0.5) < 0.06
    assert abs(rate_ctrl - 0.5) < 0.06
