import itertools
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmes.data import (
    Dataset, QMatrix, SyntheticConfig, Triplet, build_profiles, filter_min_logs, generate_synthetic,
    load_dataset, load_interactions, split_per_student, subsample_per_student, write_dataset,
)
from cmes.errors import DataFormatError, ValidationError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- loading

def test_load_two_rows(tmp_path):
    p = write(tmp_path, "i.csv", "student_id,exercise_id,score\nA,X,1\nA,Y,0\n")
    triplets, ids = load_interactions(p)
    assert triplets == [Triplet(0, 0, 1), Triplet(0, 1, 0)]
    assert ids.students == ("A",) and ids.exercises == ("X", "Y")


def test_load_empty_file(tmp_path):
    triplets, ids = load_interactions(write(tmp_path, "i.csv", ""))
    assert triplets == [] and len(ids.students) == 0 and len(ids.exercises) == 0


def test_response_out_of_range_names_row(tmp_path):
    p = write(tmp_path, "i.csv", "student_id,exercise_id,score\nA,X,1\nA,Y,2\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_interactions(p)


def test_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, "i.csv", "student_id,exercise_id,score\nA,X,1\nA,Y\n")
    with pytest.raises(DataFormatError) as err:
        load_interactions(p)
    assert err.value.line == 3


def test_missing_header_column(tmp_path):
    p = write(tmp_path, "i.csv", "student,exercise_id,score\nA,X,1\n")
    with pytest.raises(DataFormatError, match="header"):
        load_interactions(p)


def test_duplicates_keep_first(tmp_path, caplog):
    p = write(tmp_path, "i.csv", "student_id,exercise_id,score\n1,5,1\n1,5,0\n")
    triplets, _ = load_interactions(p)
    assert triplets == [Triplet(0, 0, 1)]
    assert "duplicate" in caplog.text


def test_numeric_ids_sorted_numerically(tmp_path):
    p = write(tmp_path, "i.csv", "student_id,exercise_id,score\n10,2,1\n9,10,0\n")
    triplets, ids = load_interactions(p)
    assert ids.students == ("9", "10") and ids.exercises == ("2", "10")
    assert triplets == [Triplet(1, 0, 1), Triplet(0, 1, 0)]


def test_q_matrix_requires_concept_per_exercise(tmp_path):
    i = write(tmp_path, "i.csv", "student_id,exercise_id,score\n0,0,1\n0,1,0\n")
    q = write(tmp_path, "q.csv", "exercise_id,concept_id\n0,0\n")
    with pytest.raises(ValidationError, match="no concept"):
        load_dataset(i, q)


def test_round_trip(tmp_path):
    ds, _ = generate_synthetic(SyntheticConfig(30, 20, 5, logs_per_student=8), seed=3)
    write_dataset(ds, tmp_path)
    again, _ = load_dataset(tmp_path / "interactions.csv", tmp_path / "q_matrix.csv")
    assert sorted(again.interactions) == sorted(ds.interactions)
    assert again.q_matrix.pairs == ds.q_matrix.pairs


def test_dataset_rejects_duplicates():
    q = QMatrix.from_dense(np.eye(2))
    with pytest.raises(ValidationError, match="duplicate"):
        Dataset(1, 2, 2, (Triplet(0, 0, 1), Triplet(0, 0, 0)), q)


# ---------------------------------------------------------------- filtering

def logs(student, count, start=0):
    return [Triplet(student, start + k, k % 2) for k in range(count)]


def test_filter_removes_14_log_student():
    data = logs(0, 14) + logs(1, 15)
    kept = filter_min_logs(data, 15)
    assert {t.student for t in kept} == {0}
    assert len(kept) == 15


def test_filter_zero_is_identity():
    data = logs(0, 3) + logs(1, 1)
    assert filter_min_logs(data, 0) == data


def test_filter_recompacts_ids():
    # oracle: enumerate per-student counts by hand
    data = logs(0, 10) + logs(1, 20)
    kept = filter_min_logs(data, 15)
    assert [t.student for t in kept] == [0] * 20
    assert [t.exercise for t in kept] == list(range(20))


# ---------------------------------------------------------------- splits

@pytest.mark.parametrize("t, expected", [(10, (7, 1, 2)), (15, (11, 1, 3)), (67, (48, 6, 13))])
def test_split_sizes(t, expected):
    train, val, test = split_per_student(logs(0, t), seed=1)
    assert (len(train), len(val), len(test)) == expected


def test_split_deterministic():
    data = logs(0, 30) + logs(1, 17)
    assert split_per_student(data, seed=5) == split_per_student(data, seed=5)
    assert split_per_student(data, seed=5) != split_per_student(data, seed=6)


def test_split_skips_short_students(caplog):
    train, val, test = split_per_student(logs(0, 2) + logs(1, 10), seed=0)
    assert {t.student for t in train + val + test} == {1}
    assert "skipped" in caplog.text


def test_split_bad_ratios():
    with pytest.raises(ValidationError):
        split_per_student(logs(0, 10), ratios=(0.5, 0.2, 0.2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 40), min_size=1, max_size=8), st.integers(0, 10_000))
def test_split_is_partition(counts, seed):
    data = [t for s, c in enumerate(counts) for t in logs(s, c)]
    train, val, test = split_per_student(data, seed=seed)
    parts = [set(train), set(val), set(test)]
    assert sum(map(len, parts)) == len(data)
    assert set().union(*parts) == set(data)
    for a, b in itertools.combinations(parts, 2):
        assert not a & b


def test_subsample_keeps_fraction():
    data = logs(0, 10) + logs(1, 3)
    out = subsample_per_student(data, 0.5, seed=0)
    assert sum(t.student == 0 for t in out) == 5
    assert sum(t.student == 1 for t in out) == 1
    assert set(out) <= set(data)


# ---------------------------------------------------------------- profiles

def test_profile_union():
    q = QMatrix.from_dense([[1, 1], [0, 1]])
    p = build_profiles([Triplet(0, 0, 1), Triplet(0, 1, 0)], q)[0]
    assert p.concepts == {0, 1} and p.t == 2


def test_profile_absent_without_logs():
    q = QMatrix.from_dense([[1]])
    assert 3 not in build_profiles([Triplet(0, 0, 1)], q)


def test_profile_concepts_match_bruteforce():
    rng = np.random.default_rng(0)
    dense = (rng.random((20, 6)) < 0.3).astype(int)
    dense[dense.sum(1) == 0, 0] = 1
    q = QMatrix.from_dense(dense)
    data = [Triplet(s, int(e), 1) for s in range(5) for e in rng.choice(20, 7, replace=False)]
    profiles = build_profiles(data, q)
    for s, p in profiles.items():
        expected = set()
        for t in data:
            if t.student == s:
                expected |= {c for c in range(6) if dense[t.exercise][c] == 1}
        assert p.concepts == expected


def test_profiles_ignore_val_test():
    ds, _ = generate_synthetic(SyntheticConfig(20, 30, 4, logs_per_student=10), seed=0)
    train, val, test = split_per_student(ds.interactions, seed=0)
    a = build_profiles(train, ds.q_matrix)
    b = build_profiles(train, ds.q_matrix)  # val/test permuted freely; profiles only see train
    assert a == b
    assert all(t.exercise not in a[t.student].exercises for t in val + test)


# ---------------------------------------------------------------- synthetic

def test_synthetic_deterministic():
    cfg = SyntheticConfig(50, 40, 6, logs_per_student=10)
    a, ga = generate_synthetic(cfg, seed=7)
    b, gb = generate_synthetic(cfg, seed=7)
    assert a == b
    assert np.array_equal(ga.mastery, gb.mastery) and np.array_equal(ga.difficulty, gb.difficulty)


def test_synthetic_deterministic_across_processes(tmp_path):
    code = ("import hashlib,sys;from cmes.data import *;"
            "d,g=generate_synthetic(SyntheticConfig(40,30,5,logs_per_student=9),seed=11);"
            "print(hashlib.sha256(repr(d.interactions).encode()+g.mastery.tobytes()).hexdigest())")
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1


def test_synthetic_shapes_and_ranges():
    cfg = SyntheticConfig(30, 25, 5, logs_per_student=6)
    ds, gt = generate_synthetic(cfg, seed=1)
    assert gt.mastery.shape == (30, 5) and gt.difficulty.shape == (25,)
    assert (gt.discrimination > 0).all()
    assert ((gt.mastery >= 0) & (gt.mastery <= 1)).all()
    counts = ds.q_matrix.dense.sum(1)
    assert counts.min() >= 1 and counts.max() <= 3
    assert len(ds.interactions) == 30 * 6


def test_synthetic_forced_regime_all_above_half():
    from cmes.data import response_probabilities
    cfg = SyntheticConfig(10, 12, 4, logs_per_student=5, mastery=1.0, difficulty=0.0)
    ds, gt = generate_synthetic(cfg, seed=0)
    assert (response_probabilities(gt, ds.q_matrix, cfg.temperature) > 0.5).all()


@pytest.mark.parametrize("override", [dict(num_exercises=0), dict(logs_per_student=500),
                                      dict(concepts_per_exercise=(0, 2)), dict(temperature=0)])
def test_synthetic_validation(override):
    with pytest.raises(ValidationError):
        generate_synthetic(SyntheticConfig(**{**dict(num_students=5, num_exercises=10, num_concepts=3,
                                                     logs_per_student=4), **override}))
