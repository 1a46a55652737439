from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg.dataset import GeneratorConfig, synth_dataset
from weakseg.errors import ConfigurationError
from weakseg.folds import FoldPlan, proportion_gap, stratified_group_kfold, validation_split
from weakseg.losses import ClassId


def fake_case(case_id, classes):
    return SimpleNamespace(case_id=case_id, annotated_slices=[(3 * i, ClassId(c)) for i, c in enumerate(classes)])


@pytest.fixture(scope="module")
def default_cases():
    return synth_dataset(GeneratorConfig())


def test_ten_single_slice_cases():
    cases = [fake_case(f"c{i}", [i % 5]) for i in range(10)]
    plan = stratified_group_kfold(cases, k=5, seed=0)
    assert sorted(plan.assignment) == sorted(c.case_id for c in cases)
    for f in range(5):
        fs = plan.fold_slices(f)
        assert len(fs) == 2 and len({k for _, _, k in fs}) == 2


def test_more_folds_than_cases_is_an_error():
    with pytest.raises(ConfigurationError):
        stratified_group_kfold([fake_case("a", [0]), fake_case("b", [1])], k=3)


def test_default_dataset_balance(default_cases):
    plan = stratified_group_kfold(default_cases, k=5, seed=0)
    counts = np.array([plan.class_counts(f) for f in range(5)])
    share = counts.sum(axis=0) / counts.sum()
    rel = np.abs(counts / counts.sum(axis=1, keepdims=True) / share - 1)
    assert rel.max() <= 0.25
    assert proportion_gap(counts)[0] == pytest.approx(rel.max())


def test_planner_is_deterministic(default_cases):
    a = stratified_group_kfold(default_cases, 5, seed=4)
    b = stratified_group_kfold(default_cases, 5, seed=4)
    assert a.assignment == b.assignment


@settings(max_examples=30, deadline=None)
@given(
    classes=st.lists(st.lists(st.integers(0, 4), min_size=0, max_size=3), min_size=3, max_size=14),
    k=st.integers(1, 3),
    seed=st.integers(0, 1000),
)
def test_plan_covers_every_case_once_without_leakage(classes, k, seed):
    cases = [fake_case(f"case{i:02d}", cl) for i, cl in enumerate(classes)]
    plan = stratified_group_kfold(cases, k=k, seed=seed)
    tests = [set(plan.test_cases(f)) for f in range(k)]
    assert set().union(*tests) == {c.case_id for c in cases}
    assert sum(len(t) for t in tests) == len(cases)
    for f in range(k):
        assert tests[f].isdisjoint(plan.train_cases(f))
        assert all(len(t) >= 1 for t in tests)
    assert sum(len(plan.fold_slices(f)) for f in range(k)) == sum(len(cl) for cl in classes)


def test_fold_plan_json_round_trip(tmp_path, default_cases):
    plan = stratified_group_kfold(default_cases, 5, seed=1)
    plan.save(tmp_path / "folds.json")
    back = FoldPlan.load(tmp_path / "folds.json")
    assert back.k == 5 and back.seed == 1 and back.assignment == plan.assignment
    assert all(back.fold_slices(f) == plan.fold_slices(f) for f in range(5))


def _slices(classes):
    return [SimpleNamespace(chosen_class=ClassId(c), idx=i) for i, c in enumerate(classes)]


def test_validation_split_eighty_twenty():
    items = _slices([i % 5 for i in range(100)])
    train, val = validation_split(items, 0.2, seed=0)
    assert (len(train), len(val)) == (80, 20)
    assert np.bincount([int(s.chosen_class) for s in val], minlength=5).tolist() == [4] * 5


def test_validation_split_halves_two_slices():
    train, val = validation_split(_slices([0, 3]), 0.5, seed=0)
    assert len(train) == len(val) == 1
    assert {train[0].chosen_class, val[0].chosen_class} == {ClassId.CON, ClassId.EMP}


def test_validation_split_deterministic_and_partitioning():
    items = _slices(np.random.default_rng(0).integers(0, 5, 37).tolist())
    a = validation_split(items, 0.2, seed=3)
    b = validation_split(items, 0.2, seed=3)
    assert [s.idx for s in a[0]] == [s.idx for s in b[0]] and [s.idx for s in a[1]] == [s.idx for s in b[1]]
    assert sorted(s.idx for s in a[0] + a[1]) == list(range(37))
    assert len(a[1]) == round(0.2 * 37)


def test_validation_split_errors():
    with pytest.raises(ConfigurationError):
        validation_split([], 0.2)
    with pytest.raises(ConfigurationError):
        validation_split(_slices([0, 1]), 1.0)
