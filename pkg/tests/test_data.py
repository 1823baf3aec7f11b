import datetime as dt
import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SIMPLE_SCHEMA, make_dataset, random_dataset
from surgsel.data import (
    REFERENCE_SCHEMA,
    CovariateSpec,
    Dataset,
    SurgeryRecord,
    TaskKey,
    TaskMode,
    center_by_operation_type,
    eligibility_filter,
    encode_design,
    ingest_csv,
    partition_tasks,
    schema_to_dict,
    temporal_split,
    write_csv,
)
from surgsel.errors import DataError

HEADER = "record_id,surgeon_id,operation_type_id,duration_minutes,date,age,n_anesthesiologists,hypertension\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "d.csv"
    p.write_text(header + body, encoding="utf-8")
    return p


class TestRecords:
    def test_log_duration_table_median(self):
        r = SurgeryRecord("a", "s", "t", 68.1, dt.date(2015, 1, 1))
        assert r.log_duration == pytest.approx(4.221, abs=1e-3)

    def test_log_of_one(self):
        assert SurgeryRecord("a", "s", "t", 1.0, dt.date(2015, 1, 1)).log_duration == 0.0

    def test_nonpositive_duration(self):
        with pytest.raises(DataError):
            SurgeryRecord("a", "s", "t", 0.0, dt.date(2015, 1, 1))

    def test_indicator_validated(self):
        rec = SurgeryRecord("a", "s", "t", 5.0, dt.date(2015, 1, 1), {"age": 1.0, "n_anesthesiologists": 1.0, "hypertension": 2.0})
        with pytest.raises(DataError, match="hypertension"):
            Dataset([rec], SIMPLE_SCHEMA)

    def test_duplicate_ids(self):
        rec = SurgeryRecord("a", "s", "t", 5.0, dt.date(2015, 1, 1), {"age": 1.0, "n_anesthesiologists": 1.0, "hypertension": 0.0})
        with pytest.raises(DataError, match="duplicate"):
            Dataset([rec, rec], SIMPLE_SCHEMA)


class TestIngest:
    def test_three_rows_round_trip(self, tmp_path):
        p = write(
            tmp_path,
            "r1,S1,T1,68.1,2015-03-01,53,1,0\n"
            "r2,S1,T2,120,2016-04-02,71.5,2,1\n"
            "r3,S2,T1,1,2018-01-01,40,0,0\n",
        )
        d = ingest_csv(p, SIMPLE_SCHEMA)
        assert len(d) == 3
        assert d.records[0].covariates["age"] == 53.0
        assert d.records[2].log_duration == 0.0
        assert d.record_ids == ("r1", "r2", "r3")
        out = tmp_path / "out.csv"
        write_csv(d, out)
        again = ingest_csv(out, SIMPLE_SCHEMA)
        for a, b in zip(d.records, again.records):
            assert a == b

    def test_schema_inferred(self, tmp_path):
        p = write(tmp_path, "r1,S1,T1,60,2015-03-01,53.5,1,0\nr2,S1,T1,60,2015-03-01,40,3,1\n")
        kinds = {c.name: c.kind for c in ingest_csv(p).schema}
        assert kinds == {"age": "continuous", "n_anesthesiologists": "count", "hypertension": "indicator"}

    @pytest.mark.parametrize(
        "body, needle",
        [
            ("r1,S1,T1,60,2015-03-01,abc,1,0\n", "row 1.*age"),
            ("r1,S1,T1,60,2015-03-01,inf,1,0\n", "row 1.*age"),
            ("r1,S1,T1,-4,2015-03-01,50,1,0\n", "row 1.*duration_minutes"),
            ("r1,S1,T1,60,2015-13-01,50,1,0\n", "row 1.*date"),
            ("r1,S1,T1,60,2015-03-01,50,1,0\nr1,S1,T1,60,2015-03-01,50,1,0\n", "row 2.*record_id"),
            ("r1,S1,T1,60,2015-03-01,50,1,\n", "row 1.*hypertension"),
        ],
    )
    def test_errors_name_row_and_column(self, tmp_path, body, needle):
        with pytest.raises(DataError, match=needle):
            ingest_csv(write(tmp_path, body), SIMPLE_SCHEMA)

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "r1,S1,T1,60,50,1,0\n", header="record_id,surgeon_id,operation_type_id,duration_minutes,age,n_anesthesiologists,hypertension\n")
        with pytest.raises(DataError, match="date"):
            ingest_csv(p, SIMPLE_SCHEMA)

    def test_quoted_fields(self, tmp_path):
        p = write(tmp_path, '"r,1","Dr ""X""",T1,60,2015-03-01,50,1,0\n')
        d = ingest_csv(p, SIMPLE_SCHEMA)
        assert d.records[0].record_id == "r,1"
        assert d.records[0].surgeon_id == 'Dr "X"'


class TestTemporalSplit:
    def test_partition_preserves_order(self, rng):
        dates = [dt.date(2016, 1, 1) + dt.timedelta(days=int(k)) for k in rng.integers(0, 1000, 50)]
        d = make_dataset(["S"] * 50, ["T"] * 50, rng.normal(4, 1, 50), dates=dates)
        train, test = temporal_split(d, "2017-06-01")
        assert all(r.date < dt.date(2017, 6, 1) for r in train)
        assert all(r.date >= dt.date(2017, 6, 1) for r in test)
        assert sorted(train.record_ids + test.record_ids) == sorted(d.record_ids)
        order = {rid: i for i, rid in enumerate(d.record_ids)}
        for part in (train, test):
            idx = [order[r] for r in part.record_ids]
            assert idx == sorted(idx)

    def test_all_before_cutoff(self):
        d = make_dataset(["S"] * 3, ["T"] * 3, [1.0, 2.0, 3.0])
        train, test = temporal_split(d, dt.date(2018, 1, 1))
        assert len(train) == 3 and len(test) == 0

    def test_empty(self):
        train, test = temporal_split(Dataset([], SIMPLE_SCHEMA), "2018-01-01")
        assert len(train) == 0 and len(test) == 0


class TestEligibility:
    def test_above_both_thresholds(self):
        d = make_dataset(["S"] * 101, ["T"] * 101, np.ones(101))
        assert len(eligibility_filter(d)) == 101

    def test_strict_surgeon_boundary(self):
        d = make_dataset(["A"] * 100 + ["B"] * 101, ["T"] * 201, np.ones(201))
        kept = eligibility_filter(d)
        assert set(kept.surgeon_ids) == {"B"}
        assert len(kept) == 101

    def test_matches_two_pass_count(self, rng):
        n = 3000
        surgeons = [f"S{k}" for k in rng.integers(0, 40, n)]
        types = [f"T{k}" for k in rng.geometric(0.08, n)]
        d = make_dataset(surgeons, types, rng.normal(4, 1, n))
        s_count, t_count = defaultdict(int), defaultdict(int)
        for s, t in zip(surgeons, types):
            s_count[s] += 1
            t_count[t] += 1
        expected = [f"R{i:05d}" for i in range(n) if s_count[surgeons[i]] > 70 and t_count[types[i]] > 15]
        assert list(eligibility_filter(d, 70, 15).record_ids) == expected


class TestPartition:
    def test_single_group_every_mode(self):
        d = make_dataset(["S"] * 20, ["T"] * 20, np.ones(20))
        for mode in TaskMode:
            p = partition_tasks(d, mode)
            assert p.n_tasks == 1
            assert list(p.sizes.values()) == [20]

    def test_group_by_oracle(self, rng):
        d = random_dataset(rng, 500, n_surgeons=6, n_types=8)
        for mode in TaskMode:
            p = partition_tasks(d, mode, min_task_size=10)
            counts = Counter()
            for r in d.records:
                counts[TaskKey.for_record(mode, r)] += 1
            kept = {k: c for k, c in counts.items() if c >= 10}
            assert p.sizes == kept
            assert sum(p.sizes.values()) == sum(kept.values())

    def test_interaction_default_minimum(self):
        d = make_dataset(["S"] * 14 + ["S"] * 15, ["A"] * 14 + ["B"] * 15, np.ones(29))
        p = partition_tasks(d, TaskMode.INTERACTION)
        assert [k.label for k in p.keys] == ["S|B"]

    def test_no_surviving_task(self):
        d = make_dataset(["S"] * 5, ["A"] * 5, np.ones(5))
        with pytest.raises(DataError):
            partition_tasks(d, TaskMode.INTERACTION)

    def test_key_labels_round_trip(self):
        for mode, key in [
            (TaskMode.SURGEON, TaskKey(TaskMode.SURGEON, "S1")),
            (TaskMode.OPTYPE, TaskKey(TaskMode.OPTYPE, None, "T9")),
            (TaskMode.INTERACTION, TaskKey(TaskMode.INTERACTION, "S1", "T9")),
        ]:
            assert TaskKey.from_label(mode, key.label) == key


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 200), mode=st.sampled_from(list(TaskMode)))
def test_partition_disjoint_and_in_bounds(seed, n, mode):
    d = random_dataset(np.random.default_rng(seed), n, n_surgeons=4, n_types=5)
    p = partition_tasks(d, mode, min_task_size=1)
    seen = set()
    for key, idx in p.tasks.items():
        assert all(0 <= i < n for i in idx)
        assert not seen & set(idx.tolist())
        seen |= set(idx.tolist())
        assert all(TaskKey.for_record(mode, d.records[i]) == key for i in idx)


class TestCentering:
    def test_single_type_sums_to_zero(self, rng):
        d = make_dataset(["S"] * 30, ["T"] * 30, rng.normal(4, 1, 30))
        adjusted, _ = center_by_operation_type(d)
        assert abs(sum(adjusted.values())) <= 1e-10

    def test_arithmetic(self):
        d = make_dataset(["S"] * 4, ["A", "A", "B", "B"], [3.9, 4.1, 4.7, 5.3])
        adjusted, means = center_by_operation_type(d)
        assert means == pytest.approx({"A": 4.0, "B": 5.0})
        assert adjusted["R00003"] == pytest.approx(0.3)

    def test_streaming_mean_oracle_and_reconstruction(self, rng):
        d = random_dataset(rng, 400, n_types=7)
        adjusted, means = center_by_operation_type(d)
        running = {}
        for r in d.records:
            m, c = running.get(r.operation_type_id, (0.0, 0))
            c += 1
            running[r.operation_type_id] = (m + (r.log_duration - m) / c, c)
        for t, (m, _) in running.items():
            assert means[t] == pytest.approx(m, abs=1e-12)
        for r in d.records:
            assert adjusted[r.record_id] + means[r.operation_type_id] == pytest.approx(r.log_duration, abs=1e-12)


class TestEncoding:
    def test_dummy_count_reference_coded(self):
        n = 32 * 123
        surgeons = [f"S{i % 32:02d}" for i in range(n)]
        types = [f"T{i % 123:03d}" for i in range(n)]
        d = make_dataset(surgeons, types, np.ones(n))
        X = encode_design(d, (), ["surgeon_id", "operation_type_id"], include_intercept=False)
        assert X.shape[1] == 31 + 122 == 153

    def test_two_levels_one_dummy(self):
        d = make_dataset(["S"] * 3, ["A", "A", "B"], [1.0, 2.0, 3.0])
        X = encode_design(d, (), ["operation_type_id"], include_intercept=False)
        assert X.column_names == ("operation_type_id=B",)
        np.testing.assert_array_equal(X.values[:, 0], [0, 0, 1])

    def test_column_order(self):
        d = make_dataset(["S"] * 4, ["A", "B", "B", "C"], np.ones(4), [[50, 1, 0], [60, 2, 1], [40, 0, 0], [30, 1, 1]])
        X = encode_design(d, ["hypertension", "age"], ["operation_type_id"])
        assert X.column_names == ("intercept", "age", "hypertension", "operation_type_id=A", "operation_type_id=C")

    def test_rare_levels_fold_into_reference(self):
        d = make_dataset(["S"] * 25, ["A"] * 12 + ["B"] * 11 + ["C"] * 2, np.ones(25))
        X = encode_design(d, (), [("operation_type_id", 11)], include_intercept=False)
        assert X.column_names == ("operation_type_id=B",)

    def test_at_most_one_hot_per_categorical(self, rng):
        d = random_dataset(rng, 300, n_surgeons=5, n_types=9)
        X = encode_design(d, (), ["surgeon_id", "operation_type_id"], include_intercept=False)
        for field in ("surgeon_id", "operation_type_id"):
            cols = [i for i, c in enumerate(X.column_names) if c.startswith(field + "=")]
            block = X.values[:, cols]
            assert set(np.unique(block)) <= {0.0, 1.0}
            assert block.sum(axis=1).max() <= 1

    def test_bit_identical(self, rng):
        d = random_dataset(rng, 100)
        a = encode_design(d, ["age"], ["surgeon_id", "operation_type_id"])
        b = encode_design(d, ["age"], ["surgeon_id", "operation_type_id"])
        assert a.values.tobytes() == b.values.tobytes()

    def test_errors(self, rng):
        d = random_dataset(rng, 10)
        with pytest.raises(DataError):
            encode_design(d, ["nope"])
        with pytest.raises(DataError):
            encode_design(d.subset([]), ["age"])


def test_reference_schema_round_trip():
    from surgsel.data import schema_from_dict

    assert schema_from_dict(schema_to_dict(REFERENCE_SCHEMA)) == REFERENCE_SCHEMA
    assert [c.name for c in REFERENCE_SCHEMA] == [
        "age",
        "n_anesthesiologists",
        "hypertension",
        "ot_compl_bir",
        "diabetes_mellitus",
        "surgeon_experience",
    ]


def test_covariate_spec_kind_validated():
    with pytest.raises(DataError):
        CovariateSpec("x", "weird")
