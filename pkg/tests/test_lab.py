import io
import json
from collections import Counter

import pytest

from plated.lab import (
    EarlyStopping, RunRecord, SearchSpace, default_spaces, read_records, run_search,
    sample_config, select_best, summarize_by_axis, write_summary_csv,
)


def test_early_stopping_counts_patience():
    es = EarlyStopping(patience=3, mode="max")
    values = [0.5, 0.4, 0.3, 0.2, 0.1]
    stops = [es.update(i, v, state={"epoch": i}) for i, v in enumerate(values)]
    assert stops == [False, False, False, True, True]
    assert es.best_epoch == 0 and es.best_state == {"epoch": 0}


def test_early_stopping_min_mode_resets_on_improvement():
    es = EarlyStopping(patience=2, mode="min")
    assert [es.update(i, v) for i, v in enumerate([5, 4, 4.5, 3, 3, 3])] == \
        [False, False, False, False, False, True]
    assert es.best_epoch == 3


def test_sample_config_examples():
    single = SearchSpace({"a": [1], "b": ["x"]}, run_count=5, seed=3)
    assert all(sample_config(single, i) == {"a": 1, "b": "x"} for i in range(5))
    space = SearchSpace({"a": [1, 2, 3], "b": [0.1, 0.2]}, run_count=10, seed=9)
    assert sample_config(space, 4) == sample_config(space, 4)
    with pytest.raises(IndexError):
        sample_config(space, 10)


def test_sample_config_uniform():
    space = SearchSpace({"a": ["x", "y", "z"]}, run_count=10_000, seed=1)
    freq = Counter(sample_config(space, i)["a"] for i in range(10_000))
    for v in "xyz":
        assert abs(freq[v] / 10_000 - 1 / 3) <= 0.02


def test_default_spaces():
    cnn, transfer, instr = default_spaces()
    assert cnn.cardinality() == 108
    assert transfer.cardinality() == 54
    assert cnn.contains({"batch_size": 128, "blocks": 4, "learning_rate": 1e-3,
                         "augmentation": False, "regularization": False})
    assert transfer.contains({"batch_size": 512, "dropout": 0.0, "learning_rate": 1e-3,
                              "augmentation": False})
    assert 1e-2 in instr.axes["learning_rate"] and 64 in instr.axes["batch_size"]
    assert set(instr.axes["units"]) == {8, 16, 32, 64}


def test_space_validation():
    with pytest.raises(ValueError):
        SearchSpace({"a": []})
    with pytest.raises(ValueError):
        SearchSpace({"a": [1]}, run_count=0)


def _stub(config, run_id):
    v = config["a"] / 10
    return RunRecord(epochs=[{"epoch": 0, "train_loss": 1.0, "val_loss": 1.0,
                              "train_metric": v, "val_metric": v}], best_epoch=0, best_value=v)


def test_run_search_writes_one_line_per_run(tmp_path):
    log = tmp_path / "runs.jsonl"
    space = SearchSpace({"a": [1, 2, 3]}, run_count=2, seed=0)
    records = run_search(space, _stub, log)
    lines = log.read_text().splitlines()
    assert len(lines) == 2 and len(records) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"run_id", "status", "config", "epochs", "best_epoch", "best_value",
                        "checkpoint", "seconds"}


def test_run_search_resumes_only_missing(tmp_path):
    log = tmp_path / "runs.jsonl"
    space = SearchSpace({"a": [1, 2, 3, 4]}, run_count=3, seed=5)
    run_search(space, _stub, log)
    original = log.read_bytes()
    lines = log.read_text().splitlines()
    log.write_text(lines[0] + "\n" + lines[2] + "\n")
    calls = []

    def counting(config, run_id):
        calls.append(run_id)
        return _stub(config, run_id)

    run_search(space, counting, log)
    assert calls == [1]
    assert log.read_bytes() == original


def test_run_search_records_failures(tmp_path):
    log = tmp_path / "runs.jsonl"

    def boom(config, run_id):
        if run_id == 1:
            raise RuntimeError("diverged")
        return _stub(config, run_id)

    records = run_search(SearchSpace({"a": [1]}, run_count=3), boom, log)
    assert [r.status for r in records] == ["ok", "failed", "ok"]
    assert "diverged" in records[1].message


def test_run_search_parallel_matches_serial(tmp_path):
    space = SearchSpace({"a": [1, 2, 3, 4, 5]}, run_count=8, seed=2)
    run_search(space, _stub, tmp_path / "a.jsonl")
    run_search(space, _stub, tmp_path / "b.jsonl", workers=4)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_records_round_trip(tmp_path):
    log = tmp_path / "runs.jsonl"
    recs = run_search(SearchSpace({"a": [1, 2]}, run_count=3, seed=1), _stub, log)
    assert read_records(log) == recs


def _rec(run_id, best, status="ok", **config):
    return RunRecord(run_id=run_id, status=status, config=config, best_value=best)


def test_select_best_examples():
    recs = [_rec(0, 0.05), _rec(1, 0.106), _rec(2, 0.09)]
    assert select_best(recs).best_value == 0.106
    assert select_best(recs[::-1]).run_id == 1
    assert select_best([recs[0]]) is recs[0]
    assert select_best([_rec(3, 0.2), _rec(1, 0.2)]).run_id == 1
    assert select_best(recs, mode="min").best_value == 0.05
    with pytest.raises(ValueError):
        select_best([_rec(0, None, status="failed")])


def test_summarize_examples():
    recs = [_rec(0, 0.1, k="a"), _rec(1, 0.2, k="a"), _rec(2, 0.3, k="b"), _rec(3, 0.3, k="b"),
            _rec(4, None, status="failed", k="c")]
    s = summarize_by_axis(recs, "k")
    assert s == {"a": (pytest.approx(0.15), 2), "b": (0.3, 2)}
    with pytest.raises(KeyError):
        summarize_by_axis(recs, "nope")


def test_summarize_matches_hand_aggregation():
    import random
    rnd = random.Random(0)
    recs = [_rec(i, round(rnd.random(), 3), batch=rnd.choice([32, 64, 128]),
                 lr=rnd.choice([1e-3, 1e-4])) for i in range(30)]
    for axis in ("batch", "lr"):
        sums, counts = {}, {}
        for r in recs:
            key = r.config[axis]
            sums[key] = sums.get(key, 0) + r.best_value
            counts[key] = counts.get(key, 0) + 1
        got = summarize_by_axis(recs, axis)
        assert set(got) == set(sums)
        for key in sums:
            assert got[key][0] == pytest.approx(sums[key] / counts[key], abs=1e-12)
            assert got[key][1] == counts[key]
    buf = io.StringIO()
    write_summary_csv(summarize_by_axis(recs, "batch"), "batch", buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "axis,value,mean_best,count"
    assert len(lines) == 4 and all(ln.startswith("batch,") for ln in lines[1:])
