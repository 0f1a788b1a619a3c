import json
import math

import pytest

from pftlab.data import DOWNSTREAM_EMOTIONS, save_corpus
from pftlab.experiments import (STORE_FIELDS, GridPlan, ResultsStore, TrialRecord, TrialSettings,
                                enumerate_powerset, plan_grid, run_grid)
from pftlab.kernel import save_checkpoint
from pftlab.training import PrefinetuneSpec, prefinetune

FOUR = ["msp_improv", "msp_podcast", "mandarin_as", "iemocap"]


def test_powerset_four():
    cfgs = enumerate_powerset(FOUR)
    assert len(cfgs) == 16 == 1 + sum(math.comb(4, r) for r in range(1, 5))
    assert [c.config_id for c in cfgs] == list(range(1, 17))
    assert sum(1 for c in cfgs if not c.corpora) == 1 and cfgs[0].corpora == ()
    assert len({c.corpora for c in cfgs}) == 16
    sizes = [c.n_corpora for c in cfgs]
    assert sizes == sorted(sizes)
    assert cfgs[-1].corpora == tuple(sorted(FOUR))
    assert enumerate_powerset(list(reversed(FOUR))) == cfgs


@pytest.mark.parametrize("m,count", [(1, 2), (3, 8), (5, 32)])
def test_powerset_sizes(m, count):
    assert len(enumerate_powerset([f"c{i}" for i in range(m)])) == count


def test_powerset_duplicates():
    with pytest.raises(ValueError):
        enumerate_powerset(["a", "a"])


def test_plan_paper_defaults():
    plan = plan_grid(enumerate_powerset(FOUR), [f"s{i}" for i in range(20)], DOWNSTREAM_EMOTIONS)
    assert len(plan) == 33_600
    assert len({t.key for t in plan.trials}) == 33_600


def test_plan_small_products():
    assert len(plan_grid([1], ["s"], ["Happy"], [2], 1)) == 1
    assert len(plan_grid(range(1, 17), ["a", "b", "c", "d"], DOWNSTREAM_EMOTIONS, [2, 8, 32], 2)) == 1920


def test_plan_hash_deterministic():
    a = plan_grid([1, 2], ["a"], ["Happy"], [2, 4], 2, global_seed=3)
    b = plan_grid([1, 2], ["a"], ["Happy"], [2, 4], 2, global_seed=3)
    c = plan_grid([1, 2], ["a"], ["Happy"], [2, 4], 2, global_seed=4)
    assert a.plan_hash == b.plan_hash != c.plan_hash


def test_plan_errors():
    with pytest.raises(ValueError, match="speakers"):
        plan_grid([1], [], ["Happy"])
    with pytest.raises(ValueError, match="trials"):
        plan_grid([1], ["a"], ["Happy"], [2], 0)


def test_plan_file_round_trip(tmp_path):
    plan = plan_grid([1, 2], ["a", "b"], ["Happy"], [2], 1, global_seed=7)
    plan.save(tmp_path / "plan.jsonl")
    back = GridPlan.load(tmp_path / "plan.jsonl")
    assert back.trials == plan.trials and back.plan_hash == plan.plan_hash


# -------------------------------------------------------------- store


def _rec(cfg=1, spk="a", f1=0.5, status="ok", trial=0):
    return TrialRecord(cfg, spk, "Happy", 2, trial, 123, f1 if status == "ok" else None,
                       [f1, f1] if status == "ok" else None, 0.4 if status == "ok" else None, status, 3, 10)


def test_store_fields_and_integrity_marker(tmp_path):
    store = ResultsStore(tmp_path / "s.jsonl", plan_hash="abc")
    store.append(_rec())
    lines = (tmp_path / "s.jsonl").read_text().splitlines()
    assert len(lines) == 2
    body, crc = lines[1].rsplit("\t", 1)
    assert list(json.loads(body)) == sorted(STORE_FIELDS)
    assert len(crc) == 8


def test_store_reload_and_torn_line(tmp_path):
    path = tmp_path / "s.jsonl"
    store = ResultsStore(path, plan_hash="abc")
    store.append(_rec(spk="a"))
    store.append(_rec(spk="b"))
    with open(path, "a") as f:
        f.write('{"config_id": 1, "speak')  # crash mid-write
    back = ResultsStore(path, plan_hash="abc")
    assert back.discarded == 1
    assert {r.speaker for r in back.ok_records()} == {"a", "b"}
    back.append(_rec(spk="c"))
    again = ResultsStore(path)
    assert again.discarded == 0 and len(again.records) == 3


def test_store_rejects_corrupted_crc(tmp_path):
    path = tmp_path / "s.jsonl"
    ResultsStore(path, plan_hash="abc").append(_rec(f1=0.5))
    text = path.read_text().replace('"macro_f1":0.5', '"macro_f1":0.9')
    path.write_text(text)
    assert ResultsStore(path).ok_records() == []


def test_store_uniqueness_and_plan_hash(tmp_path):
    path = tmp_path / "s.jsonl"
    store = ResultsStore(path, plan_hash="abc")
    store.append(_rec(status="failed"))
    store.append(_rec())
    with pytest.raises(ValueError, match="duplicate"):
        store.append(_rec())
    assert len(store.records) == 1 and not store.failed
    with pytest.raises(ValueError, match="plan"):
        ResultsStore(path, plan_hash="other")


# -------------------------------------------------------------- runner


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, small_suite):
    corpora, ds = small_suite
    root = tmp_path_factory.mktemp("run")
    save_corpus(ds, root / "esd")
    ckpts = {}
    for j, cs in ((1, ()), (2, ("alpha", "beta"))):
        m, _ = prefinetune(PrefinetuneSpec(cs, config_id=j, max_epochs=5, hidden_dim=8, seed=0), corpora)
        ckpts[j] = root / f"c{j}.ckpt"
        save_checkpoint(m, ckpts[j])
    plan = plan_grid([1, 2], ds.speaker_ids[:2], DOWNSTREAM_EMOTIONS, [2, 4], 1)
    assert len(plan) == 40
    return root, ckpts, plan


SETTINGS = TrialSettings(max_epochs=40, patience=10)


def _contents(store):
    return sorted(r.content() for r in store.all_records())


def test_run_grid_complete_and_idempotent(tiny_run, tmp_path):
    root, ckpts, plan = tiny_run
    store = run_grid(plan, ckpts, root / "esd", tmp_path / "s.jsonl", settings=SETTINGS)
    assert len(store.records) == 40
    for r in store.ok_records():
        assert 0 <= r.macro_f1 <= 1 and r.baseline_f1 > 0 and r.epochs >= 1
    size = (tmp_path / "s.jsonl").stat().st_size
    again = run_grid(plan, ckpts, root / "esd", tmp_path / "s.jsonl", settings=SETTINGS)
    assert (tmp_path / "s.jsonl").stat().st_size == size
    assert _contents(again) == _contents(store)


def test_run_grid_resume_equals_uninterrupted(tiny_run, tmp_path):
    root, ckpts, plan = tiny_run
    full = run_grid(plan, ckpts, root / "esd", tmp_path / "full.jsonl", settings=SETTINGS)
    part = tmp_path / "part.jsonl"
    run_grid(plan, ckpts, root / "esd", part, settings=SETTINGS, max_trials=13)
    with open(part, "a") as f:
        f.write('{"config_id": 2, "spea')
    resumed = run_grid(plan, ckpts, root / "esd", part, settings=SETTINGS)
    assert _contents(resumed) == _contents(full)


def test_run_grid_parallel_equals_serial(tiny_run, tmp_path):
    root, ckpts, plan = tiny_run
    serial = run_grid(plan, ckpts, root / "esd", tmp_path / "a.jsonl", 1, SETTINGS)
    parallel = run_grid(plan, ckpts, root / "esd", tmp_path / "b.jsonl", 4, SETTINGS)
    assert _contents(serial) == _contents(parallel)


def test_run_grid_missing_checkpoint(tiny_run, tmp_path):
    root, ckpts, plan = tiny_run
    with pytest.raises(FileNotFoundError, match="2"):
        run_grid(plan, {1: ckpts[1]}, root / "esd", tmp_path / "s.jsonl")


def test_record_depends_only_on_spec(tiny_run, tmp_path):
    """Running a trial alone gives the same record as running it inside the grid."""
    root, ckpts, plan = tiny_run
    full = run_grid(plan, ckpts, root / "esd", tmp_path / "a.jsonl", settings=SETTINGS)
    one = GridPlan([plan.trials[-1]], plan.global_seed)
    alone = run_grid(one, ckpts, root / "esd", tmp_path / "b.jsonl", settings=SETTINGS)
    key = plan.trials[-1].key
    assert alone.records[key].content() == full.records[key].content()
