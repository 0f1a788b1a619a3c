"""Acceptance checks; each records one PASS/FAIL line shown at the end of the run."""
import math
import os
import random
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pftlab.analysis import CurvePoint, inclusion_exclusion, read_report, to_markdown
from pftlab.cli import main
from pftlab.data import DOWNSTREAM_EMOTIONS, Corpus, save_corpus
from pftlab.experiments import ResultsStore, TrialRecord, TrialSettings, enumerate_powerset, plan_grid, run_grid
from pftlab.kernel import EncoderParams, HeadParams, ModelState, grad_check, init_model, save_checkpoint
from pftlab.metrics import constant_baseline, macro_f1
from pftlab.sampling import FEW_SHOT_KS, TRIALS_PER_CONDITION, FewShotSpec, sample_fewshot
from pftlab.training import PrefinetuneSpec, prefinetune, scaled_loss, validation_loss

from oracles import confusion_macro_f1, exhaustive_constant_baseline, naive_cross_entropy

ROOT = Path(__file__).resolve().parents[1]
PAPER_CORPORA = ["msp_improv", "msp_podcast", "mandarin_as", "iemocap"]


# -------------------------------------------------------------- 1


def test_plan_count_and_checkpoints(acceptance, tmp_path):
    speakers = [f"en_{i:02d}" for i in range(1, 11)] + [f"zh_{i:02d}" for i in range(1, 11)]
    t0 = time.perf_counter()
    plan = plan_grid(enumerate_powerset(PAPER_CORPORA), speakers, DOWNSTREAM_EMOTIONS, FEW_SHOT_KS,
                     TRIALS_PER_CONDITION)
    elapsed = time.perf_counter() - t0
    fast = ["--set", "model.pft_max_epochs=1", "--set", "model.pft_patience=1", "--set", "model.hidden_dim=4"]
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    assert main(["prefinetune", "--out", str(tmp_path), *fast]) == 0
    n_ckpt = len(list((tmp_path / "checkpoints").glob("*.ckpt")))
    ok = len(plan) == 33_600 and n_ckpt == 16 and elapsed < 1.0
    acceptance("1 plan count", ok, f"{len(plan)} trials planned in {elapsed:.3f}s, {n_ckpt} checkpoints")
    assert ok


# -------------------------------------------------------------- 2


def test_scaled_loss(acceptance):
    rnd = random.Random(0)
    worst = abs(scaled_loss(math.log(2), 2) - 1.0)
    for _ in range(100):
        x, n = rnd.uniform(0, 20), rnd.randint(2, 1000)
        worst = max(worst, abs(scaled_loss(x, n) - x / math.log(n)))
    ok = worst <= 1e-12
    acceptance("2 scaled loss", ok, f"max abs error {worst:.2e} over 101 cases (tol 1e-12)")
    assert ok


# -------------------------------------------------------------- 3


def test_gradients(acceptance):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        d_in, d_h = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        n = int(rng.choice([2, 4, 5, 9]))
        m = init_model(d_in, d_h, {"t": n}, seed=seed)
        samples = [("t", rng.normal(size=d_in), int(rng.integers(n))) for _ in range(3)]
        worst = max(worst, grad_check(m, samples).max_relative_error)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    acceptance("3 gradients", ok, f"max relative error {worst:.2e} over 100 models in {elapsed:.2f}s")
    assert ok


# -------------------------------------------------------------- 4


def test_metric_oracles(acceptance):
    rnd = random.Random(1)
    worst, base_ok = 0.0, True
    for _ in range(1000):
        n = rnd.randint(1, 40)
        preds = [rnd.randint(0, 1) for _ in range(n)]
        labels = [rnd.randint(0, 1) for _ in range(n)]
        worst = max(worst, abs(macro_f1(preds, labels).macro_f1 - confusion_macro_f1(preds, labels)))
        base_ok &= constant_baseline(labels) == exhaustive_constant_baseline(labels)
    ok = worst <= 1e-12 and base_ok
    acceptance("4 metric oracles", ok, f"macro F1 max error {worst:.2e} on 1000 sets; baseline exact: {base_ok}")
    assert ok


# -------------------------------------------------------------- 5


def test_incl_excl_fixture(acceptance):
    configs = {c.config_id: c.corpora for c in enumerate_powerset(PAPER_CORPORA)}
    by_set = {frozenset(v): j for j, v in configs.items()}
    full = frozenset(PAPER_CORPORA)
    fixture = {2: ("msp_podcast", 0.6150, 0.6272, -0.0122), 4: ("msp_podcast", 0.7010, 0.6990, 0.0020)}
    records = []
    for k, (c, f_in, f_ex, _) in fixture.items():
        for corpus in PAPER_CORPORA:
            a, b = (f_in, f_ex) if corpus == c else (0.5, 0.5)
            records.append(TrialRecord(by_set[frozenset({corpus})], "s", "Happy", k, 0, 0, a, None, 0.4, "ok", 1, 0))
            records.append(TrialRecord(by_set[full - {corpus}], "s", "Happy", k, 0, 0, b, None, 0.4, "ok", 1, 0))
    rows = [r for r in inclusion_exclusion(records, configs) if r.corpus == "msp_podcast"]
    md = to_markdown(rows).splitlines()[2:]
    exact = all(abs(r.delta - fixture[r.k][3]) <= 1e-12 for r in rows)
    shown = md == ["| 2 | msp_podcast | 0.6150 | 0.6272 | -0.0122 |", "| 4 | msp_podcast | 0.7010 | 0.6990 | 0.0020 |"]
    ok = exact and shown and len(rows) == 2
    acceptance("5 inclusion/exclusion fixture", ok, "deltas " + ", ".join(f"{r.delta:+.4f}" for r in rows))
    assert ok


# -------------------------------------------------------------- 6


def _rig_corpus(name, n_labels, per_label):
    # one train row per label keeps the corpus valid; only validation rows are scored
    labels = np.concatenate([np.arange(n_labels), np.repeat(np.arange(n_labels), per_label)])
    n = len(labels)
    splits = ["train"] * n_labels + ["validation"] * (n - n_labels)
    return Corpus(name, [f"{name}{i}" for i in range(n_labels)], np.ones((n, 2)), labels, ["s"] * n,
                  ["English"] * n, splits)


def test_validation_averaging(acceptance):
    a_c, b_c = _rig_corpus("a", 2, 3), _rig_corpus("b", 5, 7)
    bias_a, bias_b = [0.0, 0.0], [2.0, 0.0, 0.0, 0.0, 0.0]
    # a rigged model: zero encoder, so each task emits its bias logits for every input
    m = ModelState(EncoderParams(np.zeros((3, 2)), np.zeros(3)))
    m.add_head(HeadParams(np.zeros((2, 3)), np.array(bias_a), "a"))
    m.add_head(HeadParams(np.zeros((5, 3)), np.array(bias_b), "b"))
    a = np.mean([naive_cross_entropy(bias_a, y) for y in a_c.labels[2:]]) / math.log(2)
    b = np.mean([naive_cross_entropy(bias_b, y) for y in b_c.labels[5:]]) / math.log(5)
    got = validation_loss(m, [a_c, b_c])
    dup = Corpus("b", b_c.label_space, np.tile(b_c.features, (2, 1)), np.tile(b_c.labels, 2),
                 np.tile(b_c.speakers, 2), np.tile(b_c.languages, 2), np.tile(b_c.splits, 2))
    got_dup = validation_loss(m, [a_c, dup])
    # "exact" up to summation order: both sides round independently
    ok = abs(got - (a + b) / 2) <= 1e-15 and got_dup == got
    acceptance("6 validation averaging", ok,
               f"loss {got:.15f} vs (a+b)/2 {(a + b) / 2:.15f}; duplicated task gives {got_dup:.15f}")
    assert ok


# -------------------------------------------------------------- 7


@pytest.fixture(scope="module")
def reduced_grid(tmp_path_factory, small_suite):
    corpora, ds = small_suite
    root = tmp_path_factory.mktemp("accept7")
    save_corpus(ds, root / "esd")
    ckpts = {}
    for j, cs in ((1, ()), (2, ("alpha", "beta", "gamma"))):
        m, _ = prefinetune(PrefinetuneSpec(cs, config_id=j, max_epochs=5, hidden_dim=8), corpora)
        ckpts[j] = root / f"c{j}.ckpt"
        save_checkpoint(m, ckpts[j])
    plan = plan_grid([1, 2], ds.speaker_ids[:2], DOWNSTREAM_EMOTIONS, [2, 8], 1)
    return root, ckpts, plan


def _contents(store):
    return {r.content() for r in store.all_records()}


CRASH_SCRIPT = """
import sys
from pathlib import Path
from pftlab.experiments import GridPlan, TrialSettings, run_grid
root = Path(sys.argv[1])
plan = GridPlan.load(root / "plan.jsonl")
ckpts = {1: root / "c1.ckpt", 2: root / "c2.ckpt"}
run_grid(plan, ckpts, root / "esd", root / "crash.jsonl", settings=TrialSettings(max_epochs=40, patience=10))
"""


def test_determinism_and_resume(acceptance, reduced_grid):
    root, ckpts, plan = reduced_grid
    settings = TrialSettings(max_epochs=40, patience=10)
    serial = run_grid(plan, ckpts, root / "esd", root / "p1.jsonl", 1, settings)
    parallel = run_grid(plan, ckpts, root / "esd", root / "p8.jsonl", 8, settings)
    same_parallel = _contents(serial) == _contents(parallel) and len(serial.records) == 40

    # kill a real run partway through, then resume it
    plan.save(root / "plan.jsonl")
    store = root / "crash.jsonl"
    proc = subprocess.Popen([sys.executable, "-c", CRASH_SCRIPT, str(root)])
    deadline = time.time() + 120
    while time.time() < deadline and proc.poll() is None:
        if store.exists() and store.read_text().count("\n") >= 11:
            break
        time.sleep(0.02)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    partial = len(ResultsStore(store).records)
    resumed = run_grid(plan, ckpts, root / "esd", store, 1, settings)
    same_resume = _contents(resumed) == _contents(serial) and 0 < partial < 40
    ok = same_parallel and same_resume
    acceptance("7 determinism and resume", ok,
               f"40 trials; parallelism 1 == 8: {same_parallel}; killed after {partial} trials, resumed == "
               f"uninterrupted: {same_resume}")
    assert ok


# -------------------------------------------------------------- 8


@pytest.mark.slow
def test_desk_trends(acceptance, tmp_path):
    desk = str(ROOT / "configs" / "desk.json")
    args = ["-c", desk, "--out", str(tmp_path), "-j", str(os.cpu_count() or 1)]
    t0 = time.perf_counter()
    for cmd in (["gen-data"], ["prefinetune"], ["grid", "plan"], ["grid", "run"], ["grid", "report"]):
        assert main(cmd + args) == 0, cmd
    minutes = (time.perf_counter() - t0) / 60
    store = ResultsStore(tmp_path / "grid" / "store.jsonl")
    curve = {(p.k, p.n_corpora): p.mean for p in read_report(tmp_path / "reports" / "curves.csv", CurvePoint)}
    gain2 = curve[2, 4] - curve[2, 0]
    gain32 = curve[32, 4] - curve[32, 0]
    base2 = curve[2, 0]
    n = len(store.ok_records())
    acceptance("8a all-corpora gain at k=2", gain2 >= 0.05,
               f"{curve[2, 4]:.4f} - {base2:.4f} = {gain2:+.4f} (need >= 0.05); {n} ok trials in {minutes:.1f} min")
    acceptance("8b gain shrinks with k", gain2 >= gain32, f"k=2 {gain2:+.4f} vs k=32 {gain32:+.4f}")
    acceptance("8c baseline near chance", 0.40 <= base2 <= 0.65, f"no-PFT k=2 mean {base2:.4f} (need [0.40, 0.65])")
    assert n == 1920
    assert gain2 >= 0.05 and gain2 >= gain32 and 0.40 <= base2 <= 0.65


# -------------------------------------------------------------- 9


def test_sampler_contract(acceptance, default_suite):
    _, ds = default_suite
    test_idx = set(ds.split_indices("test").tolist())
    cases = bad = 0
    for k in FEW_SHOT_KS:
        for speaker in ds.speaker_ids:
            for emotion in ds.label_space.names:
                for trial in range(TRIALS_PER_CONDITION):
                    spec = FewShotSpec(speaker, emotion, k, trial, seed=0)
                    idx, _, y = sample_fewshot(ds, spec)
                    again, _, _ = sample_fewshot(ds, FewShotSpec(speaker, emotion, k, trial, seed=0))
                    good = (len(idx) == k and int(y.sum()) == k // 2 and len(set(idx.tolist())) == k
                            and not test_idx & set(idx.tolist())
                            and set(ds.speakers[idx].tolist()) == {speaker}
                            and np.array_equal(ds.labels[idx] == ds.label_space.index(emotion), y == 1)
                            and np.array_equal(idx, again))
                    cases += 1
                    bad += not good
    ok = bad == 0 and cases == 7 * 20 * 5 * 3
    acceptance("9 sampler contract", ok, f"{cases - bad}/{cases} samples balanced, test-disjoint and reproducible")
    assert ok
