"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are written
straight to the terminal even when pytest captures output.
"""

import dataclasses
import math
import time
import warnings

import numpy as np
import pytest

from ammfm import data as D
from ammfm import fusion as F
from ammfm import model as M
from ammfm import tensor as T
from ammfm import training as TR
from ammfm.blocks import AttentionBlockParams, BabParams, aab_forward, bab_forward, block_param_count
from ammfm.experiment import SYNTH_AUGMENTATIONS, run_cell
from checks import model_gradient_error, random_prediction_set, search_matches_naive
from oracles import pairwise_auc

# synthetic asymmetry experiment
N_CASES = 2000
DERM_SNR, CLIN_SNR = 0.12, 0.03
SEEDS = (0, 1, 2)
EXPERIMENT = TR.TrainConfig(epochs=20, batch_size=16, learning_rate=1e-3, augmentations=SYNTH_AUGMENTATIONS)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, elapsed, limit):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\ncriterion {n}: {status}  {detail}  [{elapsed:.2f}s, limit {limit}s]")
        assert ok, detail
        assert elapsed < limit, f"criterion {n} took {elapsed:.1f}s (limit {limit}s)"

    return emit


def test_criterion_1_block_parameter_halving(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = []
    for c in range(1, 33):
        aab = block_param_count(AttentionBlockParams.init(c, rng))
        bab = block_param_count(BabParams.init(c, rng))
        if 2 * aab != bab:
            bad.append(c)
    verdict(1, not bad, f"2*params(AAB) == params(BAB) for C=1..32 (mismatches: {bad or 'none'})", time.perf_counter() - t0, 1)


def test_criterion_2_framework_parameters(verdict):
    t0 = time.perf_counter()
    audits = {}
    for fw in M.FRAMEWORKS:
        for b in M.BLOCKS:
            audits[fw, b] = M.count_params(M.FusionModel(M.ModelConfig(fw, b), seed=0))
    identity = all(a["total"] == sum(v for k, v in a.items() if k != "total") for a in audits.values())
    ordering = all(audits["aff", b]["total"] < audits["sff", b]["total"] for b in M.BLOCKS)
    ratio = audits["sff", "cat"]["total"] / audits["aff", "aab"]["total"]
    ok = identity and ordering and 1.5 <= ratio <= 2.1
    detail = f"audit identity={identity}, AFF<SFF for every block={ordering}, SFF-CAT/AFF-AAB={ratio:.3f} in [1.5, 2.1]"
    verdict(2, ok, detail, time.perf_counter() - t0, 1)


def test_criterion_3_end_to_end_gradients(verdict):
    t0 = time.perf_counter()
    worst = max(model_gradient_error(seed) for seed in range(20))
    verdict(3, worst < 1e-5, f"max relative gradient error over 20 trials = {worst:.2e} (< 1e-5)", time.perf_counter() - t0, 120)


def test_criterion_4_residual_identity(verdict):
    t0 = time.perf_counter()
    ok = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        h, w, c = (int(v) for v in rng.integers(1, 7, size=3))
        clin = rng.normal(size=(2, h, w, c))
        derm = rng.normal(size=(2, h, w, c))
        refined, _ = aab_forward(clin, derm, AttentionBlockParams.init(c, rng, zero_value=True))
        rc, rd, _ = bab_forward(clin, derm, BabParams.init(c, rng, zero_value=True))
        ok &= np.array_equal(refined.data, derm) and np.array_equal(rd.data, derm) and np.array_equal(rc.data, clin)
    verdict(4, bool(ok), "zero value projections leave AAB/BAB outputs bit-identical to their inputs", time.perf_counter() - t0, 1)


def test_criterion_5_fusion_corners_and_search(verdict):
    t0 = time.perf_counter()
    preds, _ = random_prediction_set(np.random.default_rng(0), 25, D.SPC_SCHEMA)
    corners = True
    for w, b in (((1.0, 0.0, 0.0), "dermoscopy"), ((0.0, 1.0, 0.0), "clinical"), ((0.0, 0.0, 1.0), "fusion")):
        corners &= all(np.array_equal(x, y) for x, y in zip(F.weighted_fuse(preds, F.FusionWeights(*w)), preds.probs[b]))
    agree = search_matches_naive(200, seed=5)
    n_grid = len(F.simplex_grid(0.1))
    ok = corners and agree == 200 and n_grid == 66
    detail = f"corners exact={corners}, search == naive grid on {agree}/200 sets, step 0.1 grid = {n_grid} triples"
    verdict(5, ok, detail, time.perf_counter() - t0, 10)


def test_criterion_6_metric_oracles(verdict):
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(500):
        rng = np.random.default_rng([6, i])
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, int(rng.integers(2, 8)), size=n).astype(float)  # heavy ties
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = (0, 1)
        mismatches += F.auc_one_vs_rest(scores, labels) != pairwise_auc(scores.tolist(), labels.tolist())
    # hand-counted fixture: 3 TP, 1 FP, 2 FN, 4 TN
    m = F.confusion_metrics([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], [1, 1, 1, 0, 1, 1, 0, 0, 0, 0], 1)
    perfect = F.confusion_metrics([0, 1, 2], [0, 1, 2], 2)
    never = F.confusion_metrics([0, 0, 0], [0, 1, 2], 2)
    fixtures = (
        (m["PRE"], m["SEN"], m["SPE"]) == (0.75, 0.6, 0.8)
        and perfect == {"PRE": 1.0, "SEN": 1.0, "SPE": 1.0}
        and never["SEN"] == 0.0
        and never["PRE"] is None
    )
    ok = mismatches == 0 and fixtures
    detail = f"rank AUC == pairwise AUC on {500 - mismatches}/500 tied instances, confusion fixtures={fixtures}"
    verdict(6, ok, detail, time.perf_counter() - t0, 30)


def test_criterion_7_uniform_loss_closed_form(verdict):
    t0 = time.perf_counter()
    schema = D.SPC_SCHEMA
    per_case = sum(math.log(t.n_categories) for t in schema)
    worst = 0.0
    for n in (1, 4, 9):
        logits = {b: [T.Tensor(np.zeros((n, t.n_categories))) for t in schema] for b in M.BRANCHES}
        labels = np.zeros((n, len(schema)), dtype=int)
        loss = TR.total_loss(logits, labels, schema)
        for k in ("L_derm", "L_clic", "L_fusion"):
            worst = max(worst, abs(getattr(loss, k).item() / n - per_case))
    verdict(7, worst < 1e-9, f"per-case branch loss = sum ln K = {per_case:.6f}, max deviation {worst:.1e}", time.perf_counter() - t0, 1)


# ---------------------------------------------------------------- synthetic experiment


def _write_cell(res, root):
    M.save_checkpoint(res.model, root / "checkpoint")
    for name, (csv_text, _) in F.report(res.test).items():
        (root / f"metrics_{name}.csv").write_text(csv_text)
    (root / "weights.txt").write_text("w_d = {!r}\nw_c = {!r}\nw_fu = {!r}\n".format(*res.weights.as_tuple()))
    return M.content_hash(root)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("asymmetry")
    cfg = D.SynthConfig(cases=N_CASES, size=32, derm_snr=DERM_SNR, clin_snr=CLIN_SNR, seed=0)
    records = D.synth_generate(cfg)
    train, val, test = D.split(records)
    cells = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for fw, block in (("sff", "cat"), ("aff", "aab")):
            for seed in SEEDS:
                res = run_cell(train, val, test, fw, block, seed, dataclasses.replace(EXPERIMENT, seed=seed))
                res.hash = _write_cell(res, root / f"{fw}-{block}-{seed}")
                cells[fw, block, seed] = res
    return {"cells": cells, "elapsed": time.perf_counter() - t0, "splits": (train, val, test), "root": root, "data": cfg}


def _mean(cells, fw, block, getter):
    return float(np.mean([getter(cells[fw, block, s]) for s in SEEDS]))


@pytest.mark.slow
def test_criterion_8_synthetic_asymmetry(experiment, verdict):
    cells = experiment["cells"]
    derm = _mean(cells, "sff", "cat", lambda r: r.test["P_D"].avg_acc)
    clin = _mean(cells, "sff", "cat", lambda r: r.test["P_C"].avg_acc)
    sff = _mean(cells, "sff", "cat", lambda r: r.test["P_FI"].avg_acc)
    aff = _mean(cells, "aff", "aab", lambda r: r.test["P_FI"].avg_acc)
    share = cells["aff", "aab", 0].params / cells["sff", "cat", 0].params
    fused_ok = all(r.val_acc["P_FI"] >= max(r.val_acc[b] for b in M.BRANCHES) for r in cells.values())
    a = derm - clin >= 0.05
    b = aff >= sff - 0.02 and share <= 0.60
    detail = (
        f"(a) derm {100 * derm:.2f} vs clin {100 * clin:.2f} = +{100 * (derm - clin):.2f} pts (>= 5); "
        f"(b) AFF-AAB {100 * aff:.2f} vs SFF-CAT {100 * sff:.2f} ({100 * (aff - sff):+.2f} pts, >= -2) "
        f"at {100 * share:.1f}% params (<= 60); (c) fused val >= every branch in all runs: {fused_ok}"
    )
    verdict(8, a and b and fused_ok, detail, experiment["elapsed"], 900)


@pytest.mark.slow
def test_criterion_9_determinism(experiment, verdict, tmp_path):
    t0 = time.perf_counter()
    train, val, test = experiment["splits"]
    cfg = experiment["data"]
    D.write_dataset(D.synth_generate(cfg), tmp_path / "ds-a")
    D.write_dataset(D.synth_generate(cfg), tmp_path / "ds-b")
    data_same = M.content_hash(tmp_path / "ds-a") == M.content_hash(tmp_path / "ds-b")
    ref = experiment["cells"]["aff", "aab", 0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        again = run_cell(train, val, test, "aff", "aab", 0, dataclasses.replace(EXPERIMENT, seed=0))
    h = _write_cell(again, tmp_path / "aff-aab-0")
    ok = data_same and h == ref.hash
    verdict(9, ok, f"rerun of AFF-AAB seed 0: checkpoint+metrics sha256 {h[:16]} == {ref.hash[:16]}, dataset identical={data_same}", time.perf_counter() - t0, 900)
