"""Acceptance criteria 1-9.

Each test records one PASS/FAIL/SKIP line in ``RESULTS``; ``conftest.py``
prints them at the end of the session. Run this file directly for just
the acceptance suite.
"""

import math
import os
import subprocess
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import data_dir, gaussian_sample
from quantfair.classifiers import LinearModel, TrainerConfig, posterior, predict, train_logistic
from quantfair.data import Prevalence
from quantfair.errors import BranchDegeneracyError, QuantFairError
from quantfair.fairness import (DDPipelineConfig, estimate_from_branches, fit_branch_quantifiers,
                                weighted_estimator)
from quantfair.ingestion import SyntheticSpec, generate_synthetic, load_dataset, load_schema, \
    resolve_sources
from quantfair.protocols import ProtocolSpec, aggregate, run_decoupling, run_protocol
from quantfair.quantifiers import HDY_BINS, Quantifier, fit, fit_many, hdy_estimate, quantify, \
    quantify_sld, sld_em

RESULTS = {}
HERE = Path(__file__).resolve().parent


def report(number, ok, detail, started):
    status = "PASS" if ok else "FAIL"
    RESULTS[number] = f"[criterion {number}] {status}: {detail} ({time.time() - started:.1f}s)"
    print(RESULTS[number])
    assert ok, RESULTS[number]


def skip(number, why):
    RESULTS[number] = f"[criterion {number}] SKIP (dataset absent): {why}"
    pytest.skip(why)


def random_world(rng):
    n = int(rng.integers(240, 700))
    spec = SyntheticSpec(n, int(rng.integers(2, 6)), tuple(rng.uniform(0.3, 2.5, 4)),
                         tuple(rng.dirichlet(np.full(4, 3.0))), seed=int(rng.integers(2**31)))
    data = generate_synthetic(spec)
    third = n // 3
    d1 = data.subset(np.arange(third))
    d2 = data.subset(np.arange(third, 2 * third))
    d3 = data.subset(np.arange(2 * third, n))
    return d1, d2, d3


def test_criterion_1_closed_form_equivalence():
    started = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    done = dual = 0
    while done < 200:
        d1, d2, d3 = random_world(rng)
        try:
            h = train_logistic(d1, "target", "balanced")
            accepted = predict(h, d3.features)
            if accepted.min() == accepted.max():
                continue
            for method, hard in (("PCC", False), ("CC", True)):
                single = DDPipelineConfig(method=method, split_by_prediction=False,
                                          laplace_pseudocount=0.0)
                q = fit(method, d2)
                est = estimate_from_branches(fit_branch_quantifiers(h, d2, single, lambda s: q),
                                             h, d3.features, single)
                scores = posterior(q.model, d3.features)
                if hard:
                    scores = (scores >= 0.5).astype(float)
                if 0 < scores.sum() < scores.size:
                    worst = max(worst, abs(est.delta - weighted_estimator(scores, accepted)))
        except QuantFairError:
            continue
        done += 1
        # per-branch models: each deployment row is scored by its own branch's quantifier
        split = DDPipelineConfig(method="PCC", laplace_pseudocount=0.0)
        try:
            branches = fit_branch_quantifiers(h, d2, split)
        except BranchDegeneracyError:
            continue
        est = estimate_from_branches(branches, h, d3.features, split)
        acc = accepted == 1
        scores = np.where(acc, posterior(branches.pos.model, d3.features),
                          posterior(branches.neg.model, d3.features))
        worst = max(worst, abs(est.delta - weighted_estimator(scores, accepted)))
        dual += 1
    elapsed = time.time() - started
    report(1, worst <= 1e-9 and elapsed < 60,
           f"200 instances ({dual} also per-branch), max |pipeline - closed form| = {worst:.2e}",
           started)


def plain_em(posteriors, train_prev, tol=1e-4, cap=1000):
    """Textbook EM on the class prior with Python floats only; returns every step's posteriors."""
    prior1 = train_prev
    cur1 = train_prev
    steps = []
    for _ in range(cap):
        rows = []
        for p in posteriors:
            up1 = cur1 / prior1 * p
            up0 = (1 - cur1) / (1 - prior1) * (1 - p)
            rows.append(up1 / (up0 + up1))
        new1 = math.fsum(rows) / len(rows)
        steps.append(rows)
        moved = abs(new1 - cur1)
        cur1 = new1
        if moved < tol:
            break
    return cur1, steps


def test_criterion_2_sld_oracle():
    started = time.time()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        pi = rng.beta(rng.uniform(0.3, 3), rng.uniform(0.3, 3), size=int(rng.integers(5, 400)))
        pi = np.clip(pi, 1e-9, 1 - 1e-9)
        p0 = float(rng.uniform(0.05, 0.95))
        seen = []
        value, trace, _ = sld_em(pi, p0, callback=lambda t, probs: seen.append(probs[:, 1].copy()))
        ref, steps = plain_em(pi.tolist(), p0)
        assert len(seen) == len(steps) == trace.iterations
        for ours, theirs in zip(seen, steps):
            worst = max(worst, float(np.max(np.abs(ours - np.array(theirs)))))
        # the public entry point, fed features whose identity-model posteriors are pi
        q = Quantifier("SLD", Prevalence(p0, 100), LinearModel(np.array([1.0]), 0.0))
        through_api, _, _ = quantify_sld(q, np.log(pi / (1 - pi))[:, None])
        worst = max(worst, abs(value - ref), abs(through_api.value - ref))
    elapsed = time.time() - started
    report(2, worst <= 1e-10 and elapsed < 10,
           f"50 posterior sets, max per-iteration gap = {worst:.2e}", started)


def test_criterion_3_hdy_mixtures():
    started = time.time()
    rng = np.random.default_rng(303)
    pos = rng.beta(5, 2, 500)
    neg = rng.beta(2, 5, 500)
    worst = 0.0
    for tenths in range(11):
        # each component's exact empirical distribution repeated in a tenths : 10-tenths ratio
        test = np.concatenate([np.tile(pos, tenths), np.tile(neg, 10 - tenths)])
        median, per_bin = hdy_estimate(test, pos, neg)
        assert len(per_bin) == len(HDY_BINS)
        worst = max(worst, abs(median - tenths / 10))
    elapsed = time.time() - started
    report(3, worst <= 0.05 and elapsed < 60,
           f"alpha in 0..1 step 0.1, max |median - alpha| = {worst:.3f}", started)


def test_criterion_4_fisher_consistency():
    started = time.time()
    rng = np.random.default_rng(404)
    train = gaussian_sample(2000, 3, 0.4, rng, shift=1.5)
    train_prev = float(train.sensitive.mean())
    methods = ("CC", "PCC", "ACC", "PACC", "SLD", "MLPE")
    qs = fit_many(methods, train, TrainerConfig(), seed=0)
    grid = [i / 10 for i in range(1, 10)]
    bias = {m: [] for m in methods}
    for p in grid:
        errs = defaultdict(list)
        for _ in range(50):
            test = gaussian_sample(2000, 3, p, rng, shift=1.5)
            truth = float(test.sensitive.mean())
            for m in methods:
                errs[m].append(quantify(qs[m], test).value - truth)
        for m in methods:
            bias[m].append(float(np.mean(errs[m])))
    problems = []
    for m in ("ACC", "PACC", "SLD"):
        if max(abs(b) for b in bias[m]) > 0.03:
            problems.append(f"{m} bias {max(abs(b) for b in bias[m]):.3f}")
    for m in ("CC", "PCC", "MLPE"):
        b = bias[m]
        if not all(x > y for x, y in zip(b, b[1:])):
            problems.append(f"{m} not decreasing")
        below = [x for p, x in zip(grid, b) if p < train_prev - 0.1]
        above = [x for p, x in zip(grid, b) if p > train_prev + 0.1]
        if not (below and above and min(below) > 0 and max(above) < 0):
            problems.append(f"{m} sign does not flip around {train_prev:.2f}")
    elapsed = time.time() - started
    worst = {m: round(max(abs(b) for b in bias[m]), 3) for m in ("ACC", "PACC", "SLD")}
    report(4, not problems and elapsed < 300,
           f"train prevalence {train_prev:.3f}, max |bias| {worst}; "
           f"CC/PCC/MLPE ends {[(m, round(bias[m][0], 3), round(bias[m][-1], 3)) for m in ('CC', 'PCC', 'MLPE')]}"
           + (f"; problems: {problems}" if problems else ""), started)


@pytest.fixture(scope="module")
def adult():
    where = data_dir()
    if where is None:
        return None
    schema = load_schema("adult")
    return load_dataset(schema, resolve_sources(schema, where))


@pytest.mark.slow
@pytest.mark.dataset
def test_criterion_5_pooled_deployment_shift_ordering(adult):
    if adult is None:
        skip(5, "adult.data / adult.test not found in QF_DATA_DIR")
    started = time.time()
    records = []
    for proto in ("sample-prev-D3-neg", "sample-prev-D3-pos"):
        records += run_protocol(ProtocolSpec.desk(proto, dataset="adult"), adult)
    rows = {r.method: r for r in aggregate(records)}
    mae = {m: r.mae for m, r in rows.items()}
    checks = {
        "SLD<PACC": mae["SLD"] < mae["PACC"],
        "PACC<ACC": mae["PACC"] < mae["ACC"],
        "ACC<PCC": mae["ACC"] < mae["PCC"],
        "CC>0.25": mae["CC"] > 0.25,
        "MLPE>0.25": mae["MLPE"] > 0.25,
        "SLD in [0.03,0.10]": 0.03 <= mae["SLD"] <= 0.10,
        "SLD P(AE<0.2)>=0.90": rows["SLD"].p_ae_lt_02 >= 0.90,
    }
    elapsed = time.time() - started
    failed = [k for k, ok in checks.items() if not ok]
    report(5, not failed and elapsed < 1800,
           "MAE " + ", ".join(f"{m} {v:.3f}" for m, v in sorted(mae.items(), key=lambda kv: kv[1]))
           + f"; SLD P(AE<0.2) {rows['SLD'].p_ae_lt_02:.3f}; SLD vs PACC tier "
           f"{rows['PACC'].significance if mae['SLD'] < mae['PACC'] else rows['SLD'].significance}"
           + (f"; failed: {failed}" if failed else ""), started)


@pytest.mark.slow
@pytest.mark.dataset
def test_criterion_6_training_shift_spot_checks(adult):
    if adult is None:
        skip(6, "adult.data / adult.test not found in QF_DATA_DIR")
    started = time.time()
    spec = ProtocolSpec.desk("sample-prev-D1", dataset="adult", methods=("CC", "PCC", "MLPE"))
    mae = {r.method: r.mae for r in aggregate(run_protocol(spec, adult))}
    elapsed = time.time() - started
    ok = mae["PCC"] <= 0.03 and mae["MLPE"] <= 0.03 and mae["CC"] >= 0.07 and elapsed < 1800
    report(6, ok, f"MAE CC {mae['CC']:.3f}, PCC {mae['PCC']:.3f}, MLPE {mae['MLPE']:.3f}", started)


@pytest.fixture(scope="module")
def synthetic_world():
    return generate_synthetic(SyntheticSpec(9000, 5, (1.0, 1.5, 1.5, 1.0),
                                            (0.3, 0.2, 0.2, 0.3), seed=11))


@pytest.mark.slow
def test_criterion_7_decoupling(synthetic_world):
    started = time.time()
    lines, problems = [], []
    for proto in ("sample-prev-D3-neg", "sample-prev-D3-pos"):
        spec = ProtocolSpec.desk(proto, methods=("CC", "PACC", "SLD"))
        records = run_decoupling(spec, synthetic_world)
        varied = "neg" if proto.endswith("neg") else "pos"
        cells = defaultdict(list)
        paired = defaultdict(dict)
        for r in records:
            assert not r.failure, r.failure
            paired[(r.permutation_id, r.repeat_id, r.grid_index, r.branch)][r.method] = r
            if r.branch == varied:
                cells[(r.method, r.grid_index)].append((r.abs_error, r.f1))
        same = all(p["CC"].accuracy == p["PACC"].accuracy and p["CC"].f1 == p["PACC"].f1
                   for p in paired.values())
        grid = spec.resolved_grid(0)
        mean = {k: np.mean(v, axis=0) for k, v in cells.items()}

        def series(method, col):
            return np.array([mean[(method, g)][col] for g in range(len(grid))])

        cc_mae, pacc_mae = series("CC", 0).mean(), series("PACC", 0).mean()
        sld_mae, sld_f1 = series("SLD", 0), series("SLD", 1)
        ends = [0, len(grid) - 1]
        # lowest non-zero prevalences: the branch still has positives for F1 to score
        low = [g for g, p in enumerate(grid) if 0 < p <= 0.2]
        mae_ok = all(sld_mae[g] <= 2 * np.median(sld_mae) for g in ends)
        f1_ok = all(sld_f1[g] < np.median(sld_f1) for g in low)
        if not pacc_mae <= cc_mae / 2:
            problems.append(f"{proto} PACC MAE not half of CC")
        if not same:
            problems.append(f"{proto} PACC accuracy/F1 differ from CC")
        if not mae_ok:
            problems.append(f"{proto} SLD MAE at ends above 2x median")
        if not f1_ok:
            problems.append(f"{proto} SLD F1 at low prevalence not below median")
        lines.append(f"{proto}: MAE CC {cc_mae:.3f} PACC {pacc_mae:.3f}; SLD MAE ends "
                     f"{sld_mae[0]:.3f}/{sld_mae[-1]:.3f} vs median {np.median(sld_mae):.3f}; "
                     f"SLD F1 low {[round(float(sld_f1[g]), 3) for g in low]} vs median "
                     f"{np.median(sld_f1):.3f}")
    elapsed = time.time() - started
    report(7, not problems and elapsed < 600,
           "; ".join(lines) + (f"; problems: {problems}" if problems else ""), started)


@pytest.mark.slow
def test_criterion_8_ablation(synthetic_world):
    started = time.time()
    methods = ("SLD", "SLD-nosD2", "PACC", "PACC-nosD2")
    spec = ProtocolSpec.desk("sample-prev-D2-neg", methods=methods)
    records = run_protocol(spec, synthetic_world)
    per_grid = defaultdict(list)
    for r in records:
        assert not r.failed, r.failure
        per_grid[(r.method, r.grid_index)].append(abs(r.signed_error))
    grid_avg = {m: np.mean([np.mean(per_grid[(m, g)]) for g in range(len(spec.resolved_grid(0)))])
                for m in methods}
    elapsed = time.time() - started
    ok = grid_avg["SLD-nosD2"] > grid_avg["SLD"] and grid_avg["PACC-nosD2"] > grid_avg["PACC"]
    report(8, ok and elapsed < 600,
           ", ".join(f"{m} {v:.3f}" for m, v in grid_avg.items()), started)


PROPERTY_SUITES = ("test_data.py", "test_classifiers.py", "test_quantifiers.py",
                   "test_fairness.py", "test_sampling.py", "test_stats.py", "test_protocols.py")


@pytest.mark.slow
def test_criterion_9_property_suites():
    started = time.time()
    budget = 0
    for name in PROPERTY_SUITES:
        budget += (HERE / name).read_text().count("max_examples=1000")
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(filter(None, [str(HERE),
                                                                    os.environ.get("PYTHONPATH")])))
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          "-m", "not dataset", *[str(HERE / n) for n in PROPERTY_SUITES]],
                         capture_output=True, text=True, cwd=HERE.parent, env=env)
    tail = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    elapsed = time.time() - started
    report(9, out.returncode == 0 and budget > 0 and elapsed < 300,
           f"{len(PROPERTY_SUITES)} suites, {budget} properties at 1000 cases: {tail}", started)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
