"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line with the numbers it
judged, then asserts. The Monte-Carlo criteria take several minutes on a
single core; run them alone with ``pytest tests/test_acceptance.py -s``.
"""

import json
import os

import numpy as np
import pytest

from clustertrial.cli import main, write_dataset_csv
from clustertrial.data import EstimandSpec, Level
from clustertrial.efficient import estimate_eff, estimate_unadjusted
from clustertrial.estimators import jackknife_variance, run_estimator
from clustertrial.gee import INDEPENDENCE, SOURCE_SIZE, GeeSpec, fit_gee
from clustertrial.lmm import estimate_lmm, fit_lmm
from clustertrial.nuisance import fit_intercept_only_nuisances, fit_parametric_nuisances
from clustertrial.simulation import ScenarioConfig, generate_dataset, monte_carlo_truth, run_monte_carlo

from conftest import make_dataset
from test_learners import reference_tree_predict
from test_lmm import dense_gls, dense_loglik

WORKERS = os.cpu_count() or 1


def report(number, ok, detail):
    print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def by_method(rows):
    return {(r.estimator_tag, r.level): r for r in rows}


def fmt(row):
    return f"{row.estimator_tag} bias {row.bias:+.3f} ese {row.ese:.3f} ase {row.ase:.3f} cp {row.cp:.3f}"


@pytest.mark.slow
def test_criterion_1_informative_size_continuous():
    config = ScenarioConfig("continuous", 4, m=100, replicates=1000)
    rows = by_method(run_monte_carlo(config, ("unadjusted", "gee-g", "eff-pm"), ("cluster",), WORKERS))
    gee, pm, un = rows["gee-g", "cluster"], rows["eff-pm", "cluster"], rows["unadjusted", "cluster"]
    ok = (1.5 <= gee.bias <= 2.1 and abs(pm.bias) <= 0.15 and 0.91 <= pm.cp <= 0.97
          and abs(un.bias) <= 0.25)
    assert report(1, ok, "; ".join(fmt(r) for r in (gee, pm, un)))


@pytest.mark.slow
def test_criterion_2_efficiency_gain():
    config = ScenarioConfig("continuous", 3, m=100, replicates=1000)
    rows = by_method(run_monte_carlo(config, ("eff-pm", "gee-g", "eff-ml"), ("cluster",), WORKERS))
    pm, gee, ml = rows["eff-pm", "cluster"], rows["gee-g", "cluster"], rows["eff-ml", "cluster"]
    ok = all(abs(r.bias) <= 0.15 and 0.92 <= r.cp <= 0.97 for r in (pm, gee))
    ok = ok and ml.ese ** 2 <= 0.8 * gee.ese ** 2
    detail = "; ".join(fmt(r) for r in (pm, gee, ml))
    assert report(2, ok, f"{detail}; variance ratio ml/gee {ml.ese ** 2 / gee.ese ** 2:.3f}")


@pytest.mark.slow
def test_criterion_3_informative_size_binary():
    config = ScenarioConfig("binary", 4, m=100, replicates=1000)
    rows = by_method(run_monte_carlo(config, ("gee-g", "eff-pm"), ("cluster",), WORKERS))
    gee, pm = rows["gee-g", "cluster"], rows["eff-pm", "cluster"]
    ok = (-0.30 <= gee.bias <= -0.10 and gee.cp <= 0.60
          and abs(pm.bias) <= 0.04 and 0.91 <= pm.cp <= 0.97)
    assert report(3, ok, f"{fmt(gee)}; {fmt(pm)}")


def test_criterion_4_true_estimands():
    sizes = np.array([10.0, 50.0])
    analytic = (np.mean(sizes / 5), np.mean(sizes ** 2 / 5) / np.mean(sizes))
    cont_c, cont_i, _ = monte_carlo_truth("continuous")
    bin_c, bin_i, _ = monte_carlo_truth("binary")
    ok = (analytic == pytest.approx((6.0, 26.0 / 3.0), abs=1e-12)
          and abs(cont_c - analytic[0]) < 0.01 and abs(cont_i - analytic[1]) < 0.01
          and abs(bin_c - 1.54) <= 0.01 and abs(bin_i - 1.18) <= 0.01)
    detail = (f"analytic ({analytic[0]:.4f}, {analytic[1]:.4f}); continuous MC ({cont_c:.4f}, {cont_i:.4f}); "
              f"binary MC ({bin_c:.4f}, {bin_i:.4f})")
    assert report(4, ok, detail)


# -------------------------------------------------- triple robustness

def _shared(d):
    return d.N * np.sin(d.C[:, 0]) * (2 * d.C[:, 1] - 1) / 30


def eta_correct(d, a):
    return np.column_stack([d.expand(d.N), d.expand(_shared(d)), np.exp(d.X[:, 0]) * np.abs(d.X[:, 1])])


def zeta_correct(d, a):
    return np.column_stack([d.N, _shared(d)])


def eta_wrong(d, a):
    return np.column_stack([d.X, d.expand((d.M >= 10).astype(float))])


def zeta_wrong(d, a):
    return np.empty((d.m, 0))


def kappa_wrong(d):
    return d.C[:, :1]


def kappa_correct(d):
    # observed sizes 2, 7, 10, 15 occur only under treatment
    return np.isin(d.M, (2, 7, 10, 15)).astype(float)


ROBUSTNESS_CASES = {
    "kappa-only": dict(eta_design=eta_wrong, zeta_design=zeta_wrong, kappa_fixed=kappa_correct),
    "eta-zeta-only": dict(eta_design=eta_correct, zeta_design=zeta_correct, kappa_design=kappa_wrong),
    "all-wrong": dict(eta_design=eta_wrong, zeta_design=zeta_wrong, kappa_design=kappa_wrong),
}


@pytest.mark.slow
def test_criterion_5_triple_robustness():
    config = ScenarioConfig("continuous", 2, m=1000)
    truth = {Level.CLUSTER: 6.0, Level.INDIVIDUAL: 26.0 / 3.0}
    est = {(c, lv): [] for c in ROBUSTNESS_CASES for lv in truth}
    for rep in range(200):
        data = generate_dataset(config, rep)
        for case, kw in ROBUSTNESS_CASES.items():
            kw = dict(kw)
            if "kappa_fixed" in kw:
                kw["kappa_fixed"] = kw["kappa_fixed"](data)
            nuis = fit_parametric_nuisances(data, **kw)
            for lv in truth:
                est[case, lv].append(estimate_eff(data, EstimandSpec(level=lv), nuis).delta)
    z = {}
    for (case, lv), values in est.items():
        values = np.asarray(values)
        z[case, lv] = (values.mean() - truth[lv]) / (values.std(ddof=1) / np.sqrt(len(values)))
    ok = all(abs(z[c, lv]) < 3 for c in ("kappa-only", "eta-zeta-only") for lv in truth)
    ok = ok and all(abs(z["all-wrong", lv]) >= 3 for lv in truth)
    detail = "; ".join(f"{c}/{lv.value} z={v:+.2f}" for (c, lv), v in z.items())
    assert report(5, ok, detail)


# ----------------------------------------------------- variance audit

SANDWICH_ESTIMATORS = ("unadjusted", "gee-g", "lmm-g", "eff-pm")


@pytest.mark.slow
def test_criterion_6_variance_audit():
    config = ScenarioConfig("continuous", 1, m=100, replicates=200)
    rows = run_monte_carlo(config, workers=WORKERS)
    ratios = {(r.estimator_tag, r.level): r.ase / r.ese for r in rows}
    ok = all(0.85 <= v <= 1.15 for v in ratios.values())
    lines = [f"{k[0]}/{k[1]} ASE/ESE {v:.3f}" for k, v in ratios.items()]

    pairs = {(n, lv): [] for n in SANDWICH_ESTIMATORS for lv in ("cluster", "individual")}
    for rep in range(20):
        data = generate_dataset(config, rep)
        for name, lv in pairs:
            spec = EstimandSpec(level=lv)
            pairs[name, lv].append((run_estimator(name, data, spec).variance,
                                    jackknife_variance(name, data, spec)))
    for key, v in pairs.items():
        v = np.asarray(v)
        agg = v[:, 0].mean() / v[:, 1].mean()
        inside = np.mean(np.abs(v[:, 0] / v[:, 1] - 1) <= 0.15)
        ok = ok and 0.85 <= agg <= 1.15
        lines.append(f"{key[0]}/{key[1]} sandwich/jackknife {agg:.3f} (per-dataset within 15%: {inside:.0%})")
    assert report(6, ok, "; ".join(lines))


# --------------------------------------------------------- oracles

def test_criterion_7_oracle_equivalences():
    rng = np.random.default_rng(17)
    checks = {}

    m = 16
    M = rng.integers(2, 6, size=m)
    N = M + rng.integers(0, 20, size=m)
    X = [rng.normal(size=(k, 2)) for k in M]
    data = make_dataset(rng.normal(size=m), np.tile([0, 1], 8), M, N=N, spread=1.0, X=X)
    fit = fit_gee(data, GeeSpec(correlation=INDEPENDENCE, cluster_weights=SOURCE_SIZE))
    U = np.column_stack([np.ones(len(data.y)), data.expand(data.A), data.expand(data.N), data.X])
    sw = np.sqrt(data.expand(data.N).astype(float))
    wls = np.linalg.lstsq(U * sw[:, None], data.y * sw, rcond=None)[0]
    checks["gee independence == weighted least squares"] = np.max(np.abs(fit.beta - wls)) < 1e-8

    M = rng.integers(2, 6, size=12)
    small = make_dataset(rng.normal(scale=1.5, size=12), np.tile([0, 1], 6), M, spread=1.0,
                         X=[rng.normal(size=(k, 1)) for k in M])
    lf = fit_lmm(small)
    best = dense_loglik(small, lf.alpha, lf.sigma2, lf.tau2)
    grid_max = max(dense_loglik(small, dense_gls(small, s2, t2), s2, t2)
                   for s2 in np.linspace(0.3, 3.0, 20) * lf.sigma2
                   for t2 in np.linspace(0.0, 3.0, 20) * max(lf.tau2, 0.1))
    checks["lmm loglik beats 20x20 grid"] = best >= grid_max - 1e-6

    lr = estimate_lmm(small)
    checks["lmm difference == alpha_A"] = lr.delta == lr.diagnostics["alpha_A"]

    sim = generate_dataset(ScenarioConfig("continuous", 2), 3)
    for lv in (Level.CLUSTER, Level.INDIVIDUAL):
        spec = EstimandSpec(level=lv)
        pm = estimate_eff(sim, spec, fit_intercept_only_nuisances(sim, lv)).delta
        checks[f"constant nuisances == unadjusted ({lv.value})"] = abs(pm - estimate_unadjusted(sim, spec).delta) < 1e-10

    from clustertrial.learners import fit_tree
    tree_ok = True
    for seed in range(40):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 51))
        p = int(r.integers(1, 4))
        Xt = r.integers(0, 8, size=(n, p)).astype(float)
        yt = r.normal(size=n)
        depth, leaf = int(r.integers(1, 4)), int(r.integers(1, 6))
        tree = fit_tree(Xt, yt, depth, leaf)
        tree_ok &= np.allclose(tree.predict(Xt), reference_tree_predict(Xt, yt, Xt, 0, depth, leaf), atol=1e-12)
    checks["tree splits == exhaustive search"] = bool(tree_ok)

    ok = all(checks.values())
    assert report(7, ok, "; ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))


# ------------------------------------------------------- determinism

def test_criterion_8_determinism(tmp_path):
    same = {}
    sim = ["simulate", "--scenario", "1", "--replicates", "10", "--seed", "5"]
    a, b = tmp_path / "w1.csv", tmp_path / "w2.csv"
    assert main(sim + ["--workers", "1", "--out", str(a)]) == 0
    assert main(sim + ["--workers", "2", "--out", str(b)]) == 0
    same["simulate workers 1 vs 2"] = a.read_bytes() == b.read_bytes()

    csv_path = tmp_path / "trial.csv"
    write_dataset_csv(generate_dataset(ScenarioConfig("continuous", 1, m=30), 0), csv_path)
    base = ["analyze", "--data", str(csv_path), "--cluster-covs", "C1,C2", "--indiv-covs", "X1,X2",
            "--estimand", "individual", "--seed", "3"]
    for name in ("unadjusted", "gee-g", "lmm-g", "eff-pm", "eff-ml"):
        outs = [tmp_path / f"{name}-{k}.json" for k in range(3)]
        for out in outs[:2]:
            assert main(base + ["--estimator", name, "--out", str(out)]) == 0
        assert main(["analyze", "--config", str(outs[0]), "--out", str(outs[2])]) == 0
        texts = [o.read_bytes() for o in outs]
        same[f"analyze {name}"] = texts[0] == texts[1] == texts[2]
        assert json.loads(texts[0])["result"]["estimator"] == name
    ok = all(same.values())
    assert report(8, ok, "; ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
