"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 4 and 6 fit
cohort-sized tensors and dominate the runtime (tens of minutes on one core).
"""

import itertools
import math
import time

import mpmath as mp
import numpy as np
import pytest

from behavtensor.analysis import MetadataTable, compare_groups, top_individuals
from behavtensor.cli import main
from behavtensor.cp import CPModel, FitConfig, fit, fit_restarts, hals_sweep, init_random, normalize_columns
from behavtensor.diagnostics import (
    SynthSpec,
    core_tensor,
    corcondia,
    factor_match_score,
    gen_synthetic,
    rank_scan,
    select_rank,
)
from behavtensor.featurize import impute_mean
from behavtensor.special import chi2_sf, f_sf, kolmogorov_sf, t_sf
from behavtensor.stats import kde, ks_one_sample, one_way_anova, pooled_t_test, welch_t_test
from behavtensor.tensor import khatri_rao, mttkrp, reconstruct, refold, relative_error, unfold

COHORT_DIMS = (48, 85, 66)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# --- 1. kernels --------------------------------------------------------------

def loop_unfold(x, mode):
    I, J, K = x.shape
    if mode == 1:
        out = np.empty((I, J * K))
        for i, j, k in itertools.product(range(I), range(J), range(K)):
            out[i, j + J * k] = x[i, j, k]
    elif mode == 2:
        out = np.empty((J, I * K))
        for i, j, k in itertools.product(range(I), range(J), range(K)):
            out[j, i + I * k] = x[i, j, k]
    else:
        out = np.empty((K, I * J))
        for i, j, k in itertools.product(range(I), range(J), range(K)):
            out[k, i + I * j] = x[i, j, k]
    return out


def loop_khatri_rao(a, b):
    out = np.empty((a.shape[0] * b.shape[0], a.shape[1]))
    for i, j in itertools.product(range(a.shape[0]), range(b.shape[0])):
        out[i * b.shape[0] + j] = a[i] * b[j]
    return out


def loop_mttkrp(x, factors, mode):
    I, J, K = x.shape
    R = factors[0].shape[1]
    U, V, T = factors
    out = np.zeros((x.shape[mode - 1], R))
    for i, j, k in itertools.product(range(I), range(J), range(K)):
        row = {1: i, 2: j, 3: k}[mode]
        w = {1: V[j] * T[k], 2: U[i] * T[k], 3: U[i] * V[j]}[mode]
        out[row] += x[i, j, k] * w
    return out


def test_criterion_1_kernel_oracles(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_kr = worst_mt = worst_cp = 0.0
    roundtrip = True
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
        R = int(rng.integers(1, 5))
        x = rng.standard_normal(dims)
        for mode in (1, 2, 3):
            m = unfold(x, mode)
            roundtrip &= np.array_equal(m, loop_unfold(x, mode))
            roundtrip &= np.array_equal(refold(m, mode, dims), x)
        factors = [rng.standard_normal((d, R)) for d in dims]
        worst_kr = max(worst_kr, np.abs(khatri_rao(factors[2], factors[1])
                                        - loop_khatri_rao(factors[2], factors[1])).max())
        for mode in (1, 2, 3):
            worst_mt = max(worst_mt, np.abs(mttkrp(x, factors, mode)
                                            - loop_mttkrp(x, factors, mode)).max())
        model = CPModel(np.ones(R), factors)
        U, V, T = factors
        worst_cp = max(worst_cp, np.abs(unfold(reconstruct(model), 1) - U @ khatri_rao(T, V).T).max())
    elapsed = time.perf_counter() - t0
    ok = roundtrip and worst_kr <= 1e-12 and worst_mt <= 1e-12 and worst_cp <= 1e-10 and elapsed < 5
    verdict(capsys, 1, ok, f"100 trials, round-trip exact={roundtrip}, khatri_rao {worst_kr:.1e}, "
                           f"mttkrp {worst_mt:.1e}, CP identity {worst_cp:.1e}, {elapsed:.2f}s")


# --- 2. descent --------------------------------------------------------------

def test_criterion_2_hals_descent(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = -math.inf
    bad = 0
    for seed in range(100):
        dims = tuple(int(d) for d in rng.integers(2, 11, size=3))
        x = rng.random(dims)
        model = init_random(dims, int(rng.integers(1, 5)), seed)
        sweep_rng = np.random.default_rng(seed)
        prev = relative_error(x, model)
        for _ in range(30):
            model = hals_sweep(x, model, rng=sweep_rng)
            err = relative_error(x, model)
            rise = (err - prev) / prev
            worst = max(worst, rise)
            bad += rise > 1e-9
            prev = err
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 30
    verdict(capsys, 2, ok, f"100 pairs x 30 sweeps, violations {bad}, largest relative rise "
                           f"{worst:.1e}, {elapsed:.1f}s")


# --- 3. exact recovery -------------------------------------------------------

def test_criterion_3_exact_recovery(capsys):
    t0 = time.perf_counter()
    hits = []
    for seed in range(10):
        ds, truth = gen_synthetic(SynthSpec((20, 30, 25), 3, seed=seed))
        model, _ = fit_restarts(ds.tensor, FitConfig(rank=3, seed=seed, n_restarts=10))
        err = relative_error(ds.tensor, model)
        fms = factor_match_score(model, truth)
        hits.append(err <= 1e-6 and fms >= 0.999)
    elapsed = time.perf_counter() - t0
    ok = sum(hits) >= 9 and elapsed < 60
    verdict(capsys, 3, ok, f"{sum(hits)}/10 seeds with error <= 1e-6 and FMS >= 0.999, {elapsed:.1f}s")


# --- 4. cohort-shaped robustness ----------------------------------------------

def cohort_shaped(seed):
    ds, truth = gen_synthetic(SynthSpec(COHORT_DIMS, 3, noise_snr_db=20, missing_frac=0.05, seed=seed))
    return impute_mean(ds).tensor, truth


@pytest.mark.slow
def test_criterion_4_cohort_shape_recovery(capsys):
    t0 = time.perf_counter()
    scores = []
    for seed in range(10):
        x, truth = cohort_shaped(seed)
        model, _ = fit_restarts(x, FitConfig(rank=3, seed=seed, n_restarts=10))
        scores.append(factor_match_score(model, truth))
    elapsed = time.perf_counter() - t0
    hits = sum(s >= 0.90 for s in scores)
    ok = hits >= 8 and elapsed < 300
    verdict(capsys, 4, ok, f"{hits}/10 seeds with FMS >= 0.90 (min {min(scores):.4f}), {elapsed:.0f}s")


# --- 5. core consistency -----------------------------------------------------

def dense_core(x, model):
    scale = np.cbrt(model.weights)
    U, V, T = (f * scale for f in model.factors)
    design = np.kron(np.kron(T, V), U)
    sol, *_ = np.linalg.lstsq(design, x.reshape(-1, order="F"), rcond=None)
    R = model.rank
    return sol.reshape((R, R, R), order="F")


def test_criterion_5_corcondia(capsys):
    exact_ok, lower_ok, details = True, True, []
    for seed in range(5):
        ds, _ = gen_synthetic(SynthSpec((8, 9, 10), 3, seed=seed))
        scan = rank_scan(ds.tensor, [3, 4], n_init=10, seed=0)
        samples3 = scan.samples[3]
        exact_ok &= min(samples3) >= 99
        lower_ok &= scan.mean_cc[1] < scan.mean_cc[0]
        details.append(f"{scan.mean_cc[0]:.1f}>{scan.mean_cc[1]:.1f}")
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(30):
        dims = tuple(int(d) for d in rng.integers(2, 6, size=3))
        R = int(rng.integers(1, min(dims) + 1))
        x = rng.random(dims)
        model = normalize_columns(CPModel(np.ones(R), [rng.random((d, R)) for d in dims]))
        worst = max(worst, np.abs(core_tensor(x, model) - dense_core(x, model)).max())
    ok = exact_ok and lower_ok and worst <= 1e-8
    verdict(capsys, 5, ok, f"R=3 all >= 99: {exact_ok}; mean R3>R4 per seed [{', '.join(details)}]; "
                           f"dense oracle gap {worst:.1e}")


# --- 6. rank selection -------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_rank_selection(capsys):
    t0 = time.perf_counter()
    chosen, clamped_ok, saw_negative = [], True, False
    for seed in range(10):
        x, _ = cohort_shaped(seed)
        scan = rank_scan(x, range(1, 10), n_init=10, seed=0)
        chosen.append(select_rank(scan))
        for r, mean, std in zip(scan.ranks, scan.mean_cc, scan.std_cc):
            raw = np.asarray(scan.samples[r])
            saw_negative |= bool((raw < 0).any())
            clamped_ok &= math.isclose(mean, float(np.maximum(raw, 0).mean()), abs_tol=1e-12)
            clamped_ok &= mean >= 0 and (std is None) == bool(np.all(raw <= 0))
    elapsed = time.perf_counter() - t0
    hits = chosen.count(3)
    ok = hits >= 8 and clamped_ok and saw_negative
    verdict(capsys, 6, ok, f"selected {chosen}, R=3 in {hits}/10; negatives present={saw_negative}, "
                           f"clamped={clamped_ok}, {elapsed:.0f}s")


# --- 7. statistics accuracy --------------------------------------------------

mp.mp.dps = 30


def _mp_t_sf(t, df):
    df = mp.mpf(df)
    c = mp.gamma((df + 1) / 2) / (mp.sqrt(df * mp.pi) * mp.gamma(df / 2))
    return mp.quad(lambda u: c * (1 + u * u / df) ** (-(df + 1) / 2), [t, mp.inf])


def _mp_f_sf(f, d1, d2):
    d1, d2 = mp.mpf(d1), mp.mpf(d2)
    c = (d1 / d2) ** (d1 / 2) / mp.beta(d1 / 2, d2 / 2)
    return 1 - mp.quad(lambda u: c * u ** (d1 / 2 - 1) * (1 + d1 * u / d2) ** (-(d1 + d2) / 2),
                       [0, f])


def _mp_chi2_sf(x, df):
    k = mp.mpf(df) / 2
    return mp.quad(lambda u: u ** (k - 1) * mp.exp(-u / 2) / (2 ** k * mp.gamma(k)), [x, mp.inf])


def _mp_kolmogorov_sf(lam):
    lam = mp.mpf(lam)
    s = mp.nsum(lambda k: mp.exp(-(2 * k - 1) ** 2 * mp.pi ** 2 / (8 * lam ** 2)), [1, mp.inf])
    return 1 - mp.sqrt(2 * mp.pi) / lam * s


def test_criterion_7_statistics_accuracy(capsys):
    rng = np.random.default_rng(7)
    stat = np.linspace(0.05, 8.0, 50)
    df = rng.uniform(1, 60, 50)
    d2 = rng.uniform(2, 80, 50)
    lam = np.linspace(0.2, 3.0, 50)
    gaps = {
        "t": max(abs(t_sf(s, d) - float(_mp_t_sf(s, d))) for s, d in zip(stat, df)),
        "F": max(abs(f_sf(s, d, e) - float(_mp_f_sf(s, d, e))) for s, d, e in zip(stat, df / 6 + 0.5, d2)),
        "chi2": max(abs(chi2_sf(3 * s, d / 3) - float(_mp_chi2_sf(3 * s, d / 3))) for s, d in zip(stat, df)),
        "KS": max(abs(kolmogorov_sf(l) - float(_mp_kolmogorov_sf(l))) for l in lam),
    }
    ft = 0.0
    for _ in range(50):
        a, b = rng.normal(size=int(rng.integers(2, 30))), rng.normal(0.5, 1, int(rng.integers(2, 30)))
        ft = max(ft, abs(one_way_anova([a, b]).statistic - pooled_t_test(a, b).statistic ** 2)
                 / max(1.0, pooled_t_test(a, b).statistic ** 2))
    areas = []
    for n in (10, 50, 400):
        c = kde(rng.gamma(2.0, 1.0, n))
        areas.append(float(np.sum(np.diff(c.grid) * (c.density[1:] + c.density[:-1]) / 2)))
    ok = max(gaps.values()) <= 1e-6 and ft <= 1e-10 and all(0.97 <= a <= 1.0 for a in areas)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in gaps.items())
    verdict(capsys, 7, ok, f"max |p - oracle|: {detail}; F-t^2 {ft:.1e}; "
                           f"KDE areas {[round(a, 4) for a in areas]}")


# --- 8. validation pipeline --------------------------------------------------

def test_criterion_8_validation_shape(capsys):
    rng = np.random.default_rng(8)
    I, R = 48, 3
    U = 0.05 * rng.random((I, R))
    for r in range(R):
        U[16 * r:16 * (r + 1), r] += 1.0  # disjoint member blocks
    truth = CPModel([6.0, 5.0, 4.0], [U, rng.random((20, R)), rng.random((15, R))])
    model, _ = fit_restarts(reconstruct(truth), FitConfig(rank=R, seed=0, n_restarts=3))
    labels = [f"s{i:02d}" for i in range(I)]
    mems = [top_individuals(model, r, 0.25, labels) for r in range(1, R + 1)]
    shifted = next(m for m in mems if all(16 <= int(l[1:]) < 32 for l in m.labels))

    md = MetadataTable()
    for i, lab in enumerate(labels):
        md.set(lab, "extraversion", rng.normal() + (3.0 if lab in shifted.labels else 0.0))
    welch = compare_groups(mems, md, "extraversion", "welch_t")
    shifted_p = [r.p_value for r in welch.pairwise if shifted.component in
                 {int(g[4:]) for g in r.group_labels}]
    anova_p = compare_groups(mems, md, "extraversion", "anova").omnibus.p_value

    null_welch, null_anova = [], []
    for rep in range(200):
        md = MetadataTable({(lab, "noise"): v for lab, v in zip(labels, rng.normal(size=I))})
        null_welch.append(compare_groups(mems, md, "noise", "welch_t").pairwise[0].p_value)
        null_anova.append(compare_groups(mems, md, "noise", "anova").omnibus.p_value)
    uniform = lambda v: np.clip(v, 0, 1)
    ks_w = ks_one_sample(null_welch, uniform).p_value
    ks_a = ks_one_sample(null_anova, uniform).p_value
    ok = max(shifted_p) < 0.01 and anova_p < 0.01 and ks_w > 0.01 and ks_a > 0.01
    verdict(capsys, 8, ok, f"shifted pairwise Welch max p {max(shifted_p):.1e}, ANOVA p {anova_p:.1e}; "
                           f"null p-value uniformity KS p: Welch {ks_w:.3f}, ANOVA {ks_a:.3f}")


# --- 9. end-to-end determinism ----------------------------------------------

def _pipeline(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    (workdir / "meta.csv").write_text(
        "user_id,metric,value\n" + "".join(f"u{i:03d},gpa,{(i * 7) % 5 + 0.5 * i}\n" for i in range(24)))
    codes = [
        main(["synth", "--dims", "24,12,10", "--rank", "3", "--seed", "4", "--snr-db", "25",
              "--missing-frac", "0.05", "--out", "syn.tensor"]),
        main(["fit", "--tensor", "syn.tensor", "--rank", "3", "--restarts", "4", "--seed", "7",
              "--truth", "syn.tensor.truth.model", "--out", "fit.model"]),
        main(["report", "--model", "fit.model", "--metadata", "meta.csv", "--metrics", "gpa",
              "--test", "anova", "--out-dir", "report"]),
    ]
    files = {p.relative_to(workdir).as_posix(): p.read_bytes()
             for p in sorted(workdir.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_9_end_to_end_determinism(capsys, tmp_path, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, files_b = _pipeline(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    same = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    differing = sorted(k for k in files_a if files_b.get(k) != files_a[k])
    ok = codes_a == codes_b == [0, 0, 0] and same and len(files_a) > 10
    verdict(capsys, 9, ok, f"exit codes {codes_a}/{codes_b}, {len(files_a)} artifacts, "
                           f"byte-identical={same}" + (f", differing {differing}" if differing else ""))
