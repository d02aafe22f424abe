import json

import numpy as np
import pytest

from behavtensor.analysis import (
    MetadataTable,
    compare_groups,
    read_metadata,
    temporal_profile,
    top_individuals,
    top_variables,
    write_report,
)
from behavtensor.cp import CPModel, FitConfig, fit, normalize_columns, write_model
from behavtensor.stats import pooled_t_test
from behavtensor.tensor import reconstruct

from conftest import random_model


def test_top_variables_full_and_one_hot(rng):
    m = normalize_columns(random_model(rng, (5, 6, 4), 2))
    full = top_variables(m, 1, 6)
    assert sorted(j for j, _ in full) == list(range(6))
    assert [w for _, w in full] == sorted(m.V[:, 0], reverse=True)
    V = m.V.copy()
    V[:, 1] = np.eye(6)[4]
    hot = CPModel(m.weights, [m.U, V, m.T])
    assert top_variables(hot, 2, 1, list("abcdef")) == [("e", 1.0)]


def test_top_variables_ties_and_errors():
    m = CPModel([1.0], [np.ones((2, 1)), np.array([[0.5], [0.7], [0.5], [0.7]]), np.ones((2, 1))])
    assert [j for j, _ in top_variables(m, 1, 4)] == [1, 3, 0, 2]
    with pytest.raises(ValueError):
        top_variables(m, 2, 1)
    with pytest.raises(ValueError):
        top_variables(m, 1, 5)
    with pytest.raises(ValueError):
        top_variables(m, 0, 1)


def test_top_variables_planted_block():
    rng = np.random.default_rng(3)
    V = rng.random((12, 2)) * 0.05
    V[:, 0] = 0.0
    V[[3, 7], 0] = [1.0, 0.8]
    truth = CPModel([5.0, 3.0], [rng.random((10, 2)), V, rng.random((8, 2))])
    model, _ = fit(reconstruct(truth), FitConfig(rank=2, seed=0, n_restarts=3))
    comp = int(np.argmax([model.V[3, r] + model.V[7, r] for r in range(2)])) + 1
    assert {j for j, _ in top_variables(model, comp, 2)} == {3, 7}


def test_top_individuals_counts(rng):
    m = normalize_columns(random_model(rng, (48, 5, 6), 3))
    mem = top_individuals(m, 2)
    assert len(mem.individuals) == 12
    w = [x for _, x in mem.individuals]
    assert w == sorted(w, reverse=True)
    assert len(top_individuals(m, 1, 1.0).individuals) == 48
    assert len(top_individuals(m, 1, 0.1).individuals) == 5
    with pytest.raises(ValueError):
        top_individuals(m, 1, 0.0)


def test_rankings_invariant_to_weight_scale(rng):
    m = normalize_columns(random_model(rng, (20, 9, 7), 3))
    scaled = CPModel(m.weights * [7.0, 0.01, 3.0], m.factors)
    for r in (1, 2, 3):
        assert top_individuals(m, r).individuals == top_individuals(scaled, r).individuals
        assert top_variables(m, r, 5) == top_variables(scaled, r, 5)


def test_temporal_profile_rows(rng):
    m = normalize_columns(random_model(rng, (4, 5, 66), 2))
    prof = temporal_profile(m, 1)
    assert len(prof) == 66 and prof[0][0] == 0
    assert max(v for _, v in prof) <= 1


def test_temporal_ramp_recovered():
    rng = np.random.default_rng(5)
    K = 30
    T = rng.random((K, 3))
    T[:, 1] = np.arange(1, K + 1)
    unit = normalize_columns(CPModel([1.0] * 3, [rng.random((12, 3)), rng.random((10, 3)), T]))
    truth = CPModel([5.0, 4.0, 3.0], unit.factors)  # comparable component sizes
    x = reconstruct(truth).values
    x = x + 0.01 * np.linalg.norm(x) / np.sqrt(x.size) * rng.standard_normal(x.shape)
    model, _ = fit(np.maximum(x, 0), FitConfig(rank=3, seed=0))
    best = max(np.corrcoef(model.T[:, r], T[:, 1])[0, 1] for r in range(3))
    assert best >= 0.95


def _memberships(sizes):
    from behavtensor.analysis import Membership

    out, start = [], 0
    for r, n in enumerate(sizes, 1):
        out.append(Membership(r, [(f"u{start + i}", 1.0) for i in range(n)], 0.25))
        start += n
    return out


def test_compare_identical_values():
    mems = _memberships([5, 5, 5])
    md = MetadataTable()
    vals = [1.0, 2.0, 4.0, 3.0, 7.0]
    for m in mems:
        for lab, v in zip(m.labels, vals):
            md.set(lab, "gpa", v)
    cmp = compare_groups(mems, md, "gpa")
    assert cmp.omnibus is None and len(cmp.pairwise) == 3
    assert all(r.p_value == pytest.approx(1.0) for r in cmp.pairwise)
    assert len(cmp.kde) == 3


def test_compare_shifted_group():
    rng = np.random.default_rng(11)
    mems = _memberships([12, 12, 12])
    md = MetadataTable()
    for m in mems:
        shift = 3.0 if m.component == 2 else 0.0
        for lab in m.labels:
            md.set(lab, "extraversion", rng.normal(shift, 1.0))
    cmp = compare_groups(mems, md, "extraversion")
    p = {r.group_labels: r.p_value for r in cmp.pairwise}
    assert p[("comp1", "comp2")] < 0.01 and p[("comp2", "comp3")] < 0.01
    anova = compare_groups(mems, md, "extraversion", "anova")
    assert anova.omnibus.p_value < 0.01 and len(anova.pairwise) == 3


def test_compare_drops_missing():
    mems = _memberships([4, 5])
    md = MetadataTable({(lab, "gpa"): float(i) for i, lab in enumerate(mems[0].labels + mems[1].labels)
                        if lab not in {"u1", "u6", "u7"}})
    cmp = compare_groups(mems, md, "gpa", "kruskal")
    assert cmp.dropped == {1: 1, 2: 2}
    assert cmp.group_sizes == {"comp1": 3, "comp2": 3}
    assert cmp.omnibus is not None


def test_compare_anova_two_groups_is_t_squared(rng):
    mems = _memberships([6, 8])
    md = MetadataTable()
    for m in mems:
        for lab in m.labels:
            md.set(lab, "x", rng.normal(m.component, 1))
    cmp = compare_groups(mems, md, "x", "anova")
    a = [md.get(l, "x") for l in mems[0].labels]
    b = [md.get(l, "x") for l in mems[1].labels]
    assert cmp.omnibus.statistic == pytest.approx(pooled_t_test(a, b).statistic ** 2, rel=1e-10)


def test_compare_errors():
    mems = _memberships([3, 3])
    md = MetadataTable({("u0", "gpa"): 1.0, ("u1", "gpa"): 2.0, ("u3", "gpa"): 1.0})
    with pytest.raises(ValueError, match="fewer than 2"):
        compare_groups(mems, md, "gpa")
    with pytest.raises(ValueError, match="unknown test"):
        compare_groups(mems, md, "gpa", "sign")


def test_metadata_reader(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("user_id,metric,value\na,gpa,3.5\nb,gpa,nan\na,sleep,7\n")
    md = read_metadata(p)
    assert md.get("a", "gpa") == 3.5 and md.get("b", "gpa") is None
    assert md.metrics == ["gpa", "sleep"]
    p.write_text("user_id,metric,value\na,gpa,3.5\na,gpa,3.0\n")
    with pytest.raises(ValueError, match="m.csv:3"):
        read_metadata(p)


def test_write_report(tmp_path, rng):
    m = normalize_columns(random_model(rng, (16, 20, 10), 2))
    labels = ([f"s{i}" for i in range(16)], [f"v{j}" for j in range(20)], list(range(10)))
    md = MetadataTable({(u, "gpa"): rng.normal() for u in labels[0]})
    write_model(m, tmp_path / "m.model")
    manifest = write_report(tmp_path / "rep", m, labels, md, ["gpa"], model_path=tmp_path / "m.model",
                            config={"seed": 1})
    rep = tmp_path / "rep"
    assert (rep / "component2_top_variables.csv").read_text().count("\n") == 16
    assert (rep / "component1_membership.csv").read_text().count("\n") == 5
    assert (rep / "component1_temporal.csv").read_text().count("\n") == 11
    assert (rep / "metric_gpa_tests.csv").exists()
    assert (rep / "metric_gpa_kde_comp2.csv").exists()
    on_disk = json.loads((rep / "manifest.json").read_text())
    assert on_disk["model_sha256"] == manifest["model_sha256"] and len(on_disk["model_sha256"]) == 64
    assert on_disk["config"] == {"seed": 1} and on_disk["k"] == 15
