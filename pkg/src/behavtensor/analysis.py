"""Reading a fitted model: variable rankings, memberships, temporal profiles,
and metadata comparisons between the top members of each component."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cp import CPModel
from .stats import (
    SampleGroup,
    TestResult,
    kde,
    kruskal_wallis,
    ks_two_sample,
    one_way_anova,
    welch_t_test,
    write_kde,
    write_test_results,
)

__all__ = [
    "Membership",
    "MetadataTable",
    "GroupComparison",
    "read_metadata",
    "top_variables",
    "top_individuals",
    "temporal_profile",
    "compare_groups",
    "write_report",
]

log = logging.getLogger(__name__)

TESTS = {
    "welch_t": welch_t_test,
    "ks": ks_two_sample,
    "anova": one_way_anova,
    "kruskal": kruskal_wallis,
}
_TWO_SAMPLE = {"welch_t", "ks"}


@dataclass
class Membership:
    component: int  # 1-based
    individuals: list  # (label, weight), descending
    cutoff_fraction: float

    @property
    def labels(self) -> list:
        return [lab for lab, _ in self.individuals]


class MetadataTable:
    """One real value per (user_id, metric)."""

    def __init__(self, entries=None):
        self._data: dict = {}
        for (user, metric), value in (entries or {}).items():
            self.set(user, metric, value)

    def set(self, user, metric, value):
        key = (str(user), str(metric))
        if key in self._data:
            raise ValueError(f"duplicate metadata value for user {key[0]!r}, metric {key[1]!r}")
        self._data[key] = float(value)

    def get(self, user, metric, default=None):
        return self._data.get((str(user), str(metric)), default)

    @property
    def metrics(self) -> list:
        return sorted({m for _, m in self._data})

    def __len__(self):
        return len(self._data)


def read_metadata(path) -> MetadataTable:
    table = MetadataTable()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["user_id", "metric", "value"]:
            raise ValueError(f"{path}:1: header must be user_id,metric,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            try:
                value = float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value {row[2]!r}") from None
            if not math.isfinite(value):
                continue
            try:
                table.set(row[0], row[1], value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return table


def _component(model: CPModel, r: int) -> int:
    if not 1 <= r <= model.rank:
        raise ValueError(f"component must lie in 1..{model.rank}, got {r}")
    return r - 1


def _ranked(column: np.ndarray, labels, count: int) -> list:
    order = np.argsort(-column, kind="stable")[:count]
    return [(labels[i], float(column[i])) for i in order]


def top_variables(model: CPModel, r: int, k: int, variables=None) -> list:
    """The ``k`` heaviest variables of component ``r`` (1-based), heaviest first."""
    c = _component(model, r)
    J = model.dims[1]
    if not 1 <= k <= J:
        raise ValueError(f"k must lie in 1..{J}, got {k}")
    labels = list(variables) if variables is not None else list(range(J))
    return _ranked(model.V[:, c], labels, k)


def top_individuals(model: CPModel, r: int, fraction: float = 0.25, individuals=None) -> Membership:
    """The ``ceil(fraction * I)`` individuals loading most on component ``r``."""
    c = _component(model, r)
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    I = model.dims[0]
    labels = list(individuals) if individuals is not None else list(range(I))
    # round before ceil so 0.25 * 48 does not become 13 through float error
    count = math.ceil(round(fraction * I, 9))
    return Membership(r, _ranked(model.U[:, c], labels, count), fraction)


def temporal_profile(model: CPModel, r: int, days=None) -> list:
    c = _component(model, r)
    K = model.dims[2]
    days = list(days) if days is not None else list(range(K))
    return [(d, float(v)) for d, v in zip(days, model.T[:, c])]


@dataclass
class GroupComparison:
    metric: str
    test_name: str
    omnibus: TestResult | None
    pairwise: list
    kde: list
    group_sizes: dict
    dropped: dict  # component -> members without the metric
    excluded_groups: list = field(default_factory=list)

    @property
    def results(self) -> list:
        return ([self.omnibus] if self.omnibus else []) + list(self.pairwise)


def compare_groups(memberships, metadata: MetadataTable, metric: str,
                   test_name: str = "welch_t") -> GroupComparison:
    """Compare ``metric`` across the member sets of several components.

    Members lacking the metric are dropped and counted; components left with
    fewer than two values are excluded. Two-sample tests (``welch_t``, ``ks``)
    run on every pair; ``anova`` and ``kruskal`` run once over all groups and
    on every pair. A KDE curve is produced per group.
    """
    if test_name not in TESTS:
        raise ValueError(f"unknown test {test_name!r}; choose from {sorted(TESTS)}")
    test = TESTS[test_name]
    groups, dropped, excluded = [], {}, []
    for m in memberships:
        vals = [metadata.get(lab, metric) for lab in m.labels]
        kept = [v for v in vals if v is not None]
        dropped[m.component] = len(vals) - len(kept)
        if len(kept) < 2:
            excluded.append(m.component)
            continue
        groups.append(SampleGroup(f"comp{m.component}", kept))
    if len(groups) < 2:
        raise ValueError(f"metric {metric!r}: fewer than 2 components have >= 2 members with values")
    if dropped and any(dropped.values()):
        log.info("metric %s: dropped members without a value %s", metric, dropped)
    omnibus = None if test_name in _TWO_SAMPLE else test(groups)
    if test_name in _TWO_SAMPLE:
        pairwise = [test(a, b) for a, b in itertools.combinations(groups, 2)]
    else:
        pairwise = [test([a, b]) for a, b in itertools.combinations(groups, 2)]
    curves = [kde(g) for g in groups]
    sizes = {g.label: g.n for g in groups}
    return GroupComparison(metric, test_name, omnibus, pairwise, curves, sizes, dropped, excluded)


# --- report directory --------------------------------------------------------


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_report(out_dir, model: CPModel, labels=None, metadata: MetadataTable | None = None,
                 metrics=(), test_name: str = "welch_t", fraction: float = 0.25,
                 k: int = 15, model_path=None, config: dict | None = None) -> dict:
    """Write per-component and per-metric CSVs plus ``manifest.json`` into ``out_dir``.

    Returns the manifest. ``labels`` is the (individuals, variables, days)
    triple; indices are used where it is absent.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    individuals, variables, days = labels if labels is not None else (None, None, None)
    k = min(k, model.dims[1])
    files = []
    memberships = []
    for r in range(1, model.rank + 1):
        name = f"component{r}_top_variables.csv"
        _write_rows(out / name, ["rank", "variable", "weight"],
                    [(n, v, w) for n, (v, w) in enumerate(top_variables(model, r, k, variables), 1)])
        files.append(name)
        mem = top_individuals(model, r, fraction, individuals)
        memberships.append(mem)
        name = f"component{r}_membership.csv"
        _write_rows(out / name, ["rank", "user_id", "weight"],
                    [(n, u, w) for n, (u, w) in enumerate(mem.individuals, 1)])
        files.append(name)
        name = f"component{r}_temporal.csv"
        _write_rows(out / name, ["day", "weight"], temporal_profile(model, r, days))
        files.append(name)

    comparisons = {}
    for metric in metrics:
        cmp = compare_groups(memberships, metadata, metric, test_name)
        comparisons[metric] = {
            "group_sizes": cmp.group_sizes,
            "dropped": {str(c): n for c, n in cmp.dropped.items()},
            "excluded_components": cmp.excluded_groups,
        }
        name = f"metric_{metric}_tests.csv"
        write_test_results(cmp.results, out / name)
        files.append(name)
        for curve in cmp.kde:
            name = f"metric_{metric}_kde_{curve.label}.csv"
            write_kde(curve, out / name)
            files.append(name)

    manifest = {
        "model_sha256": file_sha256(model_path) if model_path else None,
        "rank": model.rank,
        "fraction": fraction,
        "k": k,
        "test": test_name,
        "metrics": comparisons,
        "config": config or {},
        "files": {name: file_sha256(out / name) for name in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
