"""Turn inferred behavioral event logs into an individuals x variables x days tensor.

Each day is cut into four local-time bins (bedtime 00-06, morning 06-12,
afternoon 12-18, evening 18-24). Per bin and per user-day we compute
durations (minutes), frequencies (number of intervals touching the bin),
state transitions within a stream, and counts of distinct location or
device identifiers. Which of these become tensor variables, and in which
order, is set by a :class:`FeatureSchema`.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .tensor import Tensor3

__all__ = [
    "TIME_BINS",
    "STREAM_STATES",
    "FEATURE_KINDS",
    "EventRecord",
    "Variable",
    "FeatureSchema",
    "TensorDataset",
    "default_schema",
    "read_schema",
    "write_schema",
    "read_events",
    "write_events",
    "assign_bins",
    "bin_features",
    "build_tensor",
    "minmax_normalize",
    "impute_mean",
    "tensorize",
    "simulate_events",
    "write_dataset",
    "read_labels",
    "labels_path_for",
]

log = logging.getLogger(__name__)

TIME_BINS = ("bedtime", "morning", "afternoon", "evening")
_BIN_START_HOURS = (0, 6, 12, 18)

# None marks identifier streams whose states are open-ended
STREAM_STATES = {
    "activity": frozenset({"stationary", "walk", "run", "unknown"}),
    "audio": frozenset({"silence", "voice", "noise", "unknown"}),
    "conversation": frozenset({"conversation"}),
    "dark": frozenset({"dark"}),
    "gps_location": None,
    "wifi_location": None,
    "bluetooth": None,
}
FEATURE_KINDS = ("duration", "frequency", "transitions", "unique_count")


@dataclass(frozen=True)
class EventRecord:
    user_id: str
    stream: str
    state: str
    start: float
    end: float

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"record ends before it starts: {self}")


@dataclass(frozen=True)
class Variable:
    stream: str
    state: str | None
    kind: str
    time_bin: str

    @property
    def name(self) -> str:
        parts = [self.stream] + ([self.state] if self.state else []) + [self.kind, self.time_bin]
        return ".".join(parts)


@dataclass
class FeatureSchema:
    variables: list
    study_start_date: date
    n_days: int
    timezone: str = "UTC"

    def __post_init__(self):
        if isinstance(self.study_start_date, str):
            self.study_start_date = date.fromisoformat(self.study_start_date)
        if self.n_days < 1:
            raise ValueError(f"n_days must be positive, got {self.n_days}")
        if not self.variables:
            raise ValueError("schema defines no variables")
        ZoneInfo(self.timezone)
        names = [v.name for v in self.variables]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate variable names in schema: {dupes}")
        for v in self.variables:
            _check_variable(v)

    @property
    def names(self) -> list:
        return [v.name for v in self.variables]

    @property
    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)


def _check_variable(v: Variable):
    if v.stream not in STREAM_STATES:
        raise ValueError(f"unknown stream {v.stream!r} in variable {v.name}")
    if v.kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {v.kind!r} in variable {v.name}")
    if v.time_bin not in TIME_BINS:
        raise ValueError(f"unknown time bin {v.time_bin!r} in variable {v.name}")
    states = STREAM_STATES[v.stream]
    if v.kind in ("duration", "frequency"):
        if not v.state:
            raise ValueError(f"{v.kind} variable {v.name} needs a state")
        if states is not None and v.state not in states:
            raise ValueError(f"state {v.state!r} is not valid for stream {v.stream!r}")
    else:
        if v.state:
            raise ValueError(f"{v.kind} variable {v.name} must not name a state")
        if v.kind == "unique_count" and states is not None:
            raise ValueError(f"unique_count applies to identifier streams, not {v.stream!r}")


@dataclass
class TensorDataset:
    tensor: Tensor3
    individuals: list
    variables: list
    days: list
    imputed: dict | None = None  # variable name -> number of cells filled
    dropped_records: int = 0

    def __post_init__(self):
        I, J, K = self.tensor.dims
        if (len(self.individuals), len(self.variables), len(self.days)) != (I, J, K):
            raise ValueError(
                f"axis labels ({len(self.individuals)}, {len(self.variables)}, {len(self.days)}) "
                f"do not match tensor dims {(I, J, K)}"
            )

    @property
    def missing_fraction(self) -> float:
        return self.tensor.n_missing / self.tensor.values.size


def default_schema(study_start_date="2013-03-27", n_days: int = 66,
                   timezone: str = "America/New_York") -> FeatureSchema:
    """84 variables: durations and frequencies of eight behaviors, activity and
    audio transitions, and distinct GPS places, WiFi places and Bluetooth
    devices, each per time bin."""
    behaviors = [
        ("activity", "stationary"), ("activity", "walk"), ("activity", "run"),
        ("audio", "silence"), ("audio", "voice"), ("audio", "noise"),
        ("dark", "dark"), ("conversation", "conversation"),
    ]
    variables = []
    for kind in ("duration", "frequency"):
        for stream, state in behaviors:
            variables += [Variable(stream, state, kind, b) for b in TIME_BINS]
    for stream in ("activity", "audio"):
        variables += [Variable(stream, None, "transitions", b) for b in TIME_BINS]
    for stream in ("gps_location", "wifi_location", "bluetooth"):
        variables += [Variable(stream, None, "unique_count", b) for b in TIME_BINS]
    return FeatureSchema(variables, study_start_date, n_days, timezone)


# --- schema / events I/O -----------------------------------------------------


def write_schema(schema: FeatureSchema, path) -> None:
    """Header ``key = value`` lines, then a ``[variables]`` CSV block in axis order."""
    lines = [
        "# behavtensor feature schema",
        f"study_start_date = {schema.study_start_date.isoformat()}",
        f"n_days = {schema.n_days}",
        f"timezone = {schema.timezone}",
        "[variables]",
        "stream,state,kind,time_bin",
    ]
    lines += [f"{v.stream},{v.state or ''},{v.kind},{v.time_bin}" for v in schema.variables]
    Path(path).write_text("\n".join(lines) + "\n")


def read_schema(path) -> FeatureSchema:
    header: dict = {}
    variables = []
    in_vars = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[variables]":
                in_vars = True
                continue
            if not in_vars:
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                header[key] = value
                continue
            cells = [c.strip() for c in line.split(",")]
            if cells == ["stream", "state", "kind", "time_bin"]:
                continue
            if len(cells) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'stream,state,kind,time_bin'")
            v = Variable(cells[0], cells[1] or None, cells[2], cells[3])
            try:
                _check_variable(v)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            variables.append(v)
    missing = {"study_start_date", "n_days"} - header.keys()
    if missing:
        raise ValueError(f"{path}: schema header lacks {sorted(missing)}")
    try:
        n_days = int(header["n_days"])
        start = date.fromisoformat(header["study_start_date"])
    except ValueError as exc:
        raise ValueError(f"{path}: bad schema header ({exc})") from None
    return FeatureSchema(variables, start, n_days, header.get("timezone", "UTC"))


EVENT_COLUMNS = ["user_id", "stream", "state", "start_unix", "end_unix"]


def read_events(path) -> list:
    """Read ``user_id,stream,state,start_unix,end_unix`` rows (header required)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records
        if [h.strip() for h in header] != EVENT_COLUMNS:
            raise ValueError(f"{path}:1: header must be {','.join(EVENT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                rec = EventRecord(row[0], row[1], row[2], float(row[3]), float(row[4]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return records


def write_events(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for r in records:
            w.writerow([r.user_id, r.stream, r.state, repr(r.start), repr(r.end)])


def _validate_record(rec: EventRecord):
    if rec.stream not in STREAM_STATES:
        raise ValueError(f"unknown stream {rec.stream!r} in record {rec}")
    states = STREAM_STATES[rec.stream]
    if states is not None and rec.state not in states:
        raise ValueError(f"unknown state {rec.state!r} for stream {rec.stream!r} in record {rec}")
    if states is None and not rec.state:
        raise ValueError(f"empty identifier in record {rec}")


# --- binning -----------------------------------------------------------------


def _bin_edges(day: date, tz) -> list:
    edges = [datetime.combine(day, time(h), tzinfo=tz).timestamp() for h in _BIN_START_HOURS]
    edges.append(datetime.combine(day + timedelta(days=1), time(0), tzinfo=tz).timestamp())
    return edges


def assign_bins(start: float, end: float, day: date, tz=ZoneInfo("UTC")) -> dict:
    """Minutes of ``[start, end)`` falling into each time bin of local ``day``."""
    if end < start:
        raise ValueError(f"interval ends before it starts ({start} > {end})")
    edges = _bin_edges(day, tz)
    return {
        b: max(0.0, min(end, hi) - max(start, lo)) / 60.0
        for b, lo, hi in zip(TIME_BINS, edges[:-1], edges[1:])
    }


def _touches(start, end, lo, hi) -> bool:
    if start == end:
        return lo <= start < hi
    return start < hi and end > lo


def bin_features(records, schema: FeatureSchema, day: date) -> dict:
    """Feature values for one user-day, keyed by variable name.

    ``records`` are the user's records touching ``day``; parts outside the
    day contribute nothing. An empty record list gives all zeros.
    """
    tz = schema.tz
    edges = _bin_edges(day, tz)
    bins = list(zip(TIME_BINS, edges[:-1], edges[1:]))
    duration = defaultdict(float)
    frequency = defaultdict(int)
    transitions = defaultdict(int)
    identifiers = defaultdict(set)
    by_stream = defaultdict(list)
    # canonical order keeps float sums independent of input order
    for rec in sorted(records, key=lambda r: (r.stream, r.start, r.end, r.state)):
        _validate_record(rec)
        by_stream[rec.stream].append(rec)
        for b, lo, hi in bins:
            if not _touches(rec.start, rec.end, lo, hi):
                continue
            duration[rec.stream, rec.state, b] += max(0.0, min(rec.end, hi) - max(rec.start, lo)) / 60.0
            frequency[rec.stream, rec.state, b] += 1
            identifiers[rec.stream, b].add(rec.state)
    for stream, recs in by_stream.items():
        recs.sort(key=lambda r: (r.start, r.end, r.state))
        for prev, nxt in zip(recs, recs[1:]):
            if prev.state == nxt.state:
                continue
            for b, lo, hi in bins:
                if lo <= nxt.start < hi:
                    transitions[stream, b] += 1
                    break

    out = {}
    for v in schema.variables:
        if v.kind == "duration":
            out[v.name] = duration.get((v.stream, v.state, v.time_bin), 0.0)
        elif v.kind == "frequency":
            out[v.name] = float(frequency.get((v.stream, v.state, v.time_bin), 0))
        elif v.kind == "transitions":
            out[v.name] = float(transitions.get((v.stream, v.time_bin), 0))
        else:
            out[v.name] = float(len(identifiers.get((v.stream, v.time_bin), ())))
    return out


def _local_date(ts: float, tz) -> date:
    return datetime.fromtimestamp(ts, tz).date()


def _record_days(rec: EventRecord, tz) -> list:
    first = _local_date(rec.start, tz)
    if rec.end == rec.start:
        return [first]
    # end is exclusive: an interval ending exactly at midnight stays on the earlier day
    last = _local_date(rec.end, tz)
    if datetime.combine(last, time(0), tzinfo=tz).timestamp() >= rec.end and last > first:
        last -= timedelta(days=1)
    return [first + timedelta(days=n) for n in range((last - first).days + 1)]


def build_tensor(records, schema: FeatureSchema) -> TensorDataset:
    """Raw (unnormalized) feature tensor.

    Individuals are sorted user IDs; a user-day without any record is a
    missing slice (mask False, NaN values). Records outside the study
    window are dropped and counted.
    """
    tz = schema.tz
    start = schema.study_start_date
    grouped = defaultdict(list)
    users = set()
    dropped = 0
    for rec in records:
        _validate_record(rec)
        users.add(rec.user_id)
        inside = False
        for d in _record_days(rec, tz):
            k = (d - start).days
            if 0 <= k < schema.n_days:
                grouped[rec.user_id, k].append(rec)
                inside = True
        dropped += not inside
    if not users:
        raise ValueError("zero users: no event records to build a tensor from")
    if dropped:
        log.warning("%d records fall outside the %d-day study window and were dropped",
                    dropped, schema.n_days)
    individuals = sorted(users)
    names = schema.names
    I, J, K = len(individuals), len(names), schema.n_days
    values = np.full((I, J, K), np.nan)
    mask = np.zeros((I, J, K), dtype=bool)
    for i, user in enumerate(individuals):
        for k in range(K):
            recs = grouped.get((user, k))
            if not recs:
                continue
            feats = bin_features(recs, schema, start + timedelta(days=k))
            values[i, :, k] = [feats[n] for n in names]
            mask[i, :, k] = True
    return TensorDataset(Tensor3(values, mask), individuals, names, list(range(K)),
                         dropped_records=dropped)


def _replace_tensor(ds: TensorDataset, tensor: Tensor3, **changes) -> TensorDataset:
    fields = dict(individuals=list(ds.individuals), variables=list(ds.variables),
                  days=list(ds.days), imputed=ds.imputed, dropped_records=ds.dropped_records)
    fields.update(changes)
    return TensorDataset(tensor, **fields)


def minmax_normalize(ds: TensorDataset) -> TensorDataset:
    """Rescale each variable's observed cells to [0, 1]; constant variables become 0."""
    vals = ds.tensor.values.copy()
    mask = ds.tensor.mask
    for j in range(vals.shape[1]):
        obs = mask[:, j, :]
        if not obs.any():
            continue
        slab = vals[:, j, :]
        lo, hi = slab[obs].min(), slab[obs].max()
        slab[obs] = 0.0 if hi == lo else (slab[obs] - lo) / (hi - lo)
    return _replace_tensor(ds, Tensor3(vals, mask.copy()))


def impute_mean(ds: TensorDataset) -> TensorDataset:
    """Fill unobserved cells with their variable's observed mean.

    The result is fully observed; ``imputed`` records the per-variable fill count.
    """
    vals = ds.tensor.values.copy()
    mask = ds.tensor.mask
    report = {}
    for j, name in enumerate(ds.variables):
        obs = mask[:, j, :]
        if not obs.any():
            raise ValueError(f"variable {name!r} has no observed cells to impute from")
        slab = vals[:, j, :]
        n_fill = int(obs.size - np.count_nonzero(obs))
        if n_fill:
            slab[~obs] = slab[obs].mean()
        report[name] = n_fill
    return _replace_tensor(ds, Tensor3(vals, np.ones_like(mask)), imputed=report)


def tensorize(records, schema: FeatureSchema) -> tuple[TensorDataset, TensorDataset]:
    """Build, normalize and impute. Returns ``(final, raw)`` datasets."""
    raw = build_tensor(records, schema)
    return impute_mean(minmax_normalize(raw)), raw


# --- output ------------------------------------------------------------------


def write_dataset(ds: TensorDataset, tensor_path, labels_path=None) -> Path:
    """Write the tensor text file plus a JSON sidecar with the axis labels."""
    from .tensor import write_tensor

    write_tensor(ds.tensor, tensor_path)
    labels_path = Path(labels_path) if labels_path else labels_path_for(tensor_path)
    payload = {"individuals": ds.individuals, "variables": ds.variables, "days": ds.days}
    labels_path.write_text(json.dumps(payload, indent=1) + "\n")
    return labels_path


def labels_path_for(tensor_path) -> Path:
    p = Path(tensor_path)
    return p.with_name(p.name + ".labels.json")


def read_labels(path) -> tuple[list, list, list]:
    payload = json.loads(Path(path).read_text())
    try:
        return list(payload["individuals"]), list(payload["variables"]), list(payload["days"])
    except KeyError as exc:
        raise ValueError(f"{path}: labels file lacks {exc}") from None


# --- synthetic logs ----------------------------------------------------------


def simulate_events(n_users: int, schema: FeatureSchema, seed: int = 0,
                    absent_frac: float = 0.05, segments_per_day: int = 16) -> list:
    """Plausible inferred-state logs for demos and tests.

    Each user-day is skipped entirely with probability ``absent_frac``.
    Activity and audio streams are contiguous runs of states; conversations,
    darkness, place visits and Bluetooth sightings are scattered intervals.
    """
    rng = np.random.default_rng(seed)
    tz = schema.tz
    activity = ["stationary", "walk", "run", "unknown"]
    audio = ["silence", "voice", "noise", "unknown"]
    records = []
    for u in range(n_users):
        user = f"u{u:02d}"
        sociability = rng.uniform(0.5, 1.5)
        for k in range(schema.n_days):
            if rng.random() < absent_frac:
                continue
            day = schema.study_start_date + timedelta(days=k)
            t0 = datetime.combine(day, time(0), tzinfo=tz).timestamp()
            t1 = datetime.combine(day + timedelta(days=1), time(0), tzinfo=tz).timestamp()
            for stream, states, probs in (
                ("activity", activity, [0.7, 0.2, 0.03, 0.07]),
                ("audio", audio, [0.55, 0.25 * sociability, 0.15, 0.05]),
            ):
                probs = np.asarray(probs) / np.sum(probs)
                cuts = np.sort(rng.uniform(t0, t1, segments_per_day - 1))
                bounds = np.concatenate([[t0], cuts, [t1]])
                for lo, hi in zip(bounds[:-1], bounds[1:]):
                    state = states[rng.choice(len(states), p=probs)]
                    records.append(EventRecord(user, stream, state, float(lo), float(hi)))
            for _ in range(rng.poisson(3 * sociability)):
                lo = rng.uniform(t0 + 8 * 3600, t1 - 3600)
                records.append(EventRecord(user, "conversation", "conversation",
                                           float(lo), float(lo + rng.uniform(60, 3600))))
            lo = t0 + rng.uniform(0, 3 * 3600)
            records.append(EventRecord(user, "dark", "dark", float(lo),
                                       float(lo + rng.uniform(4, 8) * 3600)))
            for stream, pool in (("gps_location", 12), ("wifi_location", 20), ("bluetooth", 40)):
                for _ in range(rng.integers(2, 9)):
                    lo = rng.uniform(t0, t1 - 60)
                    length = 0.0 if stream == "bluetooth" else rng.uniform(300, 7200)
                    records.append(EventRecord(user, stream, f"{stream[:3]}{rng.integers(pool)}",
                                               float(lo), float(min(lo + length, t1))))
    return records
