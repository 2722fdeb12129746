"""Event/intent data model, dataset I/O, windowing and the synthetic population generator."""
from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Reserved ids inside SequenceWindow arrays; mapped to table rows at batch time.
PAD = -1
MASK = -2


class DatasetFormatError(ValueError):
    """A dataset line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SchemaViolation(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    n_users: int
    n_locations: int
    n_timeslots: int = 48
    n_events: int = 20
    n_intents: int = 8
    window: int = 30

    def __post_init__(self):
        for name in ("n_users", "n_locations", "n_timeslots", "n_events", "n_intents", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_intents > self.n_events:
            raise ValueError("n_intents must not exceed n_events")

    def header(self) -> str:
        return f"#schema {self.n_users},{self.n_locations},{self.n_timeslots},{self.n_events},{self.n_intents}"


@dataclass(frozen=True, slots=True)
class EventRecord:
    user_id: int
    location_id: int
    timeslot_id: int
    weekday_id: int
    event_id: int
    intent_id: int
    timestamp: int

    def to_line(self) -> str:
        return (f"{self.user_id},{self.location_id},{self.timeslot_id},{self.weekday_id},"
                f"{self.event_id},{self.intent_id},{self.timestamp}")


def check_record(rec: EventRecord, schema: DatasetSchema) -> None:
    bounds = (
        ("user_id", rec.user_id, schema.n_users),
        ("location_id", rec.location_id, schema.n_locations),
        ("timeslot_id", rec.timeslot_id, schema.n_timeslots),
        ("weekday_id", rec.weekday_id, 7),
        ("event_id", rec.event_id, schema.n_events),
        ("intent_id", rec.intent_id, schema.n_intents),
    )
    for name, value, upper in bounds:
        if not 0 <= value < upper:
            raise SchemaViolation(f"{name}={value} outside [0, {upper})")


@dataclass
class Dataset:
    schema: DatasetSchema
    users: dict[int, list[EventRecord]] = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return sum(len(r) for r in self.users.values())

    def user_ids(self) -> list[int]:
        return sorted(self.users)

    def subset(self, user_ids: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, {u: self.users[u] for u in user_ids if u in self.users})


def parse_schema_header(line: str) -> tuple[int, ...]:
    body = line[len("#schema"):].strip()
    try:
        values = tuple(int(v) for v in body.split(","))
    except ValueError:
        raise DatasetFormatError(1, f"bad schema header {line!r}") from None
    if len(values) != 5:
        raise DatasetFormatError(1, "schema header needs N_U,N_L,N_T,N_E,N_I")
    return values


def load_dataset(path: str | os.PathLike, schema: DatasetSchema | None = None) -> Dataset:
    """Read a comma-separated dataset file.

    Records are grouped by user and sorted by ``(timestamp, file order)``.
    The ``#schema`` header is mandatory whenever the file holds records; when
    ``schema`` is also given its sizes must agree with the header (the window
    length comes from ``schema``).
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        if schema is None:
            raise ValueError("empty dataset file and no schema given")
        return Dataset(schema)

    first = lines[0].strip()
    if not first.startswith("#schema"):
        raise DatasetFormatError(1, "missing '#schema N_U,N_L,N_T,N_E,N_I' header")
    sizes = parse_schema_header(first)
    if schema is None:
        schema = DatasetSchema(*sizes)
    elif sizes != (schema.n_users, schema.n_locations, schema.n_timeslots, schema.n_events, schema.n_intents):
        raise SchemaViolation(f"header sizes {sizes} disagree with the given schema")

    grouped: dict[int, list[tuple[int, int, EventRecord]]] = defaultdict(list)
    for line_no, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DatasetFormatError(line_no, f"expected 7 fields, got {len(parts)}")
        try:
            rec = EventRecord(*(int(p) for p in parts))
        except ValueError:
            raise DatasetFormatError(line_no, f"non-integer field in {line!r}") from None
        try:
            check_record(rec, schema)
        except SchemaViolation as exc:
            raise SchemaViolation(f"line {line_no}: {exc}") from None
        grouped[rec.user_id].append((rec.timestamp, line_no, rec))

    users = {u: [r for _, _, r in sorted(items, key=lambda x: (x[0], x[1]))] for u, items in grouped.items()}
    return Dataset(schema, dict(sorted(users.items())))


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dataset.schema.header() + "\n")
        for uid in dataset.user_ids():
            for rec in dataset.users[uid]:
                fh.write(rec.to_line() + "\n")


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceWindow:
    """History of ``I`` slots (left-padded with PAD) and the intent that follows it."""

    locations: tuple[int, ...]
    weekdays: tuple[int, ...]
    timeslots: tuple[int, ...]
    events: tuple[int, ...]
    pad_count: int
    target_intent: int
    user_id: int = -1
    timestamp: int = 0

    @property
    def length(self) -> int:
        return len(self.events)

    def is_pad(self) -> np.ndarray:
        mask = np.zeros(self.length, dtype=bool)
        mask[: self.pad_count] = True
        return mask


def window_sequences(user_records: Sequence[EventRecord], window: int) -> list[SequenceWindow]:
    """One window per record index ``j >= 1``: records ``j-I .. j-1`` predict the intent at ``j``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for j in range(1, len(user_records)):
        hist = user_records[max(0, j - window): j]
        pad = window - len(hist)
        fill = (PAD,) * pad
        target = user_records[j]
        out.append(SequenceWindow(
            locations=fill + tuple(r.location_id for r in hist),
            weekdays=fill + tuple(r.weekday_id for r in hist),
            timeslots=fill + tuple(r.timeslot_id for r in hist),
            events=fill + tuple(r.event_id for r in hist),
            pad_count=pad,
            target_intent=target.intent_id,
            user_id=target.user_id,
            timestamp=target.timestamp,
        ))
    return out


@dataclass
class WindowArrays:
    """Column-stacked windows; PAD/MASK keep their negative sentinels."""

    locations: np.ndarray
    weekdays: np.ndarray
    timeslots: np.ndarray
    events: np.ndarray
    targets: np.ndarray
    users: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def window(self) -> int:
        return self.events.shape[1]

    @classmethod
    def from_windows(cls, windows: Sequence[SequenceWindow], window: int | None = None) -> "WindowArrays":
        if not windows:
            width = window or 0
            empty = np.zeros((0, width), dtype=np.int64)
            return cls(empty, empty.copy(), empty.copy(), empty.copy(),
                       np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        return cls(
            locations=np.array([w.locations for w in windows], dtype=np.int64),
            weekdays=np.array([w.weekdays for w in windows], dtype=np.int64),
            timeslots=np.array([w.timeslots for w in windows], dtype=np.int64),
            events=np.array([w.events for w in windows], dtype=np.int64),
            targets=np.array([w.target_intent for w in windows], dtype=np.int64),
            users=np.array([w.user_id for w in windows], dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence["WindowArrays"]) -> "WindowArrays":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.from_windows([])
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("locations", "weekdays", "timeslots", "events", "targets", "users")))

    def take(self, idx) -> "WindowArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowArrays(self.locations[idx], self.weekdays[idx], self.timeslots[idx],
                            self.events[idx], self.targets[idx], self.users[idx])

    def pad_mask(self) -> np.ndarray:
        return self.events == PAD


def dataset_windows(dataset: Dataset, window: int | None = None) -> dict[int, WindowArrays]:
    window = window or dataset.schema.window
    return {u: WindowArrays.from_windows(window_sequences(recs, window), window)
            for u, recs in dataset.users.items()}


def chronological_split(n: int, fractions: Sequence[float]) -> list[np.ndarray]:
    """Split ``range(n)`` into consecutive chunks; the last chunk takes the remainder."""
    bounds = np.floor(np.cumsum(fractions)[:-1] * n).astype(int)
    edges = [0, *bounds.tolist(), n]
    return [np.arange(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]


# ---------------------------------------------------------------------------
# Preference distributions and clustering
# ---------------------------------------------------------------------------

@dataclass
class IntentDistribution:
    probs: np.ndarray
    support_count: int = 0

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def uniform(cls, n_intents: int) -> "IntentDistribution":
        return cls(np.full(n_intents, 1.0 / n_intents), 0)


def compute_intent_distribution(labels, n_intents: int, smoothing: float = 0.0) -> IntentDistribution:
    """Laplace-smoothed intent histogram of ``labels`` (ints or EventRecords)."""
    if n_intents < 1:
        raise ValueError("n_intents must be >= 1")
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    ids = [lab.intent_id if isinstance(lab, EventRecord) else int(lab) for lab in labels]
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=n_intents).astype(float) \
        if ids else np.zeros(n_intents)
    if len(counts) > n_intents:
        raise ValueError(f"label outside [0, {n_intents})")
    total = int(counts.sum())
    denom = total + smoothing * n_intents
    if denom == 0:
        raise ValueError("undefined distribution: no labels and zero smoothing")
    return IntentDistribution((counts + smoothing) / denom, total)


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float


def cluster_user_preferences(distributions: Sequence[IntentDistribution], k: int, seed: int = 0) -> ClusterResult:
    from sklearn.cluster import KMeans

    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(distributions):
        raise ValueError(f"k={k} exceeds the number of users ({len(distributions)})")
    X = np.stack([d.probs for d in distributions]).astype(float)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(X)
    return ClusterResult(km.labels_.astype(np.int64), km.cluster_centers_, float(km.inertia_))


# ---------------------------------------------------------------------------
# Synthetic population
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Planted-rule population: clustered intent preferences, sticky routines, noisy events.

    Each user belongs to one cluster and keeps doing the same intent from one
    record to the next; with probability ``switch_rate`` the next intent is
    redrawn from the cluster simplex. Every intent is realised as one of its
    own events (``rule_table`` maps event -> intent) with probability
    ``1 - noise_rate``, otherwise as a uniformly random event.
    """

    schema: DatasetSchema
    cluster_weights: list[float]
    cluster_intent_probs: list[list[float]]
    rule_table: list[int]
    noise_rate: float = 0.1
    switch_rate: float = 0.1
    events_per_user: int = 100
    seed: int = 0

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_weights)

    def validate(self) -> None:
        s = self.schema
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        _check_simplex(self.cluster_weights, "cluster_weights")
        if len(self.cluster_intent_probs) != self.n_clusters:
            raise ValueError("one intent simplex per cluster required")
        for c, p in enumerate(self.cluster_intent_probs):
            if len(p) != s.n_intents:
                raise ValueError(f"cluster {c} simplex has wrong length")
            _check_simplex(p, f"cluster {c} simplex")
        if len(self.rule_table) != s.n_events or any(not 0 <= i < s.n_intents for i in self.rule_table):
            raise ValueError("rule_table must map every event to a valid intent")
        if set(self.rule_table) != set(range(s.n_intents)):
            raise ValueError("every intent needs at least one event in rule_table")
        for name in ("noise_rate", "switch_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.events_per_user < 0:
            raise ValueError("events_per_user must be >= 0")


def _check_simplex(p, name: str) -> None:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or np.any(arr < 0) or not np.isfinite(arr).all() or abs(arr.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability simplex")


def make_synthetic_spec(
    schema: DatasetSchema,
    *,
    n_clusters: int = 3,
    n_tail: int = 2,
    tail_weight: float = 0.1,
    tail_focus: float = 0.6,
    noise_rate: float = 0.1,
    switch_rate: float = 0.1,
    events_per_user: int = 100,
    seed: int = 0,
) -> SyntheticSpec:
    """Build a long-tailed population.

    The last ``n_tail`` intents are rare overall; the last cluster (weight
    ``tail_weight``) is a minority group whose dominant intent is one of them.
    The remaining clusters spread their mass over the head intents with a
    rotating emphasis so their histograms differ.
    """
    n_i = schema.n_intents
    if not 0 < n_tail < n_i:
        raise ValueError("n_tail must be in (0, n_intents)")
    if n_clusters < 2:
        raise ValueError("need a head cluster and a tail cluster")
    rng = np.random.default_rng(seed)

    # first n_i events cover every intent once; the rest are assigned at random
    extra = rng.integers(0, n_i, size=schema.n_events - n_i)
    rule_table = [*range(n_i), *extra.tolist()]
    perm = rng.permutation(schema.n_events)
    rule_table = [rule_table[p] for p in perm]

    n_head = n_i - n_tail
    tail_floor = 0.01
    simplices = []
    for c in range(n_clusters - 1):
        head = 1.0 / (1.0 + np.arange(n_head))  # zipf-like
        head = np.roll(head, c)
        p = np.concatenate([head / head.sum() * (1 - tail_floor * n_tail), np.full(n_tail, tail_floor)])
        simplices.append(p)
    rest = (1.0 - tail_focus) / (n_i - 1)
    tail = np.full(n_i, rest)
    tail[n_head] = tail_focus
    simplices.append(tail)

    weights = np.full(n_clusters, (1.0 - tail_weight) / (n_clusters - 1))
    weights[-1] = tail_weight
    spec = SyntheticSpec(
        schema=schema,
        cluster_weights=[float(w) for w in weights / weights.sum()],
        cluster_intent_probs=[[float(x) for x in p / p.sum()] for p in simplices],
        rule_table=[int(i) for i in rule_table],
        noise_rate=noise_rate,
        switch_rate=switch_rate,
        events_per_user=events_per_user,
        seed=seed,
    )
    spec.validate()
    return spec


@dataclass
class SyntheticPopulation:
    dataset: Dataset
    user_clusters: dict[int, int]
    spec: SyntheticSpec

    def metadata_lines(self) -> list[str]:
        s = self.spec
        lines = [
            f"seed={s.seed}",
            f"noise_rate={s.noise_rate!r}",
            f"switch_rate={s.switch_rate!r}",
            f"events_per_user={s.events_per_user}",
            f"cluster_weights={','.join(repr(w) for w in s.cluster_weights)}",
            f"rule_table={','.join(str(i) for i in s.rule_table)}",
        ]
        lines += [f"cluster_intent_probs.{c}={','.join(repr(x) for x in p)}"
                  for c, p in enumerate(s.cluster_intent_probs)]
        lines += [f"user_cluster.{u}={c}" for u, c in sorted(self.user_clusters.items())]
        return lines

    def save(self, data_path: str | os.PathLike, meta_path: str | os.PathLike | None = None) -> None:
        save_dataset(self.dataset, data_path)
        meta_path = meta_path or f"{data_path}.meta"
        with open(meta_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.metadata_lines()) + "\n")


def read_metadata(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def generate_synthetic_population(spec: SyntheticSpec) -> SyntheticPopulation:
    spec.validate()
    s = spec.schema
    rng = np.random.default_rng(spec.seed)
    events_of = [np.flatnonzero(np.asarray(spec.rule_table) == i) for i in range(s.n_intents)]
    cluster_p = np.asarray(spec.cluster_intent_probs, dtype=float)

    users: dict[int, list[EventRecord]] = {}
    clusters: dict[int, int] = {}
    for k in range(s.n_users):
        uid = k
        c = int(rng.choice(spec.n_clusters, p=spec.cluster_weights))
        clusters[uid] = c
        loc_habit = rng.dirichlet(np.full(s.n_locations, 0.5))
        slot_habit = rng.dirichlet(np.full(s.n_timeslots, 0.5))
        day_habit = rng.dirichlet(np.full(7, 2.0))
        n = spec.events_per_user
        # all draws for this user are made up front so the stream layout is fixed
        switch = rng.random(n) < spec.switch_rate
        fresh = rng.choice(s.n_intents, size=n, p=cluster_p[c])
        noisy = rng.random(n) < spec.noise_rate
        rand_event = rng.integers(0, s.n_events, size=n)
        pick = rng.random(n)
        locs = rng.choice(s.n_locations, size=n, p=loc_habit)
        slots = rng.choice(s.n_timeslots, size=n, p=slot_habit)
        days = rng.choice(7, size=n, p=day_habit)
        gaps = 1 + rng.geometric(0.05, size=n)
        ts = np.cumsum(gaps)

        recs = []
        intent = -1
        for j in range(n):
            if j == 0 or switch[j]:
                intent = int(fresh[j])
            if noisy[j]:
                event = int(rand_event[j])
            else:
                own = events_of[intent]
                event = int(own[int(pick[j] * len(own))])
            recs.append(EventRecord(uid, int(locs[j]), int(slots[j]), int(days[j]), event, intent, int(ts[j])))
        users[uid] = recs
    return SyntheticPopulation(Dataset(s, users), clusters, spec)
