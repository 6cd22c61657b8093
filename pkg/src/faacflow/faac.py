"""Counter derivation: variable matchers, batch planning, dataset derivation.

Raw flow records are grouped into fixed-size batches. Within a batch each
feature counts the records whose variable value satisfies its matcher, and
the count is divided by the batch size, so every derived value lies in
[0, 1]. A batch is labeled Background only when it contains no attack
records; otherwise it takes the most frequent attack class, with ties
broken by a configured priority order.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
import yaml

from .errors import ConfigError, DataError
from .ingest import CanonicalTaxonomy, DEFAULT_TAXONOMY, FlowRecord

EQUALS = "equals"
IN_SET = "in_set"
NUMERIC_RANGE = "numeric_range"
MISSING = "missing"
CATCH_ALL = "catch_all"

_MATCHER_KINDS = (EQUALS, IN_SET, NUMERIC_RANGE, MISSING, CATCH_ALL)


@dataclass(frozen=True)
class Matcher:
    """Predicate over a single variable value.

    ``equals`` and ``in_set`` compare tokens (numeric values compare by
    float value, categorical by string). ``numeric_range`` tests
    lo <= v < hi with infinite endpoints allowed. ``missing`` matches only
    the missing marker. ``catch_all`` matches any present value that no
    sibling matcher on the same variable accepts.
    """

    kind: str
    tokens: tuple[object, ...] = ()
    lo: float = -math.inf
    hi: float = math.inf
    allow_overlap: bool = False

    def __post_init__(self) -> None:
        if self.kind not in _MATCHER_KINDS:
            raise ConfigError(f"unknown matcher kind {self.kind!r}")
        if self.kind == EQUALS and len(self.tokens) != 1:
            raise ConfigError("equals matcher requires exactly one value")
        if self.kind == IN_SET and not self.tokens:
            raise ConfigError("in_set matcher requires a non-empty value list")
        if self.kind == NUMERIC_RANGE:
            if math.isnan(self.lo) or math.isnan(self.hi):
                raise ConfigError("numeric_range endpoints must not be NaN")
            if not self.lo < self.hi:
                raise ConfigError(f"numeric_range requires lo < hi, got [{self.lo}, {self.hi})")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    variable: str
    matcher: Matcher


def _token_key(tok: object) -> tuple[str, object]:
    """Normalized comparison key: numeric-looking tokens compare by value."""
    if isinstance(tok, bool):
        return ("str", str(tok))
    if isinstance(tok, (int, float)):
        return ("num", float(tok))
    try:
        return ("num", float(str(tok)))
    except ValueError:
        return ("str", str(tok))


def _validate_variable(variable: str, specs: list[FeatureSpec]) -> None:
    n_missing = sum(1 for s in specs if s.matcher.kind == MISSING)
    if n_missing > 1:
        raise ConfigError(f"variable {variable!r}: more than one missing matcher")
    n_catch = sum(1 for s in specs if s.matcher.kind == CATCH_ALL)
    if n_catch > 1:
        raise ConfigError(f"variable {variable!r}: more than one catch_all matcher")

    strict = [s for s in specs if not s.matcher.allow_overlap]
    token_specs = [s for s in strict if s.matcher.kind in (EQUALS, IN_SET)]
    for i, a in enumerate(token_specs):
        keys_a = {_token_key(t) for t in a.matcher.tokens}
        for b in token_specs[i + 1 :]:
            shared = keys_a & {_token_key(t) for t in b.matcher.tokens}
            if shared:
                raise ConfigError(
                    f"variable {variable!r}: features {a.name!r} and {b.name!r} "
                    f"share tokens {sorted(str(k[1]) for k in shared)}"
                )
    range_specs = [s for s in strict if s.matcher.kind == NUMERIC_RANGE]
    for i, a in enumerate(range_specs):
        for b in range_specs[i + 1 :]:
            if a.matcher.lo < b.matcher.hi and b.matcher.lo < a.matcher.hi:
                raise ConfigError(
                    f"variable {variable!r}: ranges of {a.name!r} and {b.name!r} overlap"
                )


@dataclass(frozen=True)
class FaacConfig:
    """Feature list, taxonomy, batch label priority, and column aliases."""

    features: tuple[FeatureSpec, ...]
    taxonomy: CanonicalTaxonomy = DEFAULT_TAXONOMY
    class_priority: tuple[str, ...] = ()
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.features:
            raise ConfigError("at least one feature is required")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate feature names: {dupes}")
        by_var: dict[str, list[FeatureSpec]] = {}
        for spec in self.features:
            by_var.setdefault(spec.variable, []).append(spec)
        for variable, specs in by_var.items():
            _validate_variable(variable, specs)
        for name in self.class_priority:
            if name not in self.taxonomy.attacks:
                raise ConfigError(f"class_priority entry {name!r} is not an attack class")
        if len(set(self.class_priority)) != len(self.class_priority):
            raise ConfigError("class_priority contains duplicates")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def full_priority(self) -> tuple[str, ...]:
        """class_priority padded with the remaining attacks in taxonomy order."""
        rest = tuple(a for a in self.taxonomy.attacks if a not in self.class_priority)
        return self.class_priority + rest


@dataclass(frozen=True)
class BatchPlan:
    n_records: int
    target_batches: int
    batch_size: int
    full_batches: int

    @property
    def dropped_records(self) -> int:
        return self.n_records - self.batch_size * self.full_batches


def plan_batches(n_records: int, target_batches: int) -> BatchPlan:
    """Fix the batch size as floor(N / M); the tail that does not fill a batch is dropped."""
    if target_batches < 1:
        raise ConfigError(f"target batch count must be positive, got {target_batches}")
    if n_records < 1:
        raise DataError(f"record count must be positive, got {n_records}")
    batch_size = n_records // target_batches
    if batch_size == 0:
        raise DataError(
            f"batch size would be zero: {n_records} records cannot fill {target_batches} batches"
        )
    return BatchPlan(
        n_records=n_records,
        target_batches=target_batches,
        batch_size=batch_size,
        full_batches=n_records // batch_size,
    )


class _VariableCounter:
    """Compiled matchers for one canonical variable."""

    __slots__ = ("variable", "token_map", "ranges", "missing_idx", "catch_idx")

    def __init__(self, variable: str, specs: list[tuple[int, Matcher]]) -> None:
        self.variable = variable
        # token -> tuple of feature slots; both string and float forms are
        # registered so lookups hit whichever type the parsed value carries
        token_map: dict[object, list[int]] = {}
        ranges: list[tuple[float, float, int]] = []
        self.missing_idx: int | None = None
        self.catch_idx: int | None = None
        for slot, m in specs:
            if m.kind in (EQUALS, IN_SET):
                for tok in m.tokens:
                    for form in self._forms(tok):
                        token_map.setdefault(form, []).append(slot)
            elif m.kind == NUMERIC_RANGE:
                ranges.append((m.lo, m.hi, slot))
            elif m.kind == MISSING:
                self.missing_idx = slot
            elif m.kind == CATCH_ALL:
                self.catch_idx = slot
        self.token_map = {k: tuple(v) for k, v in token_map.items()}
        self.ranges = tuple(ranges)

    @staticmethod
    def _forms(tok: object) -> list[object]:
        forms: list[object] = [str(tok)]
        try:
            forms.append(float(tok))  # type: ignore[arg-type]
        except (TypeError, ValueError):
            pass
        return forms

    def count_into(self, value: object, counts: np.ndarray) -> None:
        if value is None:
            if self.missing_idx is not None:
                counts[self.missing_idx] += 1
            return
        matched = False
        slots = self.token_map.get(value)
        if slots:
            matched = True
            for s in slots:
                counts[s] += 1
        if self.ranges:
            if isinstance(value, float):
                v = value
            else:
                try:
                    v = float(value)  # type: ignore[arg-type]
                except (TypeError, ValueError):
                    v = None
            if v is not None:
                for lo, hi, s in self.ranges:
                    if lo <= v < hi:
                        matched = True
                        counts[s] += 1
        if not matched and self.catch_idx is not None:
            counts[self.catch_idx] += 1


class _CompiledFaac:
    """Config compiled for fast per-record counting."""

    def __init__(self, config: FaacConfig) -> None:
        self.config = config
        by_var: dict[str, list[tuple[int, Matcher]]] = {}
        for slot, spec in enumerate(config.features):
            by_var.setdefault(spec.variable, []).append((slot, spec.matcher))
        self.counters = tuple(_VariableCounter(v, specs) for v, specs in by_var.items())
        self.n_features = len(config.features)
        taxonomy = config.taxonomy
        self.attack_indices = tuple(range(1, len(taxonomy)))
        priority = config.full_priority()
        # lower rank wins a tie
        self.priority_rank = {taxonomy.index_of(name): r for r, name in enumerate(priority)}
        self._key_cache: dict[tuple[str, frozenset[str]], dict[str, str | None]] = {}

    def _resolve_keys(self, record: FlowRecord) -> dict[str, str | None]:
        """Map canonical variable -> key present in this record's value dict."""
        cache_key = (record.origin, frozenset(record.values))
        hit = self._key_cache.get(cache_key)
        if hit is not None:
            return hit
        aliases = self.config.aliases
        canon_of = {col: aliases.get(col, col) for col in record.values}
        resolved: dict[str, str | None] = {}
        for counter in self.counters:
            keys = [col for col, canon in canon_of.items() if canon == counter.variable]
            if len(keys) > 1:
                raise DataError(
                    f"origin {record.origin!r}: columns {sorted(keys)} all alias variable "
                    f"{counter.variable!r}"
                )
            resolved[counter.variable] = keys[0] if keys else None
        self._key_cache[cache_key] = resolved
        return resolved

    def aggregate(self, batch: list[FlowRecord]) -> tuple[np.ndarray, str, str]:
        """Normalized counter row, batch label, and origin for one full batch."""
        origin = batch[0].origin
        keys = self._resolve_keys(batch[0])
        counts = np.zeros(self.n_features, dtype=np.float64)
        taxonomy = self.config.taxonomy
        class_counts = [0] * len(taxonomy)
        for rec in batch:
            if rec.origin != origin:
                raise DataError(
                    f"batch mixes origins {origin!r} and {rec.origin!r}; derive each source separately"
                )
            vals = rec.values
            for counter in self.counters:
                key = keys[counter.variable]
                counter.count_into(vals.get(key) if key is not None else None, counts)
            class_counts[taxonomy.index_of(rec.label)] += 1
        label_idx = 0
        if any(class_counts[i] for i in self.attack_indices):
            best = max(
                self.attack_indices,
                key=lambda i: (class_counts[i], -self.priority_rank[i]),
            )
            label_idx = best
        counts /= len(batch)
        return counts, taxonomy.classes[label_idx], origin


@dataclass(eq=False)
class DerivedDataset:
    """Matrix of normalized counters with per-row label, origin, batch size."""

    feature_names: tuple[str, ...]
    X: np.ndarray  # (n_rows, n_features) float64 in [0, 1]
    y: np.ndarray  # (n_rows,) int indices into classes
    classes: tuple[str, ...]
    origins: tuple[str, ...]
    batch_sizes: np.ndarray  # (n_rows,) int

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if not (len(self.y) == n and len(self.origins) == n and len(self.batch_sizes) == n):
            raise DataError("row metadata length does not match the matrix")
        if self.X.shape[1] != len(self.feature_names):
            raise DataError("feature name count does not match the matrix width")
        if n and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise DataError("derived counters must lie in [0, 1]")
        if n and (self.y.min() < 0 or self.y.max() >= len(self.classes)):
            raise DataError("label index out of range")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def label_names(self) -> tuple[str, ...]:
        return tuple(self.classes[i] for i in self.y)

    def class_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name in self.label_names():
            out[name] = out.get(name, 0) + 1
        return out

    def take(self, rows: np.ndarray) -> "DerivedDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return DerivedDataset(
            feature_names=self.feature_names,
            X=self.X[rows],
            y=self.y[rows],
            classes=self.classes,
            origins=tuple(self.origins[i] for i in rows),
            batch_sizes=self.batch_sizes[rows],
        )


def derive_dataset(
    records: Iterable[FlowRecord],
    target_batches: int,
    config: FaacConfig,
    n_records: int | None = None,
) -> DerivedDataset:
    """Derive the normalized counter matrix from a record stream.

    ``n_records`` enables single-pass streaming with memory proportional to
    one batch; when omitted it is taken from ``len(records)`` if available,
    otherwise the stream is materialized to count it.
    """
    if n_records is None:
        try:
            n_records = len(records)  # type: ignore[arg-type]
        except TypeError:
            records = list(records)
            n_records = len(records)
    plan = plan_batches(n_records, target_batches)
    compiled = _CompiledFaac(config)

    rows = np.empty((plan.full_batches, compiled.n_features), dtype=np.float64)
    labels: list[str] = []
    origins: list[str] = []
    batch: list[FlowRecord] = []
    done = 0
    for rec in records:
        batch.append(rec)
        if len(batch) == plan.batch_size:
            row, label, origin = compiled.aggregate(batch)
            rows[done] = row
            labels.append(label)
            origins.append(origin)
            batch.clear()
            done += 1
            if done == plan.full_batches:
                break
    if done < plan.full_batches:
        raise DataError(
            f"stream ended after {done * plan.batch_size + len(batch)} records; "
            f"{plan.n_records} were declared"
        )
    taxonomy = config.taxonomy
    y = np.array([taxonomy.index_of(name) for name in labels], dtype=np.int64)
    return DerivedDataset(
        feature_names=config.feature_names,
        X=rows,
        y=y,
        classes=taxonomy.classes,
        origins=tuple(origins),
        batch_sizes=np.full(plan.full_batches, plan.batch_size, dtype=np.int64),
    )


_META_COLUMNS = ("label", "origin", "batch_size")


def write_derived(dataset: DerivedDataset, dest: str | Path | TextIO) -> int:
    """Write the derived matrix as CSV: feature columns then label, origin, batch_size."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            return write_derived(dataset, fh)
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(list(dataset.feature_names) + list(_META_COLUMNS))
    names = dataset.classes
    for i in range(dataset.n_rows):
        writer.writerow(
            ["%.9g" % v for v in dataset.X[i]]
            + [names[dataset.y[i]], dataset.origins[i], str(int(dataset.batch_sizes[i]))]
        )
    return dataset.n_rows


def read_derived(path: str | Path | TextIO, taxonomy: CanonicalTaxonomy | None = None) -> DerivedDataset:
    """Read a derived CSV back into memory.

    With a taxonomy, labels index into it (unknown labels are fatal);
    without one, classes are collected in first-seen order with Background
    moved to the front when present.
    """
    if isinstance(path, (str, Path)):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return read_derived(fh, taxonomy=taxonomy)
    reader = csv.reader(path)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("derived file is empty") from None
    if len(header) < 4 or tuple(header[-3:]) != _META_COLUMNS:
        raise DataError(f"derived header must end with {','.join(_META_COLUMNS)}")
    feature_names = tuple(header[:-3])
    data: list[list[float]] = []
    label_names: list[str] = []
    origins: list[str] = []
    batch_sizes: list[int] = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(t) for t in row[: len(feature_names)]])
            batch_sizes.append(int(row[-1]))
        except ValueError as exc:
            raise DataError(f"line {line_no}: {exc}") from exc
        label_names.append(row[-3])
        origins.append(row[-2])
    if taxonomy is not None:
        classes = taxonomy.classes
    else:
        seen: list[str] = []
        for name in label_names:
            if name not in seen:
                seen.append(name)
        if "Background" in seen:
            seen.remove("Background")
            seen.insert(0, "Background")
        classes = tuple(seen)
    index = {name: i for i, name in enumerate(classes)}
    try:
        y = np.array([index[name] for name in label_names], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in taxonomy {list(classes)}") from None
    X = np.array(data, dtype=np.float64) if data else np.empty((0, len(feature_names)))
    return DerivedDataset(
        feature_names=feature_names,
        X=X,
        y=y,
        classes=classes,
        origins=tuple(origins),
        batch_sizes=np.array(batch_sizes, dtype=np.int64),
    )


def _parse_matcher(node: dict) -> Matcher:
    if not isinstance(node, dict) or "kind" not in node:
        raise ConfigError(f"matcher must be a mapping with a 'kind': {node!r}")
    kind = node["kind"]
    args = node.get("args") or {}
    if not isinstance(args, dict):
        raise ConfigError(f"matcher args must be a mapping: {args!r}")
    allow_overlap = bool(args.get("allow_overlap", False))
    if kind == EQUALS:
        if "value" not in args:
            raise ConfigError("equals matcher needs args.value")
        return Matcher(kind=EQUALS, tokens=(args["value"],), allow_overlap=allow_overlap)
    if kind == IN_SET:
        values = args.get("values")
        if not isinstance(values, list) or not values:
            raise ConfigError("in_set matcher needs a non-empty args.values list")
        return Matcher(kind=IN_SET, tokens=tuple(values), allow_overlap=allow_overlap)
    if kind == NUMERIC_RANGE:
        try:
            lo = float(args.get("lo", -math.inf))
            hi = float(args.get("hi", math.inf))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"numeric_range endpoints must be numbers: {exc}") from exc
        return Matcher(kind=NUMERIC_RANGE, lo=lo, hi=hi, allow_overlap=allow_overlap)
    if kind in (MISSING, CATCH_ALL):
        return Matcher(kind=kind, allow_overlap=allow_overlap)
    raise ConfigError(f"unknown matcher kind {kind!r}")


def load_faac_config(path: str | Path) -> FaacConfig:
    """Load a counter configuration from YAML."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict) or "features" not in doc:
        raise ConfigError(f"{path}: expected a mapping with a 'features' list")
    features = []
    for node in doc["features"]:
        try:
            features.append(
                FeatureSpec(
                    name=str(node["name"]),
                    variable=str(node["variable"]),
                    matcher=_parse_matcher(node["matcher"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed feature entry {node!r}: {exc}") from exc
    taxonomy = (
        CanonicalTaxonomy(tuple(str(c) for c in doc["taxonomy"])) if "taxonomy" in doc else DEFAULT_TAXONOMY
    )
    return FaacConfig(
        features=tuple(features),
        taxonomy=taxonomy,
        class_priority=tuple(str(c) for c in doc.get("class_priority", ())),
        aliases={str(k): str(v) for k, v in (doc.get("aliases") or {}).items()},
    )
