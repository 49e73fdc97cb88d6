"""Typed cohort model: feature schema, triplets, labels, and their file formats.

Patients and features are dense 0-based integer indices. A triplet whose value
is ``None`` is an explicit missing marker; a (patient, feature) pair with no
triplet at all is treated the same way downstream.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

RawValue = Union[float, int, str, None]


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class Kind(enum.Enum):
    NUMERIC = "numeric"
    BINARY = "binary"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    feature_id: int
    name: str
    kind: Kind
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind is Kind.CATEGORICAL and not self.categories:
            raise SchemaError(f"categorical feature {self.name!r} has no categories")
        if self.kind is not Kind.CATEGORICAL and self.categories:
            raise SchemaError(f"non-categorical feature {self.name!r} declares categories")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"feature {self.name!r} has duplicate category tokens")


FeatureSchema = tuple[FeatureSpec, ...]


@dataclass(frozen=True)
class Triplet:
    patient_id: int
    feature_id: int
    value: RawValue


@dataclass(frozen=True)
class Cohort:
    n_patients: int
    schema: FeatureSchema
    triplets: tuple[Triplet, ...]
    labels: Optional[tuple[int, ...]] = None
    # external patient keys by dense index, when the source files used them
    patient_keys: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.n_patients < 0:
            raise DataError("n_patients must be nonnegative")
        for t in self.triplets:
            if not 0 <= t.patient_id < self.n_patients:
                raise DataError(f"patient_id {t.patient_id} out of range")
        if self.labels is not None:
            if len(self.labels) != self.n_patients:
                raise DataError("labels must hold exactly one label per patient")
            if any(y not in (0, 1) for y in self.labels):
                raise DataError("labels must be 0 or 1")
        if self.patient_keys is not None and len(self.patient_keys) != self.n_patients:
            raise DataError("patient_keys must cover every patient")

    def subset(self, patients: Sequence[int]) -> "Cohort":
        """Cohort restricted to ``patients``, renumbered in the given order."""
        remap = {int(p): i for i, p in enumerate(patients)}
        trips = tuple(
            Triplet(remap[t.patient_id], t.feature_id, t.value)
            for t in self.triplets
            if t.patient_id in remap
        )
        trips = tuple(sorted(trips, key=lambda t: (t.patient_id, t.feature_id)))
        labels = None if self.labels is None else tuple(self.labels[int(p)] for p in patients)
        keys = None if self.patient_keys is None else tuple(self.patient_keys[int(p)] for p in patients)
        return Cohort(len(remap), self.schema, trips, labels, keys)


@dataclass(frozen=True)
class RecordError:
    index: int
    message: str


@dataclass
class ValidationReport:
    n_patients: int
    observed_counts: dict[int, int]
    missing_rates: dict[int, float]
    unobserved: list[int]
    prevalence: Optional[float]
    warnings: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# schema


def _schema_from_obj(obj) -> FeatureSchema:
    if not isinstance(obj, dict) or not isinstance(obj.get("features"), list):
        raise SchemaError('schema must be an object with a "features" list')
    specs = []
    for entry in obj["features"]:
        if not isinstance(entry, dict):
            raise SchemaError("feature entries must be objects")
        try:
            fid, name, kind_tok = entry["id"], entry["name"], entry["kind"]
        except KeyError as exc:
            raise SchemaError(f"feature entry missing key {exc}") from None
        if not isinstance(fid, int) or isinstance(fid, bool):
            raise SchemaError(f"feature id must be an integer, got {fid!r}")
        if not isinstance(name, str) or not name:
            raise SchemaError("feature name must be a nonempty string")
        try:
            kind = Kind(kind_tok)
        except ValueError:
            raise SchemaError(f"unknown feature kind {kind_tok!r}") from None
        cats = entry.get("categories", [])
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            raise SchemaError(f"categories of {name!r} must be a list of strings")
        specs.append(FeatureSpec(fid, name, kind, tuple(cats)))

    ids = [s.feature_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate feature id")
    names = [s.name for s in specs]
    dup = [n for n, c in Counter(names).items() if c > 1]
    if dup:
        raise SchemaError(f"duplicate feature name {dup[0]!r}")
    if sorted(ids) != list(range(len(ids))):
        raise SchemaError("feature ids must be contiguous from 0")
    return tuple(sorted(specs, key=lambda s: s.feature_id))


def parse_schema(text: str) -> FeatureSchema:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema is not valid JSON: {exc}") from None
    return _schema_from_obj(obj)


def schema_to_json(schema: FeatureSchema) -> str:
    feats = []
    for s in schema:
        entry = {"id": s.feature_id, "name": s.name, "kind": s.kind.value}
        if s.kind is Kind.CATEGORICAL:
            entry["categories"] = list(s.categories)
        feats.append(entry)
    return json.dumps({"features": feats}, indent=2) + "\n"


def schema_fingerprint(schema: FeatureSchema) -> str:
    canon = json.dumps(json.loads(schema_to_json(schema)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# triplets


def _coerce_value(spec: FeatureSpec, raw) -> RawValue:
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return None
    if spec.kind is Kind.NUMERIC:
        if isinstance(raw, bool):
            raise DataError(f"{spec.name}: boolean given for numeric feature")
        try:
            val = float(raw)
        except (TypeError, ValueError):
            raise DataError(f"{spec.name}: {raw!r} is not a number") from None
        if not math.isfinite(val):
            raise DataError(f"{spec.name}: non-finite value {raw!r}")
        return val
    if spec.kind is Kind.BINARY:
        tok = raw.strip() if isinstance(raw, str) else raw
        if tok in ("0", 0, False) and not isinstance(tok, float):
            return 0
        if tok in ("1", 1, True) and not isinstance(tok, float):
            return 1
        raise DataError(f"{spec.name}: binary value must be 0 or 1, got {raw!r}")
    tok = raw.strip() if isinstance(raw, str) else raw
    if tok not in spec.categories:
        raise DataError(f"{spec.name}: unknown category {raw!r}")
    return tok


def _resolve_feature(schema: FeatureSchema, by_name: dict[str, FeatureSpec], ref) -> FeatureSpec:
    if isinstance(ref, str):
        ref = ref.strip()
        if ref in by_name:
            return by_name[ref]
        if ref.isdigit():
            ref = int(ref)
    if isinstance(ref, int) and not isinstance(ref, bool) and 0 <= ref < len(schema):
        return schema[ref]
    raise DataError(f"unknown feature {ref!r}")


def collect_triplets(
    records: Iterable[tuple], schema: FeatureSchema, n_patients: int
) -> tuple[list[Triplet], list[RecordError]]:
    """Type-check ``(patient, feature, value)`` records without raising.

    Every input record ends up either accepted or in the error list.
    """
    by_name = {s.name: s for s in schema}
    accepted: list[Triplet] = []
    errors: list[RecordError] = []
    seen: set[tuple[int, int]] = set()
    for idx, rec in enumerate(records):
        try:
            pid, fref, raw = rec
            if isinstance(pid, str):
                pid = pid.strip()
                if not pid.lstrip("-").isdigit():
                    raise DataError(f"patient_id {pid!r} is not an integer")
                pid = int(pid)
            if not isinstance(pid, int) or isinstance(pid, bool):
                raise DataError(f"patient_id {pid!r} is not an integer")
            if not 0 <= pid < n_patients:
                raise DataError(f"patient_id {pid} out of range [0, {n_patients})")
            spec = _resolve_feature(schema, by_name, fref)
            value = _coerce_value(spec, raw)
            key = (pid, spec.feature_id)
            if key in seen:
                raise DataError(f"duplicate record for patient {pid}, feature {spec.name!r}")
            seen.add(key)
            accepted.append(Triplet(pid, spec.feature_id, value))
        except DataError as exc:
            errors.append(RecordError(idx, str(exc)))
        except (TypeError, ValueError):
            errors.append(RecordError(idx, f"malformed record {rec!r}"))
    return accepted, errors


def parse_triplets(
    records: Iterable[tuple],
    schema: FeatureSchema,
    n_patients: int,
    labels: Optional[Sequence[int]] = None,
) -> Cohort:
    if n_patients <= 0:
        raise DataError("n_patients must be positive")
    accepted, errors = collect_triplets(records, schema, n_patients)
    if errors:
        first = errors[0]
        raise DataError(f"record {first.index}: {first.message} ({len(errors)} error(s) total)")
    accepted.sort(key=lambda t: (t.patient_id, t.feature_id))
    return Cohort(n_patients, schema, tuple(accepted), None if labels is None else tuple(labels))


def validate_cohort(cohort: Cohort) -> ValidationReport:
    counts = {s.feature_id: 0 for s in cohort.schema}
    for t in cohort.triplets:
        if t.value is not None:
            counts[t.feature_id] += 1
    n = cohort.n_patients
    rates = {f: (1.0 - c / n) if n else 1.0 for f, c in counts.items()}
    unobserved = [f for f, c in counts.items() if c == 0]
    prevalence = None
    if cohort.labels:
        prevalence = sum(cohort.labels) / len(cohort.labels)
    warnings = [f"feature {cohort.schema[f].name!r} is observed in zero patients" for f in unobserved]
    return ValidationReport(n, counts, rates, unobserved, prevalence, warnings)


# --------------------------------------------------------------------------
# file formats


def _format_value(v: RawValue) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def triplets_to_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "feature_id", "value"])
    keys = cohort.patient_keys
    for t in cohort.triplets:
        pid = keys[t.patient_id] if keys else t.patient_id
        w.writerow([pid, t.feature_id, _format_value(t.value)])
    return buf.getvalue()


def labels_to_csv(cohort: Cohort) -> str:
    if cohort.labels is None:
        raise DataError("cohort has no labels")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "label"])
    keys = cohort.patient_keys
    for i, y in enumerate(cohort.labels):
        w.writerow([keys[i] if keys else i, y])
    return buf.getvalue()


def _read_rows(text: str, header: list[str], what: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != header:
        raise DataError(f"{what} must start with header {','.join(header)}")
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{what} line {lineno}: expected {len(header)} fields, got {len(row)}")
        body.append(row)
    return body


class PatientIndex:
    """Maps external patient keys to dense indices in first-appearance order."""

    def __init__(self, keys: Sequence[str] = ()):
        self.keys: list[str] = []
        self._index: dict[str, int] = {}
        for k in keys:
            self.add(k)

    def add(self, key: str) -> int:
        if key not in self._index:
            self._index[key] = len(self.keys)
            self.keys.append(key)
        return self._index[key]

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, key: str) -> int:
        return self._index[key]

    def to_json(self) -> str:
        return json.dumps(self.keys) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PatientIndex":
        keys = json.loads(text)
        if not isinstance(keys, list) or not all(isinstance(k, str) for k in keys):
            raise DataError("patient index must be a JSON list of strings")
        if len(set(keys)) != len(keys):
            raise DataError("patient index has duplicate keys")
        return cls(keys)


def _is_index(tok: str) -> bool:
    return tok.isdigit()


def cohort_from_text(
    schema_text: str,
    triplets_text: str,
    labels_text: Optional[str] = None,
    n_patients: Optional[int] = None,
    patient_index: Optional[PatientIndex] = None,
) -> Cohort:
    """Parse the three on-disk formats into a cohort.

    Integer patient ids are used directly. Any non-integer id switches the
    loader to keyed mode, where a :class:`PatientIndex` assigns dense ids.
    """
    schema = parse_schema(schema_text)
    trows = _read_rows(triplets_text, ["patient_id", "feature_id", "value"], "triplet file")
    lrows = _read_rows(labels_text, ["patient_id", "label"], "label file") if labels_text is not None else None

    all_ids = [r[0].strip() for r in trows] + [r[0].strip() for r in (lrows or [])]
    keyed = patient_index is not None or not all(_is_index(p) for p in all_ids)
    keys = None
    if keyed:
        index = patient_index if patient_index is not None else PatientIndex()
        for p in all_ids:
            if patient_index is not None and p not in index._index:
                raise DataError(f"patient {p!r} is not in the patient index")
            index.add(p)
        n = len(index)
        keys = tuple(index.keys)
        to_dense = lambda p: index[p.strip()]  # noqa: E731
    else:
        n = max((int(p) for p in all_ids), default=-1) + 1
        to_dense = lambda p: int(p)  # noqa: E731
    if n_patients is not None:
        if n_patients < n:
            raise DataError(f"files reference {n} patients but n_patients={n_patients}")
        if keyed and n_patients != n:
            raise DataError("n_patients cannot extend a keyed cohort")
        n = n_patients

    labels = None
    if lrows is not None:
        found: dict[int, int] = {}
        for row in lrows:
            pid = to_dense(row[0])
            tok = row[1].strip()
            if tok not in ("0", "1"):
                raise DataError(f"label for patient {row[0]!r} must be 0 or 1, got {tok!r}")
            if pid in found:
                raise DataError(f"duplicate label for patient {row[0]!r}")
            found[pid] = int(tok)
        missing = [p for p in range(n) if p not in found]
        if missing:
            raise DataError(f"no label for patient {missing[0]} ({len(missing)} missing)")
        labels = tuple(found[p] for p in range(n))

    records = [(to_dense(r[0]), r[1], r[2]) for r in trows]
    if n == 0:
        if records:
            raise DataError("triplets reference patients but the cohort is empty")
        return Cohort(0, schema, (), labels, keys)
    cohort = parse_triplets(records, schema, n, labels)
    if keys is not None:
        cohort = Cohort(cohort.n_patients, cohort.schema, cohort.triplets, cohort.labels, keys)
    return cohort


def load_cohort(
    schema_path: Union[str, Path],
    triplets_path: Union[str, Path],
    labels_path: Union[str, Path, None] = None,
    n_patients: Optional[int] = None,
    patient_index_path: Union[str, Path, None] = None,
) -> Cohort:
    read = lambda p: Path(p).read_text(encoding="utf-8")  # noqa: E731
    index = PatientIndex.from_json(read(patient_index_path)) if patient_index_path else None
    return cohort_from_text(
        read(schema_path),
        read(triplets_path),
        read(labels_path) if labels_path else None,
        n_patients=n_patients,
        patient_index=index,
    )


def save_cohort(cohort: Cohort, directory: Union[str, Path]) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"schema": out / "schema.json", "triplets": out / "triplets.csv"}
    paths["schema"].write_text(schema_to_json(cohort.schema), encoding="utf-8")
    paths["triplets"].write_text(triplets_to_csv(cohort), encoding="utf-8")
    if cohort.labels is not None:
        paths["labels"] = out / "labels.csv"
        paths["labels"].write_text(labels_to_csv(cohort), encoding="utf-8")
    if cohort.patient_keys is not None:
        paths["patients"] = out / "patients.json"
        paths["patients"].write_text(PatientIndex(cohort.patient_keys).to_json(), encoding="utf-8")
    return paths
