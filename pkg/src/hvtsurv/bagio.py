"""Patient/WSI bag data model and on-disk formats.

A cohort on disk is a CSV manifest (one row per WSI) plus one PBAG file
per WSI. PBAG is a little-endian binary container:

    magic "PBAG" | u32 version=1 | u32 b | u32 d
    b records of (i32 x, i32 y)        patch top-left pixel coordinates
    b*d float32 features, row-major

The manifest header is ``patient_id,wsi_path,time_months,censored`` and
``wsi_path`` is resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigurationError,
    CorruptionError,
    EmptyBagError,
    FormatError,
    InsufficientDataError,
    ResolutionError,
    ValidationError,
)
from .seeding import rng_for

PBAG_MAGIC = b"PBAG"
PBAG_VERSION = 1

MANIFEST_COLUMNS = ("patient_id", "wsi_path", "time_months", "censored")


@dataclass
class PatchBag:
    """One WSI's patch features plus their integer pixel coordinates.

    ``coords`` is (b, 2) int32 with the level-0 top-left corner of each
    256x256 patch; ``features`` is (b, d) float32. Values are treated as
    immutable after construction.
    """

    wsi_id: str
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int32))
        self.features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float32))
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {self.features.shape}")
        b = self.features.shape[0]
        if b == 0:
            raise EmptyBagError(f"bag {self.wsi_id!r} has no patches")
        if self.coords.shape != (b, 2):
            raise ValidationError(
                f"coords shape {self.coords.shape} does not match {b} feature rows"
            )
        if np.any(self.coords < 0):
            raise ValidationError(f"bag {self.wsi_id!r} has negative coordinates")
        if len(np.unique(self.coords, axis=0)) != b:
            raise ValidationError(f"bag {self.wsi_id!r} has duplicate coordinate pairs")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FollowUp:
    """Observed follow-up: time in months and right-censoring flag."""

    time_months: float
    censored: int

    def __post_init__(self):
        self.time_months = float(self.time_months)
        self.censored = int(self.censored)
        if not np.isfinite(self.time_months) or self.time_months < 0:
            raise ValidationError(f"time_months must be finite and >= 0, got {self.time_months}")
        if self.censored not in (0, 1):
            raise ValidationError(f"censored must be 0 or 1, got {self.censored}")


@dataclass
class PatientRecord:
    """A patient-level bag: one or more WSIs plus the follow-up label.

    ``interval_label`` is filled in by :func:`bin_survival_times`.
    """

    patient_id: str
    bags: list[PatchBag]
    follow_up: FollowUp
    interval_label: int | None = None

    def __post_init__(self):
        if not self.bags:
            raise ValidationError(f"patient {self.patient_id!r} has no bags")


@dataclass
class IntervalScheme:
    """Discrete survival-time intervals [t_0, t_1), ..., [t_{n-1}, inf).

    ``cutpoints`` holds t_1 ... t_{n-1}; t_0 = 0 and t_n = infinity are
    implied. A time exactly at a cutpoint belongs to the higher interval.
    """

    n_intervals: int
    cutpoints: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.cutpoints = np.asarray(self.cutpoints, dtype=np.float64)
        if self.n_intervals < 2:
            raise ValidationError(f"need at least 2 intervals, got {self.n_intervals}")
        if self.cutpoints.shape != (self.n_intervals - 1,):
            raise ValidationError(
                f"expected {self.n_intervals - 1} cutpoints, got {self.cutpoints.shape}"
            )
        if np.any(np.diff(self.cutpoints) <= 0):
            raise ValidationError("cutpoints must be strictly increasing")

    def label_for(self, time_months: float) -> int:
        """Interval index k with t_k <= time < t_{k+1}."""
        return int(np.searchsorted(self.cutpoints, time_months, side="right"))


def write_pbag_arrays(path, coords: np.ndarray, features: np.ndarray) -> None:
    """Raw PBAG writer for already-validated (or derived) arrays.

    Rearranged outputs reuse this layout even though their padded rows
    repeat coordinates, which write_patch_bag would reject.
    """
    b, d = features.shape
    with open(path, "wb") as fh:
        fh.write(PBAG_MAGIC)
        fh.write(struct.pack("<III", PBAG_VERSION, b, d))
        fh.write(np.ascontiguousarray(coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def write_patch_bag(bag: PatchBag, path) -> None:
    """Write a PBAG file; readable back bit-exactly by read_patch_bag."""
    write_pbag_arrays(path, bag.coords, bag.features)


def read_patch_bag(path) -> PatchBag:
    """Read a PBAG file. The wsi_id is taken from the file stem."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: too short to hold a PBAG header")
    if raw[:4] != PBAG_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, b, d = struct.unpack_from("<III", raw, 4)
    if version != PBAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if b == 0:
        raise EmptyBagError(f"{path}: bag holds zero patches")
    expected = 16 + b * 8 + b * d * 4
    if len(raw) != expected:
        raise CorruptionError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    coords = np.frombuffer(raw, dtype="<i4", count=b * 2, offset=16).reshape(b, 2)
    features = np.frombuffer(raw, dtype="<f4", count=b * d, offset=16 + b * 8).reshape(b, d)
    return PatchBag(wsi_id=path.stem, coords=coords, features=features)


def write_manifest(path, rows: list[dict]) -> None:
    """Write a manifest CSV. Each row needs the four manifest columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_COLUMNS})


def load_manifest(path) -> list[PatientRecord]:
    """Load a manifest CSV and its referenced PBAG files into patient records.

    Rows sharing a patient_id are grouped under one record; the follow-up
    label must be identical across a patient's rows.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise FormatError(
                f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        rows = list(reader)

    seen: set[tuple[str, str]] = set()
    grouped: dict[str, dict] = {}
    for i, row in enumerate(rows):
        pid = row["patient_id"].strip()
        wsi_path = row["wsi_path"].strip()
        if not pid or not wsi_path:
            raise ValidationError(f"{path}: row {i + 1} has an empty patient_id or wsi_path")
        key = (pid, wsi_path)
        if key in seen:
            raise ValidationError(f"{path}: duplicate row for {key}")
        seen.add(key)
        try:
            time_months = float(row["time_months"])
            censored = int(row["censored"])
        except ValueError as exc:
            raise ValidationError(f"{path}: row {i + 1}: {exc}") from exc
        follow_up = FollowUp(time_months=time_months, censored=censored)

        bag_path = Path(wsi_path)
        if not bag_path.is_absolute():
            bag_path = base / bag_path
        if not bag_path.exists():
            raise ResolutionError(f"{path}: bag file {bag_path} does not exist")
        bag = read_patch_bag(bag_path)

        entry = grouped.setdefault(pid, {"bags": [], "follow_up": follow_up})
        prev = entry["follow_up"]
        if (prev.time_months, prev.censored) != (follow_up.time_months, follow_up.censored):
            raise ValidationError(f"{path}: patient {pid!r} has inconsistent follow-up rows")
        entry["bags"].append(bag)

    records = [
        PatientRecord(patient_id=pid, bags=entry["bags"], follow_up=entry["follow_up"])
        for pid, entry in grouped.items()
    ]
    dims = {bag.feature_dim for rec in records for bag in rec.bags}
    if len(dims) > 1:
        raise ValidationError(f"{path}: mixed feature dimensions in cohort: {sorted(dims)}")
    return records


def bin_survival_times(records: list[PatientRecord], n: int) -> IntervalScheme:
    """Choose interval cutpoints and label every record in place.

    Cutpoints are the 1/n ... (n-1)/n linear-interpolation quantiles of
    the uncensored survival times; labels are assigned to all records,
    censored included.
    """
    uncensored = np.array(
        [r.follow_up.time_months for r in records if r.follow_up.censored == 0]
    )
    if len(np.unique(uncensored)) < n:
        raise InsufficientDataError(
            f"need at least {n} distinct uncensored times, have {len(np.unique(uncensored))}"
        )
    qs = np.arange(1, n) / n
    cutpoints = np.quantile(uncensored, qs, method="linear")
    if np.any(np.diff(cutpoints) <= 0):
        raise InsufficientDataError("quantile cutpoints are not strictly increasing")
    scheme = IntervalScheme(n_intervals=n, cutpoints=cutpoints)
    for rec in records:
        rec.interval_label = scheme.label_for(rec.follow_up.time_months)
    return scheme


class FoldSplit(NamedTuple):
    train: list[int]
    validation: list[int]
    test: list[int]


def stratified_kfold(
    records: list[PatientRecord],
    folds: int,
    seed: int,
    validation_fraction: float = 0.2,
) -> list[FoldSplit]:
    """Censorship-stratified cross-validation splits over patient indices.

    Each fold uses one of ``folds`` equal chunks as the test set; the
    validation set is a stratified ``validation_fraction`` of the rest
    (0.2 gives the 60:15:25 train:validation:test split at 4 folds).
    """
    if folds < 2:
        raise ConfigurationError(f"folds must be >= 2, got {folds}")
    if not records:
        raise ConfigurationError("no records to split")
    if folds > len(records):
        raise ConfigurationError(f"{folds} folds exceed {len(records)} patients")

    rng = rng_for(seed, "stratified-kfold")
    strata = []
    for flag in (0, 1):
        idx = np.array([i for i, r in enumerate(records) if r.follow_up.censored == flag])
        rng.shuffle(idx)
        strata.append(list(int(i) for i in idx))

    # Deal each shuffled stratum to folds round-robin; the cursor carries
    # across strata so remainders do not pile onto the same folds.
    fold_of: dict[int, int] = {}
    cursor = 0
    for stratum in strata:
        for i in stratum:
            fold_of[i] = cursor % folds
            cursor += 1

    n_total = len(records)
    n_censored = sum(1 for r in records if r.follow_up.censored == 1)
    splits = []
    for f in range(folds):
        test = [i for stratum in strata for i in stratum if fold_of[i] == f]
        rest_by_stratum = [[i for i in stratum if fold_of[i] != f] for stratum in strata]
        rest_unc, rest_cen = rest_by_stratum
        n_rest = len(rest_unc) + len(rest_cen)
        n_val = int(round(validation_fraction * n_rest))

        # Pick how many censored patients enter validation so that both the
        # validation and the training split stay within one patient of the
        # cohort-proportional censorship count. Rounding toward the sign of
        # the test split's own deviation cancels it instead of stacking.
        ideal_val_cen = n_val * n_censored / n_total
        rest_error = len(rest_cen) - n_rest * n_censored / n_total
        val_cen = int(np.ceil(ideal_val_cen)) if rest_error >= 0 else int(np.floor(ideal_val_cen))
        val_cen = max(max(0, n_val - len(rest_unc)), min(val_cen, min(n_val, len(rest_cen))))
        val_unc = n_val - val_cen

        val = rest_cen[:val_cen] + rest_unc[:val_unc]
        train = rest_cen[val_cen:] + rest_unc[val_unc:]
        splits.append(FoldSplit(train=sorted(train), validation=sorted(val), test=sorted(test)))
    return splits
