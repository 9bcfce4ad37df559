"""Archive of trained-and-measured candidates, persisted as newline-delimited JSON.

File layout: an optional header line ``{"archive_version": N}`` followed by
one JSON object per entry.  See ``docs/formats.md`` for a worked example.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mdl
from .errors import ContractViolation, MalformedFileError

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 2
_TOL = 1e-9


@dataclass
class ArchiveEntry:
    """Measured figures of one trained candidate.

    ``accuracy`` and ``macs`` are the thresholded early-exit values on the
    validation split; ``backbone_accuracy`` is the final exit alone.
    """

    genome: tuple
    accuracy: float
    macs: float
    thresholds: list
    utilization: list
    gamma: list
    seed: int
    backbone_accuracy: float = float("nan")
    ece: list = field(default_factory=list)
    epochs: int = 0
    iteration: int = 0

    def __post_init__(self):
        self.genome = tuple(int(g) for g in self.genome)
        self.thresholds = [float(t) for t in self.thresholds]
        self.utilization = [float(u) for u in self.utilization]
        self.gamma = [float(g) for g in self.gamma]
        self.ece = [float(e) for e in self.ece]
        self.accuracy = float(self.accuracy)
        self.macs = float(self.macs)
        self.backbone_accuracy = float(self.backbone_accuracy)
        self.seed = int(self.seed)
        self.epochs = int(self.epochs)
        self.iteration = int(self.iteration)
        self.validate()

    @property
    def genome_obj(self):
        return mdl.Genome.from_chromosome(self.genome)

    @property
    def key(self):
        return self.genome_obj.key()

    @property
    def num_exits(self):
        return len(self.gamma)

    def admissible(self, accuracy_constraint, macs_constraint):
        return self.accuracy >= accuracy_constraint and self.macs <= macs_constraint

    def validate(self):
        problems = []
        try:
            mdl.Genome.from_chromosome(self.genome)
        except Exception as exc:  # any genome failure is reported uniformly
            problems.append(f"genome: {exc}")
        B = len(self.gamma)
        if B < 1:
            problems.append("gamma is empty")
        if len(self.utilization) != B:
            problems.append(f"{len(self.utilization)} utilizations for {B} exits")
        if len(self.thresholds) != max(B - 1, 0):
            problems.append(f"{len(self.thresholds)} thresholds for {B} exits")
        if self.utilization and abs(sum(self.utilization) - 1.0) > 1e-6:
            problems.append(f"utilizations sum to {sum(self.utilization)}")
        if any(u < -_TOL or u > 1 + _TOL for u in self.utilization):
            problems.append("utilization outside [0, 1]")
        if any(g <= 0 or not math.isfinite(g) for g in self.gamma):
            problems.append("gamma entries must be positive and finite")
        if any(b < a for a, b in zip(self.gamma, self.gamma[1:])):
            problems.append("gamma must be non-decreasing")
        if any(t < 0 or t > 1 for t in self.thresholds):
            problems.append("thresholds outside [0, 1]")
        if not 0.0 <= self.accuracy <= 1.0:
            problems.append(f"accuracy {self.accuracy} outside [0, 1]")
        if not (self.macs > 0 and math.isfinite(self.macs)):
            problems.append(f"macs {self.macs} must be positive")
        elif self.gamma and not (min(self.gamma) * (1 - 1e-9) <= self.macs <= max(self.gamma) * (1 + 1e-9)):
            problems.append("macs outside the gamma range")
        if problems:
            raise ContractViolation("invalid archive entry: " + "; ".join(problems))

    def to_dict(self):
        d = asdict(self)
        d["genome"] = list(self.genome)
        d["key"] = self.key
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        key = d.pop("key", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown archive fields {sorted(unknown)}")
        entry = cls(**d)
        if key is not None and key != entry.key:
            raise ContractViolation(f"key {key!r} does not match genome {entry.key!r}")
        return entry


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps_entry(entry):
    return json.dumps(entry.to_dict(), sort_keys=True, default=_json_default, allow_nan=True)


def persist_archive(entries, path):
    """Write the header line and every entry, atomically via a temporary file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"archive_version": ARCHIVE_VERSION}) + "\n")
        for e in entries:
            fh.write(dumps_entry(e) + "\n")
    os.replace(tmp, path)


def append_entries(entries, path):
    """Append entries to an existing archive file (header written if the file is new)."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(json.dumps({"archive_version": ARCHIVE_VERSION}) + "\n")
        for e in entries:
            fh.write(dumps_entry(e) + "\n")


def load_archive(path):
    """Load and validate every record; any bad line rejects the whole file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return loads_archive(text, source=str(path))


def loads_archive(text, source="<archive>"):
    lines = text.split("\n")
    complete = text.endswith("\n") or text == ""
    entries = []
    version = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            partial = lineno == len(lines) and not complete
            what = "partial trailing record" if partial else "corrupt record"
            raise MalformedFileError(f"{source}: {what} at line {lineno}: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise MalformedFileError(f"{source}: line {lineno} is not a JSON object", line=lineno)
        if "archive_version" in obj and len(obj) == 1:
            if entries or version is not None:
                raise MalformedFileError(f"{source}: header out of place at line {lineno}", line=lineno)
            version = obj["archive_version"]
            continue
        try:
            entries.append(ArchiveEntry.from_dict(obj))
        except (ContractViolation, TypeError, ValueError) as exc:
            raise MalformedFileError(f"{source}: invalid record at line {lineno}: {exc}", line=lineno) from None
    if version is None:
        log.warning("%s: no version header; assuming a pre-versioned archive", source)
    elif not isinstance(version, int) or version > ARCHIVE_VERSION:
        raise MalformedFileError(f"{source}: unsupported archive version {version!r}", line=1)
    elif version < ARCHIVE_VERSION:
        log.warning("%s: archive version %d is older than %d; records validated, continuing", source, version, ARCHIVE_VERSION)
    keys = [e.key for e in entries]
    if len(set(keys)) != len(keys):
        raise MalformedFileError(f"{source}: duplicate genome keys in archive")
    return entries
