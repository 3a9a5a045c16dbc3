"""Dyadic panel ingestion, threshold grids, and counterfactual covariates."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

__all__ = [
    "DyadPanel", "ThresholdGrid", "TreatmentSpec",
    "QuantileIndexed", "Equidistant", "Explicit",
    "load_csv", "write_csv", "load_schema", "build_grid",
    "counterfactual_covariates",
]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DyadPanel:
    """Observed dyads with dense 0-based sender/receiver indices.

    Rows are stored sorted by (sender, receiver); this canonical order is
    what reproducible seeding and CSV output refer to.  Arrays are
    read-only; the panel is safe to share across threads.
    """

    sender: np.ndarray
    receiver: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    n_senders: int
    n_receivers: int
    sender_labels: tuple = ()
    receiver_labels: tuple = ()

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def d_x(self) -> int:
        return self.covariates.shape[1]

    @cached_property
    def reciprocal_rows(self) -> np.ndarray:
        """Row index of the label-symmetric dyad (j, i), or -1 if absent."""
        s_lab = self.sender_labels or tuple(range(self.n_senders))
        r_lab = self.receiver_labels or tuple(range(self.n_receivers))
        lookup = {(s_lab[i], r_lab[j]): row
                  for row, (i, j) in enumerate(zip(self.sender, self.receiver))}
        out = np.full(self.n, -1, dtype=np.int64)
        for row, (i, j) in enumerate(zip(self.sender, self.receiver)):
            out[row] = lookup.get((r_lab[j], s_lab[i]), -1)
        return out

    @cached_property
    def pair_slots(self) -> np.ndarray:
        """Shared-draw slot per row: symmetric dyads map to one slot.

        Slots are numbered by first occurrence in row order, so a panel
        without symmetric pairs gets slots 0..n-1 identical to row order.
        """
        recip = self.reciprocal_rows
        slots = np.full(self.n, -1, dtype=np.int64)
        nxt = 0
        for row in range(self.n):
            if slots[row] >= 0:
                continue
            slots[row] = nxt
            partner = recip[row]
            if partner >= 0:
                slots[partner] = nxt
            nxt += 1
        return slots

    @classmethod
    def from_arrays(cls, sender, receiver, outcome, covariates,
                    covariate_names=None, sender_labels=None,
                    receiver_labels=None) -> "DyadPanel":
        """Validate, relabel to dense indices, sort rows, and freeze."""
        sender = np.asarray(sender)
        receiver = np.asarray(receiver)
        outcome = np.asarray(outcome, dtype=np.float64)
        covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        if covariates.shape[0] != outcome.shape[0]:
            covariates = covariates.T
        n = outcome.shape[0]
        if sender.shape[0] != n or receiver.shape[0] != n \
                or covariates.shape[0] != n:
            raise ValidationError("column lengths differ")
        if not np.isfinite(outcome).all():
            raise ValidationError("non-finite outcome values")
        if not np.isfinite(covariates).all():
            raise ValidationError("non-finite covariate values")

        if sender_labels is None:
            sender_labels, s_idx = np.unique(sender, return_inverse=True)
            sender_labels = tuple(sender_labels.tolist())
        else:
            s_idx = sender.astype(np.int64)
        if receiver_labels is None:
            receiver_labels, r_idx = np.unique(receiver, return_inverse=True)
            receiver_labels = tuple(receiver_labels.tolist())
        else:
            r_idx = receiver.astype(np.int64)
        n_senders = len(sender_labels)
        n_receivers = len(receiver_labels)

        order = np.lexsort((r_idx, s_idx))
        s_idx, r_idx = s_idx[order], r_idx[order]
        outcome, covariates = outcome[order], covariates[order]

        pair_keys = s_idx.astype(np.int64) * n_receivers + r_idx
        if np.unique(pair_keys).size != n:
            dup = np.flatnonzero(np.diff(np.sort(pair_keys)) == 0)[:5]
            raise ValidationError(f"duplicate (sender, receiver) pairs "
                                  f"(first sorted positions {dup.tolist()})")

        s_counts = np.bincount(s_idx, minlength=n_senders)
        r_counts = np.bincount(r_idx, minlength=n_receivers)
        thin_s = np.flatnonzero(s_counts < 2)
        thin_r = np.flatnonzero(r_counts < 2)
        if thin_s.size or thin_r.size:
            raise ValidationError(
                "units with fewer than 2 observations: senders "
                f"{[sender_labels[i] for i in thin_s]}, receivers "
                f"{[receiver_labels[j] for j in thin_r]}")

        if covariate_names is None:
            covariate_names = tuple(f"x{c + 1}"
                                    for c in range(covariates.shape[1]))
        return cls(
            sender=_frozen(s_idx.astype(np.int64)),
            receiver=_frozen(r_idx.astype(np.int64)),
            outcome=_frozen(outcome),
            covariates=_frozen(covariates),
            covariate_names=tuple(covariate_names),
            n_senders=n_senders,
            n_receivers=n_receivers,
            sender_labels=tuple(sender_labels),
            receiver_labels=tuple(receiver_labels),
        )


@dataclass(frozen=True)
class ThresholdGrid:
    """Strictly increasing thresholds inside a region of interest."""

    values: np.ndarray
    region: tuple[float, float]

    def __post_init__(self):
        vals = _frozen(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", vals)
        lo, hi = self.region
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValidationError(f"bad region {self.region}")
        if vals.size == 0:
            raise ValidationError("empty threshold grid")
        if np.any(np.diff(vals) <= 0):
            raise ValidationError("thresholds not strictly increasing")
        if vals[0] < lo or vals[-1] > hi:
            raise ValidationError("thresholds outside the region")

    def __len__(self):
        return self.values.size


# Grid construction modes.
@dataclass(frozen=True)
class QuantileIndexed:
    indices: tuple[float, ...]


@dataclass(frozen=True)
class Equidistant:
    count: int


@dataclass(frozen=True)
class Explicit:
    values: tuple[float, ...]


def build_grid(panel: DyadPanel, mode, region) -> ThresholdGrid:
    """Construct a threshold grid over `region` = (y_lo, y_hi).

    Quantile-indexed grids take empirical outcome quantiles (inverted-CDF
    convention, so thresholds are attained data values) and silently drop
    duplicates; discrete outcomes collide naturally.
    """
    lo, hi = float(region[0]), float(region[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValidationError(f"bad region {region}")
    if isinstance(mode, QuantileIndexed):
        idx = np.asarray(mode.indices, dtype=np.float64)
        if idx.size == 0 or np.any(idx <= 0) or np.any(idx >= 1):
            raise ValidationError("quantile indices must lie in (0, 1)")
        if np.any(np.diff(idx) <= 0):
            raise ValidationError("quantile indices must be strictly increasing")
        vals = np.quantile(panel.outcome, idx, method="inverted_cdf")
    elif isinstance(mode, Equidistant):
        if mode.count < 1:
            raise ValidationError("equidistant count must be >= 1")
        vals = np.linspace(lo, hi, mode.count)
    elif isinstance(mode, Explicit):
        vals = np.asarray(mode.values, dtype=np.float64)
        if vals.size and np.any(np.diff(vals) <= 0):
            raise ValidationError("explicit thresholds must be strictly increasing")
    else:
        raise ConfigError(f"unknown grid mode {mode!r}")
    vals = np.unique(np.clip(vals, lo, hi))
    if vals.size == 0:
        raise ValidationError("grid construction produced no thresholds")
    if vals.size > 512:
        raise ValidationError(f"grid of {vals.size} points exceeds the "
                              "512-point cap")
    return ThresholdGrid(values=vals, region=(lo, hi))


@dataclass(frozen=True)
class TreatmentSpec:
    """Which covariate column is the treatment and how to move it.

    kind 'binary' uses levels (0, 1); 'shift' uses (t, t + amount);
    'log_double' uses (t, t + log 2), the effect of doubling a treatment
    that enters in logs.
    """

    treatment_index: int
    kind: str = "shift"
    amount: float = 1.0

    def __post_init__(self):
        if self.kind not in ("binary", "shift", "log_double"):
            raise ConfigError(f"unknown treatment kind {self.kind!r}")
        if self.kind == "shift" and not (np.isfinite(self.amount)
                                         and self.amount != 0.0):
            raise ConfigError("shift amount must be finite and nonzero")

    def validate(self, panel: DyadPanel):
        if not 0 <= self.treatment_index < panel.d_x:
            raise ConfigError(
                f"treatment index {self.treatment_index} out of range for "
                f"{panel.d_x} covariates")


def counterfactual_covariates(panel: DyadPanel, spec: TreatmentSpec,
                              k: int) -> np.ndarray:
    """Covariate matrix with the treatment column set to level k.

    Returns the panel's own (read-only) matrix whenever level k leaves it
    unchanged, so downstream code can recognize the null counterfactual.
    """
    spec.validate(panel)
    if k not in (0, 1):
        raise ConfigError(f"counterfactual level must be 0 or 1, got {k}")
    x = panel.covariates
    col = spec.treatment_index
    if spec.kind == "binary":
        level = float(k)
        if np.all(x[:, col] == level):
            return x
        out = x.copy()
        out[:, col] = level
        return out
    if k == 0:
        return x
    out = x.copy()
    shift = np.log(2.0) if spec.kind == "log_double" else float(spec.amount)
    out[:, col] = out[:, col] + shift
    return out


# -- CSV interface ---------------------------------------------------------

def load_schema(source) -> dict:
    """Read a column-mapping schema from JSON/TOML file, JSON text, or dict.

    Expected keys: sender, receiver, outcome, covariates (list of names).
    """
    if isinstance(source, dict):
        schema = source
    else:
        text = None
        path = Path(source)
        if path.exists():
            if path.suffix.lower() == ".toml":
                try:
                    import tomllib
                except ModuleNotFoundError:
                    import tomli as tomllib
                schema = tomllib.loads(path.read_text(encoding="utf-8"))
            else:
                text = path.read_text(encoding="utf-8")
        else:
            text = str(source)
        if text is not None:
            try:
                schema = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"schema is not valid JSON: {exc}") from exc
    missing = {"sender", "receiver", "outcome", "covariates"} - schema.keys()
    if missing:
        raise ConfigError(f"schema missing keys: {sorted(missing)}")
    if not schema["covariates"]:
        raise ConfigError("schema lists no covariates")
    return schema


def load_csv(path, schema) -> DyadPanel:
    """Load a dyadic panel from a headed CSV file.

    Missing pairs are simply absent rows.  Sender/receiver labels are
    arbitrary strings or numbers; they are relabeled to dense indices with
    the original labels kept for lookups.
    """
    schema = load_schema(schema)
    cov_names = list(schema["covariates"])
    senders, receivers, outcomes = [], [], []
    cov_rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty file, header row required")
        needed = [schema["sender"], schema["receiver"], schema["outcome"],
                  *cov_names]
        absent = [c for c in needed if c not in reader.fieldnames]
        if absent:
            raise ParseError(f"missing columns: {absent}")
        for lineno, row in enumerate(reader, start=2):
            try:
                senders.append(row[schema["sender"]])
                receivers.append(row[schema["receiver"]])
                outcomes.append(float(row[schema["outcome"]]))
                cov_rows.append([float(row[c]) for c in cov_names])
            except (TypeError, ValueError, KeyError) as exc:
                raise ParseError(f"malformed value ({exc})", row=lineno) from exc
    if not outcomes:
        raise ParseError("no data rows")
    return DyadPanel.from_arrays(
        sender=np.asarray(senders, dtype=object),
        receiver=np.asarray(receivers, dtype=object),
        outcome=np.asarray(outcomes),
        covariates=np.asarray(cov_rows),
        covariate_names=cov_names,
    )


def write_csv(panel: DyadPanel, path, schema=None) -> dict:
    """Write the panel in canonical row order; returns the schema used."""
    if schema is None:
        schema = {"sender": "sender", "receiver": "receiver",
                  "outcome": "outcome",
                  "covariates": list(panel.covariate_names)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema["sender"], schema["receiver"],
                         schema["outcome"], *schema["covariates"]])
        for row in range(panel.n):
            writer.writerow([
                panel.sender_labels[panel.sender[row]],
                panel.receiver_labels[panel.receiver[row]],
                repr(float(panel.outcome[row])),
                *[repr(float(v)) for v in panel.covariates[row]],
            ])
    return schema
