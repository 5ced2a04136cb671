"""Longitudinal claim-count panel: per policyholder, an ordered sequence of
(count, covariate vector) observations, plus CSV ingestion and validation.

The panel is ragged: the number of periods may differ across policies.
Covariates are taken as-is; an intercept is a caller-supplied constant
column, never added implicitly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

CSV_FIXED_COLUMNS = ("policy_id", "period", "count")


class PanelError(ValueError):
    """Malformed panel data; message names the offending row/column."""


@dataclass(frozen=True, eq=False)
class PolicyRecord:
    """One policyholder's history: counts[t] claims in period t with
    covariate row covariates[t]."""

    id: str
    counts: np.ndarray          # shape (T,), nonnegative ints
    covariates: np.ndarray      # shape (T, p)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if counts.ndim != 1 or counts.size == 0:
            raise PanelError(f"policy {self.id!r}: needs at least one period")
        if np.any(counts < 0):
            raise PanelError(f"policy {self.id!r}: negative claim count")
        if cov.shape[0] != counts.size:
            raise PanelError(
                f"policy {self.id!r}: {counts.size} counts but {cov.shape[0]} covariate rows"
            )
        counts.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "covariates", cov)

    @property
    def n_periods(self) -> int:
        return self.counts.size


@dataclass(frozen=True, eq=False)
class ClaimPanel:
    """Immutable collection of policy records sharing one covariate layout."""

    policies: tuple[PolicyRecord, ...]
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        policies = tuple(self.policies)
        names = tuple(self.covariate_names)
        if not policies:
            raise PanelError("panel must contain at least one policy")
        p = len(names)
        seen = set()
        for rec in policies:
            if rec.id in seen:
                raise PanelError(f"duplicate policy id {rec.id!r}")
            seen.add(rec.id)
            if rec.covariates.shape[1] != p:
                raise PanelError(
                    f"policy {rec.id!r}: covariate width {rec.covariates.shape[1]}, expected {p}"
                )
        object.__setattr__(self, "policies", policies)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_policies(self) -> int:
        return len(self.policies)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_obs(self) -> int:
        return int(self.period_counts.sum())

    @cached_property
    def period_counts(self) -> np.ndarray:
        """T_i per policy."""
        return np.array([rec.n_periods for rec in self.policies], dtype=np.int64)

    @cached_property
    def counts(self) -> np.ndarray:
        """All counts stacked in policy order, shape (n_obs,)."""
        return np.concatenate([rec.counts for rec in self.policies])

    @cached_property
    def design_matrix(self) -> np.ndarray:
        """All covariate rows stacked in policy order, shape (n_obs, p)."""
        return np.vstack([rec.covariates for rec in self.policies])

    @cached_property
    def policy_index(self) -> np.ndarray:
        """Maps each stacked observation to its policy ordinal."""
        return np.repeat(np.arange(self.n_policies), self.period_counts)

    @cached_property
    def policy_starts(self) -> np.ndarray:
        """Start offsets of each policy's block in the stacked arrays."""
        return np.concatenate([[0], np.cumsum(self.period_counts)[:-1]])

    def policy_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum a stacked per-observation array within each policy."""
        return np.bincount(self.policy_index, weights=values, minlength=self.n_policies)

    def subset_periods(self, keep_last: bool) -> "ClaimPanel":
        """Split off either the last period of every policy (keep_last=True)
        or everything before it (keep_last=False).  Requires >= 2 periods."""
        recs = []
        for rec in self.policies:
            if rec.n_periods < 2:
                raise PanelError(f"policy {rec.id!r}: needs >= 2 periods to hold one out")
            if keep_last:
                recs.append(PolicyRecord(rec.id, rec.counts[-1:], rec.covariates[-1:, :]))
            else:
                recs.append(PolicyRecord(rec.id, rec.counts[:-1], rec.covariates[:-1, :]))
        return ClaimPanel(tuple(recs), self.covariate_names)


def _parse_count(text: str, row_num: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise PanelError(f"row {row_num}: column 'count' is not an integer: {text!r}") from None
    if value < 0:
        raise PanelError(f"row {row_num}: column 'count' is negative: {value}")
    return value


def parse_panel_csv(text: str) -> ClaimPanel:
    """Parse UTF-8 CSV with header policy_id,period,count,<covariate names...>.

    Rows are grouped by policy_id and ordered by period within each policy;
    periods must be unique per policy but need not be contiguous.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PanelError("empty input: missing header row") from None
    header = [h.strip() for h in header]
    for col in CSV_FIXED_COLUMNS:
        if col not in header:
            raise PanelError(f"missing required column {col!r} in header")
    if header[: len(CSV_FIXED_COLUMNS)] != list(CSV_FIXED_COLUMNS):
        raise PanelError(
            f"header must start with {','.join(CSV_FIXED_COLUMNS)}, got {','.join(header)}"
        )
    covariate_names = header[len(CSV_FIXED_COLUMNS):]
    if not covariate_names:
        raise PanelError("header declares no covariate columns")
    p = len(covariate_names)

    # policy -> {period: (count, covariates)}; insertion order preserved
    by_policy: dict[str, dict[float, tuple[int, list[float]]]] = {}
    for row_num, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3 + p:
            raise PanelError(
                f"row {row_num}: expected {3 + p} fields, got {len(row)} (ragged covariates)"
            )
        policy_id = row[0].strip()
        if not policy_id:
            raise PanelError(f"row {row_num}: column 'policy_id' is empty")
        try:
            period = float(row[1])
        except ValueError:
            raise PanelError(
                f"row {row_num}: column 'period' is not numeric: {row[1]!r}"
            ) from None
        count = _parse_count(row[2].strip(), row_num)
        covs = []
        for j, cell in enumerate(row[3:]):
            try:
                covs.append(float(cell))
            except ValueError:
                raise PanelError(
                    f"row {row_num}: column {covariate_names[j]!r} is not numeric: {cell!r}"
                ) from None
        periods = by_policy.setdefault(policy_id, {})
        if period in periods:
            raise PanelError(
                f"row {row_num}: duplicate (policy_id, period) = ({policy_id!r}, {row[1]})"
            )
        periods[period] = (count, covs)

    if not by_policy:
        raise PanelError("no data rows")

    records = []
    for policy_id, periods in by_policy.items():
        ordered = sorted(periods.items(), key=lambda kv: kv[0])
        counts = np.array([c for _, (c, _) in ordered], dtype=np.int64)
        covs = np.array([v for _, (_, v) in ordered], dtype=float)
        records.append(PolicyRecord(policy_id, counts, covs))
    return ClaimPanel(tuple(records), tuple(covariate_names))


def panel_to_csv(panel: ClaimPanel) -> str:
    """Serialize back to the ingestion CSV format (periods renumbered 1..T_i)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(CSV_FIXED_COLUMNS) + list(panel.covariate_names))
    for rec in panel.policies:
        for t in range(rec.n_periods):
            writer.writerow(
                [rec.id, t + 1, int(rec.counts[t])] + [repr(v) for v in rec.covariates[t]]
            )
    return out.getvalue()


def panels_equal(a: ClaimPanel, b: ClaimPanel) -> bool:
    """Exact structural equality (ids, counts, covariates, names)."""
    if a.covariate_names != b.covariate_names or a.n_policies != b.n_policies:
        return False
    for ra, rb in zip(a.policies, b.policies):
        if ra.id != rb.id:
            return False
        if not np.array_equal(ra.counts, rb.counts):
            return False
        if not np.array_equal(ra.covariates, rb.covariates):
            return False
    return True


def linear_predictor(panel: ClaimPanel, beta) -> list[np.ndarray]:
    """Per-policy arrays of rates exp(x . beta), strictly positive."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (panel.n_covariates,):
        raise PanelError(
            f"beta has length {beta.size}, panel has {panel.n_covariates} covariates"
        )
    flat = np.exp(panel.design_matrix @ beta)
    starts = panel.policy_starts
    ends = np.append(starts[1:], panel.n_obs)
    return [flat[s:e] for s, e in zip(starts, ends)]


def linear_predictor_flat(panel: ClaimPanel, beta) -> np.ndarray:
    """Stacked rates exp(x . beta) aligned with panel.counts."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (panel.n_covariates,):
        raise PanelError(
            f"beta has length {beta.size}, panel has {panel.n_covariates} covariates"
        )
    return np.exp(panel.design_matrix @ beta)
