"""Panel containers, time splitting, lag construction and run configuration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import IngestionError, InsufficientHistoryError, InvalidSplitError, PanelError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced panel of N individuals observed over T contiguous periods.

    Parameters
    ----------
    responses : ndarray, shape (N, T)
    covariates : ndarray, shape (N, T, p)
    individual_ids : sequence of labels, length N
    time_index : int sequence, length T, strictly increasing without gaps
    lag_column : int or None
        Index of the covariate column holding the lagged response, if any.
        A time split of a lagged panel keeps the last training response as
        the first lag of the test half.
    """

    responses: np.ndarray
    covariates: np.ndarray
    individual_ids: tuple = ()
    time_index: np.ndarray = None  # type: ignore[assignment]
    lag_column: int | None = None

    def __post_init__(self):
        y = _frozen(self.responses)
        x = np.asarray(self.covariates, dtype=float)
        if y.ndim != 2:
            raise PanelError(f"responses must be 2-D (N, T), got shape {y.shape}")
        if x.ndim == 2 and x.shape == y.shape:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise PanelError(
                f"covariates shape {x.shape} does not match responses shape {y.shape}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise PanelError("panel contains non-finite values")
        n, t = y.shape
        ids = tuple(self.individual_ids) if len(self.individual_ids) else tuple(range(n))
        if len(ids) != n:
            raise PanelError(f"{len(ids)} individual ids for {n} individuals")
        if self.time_index is None:
            tix = np.arange(1, t + 1, dtype=np.int64)
        else:
            tix = np.asarray(self.time_index, dtype=np.int64).copy()
        if tix.shape != (t,):
            raise PanelError(f"time_index has length {tix.size}, expected {t}")
        if t > 1 and not np.all(np.diff(tix) == 1):
            raise PanelError("time_index must be strictly increasing without gaps")
        tix.setflags(write=False)
        if self.lag_column is not None and not 0 <= self.lag_column < x.shape[2]:
            raise PanelError(f"lag_column {self.lag_column} out of range")
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "covariates", _frozen(x))
        object.__setattr__(self, "individual_ids", ids)
        object.__setattr__(self, "time_index", tix)

    @property
    def n_individuals(self) -> int:
        return self.responses.shape[0]

    @property
    def n_periods(self) -> int:
        return self.responses.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_individuals, self.n_periods, self.n_covariates)

    def periods(self, start: int, stop: int) -> "PanelDataset":
        """Positional slice ``[start, stop)`` along the time axis."""
        return replace(
            self,
            responses=self.responses[:, start:stop],
            covariates=self.covariates[:, start:stop, :],
            time_index=self.time_index[start:stop],
        )

    def individuals(self, index: Sequence[int] | np.ndarray) -> "PanelDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            responses=self.responses[index],
            covariates=self.covariates[index],
            individual_ids=tuple(self.individual_ids[k] for k in index),
        )

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.individual_ids == other.individual_ids
            and self.lag_column == other.lag_column
            and np.array_equal(self.time_index, other.time_index)
            and np.array_equal(self.responses, other.responses)
            and np.array_equal(self.covariates, other.covariates)
        )

    def to_rows(self) -> list[list[Any]]:
        """Long-format rows ``[id, time, y, x1, ..., xp]``."""
        rows = []
        for i, ident in enumerate(self.individual_ids):
            for k, t in enumerate(self.time_index):
                rows.append(
                    [ident, int(t), float(self.responses[i, k])]
                    + [float(v) for v in self.covariates[i, k]]
                )
        return rows


@dataclass(frozen=True)
class TimeSplit:
    """Positional (0-based, half-open) train and test period ranges."""

    n_periods: int
    train: tuple[int, int]
    test: tuple[int, int]

    @classmethod
    def middle(cls, n_periods: int) -> "TimeSplit":
        if n_periods < 2:
            raise InvalidSplitError(f"need at least 2 periods to split, got T={n_periods}")
        half = n_periods // 2
        return cls(n_periods, (0, half), (half, n_periods))

    def as_dict(self) -> dict:
        # 1-based inclusive ranges, as reported to users
        return {
            "n_periods": self.n_periods,
            "train_periods": [self.train[0] + 1, self.train[1]],
            "test_periods": [self.test[0] + 1, self.test[1]],
        }


def split_time(data: PanelDataset) -> tuple[PanelDataset, PanelDataset]:
    """Split a panel in the middle of its time span.

    The training half covers periods ``1..floor(T/2)``; an odd extra period
    goes to the test half.
    """
    split = TimeSplit.middle(data.n_periods)
    return data.periods(*split.train), data.periods(*split.test)


def make_lagged(data: PanelDataset) -> PanelDataset:
    """Prepend the lagged response as the first covariate column.

    The first period is consumed as the initial condition, so the returned
    panel has ``T - 1`` periods. Existing covariates keep their order.
    """
    if data.n_periods < 2:
        raise InsufficientHistoryError(
            f"need at least 2 periods to build a lag, got T={data.n_periods}"
        )
    lag = data.responses[:, :-1, None]
    x = np.concatenate([lag, data.covariates[:, 1:, :]], axis=2)
    return PanelDataset(
        responses=data.responses[:, 1:],
        covariates=x,
        individual_ids=data.individual_ids,
        time_index=data.time_index[1:],
        lag_column=0,
    )


# covariate column holding the lagged response
LAG_NAME = "ylag"


def _parse_float(value: str, row: int, column: str) -> float:
    if value is None or value.strip() == "":
        raise IngestionError(f"row {row}: missing value in column {column!r}")
    try:
        v = float(value)
    except ValueError:
        raise IngestionError(f"row {row}: non-numeric value {value!r} in column {column!r}") from None
    if not math.isfinite(v):
        raise IngestionError(f"row {row}: non-finite value {value!r} in column {column!r}")
    return v


def _id_sort_key(ids: Sequence[str]):
    try:
        numeric = {s: float(s) for s in ids}
    except ValueError:
        return lambda s: s
    return lambda s: (numeric[s], s)


def load_csv(path: str | Path, schema: Mapping[str, Any] | None = None) -> PanelDataset:
    """Read a long-format CSV (``id, time, y, x1..xp``) into a balanced panel.

    ``schema`` may rename the columns: ``{"id": ..., "time": ..., "y": ...,
    "x": [...]}``. Without an ``x`` entry every remaining column is a
    covariate, in header order. Individuals are ordered by their id (numeric
    order when every id parses as a number) and periods ascending, so the
    result does not depend on row order. A covariate named ``ylag`` is
    taken as the lagged response.
    """
    schema = dict(schema or {})
    id_col = schema.get("id", "id")
    time_col = schema.get("time", "time")
    y_col = schema.get("y", "y")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (id_col, time_col, y_col):
            if col not in header:
                raise IngestionError(f"missing required column {col!r}")
        x_cols = list(schema.get("x") or [c for c in header if c not in (id_col, time_col, y_col)])
        for col in x_cols:
            if col not in header:
                raise IngestionError(f"missing covariate column {col!r}")
        cells: dict[tuple[str, int], tuple[float, list[float]]] = {}
        # header is row 1
        for row_no, rec in enumerate(reader, start=2):
            ident = (rec.get(id_col) or "").strip()
            if ident == "":
                raise IngestionError(f"row {row_no}: missing value in column {id_col!r}")
            tval = _parse_float(rec.get(time_col), row_no, time_col)
            if tval != int(tval):
                raise IngestionError(f"row {row_no}: non-integer time {rec.get(time_col)!r}")
            key = (ident, int(tval))
            if key in cells:
                raise IngestionError(f"row {row_no}: duplicate (id, time) key {key}")
            y = _parse_float(rec.get(y_col), row_no, y_col)
            x = [_parse_float(rec.get(c), row_no, c) for c in x_cols]
            cells[key] = (y, x)
    if not cells:
        raise IngestionError("no data rows")
    ids = sorted({k[0] for k in cells}, key=_id_sort_key([k[0] for k in cells]))
    times = sorted({k[1] for k in cells})
    if times[-1] - times[0] + 1 != len(times):
        raise IngestionError(f"time index has gaps between {times[0]} and {times[-1]}")
    n, t, p = len(ids), len(times), len(x_cols)
    if len(cells) != n * t:
        for ident in ids:
            for tv in times:
                if (ident, tv) not in cells:
                    raise IngestionError(
                        f"unbalanced panel: no row for id {ident!r} at time {tv}"
                    )
    y = np.empty((n, t))
    x = np.empty((n, t, p))
    t0 = times[0]
    for i, ident in enumerate(ids):
        for tv in times:
            yv, xv = cells[(ident, tv)]
            y[i, tv - t0] = yv
            x[i, tv - t0, :] = xv
    lag = x_cols.index(LAG_NAME) if LAG_NAME in x_cols else None
    return PanelDataset(y, x, tuple(ids), np.array(times), lag_column=lag)


def write_csv(data: PanelDataset, path: str | Path) -> None:
    names = [f"x{k + 1}" for k in range(data.n_covariates - (data.lag_column is not None))]
    if data.lag_column is not None:
        names.insert(data.lag_column, LAG_NAME)
    header = ["id", "time", "y"] + names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data.to_rows():
            w.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


@dataclass
class RunConfig:
    """Tuning knobs shared by estimation, selection and the harness.

    ``ic_constants`` overrides the information-criterion tuning, keyed by
    ``"pc_lambda"``, ``"lic_lambda"`` or ``"lic_probit_literal"``.
    ``w_anchor`` picks where the plain-model weights are evaluated:
    ``"fit"`` (evaluation split's own fitted coefficients) or
    ``"nodewise"`` (per-individual estimates on the evaluation split).
    """

    g_min: int = 1
    g_max: int = 7
    n_restarts: int = 10
    max_iter: int = 200
    tol: float = 1e-8
    seed: int = 0
    alpha_max_iter: int = 100
    alpha_tol: float = 1e-10
    newton_max_iter: int = 100
    ic_constants: dict = field(default_factory=dict)
    w_anchor: str = "fit"
    reassign_after_stage2: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.g_min < 1:
            raise PanelError("g_min must be at least 1")
        if self.g_max < self.g_min:
            raise PanelError("g_max must be at least g_min")
        if not self.tol > 0:
            raise PanelError("tol must be positive")
        if self.n_restarts < 1 or self.max_iter < 1:
            raise PanelError("n_restarts and max_iter must be positive")
        if self.w_anchor not in ("fit", "nodewise"):
            raise PanelError(f"unknown w_anchor {self.w_anchor!r}")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)
