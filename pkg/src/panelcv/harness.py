"""Monte Carlo experiments over simulated designs, and rolling-window prediction error.

Experiment config file
----------------------
A plain ``key = value`` file (``#`` starts a comment)::

    dgps = 1, 1FE, 2
    sizes = 200x100, 400x150
    methods = cv, bic, pc, lic
    replications = 100
    seed = 20240101
    g_min = 2
    g_max = 7
    n_groups = 4
    n_restarts = 10
    burn_in = 100
    threads = 4
    # information-criterion overrides
    lic_lambda = 0.01
    lic_probit_literal = false

Outputs written to the output directory: ``results.csv`` (bias and RMSE per
design, size and method), ``histogram.csv`` (counts of the selected minus
true group count), ``replicates.jsonl`` (one record per replicate, reused on
re-runs with the same settings) and ``timing.json``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core import PanelDataset, RunConfig
from .dgp import DgpSpec, dgp_family, simulate
from .errors import PanelError, SpecError, UnsupportedMethodError
from .estimation import fit
from .models import ModelFamily
from .selection import select, substream_seed
from .serialize import write_csv

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05


# ---------------------------------------------------------------------------
# configuration


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Read a ``key = value`` file into a dict of raw strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text()
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def _as_list(v) -> list[str]:
    if isinstance(v, (list, tuple)):
        return [str(s) for s in v]
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _as_sizes(v) -> list[tuple[int, int]]:
    if isinstance(v, (list, tuple)) and v and isinstance(v[0], (list, tuple)):
        return [(int(a), int(b)) for a, b in v]
    sizes = []
    for item in _as_list(v):
        a, _, b = item.lower().partition("x")
        sizes.append((int(a), int(b)))
    return sizes


IC_KEYS = ("pc_lambda", "lic_lambda", "lic_c", "lic_probit_literal")


def run_config_from(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Overlay recognised keys from a parsed config file onto a RunConfig."""
    base = base or RunConfig()
    kw: dict[str, Any] = {}
    for key in ("g_min", "g_max", "n_restarts", "max_iter", "alpha_max_iter", "newton_max_iter",
                "threads"):
        if key in values:
            kw[key] = int(values[key])
    for key in ("tol", "alpha_tol"):
        if key in values:
            kw[key] = float(values[key])
    if "seed" in values:
        kw["seed"] = int(values["seed"])
    if "w_anchor" in values:
        kw["w_anchor"] = str(values["w_anchor"])
    if "reassign_after_stage2" in values:
        kw["reassign_after_stage2"] = _as_bool(values["reassign_after_stage2"])
    ic = dict(base.ic_constants)
    for key in IC_KEYS:
        if key in values:
            ic[key] = _as_bool(values[key]) if key == "lic_probit_literal" else float(values[key])
    kw["ic_constants"] = ic
    return base.with_(**kw)


@dataclass
class ExperimentConfig:
    dgps: list[str] = field(default_factory=lambda: ["1"])
    sizes: list[tuple[int, int]] = field(default_factory=lambda: [(200, 100)])
    methods: list[str] = field(default_factory=lambda: ["cv"])
    replications: int = 100
    seed: int = 0
    g_min: int = 2
    g_max: int = 7
    n_groups: int = 4
    n_restarts: int = 10
    max_iter: int = 200
    tol: float = 1e-8
    burn_in: int = 100
    threads: int = 1
    ic_constants: dict = field(default_factory=dict)
    betas: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        if "dgps" in values:
            cfg.dgps = [s.upper() for s in _as_list(values["dgps"])]
        if "sizes" in values:
            cfg.sizes = _as_sizes(values["sizes"])
        if "methods" in values:
            cfg.methods = [s.lower() for s in _as_list(values["methods"])]
        for key in ("replications", "seed", "g_min", "g_max", "n_groups", "n_restarts",
                    "max_iter", "burn_in", "threads"):
            if key in values:
                setattr(cfg, key, int(values[key]))
        if "tol" in values:
            cfg.tol = float(values["tol"])
        for key in IC_KEYS:
            if key in values:
                v = values[key]
                cfg.ic_constants[key] = _as_bool(v) if key == "lic_probit_literal" else float(v)
        if "betas" in values and isinstance(values["betas"], dict):
            cfg.betas = {str(k).upper(): v for k, v in values["betas"].items()}
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_mapping(parse_kv_file(path))

    def run_config(self, seed: int) -> RunConfig:
        return RunConfig(g_min=self.g_min, g_max=self.g_max, n_restarts=self.n_restarts,
                         max_iter=self.max_iter, tol=self.tol, seed=seed,
                         ic_constants=dict(self.ic_constants))

    def fingerprint(self) -> str:
        """Hash of every setting that changes a replicate's outcome."""
        d = asdict(self)
        for key in ("replications", "threads", "dgps", "sizes", "methods"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cell_key(dgp: str, n: int, t: int) -> int:
    return zlib.crc32(f"{dgp}|{n}|{t}".encode())


# ---------------------------------------------------------------------------
# replicates


def run_replicate(cfg: ExperimentConfig, dgp: str, n: int, t: int, r: int) -> dict:
    """Simulate one panel and record the group count chosen by every method."""
    key = cell_key(dgp, n, t)
    started = time.perf_counter()
    betas = cfg.betas.get(dgp)
    spec = DgpSpec(dgp, n, t, cfg.n_groups, betas, cfg.burn_in,
                   seed=substream_seed(cfg.seed, key, r, 0))
    data = simulate(spec).data
    family = dgp_family(dgp)
    run_cfg = cfg.run_config(substream_seed(cfg.seed, key, r, 1))
    methods = {}
    for method in cfg.methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sel = select(data, family, method, run_cfg, keep_fits=False)
            methods[method] = {"status": "ok", "g_hat": sel.chosen,
                               "criterion": [None if not math.isfinite(v) else v for v in sel.criterion]}
        except UnsupportedMethodError as exc:
            methods[method] = {"status": "unsupported", "g_hat": None, "error": str(exc)}
        except (PanelError, np.linalg.LinAlgError, FloatingPointError) as exc:
            methods[method] = {"status": "failed", "g_hat": None, "error": str(exc)}
    return {
        "dgp": dgp, "N": n, "T": t, "r": r, "G0": cfg.n_groups,
        "fingerprint": cfg.fingerprint(), "methods": methods,
        "seconds": time.perf_counter() - started,
    }


def _task(args):
    return run_replicate(*args)


def _load_existing(path: Path, fingerprint: str) -> dict[tuple, dict]:
    found = {}
    if not path.exists():
        return found
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("fingerprint") == fingerprint:
            found[(rec["dgp"], rec["N"], rec["T"], rec["r"])] = rec
    return found


@dataclass
class CellSummary:
    dgp: str
    n: int
    t: int
    method: str
    g_hats: list[int]
    n_failed: int
    n_unsupported: int
    g0: int

    @property
    def deviations(self) -> np.ndarray:
        return np.array(self.g_hats, dtype=float) - self.g0

    @property
    def bias(self) -> float:
        return float(self.deviations.mean()) if self.g_hats else math.nan

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.deviations ** 2))) if self.g_hats else math.nan

    @property
    def failure_rate(self) -> float:
        total = len(self.g_hats) + self.n_failed
        return self.n_failed / total if total else 0.0


@dataclass
class McResult:
    cells: list[CellSummary]
    records: list[dict]
    seconds: float
    failed_cells: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed_cells

    def cell(self, dgp: str, n: int, t: int, method: str) -> CellSummary:
        for c in self.cells:
            if (c.dgp, c.n, c.t, c.method) == (dgp, n, t, method):
                return c
        raise KeyError((dgp, n, t, method))


def aggregate(records: Iterable[dict], cfg: ExperimentConfig) -> list[CellSummary]:
    """Bias/RMSE summaries recomputed from per-replicate records."""
    by_cell: dict[tuple, list[dict]] = {}
    for rec in records:
        by_cell.setdefault((rec["dgp"], rec["N"], rec["T"]), []).append(rec)
    cells = []
    for dgp in cfg.dgps:
        for n, t in cfg.sizes:
            recs = sorted(by_cell.get((dgp, n, t), []), key=lambda r: r["r"])
            for method in cfg.methods:
                outcomes = [r["methods"].get(method, {"status": "failed"}) for r in recs]
                cells.append(CellSummary(
                    dgp, n, t, method,
                    [o["g_hat"] for o in outcomes if o["status"] == "ok"],
                    sum(o["status"] == "failed" for o in outcomes),
                    sum(o["status"] == "unsupported" for o in outcomes),
                    cfg.n_groups,
                ))
    return cells


def _collect(produced, records, sink):
    # append as replicates finish so an interrupted run can resume
    for rec in produced:
        records.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
            sink.flush()


def run_monte_carlo(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                    resume: bool = True) -> McResult:
    """Run every (design, size, replicate) and summarise each method's choices.

    Replicate ``r`` of a cell is seeded from ``(seed, cell, r)`` alone, so
    results do not depend on worker count or execution order. With
    ``out_dir`` set, records already present for the same settings are
    reused.
    """
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    existing: dict[tuple, dict] = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            existing = _load_existing(out / "replicates.jsonl", cfg.fingerprint())
    todo, records = [], []
    for dgp in cfg.dgps:
        for n, t in cfg.sizes:
            for r in range(cfg.replications):
                key = (dgp, n, t, r)
                if key in existing:
                    records.append(existing[key])
                else:
                    todo.append((cfg, dgp, n, t, r))
    sink = open(out / "replicates.jsonl", "a") if out is not None else None
    try:
        if cfg.threads > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
                produced = pool.map(_task, todo, chunksize=1)
                _collect(produced, records, sink)
        else:
            _collect((_task(args) for args in todo), records, sink)
    finally:
        if sink is not None:
            sink.close()
    records.sort(key=lambda rec: (cfg.dgps.index(rec["dgp"]), cfg.sizes.index((rec["N"], rec["T"])), rec["r"]))
    cells = aggregate(records, cfg)
    failed = [f"{c.dgp} N={c.n} T={c.t} {c.method}: {c.failure_rate:.1%} failed"
              for c in cells if c.failure_rate > MAX_FAILURE_RATE]
    result = McResult(cells, records, time.perf_counter() - started, failed)
    if out is not None:
        write_mc_outputs(result, cfg, out)
    for msg in failed:
        log.error("failure rate above %.0f%%: %s", MAX_FAILURE_RATE * 100, msg)
    return result


def write_mc_outputs(result: McResult, cfg: ExperimentConfig, out: Path) -> None:
    rows = [[c.dgp, c.n, c.t, c.method, len(c.g_hats) + c.n_failed + c.n_unsupported,
             len(c.g_hats), c.n_failed, c.bias, c.rmse] for c in result.cells]
    write_csv(rows, ["dgp", "N", "T", "method", "R", "n_ok", "n_failed", "bias", "rmse"],
              out / "results.csv")
    hist = []
    for c in result.cells:
        if not c.g_hats:
            continue
        devs = c.deviations.astype(int)
        for dev in range(int(devs.min()), int(devs.max()) + 1):
            hist.append([c.dgp, c.n, c.t, c.method, dev, int(np.sum(devs == dev))])
    write_csv(hist, ["dgp", "N", "T", "method", "deviation", "count"], out / "histogram.csv")
    with open(out / "replicates.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    secs = [rec["seconds"] for rec in result.records]
    (out / "timing.json").write_text(json.dumps({
        "total_seconds": result.seconds,
        "replicate_seconds_mean": float(np.mean(secs)) if secs else None,
        "replicate_seconds_max": float(np.max(secs)) if secs else None,
        "n_records": len(secs),
    }, indent=1))


# ---------------------------------------------------------------------------
# rolling-window prediction error


@dataclass
class RollingSpec:
    train_window: int
    test_window: int
    step: int = 1
    g_values: list[int] = field(default_factory=lambda: [2])

    def anchors(self, n_periods: int) -> list[int]:
        if self.step < 1 or self.train_window < 1 or self.test_window < 1:
            raise SpecError("windows and step must be positive")
        if self.train_window + self.test_window > n_periods:
            raise SpecError(
                f"windows {self.train_window}+{self.test_window} exceed T={n_periods}"
            )
        return list(range(0, n_periods - self.train_window - self.test_window + 1, self.step))


@dataclass
class MpseResult:
    g_values: list[int]
    mpse: list[float]
    per_anchor: dict[int, list[tuple[int, float]]]

    def rows(self) -> list[list[Any]]:
        return [[G, a, v] for G in self.g_values for a, v in self.per_anchor[G]]


def rolling_mpse(data: PanelDataset, family: ModelFamily, spec: RollingSpec,
                 config: RunConfig | None = None) -> MpseResult:
    """Mean squared one-step-ahead prediction error over rolling windows, per G.

    Each window fits on ``train_window`` periods and predicts the following
    ``test_window`` periods from observed covariates (including observed
    lags) plus the fitted fixed effects.
    """
    config = config or RunConfig()
    anchors = spec.anchors(data.n_periods)
    per_anchor: dict[int, list[tuple[int, float]]] = {}
    mpse = []
    for G in spec.g_values:
        values = []
        for a in anchors:
            train = data.periods(a, a + spec.train_window)
            test = data.periods(a + spec.train_window, a + spec.train_window + spec.test_window)
            f = fit(train, family, G, config, substream_seed(config.seed, G, a, 3))
            eta = np.einsum("ntp,np->nt", test.covariates, f.individual_coefficients())
            if f.alphas is not None:
                eta = eta + f.alphas[:, None]
            err = family.mean(eta) - test.responses
            values.append((int(data.time_index[a]), float(np.mean(err ** 2))))
        per_anchor[G] = values
        mpse.append(float(np.mean([v for _, v in values])))
    return MpseResult(list(spec.g_values), mpse, per_anchor)


def write_mpse(result: MpseResult, out: Path) -> None:
    write_csv(result.rows(), ["G", "train_start", "mpse"], out / "mpse_windows.csv")
    write_csv([[G, v] for G, v in zip(result.g_values, result.mpse)], ["G", "mpse"],
              out / "mpse.csv")
