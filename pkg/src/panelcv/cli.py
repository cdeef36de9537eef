"""Command-line entry point: ``panelcv <command> [options]``.

Commands
--------
simulate    draw a panel from one of the simulated designs
fit         estimate a G-group model on a CSV panel
select      choose G by cross-validation or an information criterion
montecarlo  run a Monte Carlo grid from a config file
mpse        rolling-window prediction error per G

Global options (before or after the command): ``--seed``, ``--threads``,
``--config FILE`` and ``--out DIR``. Exit status is 0 on success, 2 on a
usage error and 1 when a computation fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import PanelDataset, RunConfig, load_csv, make_lagged
from .dgp import DGP_IDS, DgpSpec, simulate
from .errors import PanelError
from .estimation import fit
from .harness import (
    ExperimentConfig,
    RollingSpec,
    parse_kv_file,
    rolling_mpse,
    run_config_from,
    run_monte_carlo,
    write_mpse,
)
from .models import FAMILY_NAMES, get_family
from .selection import METHODS, select
from .serialize import fit_to_dict, selection_rows, selection_to_dict, write_csv, write_json

log = logging.getLogger("panelcv")


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # subparsers get SUPPRESS defaults so a flag given before the command survives
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(None), help="master seed")
    p.add_argument("--threads", type=int, default=d(None), help="worker processes")
    p.add_argument("--config", type=Path, default=d(None), help="key = value config file")
    p.add_argument("--out", type=Path, default=d(Path(".")), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def _model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="long-format CSV: id,time,y,x1..xp")
    p.add_argument("--family", choices=FAMILY_NAMES, required=True)
    p.add_argument("--fixed-effects", action="store_true", help="profile out individual effects")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelcv", description=__doc__.split("\n")[0],
                                     parents=[_global_options(True)])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _global_options(False)

    p = sub.add_parser("simulate", parents=[common], help="draw a simulated panel")
    p.add_argument("--dgp", choices=DGP_IDS, required=True, type=str.upper)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--stem", default="panel")

    p = sub.add_parser("fit", parents=[common], help="fit a G-group model")
    _model_options(p)
    p.add_argument("--groups", type=int, required=True)

    p = sub.add_parser("select", parents=[common], help="select the number of groups")
    _model_options(p)
    p.add_argument("--method", choices=METHODS, default="cv")
    p.add_argument("--gmin", type=int)
    p.add_argument("--gmax", type=int)
    p.add_argument("--fits", action="store_true", help="include every fitted model in the JSON")

    p = sub.add_parser("montecarlo", parents=[common], help="run a Monte Carlo grid")
    p.add_argument("--replications", type=int, help="override the config's replication count")
    p.add_argument("--no-resume", action="store_true", help="ignore stored replicates")

    p = sub.add_parser("mpse", parents=[common], help="rolling-window prediction error")
    _model_options(p)
    p.add_argument("--train-window", type=int, required=True)
    p.add_argument("--test-window", type=int, default=1)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--gmin", type=int, default=1)
    p.add_argument("--gmax", type=int, default=5)
    return parser


def _run_config(args) -> RunConfig:
    values = parse_kv_file(args.config) if args.config else {}
    cfg = run_config_from(values)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.with_(threads=args.threads)
    return cfg


def _load_model_data(args):
    family = get_family(args.family, args.fixed_effects)
    data = load_csv(args.data)
    if family.dynamic and data.lag_column is None:
        data = make_lagged(data)
    return data, family


def _cmd_simulate(args) -> int:
    spec = DgpSpec(args.dgp, args.n, args.t, args.groups, burn_in=args.burn_in,
                   seed=args.seed or 0)
    csv_path, truth_path = simulate(spec).write(args.out, args.stem)
    print(csv_path)
    print(truth_path)
    return 0


def _cmd_fit(args) -> int:
    data, family = _load_model_data(args)
    cfg = _run_config(args)
    result = fit(data, family, args.groups, cfg)
    out = fit_to_dict(result)
    out["individual_ids"] = list(data.individual_ids)
    write_json(out, args.out / "fit.json")
    print(json.dumps({"n_groups": result.n_groups, "final_loss": result.final_loss,
                      "coefficients": result.coefficients.tolist()}))
    return 0


def _cmd_select(args) -> int:
    data, family = _load_model_data(args)
    cfg = _run_config(args)
    changes = {}
    if args.gmin is not None:
        changes["g_min"] = args.gmin
    if args.gmax is not None:
        changes["g_max"] = args.gmax
    if changes:
        cfg = cfg.with_(**changes)
    sel = select(data, family, args.method, cfg, keep_fits=args.fits)
    out = selection_to_dict(sel, include_fits=args.fits)
    write_json(out, args.out / "selection.json")
    write_csv(selection_rows(sel), ["G", "criterion", "S", "D", "R"], args.out / "selection.csv")
    print(json.dumps({"method": sel.method, "chosen": sel.chosen,
                      "g_values": sel.g_values, "criterion": out["criterion"]}))
    return 0


def _cmd_montecarlo(args) -> int:
    values = parse_kv_file(args.config) if args.config else {}
    cfg = ExperimentConfig.from_mapping(values)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.replications is not None:
        cfg.replications = args.replications
    result = run_monte_carlo(cfg, args.out, resume=not args.no_resume)
    for c in result.cells:
        print(f"DGP {c.dgp} N={c.n} T={c.t} {c.method}: bias={c.bias:.4f} rmse={c.rmse:.4f}"
              f" ok={len(c.g_hats)} failed={c.n_failed} unsupported={c.n_unsupported}")
    if not result.ok:
        for msg in result.failed_cells:
            print(f"error: too many failed replicates: {msg}", file=sys.stderr)
        return 1
    return 0


def _cmd_mpse(args) -> int:
    data, family = _load_model_data(args)
    cfg = _run_config(args)
    spec = RollingSpec(args.train_window, args.test_window, args.step,
                       list(range(args.gmin, args.gmax + 1)))
    result = rolling_mpse(data, family, spec, cfg)
    write_mpse(result, args.out)
    for G, v in zip(result.g_values, result.mpse):
        print(f"G={G} mpse={v!r}")
    return 0


COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "select": _cmd_select,
    "montecarlo": _cmd_montecarlo,
    "mpse": _cmd_mpse,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (PanelError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
