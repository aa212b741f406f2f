"""Command-line entry point: config in, CSV (and optional SVG) out."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_config
from .evolution import DivergenceError, JumpStepTooLarge, TruncationOverflow
from .experiments import disorder_study, mcwf_comparison, phase_sweep, run_protocol
from .fockspace import BasisCapacityError, count_states

log = logging.getLogger("polariton_mott")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PARTIAL = 0, 2, 3, 4
LONG_DIMENSION = 500  # bases larger than this need --long
SOLVER_ERRORS = (DivergenceError, TruncationOverflow, JumpStepTooLarge, FloatingPointError, ArithmeticError)


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _cell(v) -> str:
    """Deterministic text for one CSV cell; undefined values stay empty."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if not math.isfinite(v):
            return ""
        return repr(float(v))
    if hasattr(v, "item"):  # numpy scalar
        return _cell(v.item())
    return str(v)


def _header(cfg: RunConfig) -> str:
    return f"# polariton_mott {__version__} config_sha256={cfg.digest()}\n"


def write_csv(path: Path, cfg: RunConfig, columns, rows, footer=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_header(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        for line in footer:
            fh.write(f"# {line}\n")


def _try_svg(fn, *args):
    try:
        fn(*args)
    except Exception as exc:  # plots never take the CSV down with them
        log.warning("SVG output failed: %s", exc)


def _basis_dim(cfg: RunConfig) -> int:
    n = cfg["lattice"]["n_sites"]
    return count_states(n, n, n)


def _require_scale(cfg: RunConfig, long_ok: bool):
    dim = _basis_dim(cfg)
    if dim > LONG_DIMENSION and not long_ok:
        raise CliError(EXIT_CONFIG, "config",
                       f"basis dimension {dim} exceeds {LONG_DIMENSION}; pass --long for full-scale runs")


# --- commands ------------------------------------------------------------------


def cmd_protocol(cfg: RunConfig, out: Path, svg: bool) -> int:
    res = run_protocol(cfg.protocol())
    rec = res.record
    n0 = rec.initial_populations
    rows = []
    for k, t in enumerate(rec.times):
        snap = rec.snapshots[k]
        cum = rec.emitted[k]
        for i in range(len(n0)):
            rows.append({"time_ps": float(t), "site": i + 1, "n_lp": float(snap.n_lp[i]),
                         "n_photon": float(snap.n_photon[i]), "g2": snap.g2[i],
                         "eta_cumulative": float(cum[i] / n0[i]) if n0[i] > 0 else None})
        rows.append({"time_ps": float(t), "site": "all", "n_lp": float(snap.n_lp.sum()),
                     "n_photon": float(snap.n_photon.sum()), "eta_cumulative": snap.eta,
                     "V": snap.V, "I": snap.I})
    write_csv(out / "timeseries.csv", cfg,
              ["time_ps", "site", "n_lp", "n_photon", "g2", "eta_cumulative", "V", "I"], rows)
    s = res.summary
    cols = ["eta", "V_final", "I_final", "g2_at_trigger", "trace_drift",
            "eta_window", "g2_initial", "coherence_post_trigger"]
    write_csv(out / "summary.csv", cfg, cols, [s])
    if svg:
        from . import plotting
        _try_svg(plotting.protocol_figure, res, out / "fig3.svg")
        _try_svg(plotting.coherence_figure, res, out / "fig4.svg")
    return EXIT_OK


def cmd_phase_sweep(cfg: RunConfig, out: Path, svg: bool) -> int:
    sweep_cfg = cfg.sweep()
    res = phase_sweep(sweep_cfg)
    g = sweep_cfg.device.g
    footer = []
    for t, dc in res.crossings.items():
        if dc is None:
            footer.append(f"delta_c t_hop_ueV={_cell(t)} no_crossing")
        else:
            footer.append(f"delta_c t_hop_ueV={_cell(t)} delta_over_g={_cell(dc / g)} "
                          f"residual={_cell(res.residuals[t])}")
    write_csv(out / "phase.csv", cfg, ["t_hop_ueV", "delta_over_g", "A", "B", "U_ueV", "J_ueV", "ratio"],
              res.rows, footer)
    if svg:
        from . import plotting
        _try_svg(plotting.phase_figure, res, sweep_cfg.critical_ratio, out / "fig2.svg")
    return EXIT_OK


def cmd_disorder(cfg: RunConfig, out: Path, svg: bool) -> int:
    d = cfg["disorder"]
    res = disorder_study(cfg.protocol(), cfg.disorder_sigmas(), d["n_seeds"], d["base_seed"],
                         workers=cfg["solver"]["workers"])
    footer = []
    for sigma, entry in res.stats.items():
        parts = " ".join(f"{k}_mean={_cell(m)} {k}_std={_cell(sd)}" for k, (m, sd) in entry.items())
        footer.append(f"stats sigma_ueV={_cell(sigma)} {parts}")
    footer.append(f"failures={res.failures}")
    write_csv(out / "disorder.csv", cfg, ["sigma_ueV", "seed", "g2_trigger", "I_final", "eta", "error"],
              res.rows, footer)
    if res.rows and res.failures == len(res.rows):
        raise CliError(EXIT_PARTIAL, "solver", "every disorder seed failed")
    return EXIT_OK


def cmd_mcwf(cfg: RunConfig, out: Path, svg: bool) -> int:
    s = cfg["solver"]
    res = mcwf_comparison(cfg.protocol(), s["mcwf_trajectories"], s["mcwf_seed"], s["workers"], s["mcwf_batch"])
    rows = list(res.rows)
    rows.append({"time_ps": float(res.mcwf.times[-1]), "site": "all", "observable": "eta",
                 "master_eq": res.eta_master, "mcwf_mean": res.eta_mcwf, "mcwf_se": res.eta_mcwf_se})
    write_csv(out / "mcwf.csv", cfg, ["time_ps", "site", "observable", "master_eq", "mcwf_mean", "mcwf_se"], rows)
    return EXIT_OK


COMMANDS = {
    "protocol": cmd_protocol,
    "phase-sweep": cmd_phase_sweep,
    "disorder": cmd_disorder,
    "mcwf": cmd_mcwf,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration (defaults used when omitted)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--dry-run", action="store_true", help="print the normalized config and exit")
    common.add_argument("--long", action="store_true", help="allow full-scale (N >= 6) runs")
    common.add_argument("--svg", action="store_true", help="also write SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="polariton-mott", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def _error_record(kind: str, code: int, message: str) -> str:
    return json.dumps({"status": "error", "kind": kind, "exit_code": code, "message": message}, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        if args.dry_run:
            sys.stdout.write(cfg.canonical())
            sys.stdout.write(f"# config_sha256 = {cfg.digest()}\n")
            sys.stdout.write(f"# basis_dimension = {_basis_dim(cfg)}\n")
            return EXIT_OK
        if args.command != "phase-sweep":
            _require_scale(cfg, args.long)
        args.out.mkdir(parents=True, exist_ok=True)
        svg = args.svg or cfg["output"]["svg"]
        return COMMANDS[args.command](cfg, args.out, svg)
    except (ConfigError, BasisCapacityError) as exc:
        err = CliError(EXIT_CONFIG, "config", str(exc))
    except CliError as exc:
        err = exc
    except SOLVER_ERRORS as exc:
        err = CliError(EXIT_SOLVER, "solver", f"{type(exc).__name__}: {exc}")
    except OSError as exc:
        err = CliError(EXIT_CONFIG, "io", str(exc))
    print(_error_record(err.kind, err.code, str(err)), file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
