"""
``cellmix report``: power-law fits and log-log plots of a sweep table.
"""

import argparse
import logging
from pathlib import Path

from cellmix.commands.common import add_output_argument, report_lines, run_config
from cellmix.exceptions import EXIT_OK, CellmixValidationError
from cellmix.services.experiments import SWEEP_COLUMNS, fit_power_law, fit_sweep
from cellmix.services.output import STDOUT, plot_loglog, read_table, write_table

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("report", help="Fit and plot sweep results")
    parser.add_argument("--in", dest="input", required=True, help="Sweep CSV written by 'cellmix sweep'")
    parser.add_argument("--fit", action="store_true", help="Write the power-law fits (fits.csv layout)")
    parser.add_argument("--svg", default=None, help="Directory for log-log SVG plots")
    add_output_argument(parser)
    parser.set_defaults(handler=handle)
    return parser


def handle(args: argparse.Namespace) -> int:
    if not Path(args.input).exists():
        raise CellmixValidationError(f"sweep table not found: {args.input}")
    table = read_table(args.input)
    missing = [c for c in SWEEP_COLUMNS if c not in table.columns]
    if missing:
        raise CellmixValidationError(f"{args.input} is not a sweep table (missing {', '.join(missing)})")
    table["error"] = table["error"].fillna("")
    fits = fit_sweep(table)

    if args.fit:
        write_table(fits, args.out, run_config(args))
    for i, fit_row in fits.iterrows():
        report_lines(
            {f"{fit_row['estimator']}.{fit_row['variable']}[{fit_row['fixed']}].slope": f"{fit_row['slope']:.6g}",
             f"{fit_row['estimator']}.{fit_row['variable']}[{fit_row['fixed']}].r2": f"{fit_row['r2']:.6g}"},
            to_stderr=args.out == STDOUT or not args.fit,
        )

    if args.svg:
        ok = table[(table["error"] == "") & (table["value"] > 0)]
        for i, fit_row in fits.iterrows():
            var = fit_row["variable"]
            sub = ok[ok["estimator"] == fit_row["estimator"]]
            for part in str(fit_row["fixed"]).split(";"):
                key, value = part.split("=")
                sub = sub[(sub[key] - float(value)).abs() <= 1e-12 * max(abs(float(value)), 1.0)]
            sub = sub.sort_values(var)
            fit = fit_power_law(sub[var].tolist(), sub["value"].tolist())
            yerr = sub["se"].where(sub["se"].notna(), 0.0).tolist() if "se" in sub else None
            name = f"{fit_row['estimator']}_{var}_{i}.svg"
            plot_loglog(sub[var].tolist(), sub["value"].tolist(), str(Path(args.svg) / name),
                        xlabel=var, ylabel=str(fit_row["estimator"]),
                        title=f"{fit_row['estimator']} vs {var} ({fit_row['fixed']})", fit=fit, yerr=yerr)
    return EXIT_OK
