"""Command line: ``seslease run --mode MODE --config PATH [--seed N] [--out DIR] [--mc-samples N]``.

Exit codes: 0 ok, 1 infeasible (constraint family named), 2 invalid config
(field named), 3 ADMM non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .admm import NonConvergence, run_mode1, write_log
from .config import MODES, ConfigError, load_scenario, shipped_scenarios
from .lp import SolveError, diagnose_infeasibility
from .models import DEFINITIONAL_TAGS
from .outcome import nsor_table, solve_centralized, write_nsor_csv
from .security import InfeasibleSecurity

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3

RESULT_FIELDS = ["case", "mode", "ses", "objective", "profit_aggregator", "profit_utility", "energy_traded",
                 "energy_sold", "energy_bought", "leased_e", "leased_p", "leasing_cost", "lease_fees",
                 "lease_om", "lease_settlement", "iterations"]


def result_row(name, mode, enabled, outcome, iterations="") -> dict:
    p = outcome.profits
    return {"case": name, "mode": mode, "ses": int(bool(enabled)), "objective": outcome.objective,
            "profit_aggregator": p.aggregator, "profit_utility": p.utility, "energy_traded": p.energy_traded,
            "energy_sold": p.energy_sold, "energy_bought": p.energy_bought, "leased_e": p.leased_e,
            "leased_p": p.leased_p, "leasing_cost": p.lease_revenue, "lease_fees": p.lease_fees,
            "lease_om": p.lease_om, "lease_settlement": p.lease_settlement, "iterations": iterations}


def write_rows(rows, fields, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _mc_report(outcome, path) -> str:
    mc = outcome.mc or {"samples": 0, "violations": 0, "max_violation": 0.0}
    with open(path, "w") as fh:
        json.dump({k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in mc.items()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    return f"Monte Carlo security check: {mc['violations']} violations in {mc['samples']} samples"


def _families(err: SolveError) -> str:
    sol = err.solution
    fam = diagnose_infeasibility(sol, skip=DEFINITIONAL_TAGS) if sol is not None and sol.status == "infeasible" else []
    return ", ".join(fam) if fam else "unknown"


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = load_scenario(args.config)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    mc = sc.mc_samples if args.mc_samples is None else args.mc_samples
    if mc < 0:
        raise ConfigError("mc-samples", "must be nonnegative")
    mode = args.mode
    enabled = False if mode == "no-ses" else sc.lease_enabled
    lines = [f"scenario {sc.name} (T={sc.T}, seed {sc.seed}), mode {mode}, SES {'on' if enabled else 'off'}"]
    iterations = ""
    if mode in ("centralized", "no-ses"):
        outcome, _ = solve_centralized(sc, enabled)
        outcome.finalize(sc.grid, mc, sc.seed, sc.mc_tol)
    elif mode in ("mode1", "duet"):
        if mode == "mode1":
            res = run_mode1(sc, enabled, mc_samples=mc)
        else:
            res = _run_duet(sc, enabled, mc, out, lines)
        outcome = res.outcome
        iterations = res.iterations
        write_log(res.history, out / "iterations.csv")
        central, _ = solve_centralized(sc, enabled)
        gap = abs(outcome.objective - central.objective) / max(abs(central.objective), 1e-12)
        lines.append(f"ADMM converged in {res.iterations} iterations ({res.runtime:.2f} s)")
        lines.append(f"objective {outcome.objective:.6f} vs centralized {central.objective:.6f}: "
                     f"gap {100 * gap:.2e} %")
    else:
        outcome, iterations = _run_mode2(sc, enabled, mc, out, lines)
    rows = [result_row(sc.name, mode, enabled, outcome, iterations)]
    write_rows(rows, RESULT_FIELDS, out / "results.csv")
    table = nsor_table(outcome.nsor, outcome.award)
    write_nsor_csv(table, out / "nsor.csv")
    lines.append(_mc_report(outcome, out / "mc_report.json"))
    p = outcome.profits
    lines += [f"aggregator profit {p.aggregator:.4f} $, utility profit {p.utility:.4f} $",
              f"energy traded {p.energy_traded:.4f} MWh (sold {p.energy_sold:.4f}, bought {p.energy_bought:.4f})",
              f"leased {p.leased_e:.4f} MWh / {p.leased_p:.4f} MW, leasing cost {p.lease_revenue:.4f} $",
              "NSOR per interval (MW; negative = demand, positive = generation):"]
    for r in table:
        lines.append(f"  t={r['t']:>2}  [{r['nsor_min']:9.4f}, {r['nsor_max']:9.4f}]  awarded {r['awarded']:9.4f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _run_duet(sc, enabled, mc, out, lines):
    from .duet import audit_privacy, run_duet

    res, tr = run_duet(sc, "socket", enabled)
    tr.save(out / "transcript.txt")
    audit = audit_privacy(tr)
    res.outcome.finalize(sc.grid, mc, sc.seed, sc.mc_tol)
    lines.append(f"duet over localhost socket: {len(tr)} messages, {audit['violations']} private fields found")
    if not res.converged:
        raise NonConvergence(f"ADMM did not converge in {res.iterations} iterations", res)
    return res


def _run_mode2(sc, enabled, mc, out, lines):
    from .e2e import centralized_mode2, prepare_mode2, realized_profit, run_mode2
    from .market import MarketConfig, sample_day

    cfg = dict(sc.e2e)
    market = MarketConfig.from_dict(sc.market, sc.T)
    st = prepare_mode2(sc, market, sc.seed, int(cfg.get("days", 64)), float(cfg.get("offer_scale", 3.0)),
                       int(cfg.get("epochs", 5)), float(cfg.get("learning_rate", 0.01)),
                       float(cfg.get("eps", 1e-2)), int(cfg.get("batch", 32)), enabled)
    st.training.write_trace(out / "training_trace.csv")
    st.surrogate.save(out / "surrogate.txt")
    res = run_mode2(st.scenario, st.surrogate, st.prev, enabled, mc_samples=mc)
    write_log(res.history, out / "iterations.csv")
    central, _ = centralized_mode2(st.scenario, st.surrogate, st.prev, enabled)
    gap = abs(res.outcome.objective - central.objective) / max(abs(central.objective), 1e-12)
    r1 = run_mode1(st.scenario, enabled)
    dem, shift, spikes = sample_day(st.market, np.random.default_rng(10_000 + sc.seed))
    p2, _ = realized_profit(res.outcome, st.market, dem, shift, spikes)
    p1, _ = realized_profit(r1.outcome, st.market, dem, shift, spikes)
    lines.append(f"surrogate trained for {len(st.training.trace)} epochs on {st.history.n} days")
    lines.append(f"ADMM mode 2 converged in {res.iterations} iterations; gap to same-surrogate "
                 f"centralized solve {100 * gap:.2e} %")
    lines.append(f"realized aggregator profit on a fresh market day: mode 2 {p2:.4f} $, mode 1 {p1:.4f} $")
    return res.outcome, res.iterations


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seslease", description="Security-informed aggregator offers with leased storage")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="solve one scenario")
    r.add_argument("--mode", choices=MODES, default="mode1")
    r.add_argument("--config", required=True, help="YAML scenario file or bundled scenario name")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default="out")
    r.add_argument("--mc-samples", type=int, default=None)
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print("\n".join(shipped_scenarios()))
        return EXIT_OK
    try:
        return run(args)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleSecurity as e:
        print(f"infeasible: security (interval {e.t + 1}, bus {e.bus})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonConvergence as e:
        print(f"non-convergence: {e}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SolveError as e:
        print(f"infeasible: {e}; constraint families: {_families(e)}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
