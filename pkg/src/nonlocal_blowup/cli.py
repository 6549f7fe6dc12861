"""Command-line entry point.

    nonlocal-blowup certify-params --m 1 --beta 1
    nonlocal-blowup build-sequences --csv levels.csv
    nonlocal-blowup exact-check
    nonlocal-blowup simulate-beta --pack p0.json --out run/
    nonlocal-blowup simulate-multiscale --A0 1e-4 --out run/
    nonlocal-blowup sweep --manifest sweep.json --jobs 4 --out sweep/
    nonlocal-blowup plot --trace run/trace.csv --out run/

Exit status: 0 success, 1 certification failure (reports are still
written), 2 usage or configuration error.  Data files are deterministic;
the wall-clock timestamp of an invocation goes to ``meta.json`` only.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import barrier, exact, monitor, sequences
from .simulator import SimConfig, Stalled, run
from .state import read_cloud_csv, write_cloud_csv
from .velocity import compute_Q

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_COLUMNS = ("pack_id", "t_end", "a_end", "bkm_end", "controlled_throughout", "status")
LEVEL_COLUMNS = ("n", "lam", "eps", "p", "q", "phi", "psi", "mu", "F_bracket")


class UsageError(Exception):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj, path=None):
    text = json.dumps(_clean(obj), indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read {path}: {err}") from err


def read_table_csv(path):
    """Rows of a CSV written by this tool; numeric cells become floats."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                try:
                    rec[k] = float(v)
                except (TypeError, ValueError):
                    rec[k] = v
            out.append(rec)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])


def _write_meta(out: Path, argv):
    meta = {"argv": list(argv), "utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _sim_config(d: dict | None, A0: float) -> SimConfig:
    d = dict(d or {})
    d.setdefault("A_stop", A0 * 1e-4)
    try:
        return SimConfig.from_dict(d)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from err
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad simulation config: {err}") from err


def _pack_from(args):
    if getattr(args, "pack", None):
        try:
            return barrier.BarrierParams.from_dict(load_json(args.pack))
        except KeyError as err:
            raise UsageError(str(err.args[0])) from err
        except (TypeError, ValueError) as err:
            raise UsageError(f"bad pack: {err}") from err
    if args.m is not None or args.beta is not None:
        return barrier.select_params(args.m if args.m is not None else 1.0,
                                     args.beta if args.beta is not None else 1.0)
    return barrier.P0


def _seq_from(args):
    inputs = dict(sequences.S0_INPUTS)
    if getattr(args, "sequences", None):
        d = load_json(args.sequences)
        bad = sorted(set(d) - set(inputs))
        if bad:
            raise UsageError(f"unknown sequence key(s): {bad}")
        inputs.update(d)
    for key, flag in (("phi1", "phi1"), ("eps1", "eps1"), ("lam_m2", "lam_m2"), ("lam_m1", "lam_m1"),
                      ("lam0", "lam0"), ("L", "L"), ("C", "C"), ("N", "levels")):
        v = getattr(args, flag, None)
        if v is not None:
            inputs[key] = v
    try:
        return sequences.build_sequences(**inputs)
    except sequences.SequenceError as err:
        raise UsageError(str(err)) from err


def _lines(rep):
    return [{"id": r.id, "lhs": r.lhs, "rhs": r.rhs, "margin": r.margin, "pass": r.passed} for r in rep.records]


# certify-params -----------------------------------------------------------

def cmd_certify_params(args):
    out = Path(args.out)
    try:
        P = _pack_from(args)
    except barrier.InfeasibleParams as err:
        doc = {"params": None, "lines": [], "pass": False, "error": str(err)}
        sys.stdout.write(dump_json(doc, out / "params.json"))
        return EXIT_FAIL
    rep = barrier.verify_cond_params(P)
    doc = {"params": P.to_dict(), "t_star": barrier.upper_bound_time(P), "lines": _lines(rep), "pass": rep.passed}
    sys.stdout.write(dump_json(doc, out / "params.json"))
    return EXIT_OK if rep.passed else EXIT_FAIL


# build-sequences ----------------------------------------------------------

def level_rows(seq):
    rows = []
    for n in range(1, seq.N + 1):
        br = seq.F_bracket[n]
        rows.append((n, float(seq.lam[n]), float(seq.eps[n]), float(seq.p[n]), float(seq.q[n]),
                     float(seq.phi[n]), float(seq.psi[n]), float(seq.mu[n]), "" if n < 2 else float(br)))
    return rows


def cmd_build_sequences(args):
    out = Path(args.out)
    seq = _seq_from(args)
    rep = sequences.verify_sequence_conditions(seq)
    doc = {"sequences": seq.to_dict(), "report": rep.to_dict()}
    sys.stdout.write(dump_json(doc, out / "sequences.json"))
    if args.csv:
        _write_rows(args.csv, LEVEL_COLUMNS, level_rows(seq))
    return EXIT_OK if rep.passed else EXIT_FAIL


# exact-check --------------------------------------------------------------

def cmd_exact_check(args):
    rows = []
    for beta in args.betas:
        prof = exact.SingularProfile(k=args.k, beta=beta)
        for x in args.xs:
            r_w, r_r = exact.exact_residual(prof, x, args.h)
            rows.append((float(beta), float(x), float(args.h), float(max(abs(r_w), abs(r_r)))))
    path = Path(args.out) / "exact_check.csv"
    _write_rows(path, ("beta", "x", "h", "residual"), rows)
    sys.stdout.write(path.read_text())
    worst = max(r[-1] for r in rows) if rows else 0.0
    return EXIT_OK if worst <= args.tolerance_abs else EXIT_FAIL


# simulations --------------------------------------------------------------

def _write_run(out: Path, trace, report: dict):
    trace.write_csv(out / "trace.csv")
    if trace.snapshots:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for steps, _, cloud in trace.snapshots:
            field = compute_Q(cloud)
            write_cloud_csv(snap / f"step_{steps:07d}.csv", cloud, {"Q": field.q_at_nodes, "u": field.u_at_nodes})
    dump_json(report, out / "report.json")


def _controlled(trace, name="control"):
    return all(ok for _, ok, _ in trace.monitors.get(name, []))


def simulate_beta(P, n_particles, config: dict | None, out: Path, slack: float, force=False,
                  data_path=None, snapshot_every=0):
    """Certify then run one single-scale pack; returns (exit code, report dict)."""
    out.mkdir(parents=True, exist_ok=True)
    cert = barrier.verify_cond_params(P)
    cloud = read_cloud_csv(data_path) if data_path else barrier.make_prepared_data(P, n_particles)
    prep = barrier.verify_suitably_prepared(cloud, P)
    certification = {"params": cert.to_dict(), "prepared": prep.to_dict(), "pass": cert.passed and prep.passed}
    if not certification["pass"] and not force:
        report = {"certification": certification, "forced": False, "simulated": False}
        dump_json(report, out / "report.json")
        return EXIT_FAIL, report
    cfg = dict(config or {})
    cfg.setdefault("beta", P.beta)
    if snapshot_every:
        cfg["snapshot_every"] = snapshot_every
    sim = _sim_config(cfg, P.A0)
    if sim.beta != P.beta:
        raise UsageError(f"config beta={sim.beta} disagrees with pack beta={P.beta}")
    try:
        trace = run(cloud, sim, monitors=monitor.single_scale_monitors(P, slack), a0=P.A0)
    except Stalled as err:
        report = {"certification": certification, "forced": force, "simulated": True,
                  "termination": "stalled", "error": str(err)}
        dump_json(report, out / "report.json")
        return EXIT_FAIL, report
    diag = monitor.diagnose(trace, 1.0, barrier.upper_bound_time(P))
    report = monitor.run_report(trace, diag, control="control")
    report.update(certification=certification, forced=force, simulated=True, params=P.to_dict(),
                  config=sim.to_dict(), controlled_throughout=_controlled(trace),
                  q_bounds_throughout=_controlled(trace, "Q_bounds"))
    _write_run(out, trace, report)
    ok = certification["pass"] and report["controlled_throughout"]
    return (EXIT_OK if ok else EXIT_FAIL), report


def cmd_simulate_beta(args):
    cfg = load_json(args.config) if args.config else None
    code, _ = simulate_beta(_pack_from(args), args.particles, cfg, Path(args.out), args.tolerance,
                            force=args.force, data_path=args.data, snapshot_every=args.snapshot_every)
    return code


def cmd_simulate_multiscale(args):
    out = Path(args.out)
    seq = _seq_from(args)
    seq_rep = sequences.verify_sequence_conditions(seq)
    try:
        cloud = (read_cloud_csv(args.data) if args.data
                 else sequences.make_prepared_data_multiscale(seq, args.A0, args.delta, args.particles))
    except sequences.SequenceError as err:
        raise UsageError(str(err)) from err
    prep = sequences.verify_prepared_multiscale(cloud, seq, args.A0, args.delta)
    certification = {"sequences": seq_rep.to_dict(), "prepared": prep.to_dict(),
                     "pass": seq_rep.passed and prep.passed}
    if not certification["pass"] and not args.force:
        dump_json({"certification": certification, "forced": False, "simulated": False}, out / "report.json")
        return EXIT_FAIL
    cfg = dict(load_json(args.config)) if args.config else {}
    if args.snapshot_every:
        cfg["snapshot_every"] = args.snapshot_every
    sim = _sim_config(cfg, args.A0)
    floor = sim.A_stop
    mons = {
        "control": lambda st: monitor.check_control_multiscale(st, seq, args.tolerance, level_floor=floor),
        "Q_bounds": lambda st: monitor.check_Q_multiscale(st, seq, args.tolerance, level_floor=floor),
    }
    envelope = []

    def record_envelope(st):
        try:
            envelope.append(monitor.envelope_check(st, (st.A, seq.lam0)))
        except ValueError:
            envelope.append((None, None))

    try:
        trace = run(cloud, sim, monitors=mons, a0=args.A0, callback=record_envelope)
    except Stalled as err:
        dump_json({"certification": certification, "forced": args.force, "simulated": True,
                   "termination": "stalled", "error": str(err)}, out / "report.json")
        return EXIT_FAIL
    diag = monitor.diagnose(trace, seq.lam0)
    report = monitor.run_report(trace, diag, control="control")
    lows = [e[0] for e in envelope if e[0] is not None]
    highs = [e[1] for e in envelope if e[1] is not None]
    report.update(certification=certification, forced=args.force, simulated=True, sequences=seq.inputs(),
                  config=sim.to_dict(), controlled_throughout=_controlled(trace),
                  q_bounds_throughout=_controlled(trace, "Q_bounds"),
                  envelope_history={"phi_eff_min": min(lows, default=None), "psi_eff_max": max(highs, default=None)})
    _write_run(out, trace, report)
    return EXIT_OK if certification["pass"] and report["controlled_throughout"] else EXIT_FAIL


# sweep ----------------------------------------------------------------------

def _sweep_entry(entry, out, slack):
    """Run one manifest entry; never raises."""
    pid = str(entry.get("id", "?"))
    try:
        if "pack" in entry:
            P = barrier.BarrierParams.from_dict(entry["pack"])
        else:
            P = barrier.select_params(float(entry.get("m", 1.0)), float(entry.get("beta", 1.0)))
        code, rep = simulate_beta(P, int(entry.get("particles", 2048)), entry.get("config"),
                                  Path(out) / pid, slack, force=bool(entry.get("force", False)))
        if not rep.get("simulated"):
            return (pid, "", "", "", False, "certification_failed")
        return (pid, rep["t_end"], rep["a_end"], rep["bkm_end"], rep["controlled_throughout"],
                rep.get("termination", "?"))
    except Exception as err:  # isolate failures per entry
        return (pid, "", "", "", False, f"error: {type(err).__name__}: {err}")


def cmd_sweep(args):
    out = Path(args.out)
    manifest = load_json(args.manifest)
    entries = manifest.get("entries", []) if isinstance(manifest, dict) else manifest
    if not isinstance(entries, list):
        raise UsageError("manifest must be a list of entries or {'entries': [...]}")
    ids = [str(e.get("id", i)) for i, e in enumerate(entries)]
    if len(set(ids)) != len(ids):
        raise UsageError("manifest entry ids must be unique")
    entries = [{**e, "id": i} for e, i in zip(entries, ids)]
    if args.jobs > 1 and len(entries) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_sweep_entry, entries, [out] * len(entries), [args.tolerance] * len(entries)))
    else:
        rows = [_sweep_entry(e, out, args.tolerance) for e in entries]
    _write_rows(out / "sweep.csv", SWEEP_COLUMNS, rows)
    sys.stdout.write((out / "sweep.csv").read_text())
    return EXIT_OK if all(r[4] is True for r in rows) else EXIT_FAIL


# plot -----------------------------------------------------------------------

def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "nonlocal-blowup"
    out = Path(args.out)
    from .simulator import read_trace_csv

    traces = [(Path(p).parent.name or Path(p).stem, read_trace_csv(p)) for p in args.trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name, tr in traces:
        ax1.semilogy(tr.t, tr.A, label=name)
        ax2.plot(tr.t, tr.bkm, label=name)
    ax1.set_xlabel("t")
    ax1.set_ylabel("A(t)")
    ax2.set_xlabel("t")
    ax2.set_ylabel("int ||omega||_inf dt")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(out / "trace.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    if args.snapshot:
        P = barrier.BarrierParams.from_dict(load_json(args.pack)) if args.pack else None
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for p in args.snapshot:
            c = read_cloud_csv(p)
            m = c.omega > 0
            ax.loglog(c.positions[m], c.omega[m], label=Path(p).stem)
        if P is not None:
            xs = np.logspace(math.log10(P.A0), 0, 200)
            ax.loglog(xs, P.phi * xs**-P.p, "k--", lw=0.8, label="phi x^-p")
            ax.loglog(xs, P.psi * xs**-P.q, "k:", lw=0.8, label="psi x^-q")
        ax.set_xlabel("x")
        ax.set_ylabel("omega")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "profiles.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _seq_flags(p):
    p.add_argument("--sequences", help="flat JSON with sequence inputs (defaults to S0)")
    p.add_argument("--phi1", type=float)
    p.add_argument("--eps1", type=float)
    p.add_argument("--lam-m2", dest="lam_m2", type=float)
    p.add_argument("--lam-m1", dest="lam_m1", type=float)
    p.add_argument("--lam0", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--C", type=float)
    p.add_argument("--levels", type=int)


def _pack_flags(p):
    p.add_argument("--m", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--pack", help="flat JSON with beta, p, q, phi, psi, delta, m, A0, eps")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--tolerance", type=float, default=monitor.RUNTIME_SLACK,
                        help="relative slack of runtime barrier checks")
    parser = argparse.ArgumentParser(prog="nonlocal-blowup", description="Particle solver and barrier certification.")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("certify-params", parents=[common], help="select or check a single-scale pack")
    _pack_flags(p)
    p.set_defaults(fn=cmd_certify_params)

    p = sub.add_parser("build-sequences", parents=[common], help="multiscale sequences and their conditions")
    _seq_flags(p)
    p.add_argument("--csv", help="per-level table path")
    p.set_defaults(fn=cmd_build_sequences)

    p = sub.add_parser("exact-check", parents=[common], help="residual table of the exact singular solution")
    p.add_argument("--betas", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--xs", type=float, nargs="+", default=[0.1, 1.0, 2.0])
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--tolerance-abs", type=float, default=1e-6)
    p.set_defaults(fn=cmd_exact_check)

    sims = (("simulate-beta", cmd_simulate_beta, "certify and run a single-scale pack"),
            ("simulate-multiscale", cmd_simulate_multiscale, "certify and run multiscale data"))
    for name, fn, text in sims:
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "simulate-beta":
            _pack_flags(p)
            p.add_argument("--particles", type=int, default=8192)
        else:
            _seq_flags(p)
            p.add_argument("--A0", type=float, default=1e-4)
            p.add_argument("--delta", type=float, default=0.05)
            p.add_argument("--particles", type=int, default=8192)
        p.add_argument("--config", help="flat JSON of simulator settings")
        p.add_argument("--data", help="initial cloud CSV instead of generated data")
        p.add_argument("--snapshot-every", type=int, default=0)
        p.add_argument("--force", action="store_true", help="simulate even if certification fails")
        p.set_defaults(fn=fn)

    p = sub.add_parser("sweep", parents=[common], help="run a manifest of packs")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("plot", parents=[common], help="render trace/snapshot CSVs to SVG")
    p.add_argument("--trace", nargs="+", required=True)
    p.add_argument("--snapshot", nargs="*")
    p.add_argument("--pack")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise UsageError(f"output directory {out} is not writable")
        code = args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    _write_meta(out, argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
