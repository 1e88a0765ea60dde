"""Command-line entry points: run, compare, bound-report, control-sweep,
verify-privacy.

Exit codes: 0 success, 2 configuration error, 3 runtime error (including
failed privacy verification).  Validation failures print a machine-readable
JSON error object.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from . import artifacts, bounds, losses, rng
from .config import ExperimentConfig, override, validate_config
from .control import solve_control
from .engine import sample_participants
from .errors import AxisMismatch, ConfigInvalid, TierflError
from .privacy import NoiseLedger, verify_node_protection
from .topology import derive_trust_stats


def _flatten(doc, prefix=""):
    out = {}
    if isinstance(doc, dict):
        items = doc.items()
    elif isinstance(doc, list):
        items = enumerate(doc)
    else:
        return {prefix: doc}
    for key, value in items:
        path = f"{prefix}.{key}" if prefix else str(key)
        out.update(_flatten(value, path))
    return out


def _effective_topology(cfg: ExperimentConfig):
    """Topology and accountant constants the run actually uses."""
    if cfg.protocol == "pedpfl_star":
        from .topology import build_topology
        star = build_topology([cfg.topology.num_devices], {}, cloud_secure=False)
        alphas = (cfg.dp.alphas[-1],) if cfg.dp else (1.0,)
        return star, alphas
    return cfg.topology, (cfg.dp.alphas if cfg.dp else None)


def run_bound_report(cfg: ExperimentConfig, trace=None) -> dict:
    """Bound evaluation for a config, post hoc when a trace is supplied."""
    topology, alphas = _effective_topology(cfg)
    stats = derive_trust_stats(topology)
    dataset = cfg.build_dataset()
    dim = cfg.loss.model_dim(dataset.feature_dim)
    beta = cfg.beta if cfg.beta is not None else losses.analytic_beta_bound(cfg.loss, dataset)
    gen = rng.stream(cfg.seed, rng.INIT, 0)
    w0 = gen.standard_normal(dim) * cfg.init_scale
    q = cfg.dp.sample_rate if cfg.dp else 1.0
    sgd_var = losses.estimate_gradient_noise(cfg.loss, dataset, w0, q, cfg.seed)
    if trace is not None:
        beta = trace.beta
        loss_drop = trace.initial_loss - trace.final_loss
        gamma = trace.gamma
    else:
        loss_drop = losses.global_loss(cfg.loss, w0, dataset, topology)
        gamma = cfg.gamma
    injects_noise = (cfg.dp is not None and cfg.noise_enabled
                     and cfg.protocol != "hfl_no_dp")
    if injects_noise:
        report = bounds.bound_report(
            stats, alphas, M=dim, K_max=cfg.schedule.K_max,
            q=cfg.dp.sample_rate, epsilon=cfg.dp.epsilon, delta=cfg.dp.delta,
            T=cfg.schedule.rounds, beta=beta, clip_norm=cfg.loss.clip_norm,
            sgd_noise_var=sgd_var, loss_drop=loss_drop, gamma=gamma)
        return report.to_dict()
    opt = bounds.convergence_bound(beta, cfg.loss.clip_norm, sgd_var, loss_drop,
                                   cfg.schedule.rounds, cfg.schedule.K_max,
                                   gap=0.0, gamma=gamma)
    return {"num_layers": cfg.topology.num_layers, "model_dim": dim,
            "beta": beta, "gap": 0.0, **opt}


def run_experiment(cfg: ExperimentConfig, out_dir, figures: bool = True) -> dict:
    """Execute one run and write trace.csv, ledger.csv, bound_report.json,
    summary.json (and trace.png) into out_dir."""
    from .engine import run_baseline
    spec = cfg.to_runspec()
    trace, ledger = run_baseline(cfg.protocol, spec)
    os.makedirs(out_dir, exist_ok=True)

    lines = trace.csv_lines()
    initial_row = ",".join([
        "0", "0", repr(0.0), "0",
        str(trace.rows[0].s_secure), str(trace.rows[0].s_insecure),
        repr(trace.initial_loss), repr(trace.initial_grad_norm),
        repr(0.0), repr(0.0), "0"])
    lines.insert(1, initial_row)
    artifacts.write_lines(os.path.join(out_dir, "trace.csv"), lines)
    ledger.write_csv(os.path.join(out_dir, "ledger.csv"))

    report = run_bound_report(cfg, trace=trace)
    artifacts.write_json(os.path.join(out_dir, "bound_report.json"), report)

    last = trace.rows[-1]
    summary = {
        "rounds": last.t,
        "k_total": last.k_total,
        "initial_loss": trace.initial_loss,
        "final_loss": last.global_loss,
        "final_grad_norm": last.global_grad_norm,
        "total_energy_j": last.energy_j,
        "total_delay_s": last.delay_s,
        "total_noise_draws": last.noise_draws,
        "gamma": trace.gamma,
        "meta": {"seed": cfg.seed, "protocol": cfg.protocol,
                 "beta": trace.beta, "config": cfg.raw},
    }
    artifacts.write_json(os.path.join(out_dir, "summary.json"), summary)
    if figures:
        from . import report as figs
        figs.trace_figure(trace, os.path.join(out_dir, "trace.png"))
    return summary


def _axis_value(doc, path):
    value = doc
    for part in path.split("."):
        value = value[int(part)] if isinstance(value, list) else value.get(part)
    return value


def compare_runs(docs: list, axis: str, out_dir, figures: bool = True) -> list:
    """Run each config and tabulate final metrics next to the analytic gap.

    All documents must be identical except under the declared axis, which may
    be a comma-separated group of paths that vary together (e.g. a protocol
    plus the trust profile it implies).
    """
    if not docs:
        raise AxisMismatch("no configs to compare")
    paths = [p.strip() for p in axis.split(",") if p.strip()]
    if not paths:
        raise AxisMismatch("empty axis")
    flats = [_flatten(doc) for doc in docs]
    keys = set().union(*flats)
    for key in keys:
        values = [f.get(key, None) for f in flats]
        if any(v != values[0] for v in values):
            if not any(key == p or key.startswith(p + ".") for p in paths):
                raise AxisMismatch(f"configs differ on {key}, not under axis {axis}")

    rows = []
    for idx, doc in enumerate(docs):
        cfg = validate_config(doc)
        value = [_axis_value(doc, p) for p in paths]
        if len(paths) == 1:
            value = value[0]
        label = f"{idx:02d}_{_slug(value)}"
        summary = run_experiment(cfg, os.path.join(out_dir, label), figures=figures)
        report = run_bound_report(cfg)
        rows.append({
            "label": label, "axis": axis, "value": value,
            "final_loss": summary["final_loss"],
            "final_grad_norm": summary["final_grad_norm"],
            "total_energy_j": summary["total_energy_j"],
            "total_delay_s": summary["total_delay_s"],
            "total_noise_draws": summary["total_noise_draws"],
            "analytic_gap": report["gap"],
        })

    header = list(rows[0].keys())
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[h]) for h in header))
    artifacts.write_lines(os.path.join(out_dir, "comparison.csv"), lines)
    if figures:
        from . import report as figs
        figs.compare_figure(rows, os.path.join(out_dir, "comparison.png"))
    return rows


def _slug(value) -> str:
    text = json.dumps(value) if isinstance(value, (dict, list)) else str(value)
    return "".join(ch if ch.isalnum() or ch in "._-" else "-" for ch in text)[:40]


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v).replace(",", ";")
    return str(v)


def control_sweep(cfg: ExperimentConfig, grid, out_dir, figures: bool = True) -> list:
    """Weight-grid (and compute-energy) sweep of the control decision."""
    if cfg.control is None:
        raise ConfigInvalid("control", "control-sweep needs a control section")
    topo = cfg.topology
    stats = derive_trust_stats(topo)
    L = topo.num_layers
    parent_layer = max(L - 1, 0)
    subnet_sizes = {c: len(topo.child_ids(parent_layer, c))
                    for c in topo.nodes(parent_layer)}
    from .engine import _subnet_trust_class
    subnet_secure = {c: _subnet_trust_class(topo, c) for c in subnet_sizes}
    dim = cfg.loss.model_dim(cfg.raw["dataset"].get("feature_dim", cfg.cost_model.model_dim))
    common = dict(dp=cfg.dp, stats=stats, k_max=cfg.control.k_max,
                  tau_t=cfg.control.tau, subnet_sizes=subnet_sizes,
                  subnet_secure=subnet_secure, model_dim=dim,
                  n_local_aggs=len(cfg.schedule.events_for(cfg.control.k_max)),
                  num_layer1=topo.size(1) if L > 1 else 0,
                  interior_uploads=sum(topo.size(x) for x in range(2, L)))

    rows = []
    base = cfg.control.weights
    for axis in ("energy", "delay", "gap"):
        for value in grid:
            weights = replace(base, **{axis: float(value)})
            decision = solve_control(weights=weights, cm=cfg.cost_model, **common)
            rows.append(_sweep_row(axis, value, decision))
    for value in grid:
        cm = replace(cfg.cost_model, compute_energy=cfg.cost_model.compute_energy * value)
        decision = solve_control(weights=base, cm=cm, **common)
        rows.append(_sweep_row("compute_energy", value, decision))

    header = ["axis", "value", "K", "s_secure", "s_insecure", "energy_j",
              "delay_s", "gap", "objective"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[h]) for h in header))
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_lines(os.path.join(out_dir, "control_sweep.csv"), lines)
    if figures:
        from . import report as figs
        figs.sweep_figure(rows, os.path.join(out_dir, "control_sweep.png"))
    return rows


def _sweep_row(axis, value, decision) -> dict:
    return {"axis": axis, "value": float(value), "K": decision.K,
            "s_secure": decision.s_secure, "s_insecure": decision.s_insecure,
            "energy_j": decision.energy_j, "delay_s": decision.delay_s,
            "gap": decision.gap, "objective": decision.objective}


def verify_privacy(cfg: ExperimentConfig, run_dir, round_t=None) -> list:
    """Re-run the protection check against a stored ledger."""
    if cfg.dp is None:
        raise ConfigInvalid("dp", "verification needs a dp section")
    topo, alphas = _effective_topology(cfg)
    stats = derive_trust_stats(topo)
    dp = cfg.dp
    if len(alphas) != len(dp.alphas):
        from dataclasses import replace as _replace
        dp = _replace(dp, alphas=alphas)
    trace_rows = []
    with open(os.path.join(run_dir, "trace.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            trace_rows.append(row)
    trace_rows = [r for r in trace_rows if int(r["t"]) >= 1]
    if not trace_rows:
        raise TierflError("trace.csv holds no completed rounds")
    if round_t is None:
        round_t = int(trace_rows[-1]["t"])
    row = next((r for r in trace_rows if int(r["t"]) == round_t), None)
    if row is None:
        raise TierflError(f"round {round_t} not present in trace.csv")

    ledger = NoiseLedger.read_csv(os.path.join(run_dir, "ledger.csv"),
                                  completed_rounds=int(trace_rows[-1]["t"]))
    K_t = int(row["K_t"])
    eta = float(row["eta"])
    events = cfg.schedule.events_for(K_t) if topo.num_layers > 1 else {}
    events[K_t + 1] = 1

    parent_layer = max(topo.num_layers - 1, 0)
    subnet_sizes = {c: len(topo.child_ids(parent_layer, c))
                    for c in topo.nodes(parent_layer)}
    from .engine import _subnet_trust_class
    s_choice = {"secure": int(row["s_secure"]), "insecure": int(row["s_insecure"])}
    full = all(
        s_choice["secure" if _subnet_trust_class(topo, c) else "insecure"]
        in (0, subnet_sizes[c]) for c in subnet_sizes)
    participants = None
    eff_stats = stats
    if not full:
        gen_p = rng.stream(cfg.seed, rng.PARTICIPATION, round_t)
        rates = {c: min(s_choice["secure" if _subnet_trust_class(topo, c)
                                 else "insecure"] or subnet_sizes[c],
                        subnet_sizes[c]) for c in subnet_sizes}
        participants = sample_participants(topo, rates, gen_p)
        eff_stats = stats.with_device_fanout(min(len(v) for v in participants.values()))

    return verify_node_protection(topo, eff_stats, dp, ledger, round_t, events,
                                  eta, cfg.schedule.K_max, cfg.loss.clip_norm,
                                  participants=participants)


def _fail(exc: TierflError, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigInvalid):
        payload["field"] = exc.field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tierfl",
        description="Deterministic simulator for multi-tier federated learning "
                    "with tier-aware differential privacy")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default="runs/out", help="output directory")
        p.add_argument("--no-figures", action="store_true")

    p_run = sub.add_parser("run", help="execute one experiment")
    add_common(p_run)
    p_run.add_argument("--protocol", default=None, help="override config protocol")

    p_cmp = sub.add_parser("compare", help="run a one-axis sweep of configs")
    add_common(p_cmp)
    p_cmp.add_argument("--axis", required=True, help="dotted config path to vary")
    p_cmp.add_argument("--values", required=True,
                       help="JSON list of values for the axis")

    p_bound = sub.add_parser("bound-report", help="evaluate the convergence bound")
    add_common(p_bound)

    p_sweep = sub.add_parser("control-sweep", help="weight-grid control table")
    add_common(p_sweep)
    p_sweep.add_argument("--grid", default="0.01,0.1,1,10,100",
                         help="comma-separated weight multipliers")

    p_verify = sub.add_parser("verify-privacy", help="check a stored ledger")
    add_common(p_verify)
    p_verify.add_argument("--run-dir", default=None,
                          help="directory with trace.csv and ledger.csv (default --out)")
    p_verify.add_argument("--round", type=int, default=None)

    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(ConfigInvalid("config", str(exc)), 2)
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "protocol", None):
        doc["protocol"] = args.protocol

    try:
        cfg = validate_config(doc)
    except ConfigInvalid as exc:
        return _fail(exc, 2)

    figures = not args.no_figures
    try:
        if args.command == "run":
            summary = run_experiment(cfg, args.out, figures=figures)
            print(json.dumps({k: v for k, v in summary.items() if k != "meta"},
                             sort_keys=True))
            return 0
        if args.command == "compare":
            values = json.loads(args.values)
            paths = [p.strip() for p in args.axis.split(",") if p.strip()]
            docs = []
            for v in values:
                member = doc
                group = v if len(paths) > 1 else [v]
                for path, item in zip(paths, group):
                    member = override(member, path, item)
                docs.append(member)
            compare_runs(docs, args.axis, args.out, figures=figures)
            print(os.path.join(args.out, "comparison.csv"))
            return 0
        if args.command == "bound-report":
            report = run_bound_report(cfg)
            os.makedirs(args.out, exist_ok=True)
            artifacts.write_json(os.path.join(args.out, "bound_report.json"), report)
            print(json.dumps(report, sort_keys=True))
            return 0
        if args.command == "control-sweep":
            grid = [float(v) for v in args.grid.split(",")]
            control_sweep(cfg, grid, args.out, figures=figures)
            print(os.path.join(args.out, "control_sweep.csv"))
            return 0
        if args.command == "verify-privacy":
            run_dir = args.run_dir or args.out
            rows = verify_node_protection_report(cfg, run_dir, args.round)
            return rows
    except ConfigInvalid as exc:
        return _fail(exc, 2)
    except AxisMismatch as exc:
        return _fail(exc, 2)
    except TierflError as exc:
        return _fail(exc, 3)
    return 3


def verify_node_protection_report(cfg, run_dir, round_t) -> int:
    rows = verify_privacy(cfg, run_dir, round_t)
    failures = 0
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        failures += 0 if r.passed else 1
        print(f"layer={r.layer} node={r.node} k={r.event_k} "
              f"effective={r.effective_var:.6e} required={r.required_var:.6e} {status}")
    print(f"{len(rows) - failures}/{len(rows)} protection checks passed")
    return 0 if failures == 0 else 3


if __name__ == "__main__":
    sys.exit(main())
