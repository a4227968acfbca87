"""Command-line entry point: ``ridefleet <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import demand, engine, experiment, network, queueing
from .errors import ValidationError

log = logging.getLogger("ridefleet")


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen_network(args):
    net = network.generate_grid(*args.grid, args.block_m, args.speed_kmh)
    network.save_network(net, args.out)
    print(f"wrote {len(net.nodes)} nodes, {len(net.links)} links to {args.out}")


def cmd_gen_demand(args):
    net = network.load_network(args.net)
    times = demand.sample_arrival_times(args.lambda_per_h, args.horizon_h,
                                        experiment.derive_seed(args.seed, 0, 1))
    od_seed = experiment.derive_seed(args.seed, 0, 2)
    if args.od == "uniform":
        pairs = demand.sample_od_uniform(net, od_seed, len(times))
    else:
        if not args.matrix:
            raise ValidationError("--od zonal needs --matrix")
        pairs = demand.sample_od_zonal(demand.ODMatrix.from_json(args.matrix), od_seed, len(times))
    for o, d in pairs:
        net.node_index(o), net.node_index(d)
    reqs = demand.make_requests(times, pairs)
    demand.write_requests(args.out, reqs)
    print(f"wrote {len(reqs)} requests to {args.out}")


def _horizon_s(args, requests) -> float:
    if args.horizon_h is not None:
        return args.horizon_h * 3600.0
    last = requests[-1].request_time if requests else 0.0
    return max(1, math.ceil(last / 3600.0)) * 3600.0


def _base_config(args, requests, fleet=0) -> engine.SimConfig:
    return engine.SimConfig(fleet, horizon_s=_horizon_s(args, requests), rng_seed=args.seed,
                            dwell_load_s=args.dwell_s, dwell_unload_s=args.dwell_s,
                            prefilter_k=args.prefilter_k, tail_window_s=args.window_s)


def cmd_simulate(args):
    net = network.load_network(args.net)
    reqs = demand.load_requests(args.req)
    result = engine.run_simulation(net, reqs, _base_config(args, reqs, args.fleet))
    engine.write_result(result, args.out_dir)
    s = result.summary
    print(f"served {s['served']}, unserved {s['unserved']}, in flight {s['in_flight']}; "
          f"results in {args.out_dir}")


def cmd_sweep(args):
    net = network.load_network(args.net)
    reqs = demand.load_requests(args.req)
    spec = experiment.SweepSpec(net, reqs, "bisect" if args.bisect else args.sizes,
                                _base_config(args, reqs), args.window_s, args.slope_tol,
                                args.level_factor, args.replications, args.workers)
    if args.bisect:
        crit = experiment.find_critical_fleet_size(spec, args.c_lo, args.c_hi, out_dir=args.out_dir)
        print(f"critical fleet size {crit.c_star} (largest unstable {crit.c_unstable})")
    else:
        if not args.sizes:
            raise ValidationError("give --sizes or --bisect")
        res = experiment.sweep(spec, args.out_dir)
        for c, ok in res.stable_sizes().items():
            print(f"{c}\t{'stable' if ok else 'unstable'}")
        if res.errors:
            raise RuntimeError(f"{len(res.errors)} runs failed: {res.errors}")


def cmd_analytic(args):
    params = queueing.QueueParams.from_dict(json.loads(Path(args.params).read_text(encoding="utf-8")))
    metrics = queueing.queue_metrics(params)
    doc = {"params": params.__dict__, "metrics": metrics.to_dict(),
           "min_fleet_base": queueing.min_fleet_base(params.lam, metrics.mu)._asdict()}
    model = params.pickup_model() if params.area is not None and params.v_bar is not None else None
    if model is not None:
        doc["min_fleet_fluid"] = queueing.min_fleet_fluid(params.lam, params.t_bar, model,
                                                          args.fluid_dt_min / 60, args.fluid_horizon_h)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.fluid_trace:
        trace = queueing.fluid_recursion(params.lam, params.t_bar, model, params.c,
                                         args.fluid_dt_min / 60, args.fluid_horizon_h)
        trace.write_csv(args.fluid_trace)
    print(f"rho={metrics.rho:.6g} P(wait)={metrics.erlang_c:.6g} Lq={metrics.lq:.6g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridefleet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-network", help="write a synthetic grid network")
    g.add_argument("--grid", type=_grid, required=True, metavar="RxC")
    g.add_argument("--block-m", type=float, required=True)
    g.add_argument("--speed-kmh", type=float, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_network)

    d = sub.add_parser("gen-demand", help="sample a request file")
    d.add_argument("--net", required=True)
    d.add_argument("--lambda-per-h", type=float, required=True)
    d.add_argument("--horizon-h", type=float, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--od", choices=("uniform", "zonal"), default="uniform")
    d.add_argument("--matrix")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_demand)

    def run_opts(sp):
        sp.add_argument("--net", required=True)
        sp.add_argument("--req", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--horizon-h", type=float, help="default: requests rounded up to whole hours")
        sp.add_argument("--dwell-s", type=float, default=0.0)
        sp.add_argument("--prefilter-k", type=int, default=16)
        sp.add_argument("--window-s", type=float, help="tail window (default: final third)")

    s = sub.add_parser("simulate", help="run one simulation")
    run_opts(s)
    s.add_argument("--fleet", type=int, required=True)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="fleet-size sweep or critical size bisection")
    run_opts(w)
    mode = w.add_mutually_exclusive_group(required=True)
    mode.add_argument("--sizes", type=_sizes)
    mode.add_argument("--bisect", action="store_true")
    w.add_argument("--c-lo", type=int)
    w.add_argument("--c-hi", type=int)
    w.add_argument("--slope-tol", type=float)
    w.add_argument("--level-factor", type=float, default=3.0)
    w.add_argument("--replications", type=int, default=1)
    w.add_argument("--workers", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analytic", help="M/M/c metrics from a parameter file")
    a.add_argument("--params", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--fluid-trace")
    a.add_argument("--fluid-dt-min", type=float, default=1.0)
    a.add_argument("--fluid-horizon-h", type=float, default=3.0)
    a.set_defaults(func=cmd_analytic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
