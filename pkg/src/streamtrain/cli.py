"""Command line: ``streamtrain {train,simulate,layout,verify}``.

Exit codes: 0 success, 1 trace has violations (verify), 2 usage or input
error, 3 infeasible configuration, 4 protocol violation or simulator
deadlock, 5 verification against the resident baseline failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import events as ev
from . import pipeline_sim as sim
from .config import RunConfig, load_config
from .data import make_synthetic_batch, new_store
from .engine import InfeasibleConfig, ProtocolViolation, StreamingEngine, reference_step
from .memory_model import (builtin_profiles, device_budget, feasibility, get_profile,
                           persistent_state_bytes, total_params, workspace_bound)
from .tile_store import build_layout, save_store

EXIT_OK, EXIT_VIOLATIONS, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_PROTOCOL, EXIT_VERIFY = 0, 1, 2, 3, 4, 5

log = logging.getLogger("streamtrain")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump(obj) + "\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    updates = {}
    data = {}
    if getattr(args, "steps", None) is not None:
        data["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if data:
        updates["data"] = cfg.data.model_copy(update=data)
    if getattr(args, "strict", None) is not None:
        updates["engine"] = cfg.engine.model_copy(update={"strict": args.strict})
    if getattr(args, "profile", None) is not None:
        updates["profile"] = args.profile
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    if updates:
        cfg = RunConfig.model_validate({**cfg.model_dump(), **{
            k: (v.model_dump() if hasattr(v, "model_dump") else v) for k, v in updates.items()}})
    return cfg


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _config(args)
    spec, opts = cfg.model.spec(), cfg.engine.options()
    N = cfg.data.tokens
    out = Path(cfg.out)
    budget = device_budget(spec, N, opts.k_ckpt, opts.double_buffering,
                           w_max=workspace_bound(spec, N), anchors_on_host=opts.anchors_on_host)
    try:
        store = new_store(spec, cfg.data.init_seed)
        engine = StreamingEngine(spec, store, cfg.optimizer.hyper(), N, opts)
    except InfeasibleConfig as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out.mkdir(parents=True, exist_ok=True)
    hyper = cfg.optimizer.hyper()
    losses, status = [], EXIT_OK
    violations = []
    with open(out / "steps.jsonl", "w") as fh:
        for step in range(cfg.data.steps):
            batch = make_synthetic_batch(cfg.data.task, cfg.data.seed + step, N,
                                         spec.vocab_size)
            ref = None
            if args.verify:
                ref = reference_step(spec, store, batch, hyper)
            try:
                report = engine.train_step(batch)
            except ProtocolViolation as exc:
                print(f"protocol violation at step {step + 1}: {exc}", file=sys.stderr)
                engine.log.save(out / "trace.jsonl")
                return EXIT_PROTOCOL
            found = ev.validate_event_log(engine.log)
            violations += [dict(v.to_json(), step=report.step) for v in found]
            row = report.to_json()
            if ref is not None:
                ref_report, ref_store = ref
                ok = (ref_report.loss == report.loss
                      and np.array_equal(ref_store.backing, store.backing))
                row["verified"] = ok
                if not ok:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
                    print(f"verification failed at step {report.step}", file=sys.stderr)
                    return EXIT_VERIFY
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            losses.append(report.loss)
            log.info("step %d loss %.6f", report.step, report.loss)
    engine.log.save(out / "trace.jsonl")
    save_store(store, out / "store.mgts")
    if violations or engine.violations:
        status = EXIT_PROTOCOL
    summary = {
        "config": cfg.model_dump(), "steps": len(losses),
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "ln_vocab": float(np.log(spec.vocab_size)),
        "store_checksum": store.checksum(), "budget": budget.to_dict(),
        "peak_device_bytes": engine.arena.peak, "violations": violations,
        "verified": bool(args.verify),
    }
    _write_json(out / "summary.json", summary)
    print(_dump({k: summary[k] for k in ("steps", "initial_loss", "final_loss",
                                         "store_checksum")}))
    return status


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = _config(args)
    try:
        profile = get_profile(cfg.profile)
    except KeyError as exc:
        print(f"usage error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    spec = cfg.model.spec()
    N = cfg.sim.tokens or cfg.data.tokens
    w = sim.Workload.from_spec(spec, N, cfg.engine.k_ckpt,
                               2 if cfg.engine.double_buffering else 1, cfg.engine.k_slab,
                               fragmented=cfg.sim.fragmented, latency_ns=cfg.sim.latency_ns,
                               variant=cfg.sim.variant)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        tl = sim.simulate_step(w, profile)
        sim.save_timeline(tl, out)
        overlap = sim.overlap_report(w, profile, tl)
        _write_json(out / "overlap.json", overlap)
        result = {"profile": profile.name, "step_time_ns": tl.step_time,
                  "busy_fraction": tl.busy_fraction,
                  "hidden_fraction": overlap["summary"]["hidden_fraction"]}
        if args.ablate:
            ab = sim.ablate(w, profile, args.ablate)
            sim.save_timeline(ab.base, out, "ablate_base")
            sim.save_timeline(ab.variant, out, "ablate_variant")
            _write_json(out / "ablation.json", ab.to_json())
            result["ablation"] = ab.to_json()
    except sim.DeadlockError as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write_json(out / "simulate.json", result)
    print(_dump(result))
    return EXIT_OK


# ---------------------------------------------------------------- layout

def cmd_layout(args) -> int:
    cfg = _config(args)
    if args.params is not None:
        P = int(float(args.params))
        if P < 0:
            print("usage error: --params must be non-negative", file=sys.stderr)
            return EXIT_USAGE
        persistent = persistent_state_bytes(P)
        print(_dump({"total_params": P, "persistent_host": persistent,
                     "persistent_host_gb": persistent / 1e9}))
        return EXIT_OK
    spec = cfg.model.spec()
    N = cfg.data.tokens
    budget = device_budget(spec, N, cfg.engine.k_ckpt, cfg.engine.double_buffering,
                           w_max=workspace_bound(spec, N),
                           anchors_on_host=cfg.engine.anchors_on_host)
    P = total_params(spec)
    doc = {
        "spec": spec.to_dict(), "tokens": N, "k_ckpt": cfg.engine.k_ckpt,
        "layout": build_layout(spec).to_dict(),
        "budget": budget.to_dict(),
        "total_params": P, "persistent_host": persistent_state_bytes(P),
        "feasibility": [feasibility(budget, p) for p in builtin_profiles()],
    }
    print(_dump(doc))
    return EXIT_OK


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    try:
        trace = ev.EventLog.load(args.trace)
    except (OSError, ev.TraceFormatError) as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return EXIT_USAGE
    found = ev.validate_event_log(trace)
    print(_dump({"records": len(trace), "violations": [v.to_json() for v in found]}))
    return EXIT_OK if not found else EXIT_VIOLATIONS


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamtrain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run configuration")
        if out:
            sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="stream-train on the synthetic task")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--verify", action="store_true",
                   help="check every step bit-exactly against the resident baseline")
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", default=None,
                      help="abort on the first protocol violation")
    mode.add_argument("--audit", dest="strict", action="store_false",
                      help="finish the step and report violations (default)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="simulate one step on a hardware profile")
    common(s)
    s.add_argument("--profile")
    s.add_argument("--ablate", choices=sim.ABLATION_TOGGLES)
    s.set_defaults(func=cmd_simulate)

    lay = sub.add_parser("layout", help="print tile layout, memory budget and feasibility")
    common(lay, out=False)
    lay.add_argument("--params", help="only print persistent-state accounting for P parameters")
    lay.set_defaults(func=cmd_layout)

    v = sub.add_parser("verify", help="check a trace against the lane protocol")
    v.add_argument("trace")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
