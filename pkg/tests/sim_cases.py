"""Random explicit workloads for simulator property checks."""

import numpy as np

from streamtrain import schedule as sch
from streamtrain.pipeline_sim import COMPUTE_KINDS, TRANSFER_KINDS, Workload


def random_workload(seed: int, *, zero=(), max_ns=1000) -> Workload:
    """``zero`` lists duration kinds forced to 0 (e.g. ``("h2d", "d2h")``)."""
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 9))
    K = int(rng.integers(1, L + 1))
    w = Workload(L, K, n_buffers=int(rng.integers(1, 3)), k_slab=int(rng.integers(1, 6)),
                 variant=str(rng.choice(["alg1", "interleaved"])))
    d = {}
    for u in w.units:
        for kind in TRANSFER_KINDS:
            d[f"{kind}:{u}"] = 0 if kind in zero else int(rng.integers(0, max_ns))
    for s in sch.build_plan(L, K, w.variant):
        if s.op in COMPUTE_KINDS:
            d[f"{s.op}:{s.unit}"] = 0 if s.op in zero or "compute" in zero else int(
                rng.integers(0, max_ns))
    w.durations = d
    return w


def sum_kind(w: Workload, kinds) -> int:
    """Sum of durations the plan actually executes for the given kinds."""
    total = 0
    plan = sch.build_plan(w.num_layers, w.k_ckpt, w.variant)
    streams = sch.stream_order(plan)
    grads = [s for s in plan if s.op in sch.GRAD_OPS]
    for kind in kinds:
        if kind in ("pack", "h2d"):
            total += sum(w.durations[f"{kind}:{s.unit}"] for s in streams)
        elif kind in ("d2h", "accum"):
            total += sum(w.durations[f"{kind}:{s.unit}"] for s in grads)
        elif kind == "compute":
            total += sum(w.durations[f"{s.op}:{s.unit}"] for s in plan if s.op in COMPUTE_KINDS)
    return total
