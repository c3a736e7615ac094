"""The training-step plan shared by the engine and the simulator.

A plan is the compute lane's program: an ordered list of steps.  Steps that
need weights consume the next entry of the stream order, so stream-in order
equals the order of weight-consuming steps, and ``k % n_buffers`` fixes the
staging buffer each one lands in.
"""

from __future__ import annotations

from dataclasses import dataclass

EMBED_FWD = "embed_fwd"
FWD = "fwd"
HEAD = "head"
CKPT_LOAD = "ckpt_load"
RECOMPUTE_BLOCK = "recompute_block"
RECOMPUTE = "recompute"
BWD = "bwd"
CKPT_FREE = "ckpt_free"
EMBED_BWD = "embed_bwd"

STREAMING_OPS = (EMBED_FWD, FWD, HEAD, RECOMPUTE, BWD)
# ops whose weight buffer is released by the compute lane (others wait for offload)
COMPUTE_RELEASED = (EMBED_FWD, FWD, RECOMPUTE)
# ops that produce gradients for the D2H lane
GRAD_OPS = (HEAD, BWD, EMBED_BWD)

PHASE = {EMBED_FWD: "forward", FWD: "forward", HEAD: "head", RECOMPUTE: "recompute",
         BWD: "backward", EMBED_BWD: "backward", CKPT_LOAD: "backward",
         RECOMPUTE_BLOCK: "backward", CKPT_FREE: "backward"}


@dataclass(frozen=True)
class PlanStep:
    op: str
    unit: int          # streaming unit / layer id (block index b for markers)
    k: int | None = None  # index into the stream order for weight-consuming steps

    @property
    def phase(self) -> str:
        return PHASE[self.op]


def block_bounds(num_layers: int, k_ckpt: int, b: int) -> tuple[int, int]:
    """Layers ``start+1 .. end`` of checkpoint block ``b`` (anchor is ``h_start``)."""
    start = b * k_ckpt
    return start, min(start + k_ckpt, num_layers)


def anchor_indices(num_layers: int, k_ckpt: int) -> list[int]:
    return list(range(0, num_layers, k_ckpt))


def build_plan(num_layers: int, k_ckpt: int, variant: str = "alg1") -> list[PlanStep]:
    """Compute-lane program of one step.

    ``alg1`` recomputes a whole block and then walks it backward.
    ``interleaved`` (simulator only) slots the next block's recompute passes
    between the current block's backward passes.
    """
    L, K = num_layers, k_ckpt
    if not 1 <= K <= L:
        raise ValueError(f"k_ckpt must lie in [1, {L}], got {K}")
    if variant not in ("alg1", "interleaved"):
        raise ValueError(f"unknown plan variant {variant!r}")
    head = L + 2
    raw: list[tuple[str, int]] = [(EMBED_FWD, 0)]
    raw += [(FWD, i) for i in range(1, L + 1)]
    raw.append((HEAD, head))
    nb = -(-L // K)

    def recompute_of(b):
        start, end = block_bounds(L, K, b)
        return [(RECOMPUTE, i) for i in range(start + 1, end)]

    def backward_of(b):
        start, end = block_bounds(L, K, b)
        return [(BWD, i) for i in range(end, start, -1)]

    if variant == "alg1":
        for b in range(nb - 1, -1, -1):
            raw += [(CKPT_LOAD, b), (RECOMPUTE_BLOCK, b)] + recompute_of(b)
            raw += backward_of(b) + [(CKPT_FREE, b)]
    else:
        top = nb - 1
        raw += [(CKPT_LOAD, top), (RECOMPUTE_BLOCK, top)] + recompute_of(top)
        for b in range(top, -1, -1):
            bwd = backward_of(b)
            nxt = recompute_of(b - 1) if b > 0 else []
            if b > 0:
                raw += [(CKPT_LOAD, b - 1), (RECOMPUTE_BLOCK, b - 1)]
            merged = []
            for j in range(max(len(bwd), len(nxt))):
                if j < len(bwd):
                    merged.append(bwd[j])
                if j < len(nxt):
                    merged.append(nxt[j])
            raw += merged + [(CKPT_FREE, b)]
    raw.append((EMBED_BWD, 0))

    plan, k = [], 0
    for op, unit in raw:
        if op in STREAMING_OPS:
            plan.append(PlanStep(op, unit, k))
            k += 1
        else:
            plan.append(PlanStep(op, unit))
    return plan


def stream_order(plan: list[PlanStep]) -> list[PlanStep]:
    return [s for s in plan if s.k is not None]


def recompute_count(plan: list[PlanStep]) -> int:
    return sum(1 for s in plan if s.op == RECOMPUTE)
