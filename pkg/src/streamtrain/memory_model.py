"""Closed-form memory and FLOP accounting.

Everything here is exact integer arithmetic on model shapes and hardware
profiles.  The streaming engine charges its device arena with the same
quantities, and the pipeline simulator converts FLOPs and bytes into
durations, so the three stay consistent by construction.

Logical layer ids used throughout the package::

    0            embedding
    1 .. L       transformer blocks
    L + 1        final norm
    L + 2        LM head (aliased to the embedding when tied)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

F32 = 4


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_size: int
    ffn_size: int
    vocab_size: int
    num_heads: int = 1
    weight_bytes: int = 2
    grad_bytes: int = 2
    moment_bytes: int = 4
    tied_embeddings: bool = False

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "ffn_size", "vocab_size", "num_heads",
                     "weight_bytes", "grad_bytes", "moment_bytes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"num_heads={self.num_heads} does not divide hidden_size={self.hidden_size}")

    # layer ids
    @property
    def embed_id(self) -> int:
        return 0

    @property
    def final_norm_id(self) -> int:
        return self.num_layers + 1

    @property
    def head_id(self) -> int:
        return self.num_layers + 2

    @property
    def block_ids(self) -> range:
        return range(1, self.num_layers + 1)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    h2d_bandwidth: float
    d2h_bandwidth: float
    device_capacity: int
    host_capacity: int
    compute_rate: float
    host_pack_rate: float

    def __post_init__(self):
        for name in ("h2d_bandwidth", "d2h_bandwidth", "compute_rate", "host_pack_rate",
                     "device_capacity", "host_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MemoryBudget:
    persistent_host: int
    checkpoint_anchors: int
    block_activation_stack: int
    weight_buffers: int
    grad_buffer: int
    workspace: int
    peak_device_bound: int = field(init=False)

    def __post_init__(self):
        parts = (self.persistent_host, self.checkpoint_anchors, self.block_activation_stack,
                 self.weight_buffers, self.grad_buffer, self.workspace)
        if any(p < 0 for p in parts):
            raise ValueError("budget components must be non-negative")
        object.__setattr__(
            self, "peak_device_bound",
            self.weight_buffers + self.grad_buffer + self.checkpoint_anchors
            + self.block_activation_stack + self.workspace)

    def fits(self, device_capacity: int) -> bool:
        return self.peak_device_bound <= device_capacity

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameters

def layer_param_count(spec: ModelSpec) -> int:
    """Parameters of one transformer block: 4h^2 attention, 3hf gated MLP, 2h norm gains."""
    h, f = spec.hidden_size, spec.ffn_size
    return 4 * h * h + 3 * h * f + 2 * h


def tile_param_counts(spec: ModelSpec) -> dict[int, int]:
    """Parameter count of every physical tile, keyed by logical layer id.

    The head is omitted when tied, since it shares the embedding tile.
    """
    h, V = spec.hidden_size, spec.vocab_size
    counts = {spec.embed_id: V * h}
    for i in spec.block_ids:
        counts[i] = layer_param_count(spec)
    counts[spec.final_norm_id] = h
    if not spec.tied_embeddings:
        counts[spec.head_id] = V * h
    return counts


def total_params(spec: ModelSpec) -> int:
    return sum(tile_param_counts(spec).values())


def unit_param_counts(spec: ModelSpec) -> dict[int, int]:
    """Elements moved by one StreamIn of each streaming unit.

    The head unit carries the final-norm gain together with the head matrix.
    """
    h, V = spec.hidden_size, spec.vocab_size
    units = {spec.embed_id: V * h}
    for i in spec.block_ids:
        units[i] = layer_param_count(spec)
    units[spec.head_id] = h + V * h
    return units


def p_max(spec: ModelSpec) -> int:
    """Largest streaming unit, in elements."""
    return max(unit_param_counts(spec).values())


def p_max_bytes(spec: ModelSpec) -> int:
    return p_max(spec) * spec.weight_bytes


def persistent_state_bytes(total_params: int) -> int:
    """Host bytes for bf16 weights + bf16 grads + two fp32 Adam moments."""
    if total_params < 0:
        raise ValueError("parameter count must be non-negative")
    return 12 * total_params


def persistent_host_bytes(spec: ModelSpec) -> int:
    per_param = spec.weight_bytes + spec.grad_bytes + 2 * spec.moment_bytes
    return per_param * total_params(spec)


# ---------------------------------------------------------------- activations

def num_blocks(num_layers: int, k_ckpt: int) -> int:
    return -(-num_layers // k_ckpt)


def activation_unit_bytes(spec: ModelSpec) -> int:
    """Bytes of one token's hidden state at fp32 working precision."""
    return spec.hidden_size * F32


@dataclass(frozen=True)
class ActivationBudget:
    anchors: int
    stack: int

    @property
    def total(self) -> int:
        return self.anchors + self.stack


def activation_budget_bytes(tokens: int, per_token_bytes: int, num_layers: int,
                            k_ckpt: int) -> ActivationBudget:
    """Anchor region (one hidden state every ``k_ckpt`` layers) plus one block's stack."""
    if min(tokens, per_token_bytes, num_layers, k_ckpt) < 1:
        raise ValueError("tokens, per_token_bytes, num_layers, k_ckpt must be >= 1")
    if k_ckpt > num_layers:
        raise ValueError(f"k_ckpt={k_ckpt} exceeds num_layers={num_layers}")
    row = tokens * per_token_bytes
    return ActivationBudget(anchors=num_blocks(num_layers, k_ckpt) * row, stack=k_ckpt * row)


# ---------------------------------------------------------------- workspace

def op_workspace_bytes(spec: ModelSpec, tokens: int, op: str) -> int:
    """Transient device bytes charged while one compute op runs.

    Counts fp32 decoded weights, fp32 gradients and the op's intermediate
    activations; the op's output, if it survives the op, is charged to the
    stack or anchor region instead.
    """
    h, f, V, H, N = spec.hidden_size, spec.ffn_size, spec.vocab_size, spec.num_heads, tokens
    P = layer_param_count(spec)
    if op == "embed_fwd":
        elems = V * h
    elif op == "embed_bwd":
        elems = V * h + N * h
    elif op == "block_fwd":
        elems = P + 8 * N * h + 2 * H * N * N + 3 * N * f
    elif op == "block_bwd":
        elems = 2 * P + 16 * N * h + 4 * H * N * N + 6 * N * f
    elif op == "head":
        elems = 2 * (h + V * h) + 4 * N * h + 3 * N * V
    else:
        raise ValueError(f"unknown op {op!r}")
    return F32 * elems


WORKSPACE_OPS = ("embed_fwd", "embed_bwd", "block_fwd", "block_bwd", "head")


def workspace_bound(spec: ModelSpec, tokens: int) -> int:
    return max(op_workspace_bytes(spec, tokens, op) for op in WORKSPACE_OPS)


def device_budget(spec: ModelSpec, tokens: int, k_ckpt: int, double_buffered: bool = True,
                  w_max: int = 0, anchors_on_host: bool = False) -> MemoryBudget:
    """Peak device-memory bound of one streamed training step.

    Weight staging is one or two ``P_max`` buffers, gradients use one more;
    activations follow :func:`activation_budget_bytes`.
    """
    if w_max < 0:
        raise ValueError("w_max must be non-negative")
    pmb = p_max_bytes(spec)
    act = activation_budget_bytes(tokens, activation_unit_bytes(spec), spec.num_layers, k_ckpt)
    return MemoryBudget(
        persistent_host=persistent_host_bytes(spec),
        checkpoint_anchors=0 if anchors_on_host else act.anchors,
        block_activation_stack=act.stack,
        weight_buffers=(2 if double_buffered else 1) * pmb,
        grad_buffer=pmb,
        workspace=w_max,
    )


def feasibility(budget: MemoryBudget, profile: HardwareProfile) -> dict:
    return {
        "profile": profile.name,
        "device_fits": budget.fits(profile.device_capacity),
        "host_fits": budget.persistent_host <= profile.host_capacity,
        "device_bound": budget.peak_device_bound,
        "device_capacity": profile.device_capacity,
        "persistent_host": budget.persistent_host,
        "host_capacity": profile.host_capacity,
    }


# ---------------------------------------------------------------- FLOPs

def block_forward_flops(spec: ModelSpec, tokens: int) -> int:
    """Matmul FLOPs of one block forward (2 per multiply-add).

    Four h x h projections, full N x N score and value products, and three
    h x f MLP projections.  Norms, softmax and elementwise ops are not counted.
    """
    h, f, N = spec.hidden_size, spec.ffn_size, tokens
    return 8 * N * h * h + 4 * N * N * h + 6 * N * h * f


def head_forward_flops(spec: ModelSpec, tokens: int) -> int:
    return 2 * tokens * spec.hidden_size * spec.vocab_size


def recompute_passes(num_layers: int, k_ckpt: int) -> int:
    """Extra block forwards: every non-final layer of each checkpoint block."""
    return num_layers - num_blocks(num_layers, k_ckpt)


def step_flops(spec: ModelSpec, tokens: int, k_ckpt: int) -> int:
    """Forward + backward (2x forward) + recompute FLOPs of one training step.

    ``3 L F + R F + 3 H`` where ``F`` is :func:`block_forward_flops`, ``H`` is
    :func:`head_forward_flops` and ``R`` is :func:`recompute_passes`.
    """
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    L = spec.num_layers
    if not 1 <= k_ckpt <= L:
        raise ValueError(f"k_ckpt must be in [1, {L}]")
    F = block_forward_flops(spec, tokens)
    return 3 * L * F + recompute_passes(L, k_ckpt) * F + 3 * head_forward_flops(spec, tokens)


# ---------------------------------------------------------------- profiles

GB = 10**9
TB = 10**12


def builtin_profiles(h200_host_capacity: int = 1_500 * GB) -> list[HardwareProfile]:
    """Hardware presets.

    Link bandwidths and capacities are the published platform figures;
    ``compute_rate`` is the dense BF16 tensor-core peak and ``host_pack_rate``
    the host DRAM bandwidth.
    """
    return [
        HardwareProfile("GH200", h2d_bandwidth=900 * GB, d2h_bandwidth=900 * GB,
                        device_capacity=96 * GB, host_capacity=480 * GB,
                        compute_rate=989 * TB, host_pack_rate=512 * GB),
        HardwareProfile("H200", h2d_bandwidth=128 * GB, d2h_bandwidth=128 * GB,
                        device_capacity=141 * GB, host_capacity=h200_host_capacity,
                        compute_rate=989 * TB, host_pack_rate=200 * GB),
        HardwareProfile("PCIe-Gen4", h2d_bandwidth=26 * GB, d2h_bandwidth=26 * GB,
                        device_capacity=80 * GB, host_capacity=1 * TB,
                        compute_rate=312 * TB, host_pack_rate=200 * GB),
    ]


def get_profile(name: str) -> HardwareProfile:
    for p in builtin_profiles():
        if p.name.lower() == name.lower():
            return p
    raise KeyError(f"unknown profile {name!r}; known: {[p.name for p in builtin_profiles()]}")
