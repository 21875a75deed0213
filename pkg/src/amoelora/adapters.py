"""Mixture-of-LoRA adapter with a hypernetwork-generated, sample-specific expert.

An :class:`AmoeLoraAdapter` sits on top of a frozen projection ``o0 = base(x)``
and returns ``o0 + o1 + o2``:

* ``o1`` (generalist branch) is a softmax-routed mixture of ``N`` LoRA
  experts, ``(alpha/r) * sum_i w_i * B_i A_i x`` with ``w = softmax(x W_g)``.
* ``o2`` (anomaly-aware branch) uses factors generated per input,
  ``A0 = W_a H(c)`` and ``B0 = H(c) W_b``, giving ``(alpha/r) * B0 A0 x``.

``H(c)`` is kept factored as ``sum_j u_j^T v_j`` where ``u_j, v_j`` come from
two small tanh MLPs applied to a pooled conditioning row ``c``; a d×d matrix
is never formed on the forward path.

Matrices follow the column-vector convention of the formulas (``A`` is r×d,
``B`` is d×r) while activations are stored as rows, so a token row ``x``
maps to ``x A^T B^T``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from amoelora import diffcore as dc
from amoelora.diffcore import ContractError, DimensionError, Node


class Variant(str, enum.Enum):
    LORA_ONLY = "lora"
    MOE_ONLY = "loramoe"
    FULL = "amoe"

    @property
    def label(self) -> str:
        return {"lora": "LoRA", "loramoe": "LoRAMoE", "amoe": "AMoE-LoRA"}[self.value]

    @classmethod
    def parse(cls, text: str | Variant) -> Variant:
        if isinstance(text, Variant):
            return text
        key = str(text).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower(), v.label.lower()):
                return v
        raise ValueError(f"unknown adapter variant {text!r}")


class Conditioning(str, enum.Enum):
    """How the hypernetwork's conditioning row is pooled from the adapter input."""

    CAUSAL = "causal"  # mean of tokens 0..t, one row per token
    SEQUENCE = "sequence"  # mean over the whole sequence


@dataclass
class AdapterConfig:
    n_experts: int = 16
    rank: int = 4
    alpha: float = 16.0
    hidden: int | None = None  # hypernetwork width, defaults to d
    variant: Variant = Variant.FULL
    hyper_rank: int = 1  # number of outer products in H(c)
    conditioning: Conditioning = Conditioning.CAUSAL

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.conditioning = Conditioning(self.conditioning)
        if self.n_experts < 1:
            raise ContractError("n_experts must be >= 1")
        if self.rank < 1:
            raise ContractError("rank must be >= 1")
        if self.hyper_rank < 1:
            raise ContractError("hyper_rank must be >= 1")
        if self.variant is Variant.LORA_ONLY and self.n_experts != 1:
            raise ContractError("the LoRA-only variant uses exactly one expert")


@dataclass
class LoraExpert:
    A: Node  # r×d
    B: Node  # d×r

    def __post_init__(self):
        r, d = self.A.shape
        if self.B.shape != (d, r):
            raise DimensionError(f"expert B must be {d}x{r}, got {self.B.rows}x{self.B.cols}")
        if not 1 <= r <= d:
            raise ContractError(f"expert rank {r} must lie in [1, {d}]")


@dataclass
class Router:
    W_g: Node  # d×N

    @property
    def n_experts(self) -> int:
        return self.W_g.cols


class _Mlp:
    """d → h → out with a tanh hidden layer."""

    def __init__(self, d: int, h: int, out: int, rng: np.random.Generator, prefix: str):
        bound = 1.0 / np.sqrt(d)
        self.w1 = dc.parameter(rng.uniform(-bound, bound, (d, h)), f"{prefix}.w1")
        self.b1 = dc.parameter(np.zeros((1, h)), f"{prefix}.b1")
        self.w2 = dc.parameter(rng.uniform(-bound, bound, (h, out)), f"{prefix}.w2")
        self.b2 = dc.parameter(np.zeros((1, out)), f"{prefix}.b2")

    def __call__(self, c: Node) -> Node:
        hidden = dc.tanh(dc.add(dc.matmul(c, self.w1), self.b1))
        return dc.add(dc.matmul(hidden, self.w2), self.b2)

    def params(self) -> list[Node]:
        return [self.w1, self.b1, self.w2, self.b2]


class HyperNetwork:
    def __init__(self, d: int, hidden: int, rank: int, rng: np.random.Generator):
        self.d, self.hidden, self.rank = d, hidden, rank
        self.phi_u = _Mlp(d, hidden, rank * d, rng, "hyper.u")
        self.phi_v = _Mlp(d, hidden, rank * d, rng, "hyper.v")

    def params(self) -> list[Node]:
        return self.phi_u.params() + self.phi_v.params()

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())


@dataclass
class GeneratedFactors:
    A0: np.ndarray  # r×d
    B0: np.ndarray  # d×r
    u: np.ndarray  # k×d
    v: np.ndarray  # k×d


class AmoeLoraAdapter:
    def __init__(self, d: int, cfg: AdapterConfig | None = None,
                 rng: np.random.Generator | None = None):
        cfg = cfg or AdapterConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        if cfg.rank > d:
            raise ContractError(f"rank {cfg.rank} exceeds feature width {d}")
        self.d = d
        self.cfg = cfg
        self.variant = cfg.variant
        self.r = cfg.rank
        self.n_experts = cfg.n_experts
        self.alpha = float(cfg.alpha)
        bound = 1.0 / np.sqrt(d)
        n, r = cfg.n_experts, cfg.rank
        # expert i owns rows [i*r, (i+1)*r) of A and the same columns of B
        self.A = dc.parameter(rng.uniform(-bound, bound, (n * r, d)), "experts.A")
        self.B = dc.parameter(np.zeros((d, n * r)), "experts.B")
        self.router = None
        self.hyper = None
        self.W_a = self.W_b = None
        if self.variant is not Variant.LORA_ONLY:
            self.router = Router(dc.parameter(rng.uniform(-bound, bound, (d, n)), "router.W_g"))
        if self.variant is Variant.FULL:
            self.hyper = HyperNetwork(d, cfg.hidden or d, cfg.hyper_rank, rng)
            self.W_a = dc.parameter(rng.uniform(-bound, bound, (r, d)), "W_a")
            self.W_b = dc.parameter(np.zeros((d, r)), "W_b")
        self._expand = dc.constant(np.kron(np.eye(n), np.ones((1, r))))  # N × N·r

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def expert(self, i: int) -> LoraExpert:
        """Expert ``i`` as its own (A, B) pair, sharing memory with the stacked parameters."""
        r = self.r
        return LoraExpert(Node(self.A.value[i * r:(i + 1) * r]),
                          Node(self.B.value[:, i * r:(i + 1) * r]))

    def named_parameters(self) -> dict[str, Node]:
        params = [self.A, self.B]
        if self.router is not None:
            params.append(self.router.W_g)
        if self.hyper is not None:
            params += self.hyper.params() + [self.W_a, self.W_b]
        return {p.name: p for p in params}

    def n_params(self) -> int:
        return sum(p.value.size for p in self.named_parameters().values())


def _check_width(x: Node, d: int, what: str) -> None:
    if x.cols != d:
        raise DimensionError(f"{what}: input has {x.cols} columns, adapter expects {d}")


def route(router: Router, x: Node) -> Node:
    """Per-token expert weights, softmax(x W_g): T×N with rows summing to one."""
    _check_width(x, router.W_g.rows, "route")
    return dc.softmax_rows(dc.matmul(x, router.W_g))


def expert_forward(e: LoraExpert, x: Node) -> Node:
    """Unscaled B A x for every token row of x."""
    _check_width(x, e.A.cols, "expert_forward")
    return dc.matmul(dc.matmul(x, dc.transpose(e.A)), dc.transpose(e.B))


def generalist_forward(a: AmoeLoraAdapter, x: Node) -> Node:
    _check_width(x, a.d, "generalist_forward")
    if a.router is None:
        return dc.scale(expert_forward(LoraExpert(a.A, a.B), x), a.scaling)
    weights = route(a.router, x)
    low = dc.matmul(x, dc.transpose(a.A))  # T × N·r, block i = x A_i^T
    mixed = dc.hadamard(low, dc.matmul(weights, a._expand))
    return dc.scale(dc.matmul(mixed, dc.transpose(a.B)), a.scaling)


def hyper_core(hy: HyperNetwork, c: Node) -> tuple[Node, Node]:
    """Core factors (u, v), each rows×(k·d), for conditioning rows c."""
    _check_width(c, hy.d, "hyper_core")
    return hy.phi_u(c), hy.phi_v(c)


def _factor_slices(f: Node, k: int, d: int) -> list[Node]:
    return [f] if k == 1 else [dc.slice_cols(f, j * d, (j + 1) * d) for j in range(k)]


def _apply_h_transpose(z: Node, us: list[Node], vs: list[Node]) -> Node:
    """Row-wise z H^T with H = sum_j u_j^T v_j, i.e. sum_j (z·v_j) u_j."""
    out = None
    for u, v in zip(us, vs):
        term = dc.colscale(u, dc.rowsum(dc.hadamard(z, v)))
        out = term if out is None else dc.add(out, term)
    return out


def generated_factors(a: AmoeLoraAdapter, c) -> GeneratedFactors:
    """A0 and B0 for a single conditioning row, without taping."""
    if a.hyper is None:
        raise ContractError(f"variant {a.variant.label} has no anomaly-aware branch")
    c = dc.constant(np.asarray(c, dtype=np.float64).reshape(1, -1))
    with dc.no_tape():
        u, v = hyper_core(a.hyper, c)
    k, d = a.cfg.hyper_rank, a.d
    U = u.value.reshape(k, d)
    V = v.value.reshape(k, d)
    Wa, Wb = a.W_a.value, a.W_b.value
    A0 = (Wa @ U.T) @ V  # W_a u^T v summed over j
    B0 = U.T @ (V @ Wb)  # u^T v W_b summed over j
    return GeneratedFactors(A0=A0, B0=B0, u=U, v=V)


def anomaly_forward(a: AmoeLoraAdapter, x: Node, c: Node) -> tuple[Node, GeneratedFactors | None]:
    """o2 = (alpha/r) x A0^T B0^T per token.

    ``c`` is either one conditioning row shared by every token (1×d) or one
    row per token (T×d).  The generated factors are returned only in the
    shared-row case; per-token factors are reachable through
    :func:`generated_factors`.
    """
    if a.hyper is None:
        raise ContractError(f"variant {a.variant.label} has no anomaly-aware branch")
    _check_width(x, a.d, "anomaly_forward")
    _check_width(c, a.d, "anomaly_forward (conditioning)")
    if c.rows not in (1, x.rows):
        raise DimensionError(f"anomaly_forward: {c.rows} conditioning rows for {x.rows} tokens")
    u, v = hyper_core(a.hyper, c)
    if c.rows == 1 and x.rows != 1:
        ones = dc.constant(np.ones((x.rows, 1)))
        u_t, v_t = dc.matmul(ones, u), dc.matmul(ones, v)
    else:
        u_t, v_t = u, v
    k = a.cfg.hyper_rank
    us, vs = _factor_slices(u_t, k, a.d), _factor_slices(v_t, k, a.d)
    z = _apply_h_transpose(x, us, vs)  # x H^T
    y = dc.matmul(dc.matmul(z, dc.transpose(a.W_a)), dc.transpose(a.W_b))  # · W_a^T W_b^T
    o2 = dc.scale(_apply_h_transpose(y, us, vs), a.scaling)
    gf = generated_factors(a, c.value) if c.rows == 1 else None
    return o2, gf


def conditioning_matrix(lengths, mode: Conditioning | str = Conditioning.CAUSAL) -> np.ndarray:
    """Block-diagonal pooling matrix P so that ``P @ x`` gives each token's conditioning row.

    ``lengths`` lists the sequence lengths stacked in ``x``.
    """
    mode = Conditioning(mode)
    total = int(sum(lengths))
    P = np.zeros((total, total))
    start = 0
    for n in lengths:
        if mode is Conditioning.CAUSAL:
            block = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
        else:
            block = np.full((n, n), 1.0 / n)
        P[start:start + n, start:start + n] = block
        start += n
    return P


def amoe_forward(a: AmoeLoraAdapter, o0: Node, x: Node, pool: Node | np.ndarray | None = None) -> Node:
    """Adapted projection output: o0 plus whichever branches the variant enables.

    ``pool`` maps the adapter input to conditioning rows (see
    :func:`conditioning_matrix`); by default ``x`` is treated as one sequence
    and pooled according to ``a.cfg.conditioning``.
    """
    if o0.shape != x.shape:
        raise DimensionError(f"amoe_forward: o0 {o0.rows}x{o0.cols} vs x {x.rows}x{x.cols}")
    out = dc.add(o0, generalist_forward(a, x))
    if a.variant is Variant.FULL:
        if pool is None:
            if a.cfg.conditioning is Conditioning.SEQUENCE:
                c = dc.mean_rows(x)
            else:
                c = dc.matmul(dc.constant(conditioning_matrix([x.rows])), x)
        else:
            c = dc.matmul(dc.constant(pool), x)
        o2, _ = anomaly_forward(a, x, c)
        out = dc.add(out, o2)
    return out


def extract_generated_params(a: AmoeLoraAdapter, samples) -> np.ndarray:
    """One row per conditioning row: A0 flattened then B0 flattened (length 2rd)."""
    if a.variant is not Variant.FULL:
        raise ContractError(f"generated parameters need the AMoE-LoRA variant, got {a.variant.label}")
    rows = []
    for c in samples:
        gf = generated_factors(a, c)
        rows.append(np.concatenate([gf.A0.reshape(-1), gf.B0.reshape(-1)]))
    return np.array(rows).reshape(len(rows), 2 * a.r * a.d)
