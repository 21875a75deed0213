"""Tiny pre-norm decoder-only transformer with adapters on selected projections.

Batches are handled by stacking sequences vertically into one (tokens ×
features) matrix; a block-diagonal causal mask keeps the sequences apart in
attention, and a matching block-diagonal pooling matrix feeds the adapters'
hypernetworks.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from amoelora import diffcore as dc
from amoelora.adapters import AdapterConfig, AmoeLoraAdapter, amoe_forward, conditioning_matrix
from amoelora.diffcore import ContractError, Node

INJECTION_POINTS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_up", "mlp_down")


class Stage(enum.Enum):
    STAGE1 = 1
    STAGE2 = 2

    @classmethod
    def parse(cls, value) -> Stage:
        if isinstance(value, Stage):
            return value
        text = str(value).strip().upper().removeprefix("STAGE")
        return cls(int(text))


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 64
    d_ff: int | None = None  # defaults to 4·d_model
    injection_points: tuple[str, ...] = ("attn_q", "attn_v")
    adapters_enabled: bool = True
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def __post_init__(self):
        self.injection_points = tuple(self.injection_points)
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        bad = set(self.injection_points) - set(INJECTION_POINTS)
        if bad:
            raise ContractError(f"unknown injection points: {sorted(bad)}")
        if self.adapters_enabled and not self.injection_points:
            raise ContractError("adapters are enabled but no injection points are configured")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    def projection_shape(self, point: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"mlp_up": (d, f), "mlp_down": (f, d)}.get(point, (d, d))


@dataclass
class Batch:
    """Sequences stacked into one matrix, plus the constants derived from their lengths."""

    ids: np.ndarray
    positions: np.ndarray
    lengths: tuple[int, ...]
    mask: np.ndarray  # additive attention mask, 0 or -inf
    pool: np.ndarray  # adapter conditioning matrix

    @property
    def ends(self) -> np.ndarray:
        """Row index of the last token of each sequence."""
        return np.cumsum(self.lengths) - 1


def make_batch(seqs: Sequence[Sequence[int]], conditioning="causal") -> Batch:
    lengths = tuple(len(s) for s in seqs)
    if not lengths or min(lengths) < 1:
        raise ContractError("every sequence needs at least one token")
    ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
    positions = np.concatenate([np.arange(n) for n in lengths])
    total = ids.size
    mask = np.full((total, total), -np.inf)
    start = 0
    for n in lengths:
        mask[start:start + n, start:start + n] = np.where(np.tril(np.ones((n, n))) > 0, 0.0, -np.inf)
        start += n
    return Batch(ids, positions, lengths, mask, conditioning_matrix(lengths, conditioning))


class TinyTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, V = cfg.d_model, cfg.vocab_size
        self.base: dict[str, Node] = {}

        def param(name, shape, std):
            self.base[name] = dc.parameter(rng.normal(0.0, std, shape), name)

        param("tok_emb", (V, d), 0.5)
        param("pos_emb", (cfg.max_seq, d), 0.1)
        for layer in range(cfg.n_layers):
            for point in INJECTION_POINTS:
                fan_in, fan_out = cfg.projection_shape(point)
                param(f"layers.{layer}.{point}.w", (fan_in, fan_out), fan_in ** -0.5)
                if point == "attn_k":
                    continue  # softmax ignores a per-query constant, so a key bias never gets a gradient
                self.base[f"layers.{layer}.{point}.b"] = dc.parameter(
                    np.zeros((1, fan_out)), f"layers.{layer}.{point}.b")
        param("head.w", (d, V), d ** -0.5)
        self.base["head.b"] = dc.parameter(np.zeros((1, V)), "head.b")

        self.adapters: dict[str, AmoeLoraAdapter] = {}
        if cfg.adapters_enabled:
            adapter_rng = np.random.default_rng([seed, 1])
            for layer in range(cfg.n_layers):
                for point in cfg.injection_points:
                    fan_in, fan_out = cfg.projection_shape(point)
                    if fan_in != fan_out:
                        raise ContractError(f"adapters need square projections; {point} is {fan_in}x{fan_out}")
                    self.adapters[f"layers.{layer}.{point}"] = AmoeLoraAdapter(fan_in, cfg.adapter, adapter_rng)
        self.use_adapters = True
        self.base_ready = False  # set by a stage-1 run or a stage-1 checkpoint
        self.optim_state = None
        self.captured: dict[str, np.ndarray] | None = None

    # ------------------------------------------------------------ params

    def adapter_parameters(self) -> dict[str, Node]:
        out = {}
        for where, ad in self.adapters.items():
            for pname, p in ad.named_parameters().items():
                out[f"{where}.adapter.{pname}"] = p
        return out

    def named_parameters(self) -> dict[str, Node]:
        return {**self.base, **self.adapter_parameters()}

    def trainable_params(self, stage) -> dict[str, Node]:
        return trainable_params(self, stage)

    def base_digest(self) -> str:
        return parameter_digest(self.base)

    # ------------------------------------------------------------ forward

    def _projection(self, layer: int, point: str, x: Node, batch: Batch) -> Node:
        pre = f"layers.{layer}.{point}"
        o0 = dc.matmul(x, self.base[f"{pre}.w"])
        bias = self.base.get(f"{pre}.b")
        if bias is not None:
            o0 = dc.add(o0, bias)
        adapter = self.adapters.get(pre)
        if adapter is None or not self.use_adapters:
            return o0
        if self.captured is not None:
            self.captured[pre] = x.value
        return amoe_forward(adapter, o0, x, pool=batch.pool)

    def forward(self, batch: Batch) -> Node:
        cfg = self.cfg
        if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab_size):
            raise ContractError(f"token id out of range for vocab_size {cfg.vocab_size}")
        if max(batch.lengths) > cfg.max_seq:
            raise ContractError(f"sequence of length {max(batch.lengths)} exceeds max_seq {cfg.max_seq}")
        h = dc.add(dc.gather_rows(self.base["tok_emb"], batch.ids),
                   dc.gather_rows(self.base["pos_emb"], batch.positions))
        mask = dc.constant(batch.mask)
        dh = cfg.d_model // cfg.n_heads
        for layer in range(cfg.n_layers):
            x = dc.layernorm_rows(h)
            q = self._projection(layer, "attn_q", x, batch)
            k = self._projection(layer, "attn_k", x, batch)
            v = self._projection(layer, "attn_v", x, batch)
            heads = []
            for i in range(cfg.n_heads):
                lo, hi = i * dh, (i + 1) * dh
                scores = dc.matmul(dc.slice_cols(q, lo, hi), dc.transpose(dc.slice_cols(k, lo, hi)))
                att = dc.softmax_rows(dc.add(dc.scale(scores, dh ** -0.5), mask))
                heads.append(dc.matmul(att, dc.slice_cols(v, lo, hi)))
            merged = heads[0] if len(heads) == 1 else dc.concat_cols(heads)
            h = dc.add(h, self._projection(layer, "attn_o", merged, batch))
            x = dc.layernorm_rows(h)
            up = dc.relu(self._projection(layer, "mlp_up", x, batch))
            h = dc.add(h, self._projection(layer, "mlp_down", up, batch))
        x = dc.layernorm_rows(h)
        return dc.add(dc.matmul(x, self.base["head.w"]), self.base["head.b"])

    def capture_adapter_inputs(self, batch: Batch) -> dict[str, np.ndarray]:
        """Run a tape-free forward and return each adapter's input matrix."""
        self.captured = {}
        try:
            with dc.no_tape():
                self.forward(batch)
            return self.captured
        finally:
            self.captured = None


def model_forward(m: TinyTransformer, tokens: Sequence[int]) -> Node:
    """Logits (T × vocab) for a single token sequence."""
    return m.forward(make_batch([tokens], m.cfg.adapter.conditioning))


def trainable_params(m: TinyTransformer, stage) -> dict[str, Node]:
    """Stage 1 trains the base model only; stage 2 trains the adapters only."""
    stage = Stage.parse(stage)
    return dict(m.base) if stage is Stage.STAGE1 else m.adapter_parameters()


def parameter_digest(params: dict[str, Node]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].value, dtype="<f8").tobytes())
    return h.hexdigest()


def greedy_decode(m: TinyTransformer, prompts: Sequence[Sequence[int]], max_new: int,
                  stop_token: int | None = None) -> list[list[int]]:
    """Append argmax tokens to each prompt until ``stop_token`` or ``max_new`` tokens."""
    seqs = [list(p) for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    live = list(range(len(prompts)))
    with dc.no_tape():
        for _ in range(max_new):
            if not live:
                break
            batch = make_batch([seqs[i] for i in live], m.cfg.adapter.conditioning)
            logits = m.forward(batch).value[batch.ends]
            nxt = logits.argmax(axis=1)
            still = []
            for i, tok in zip(live, nxt.tolist()):
                out[i].append(tok)
                seqs[i].append(tok)
                if tok != stop_token and len(seqs[i]) < m.cfg.max_seq:
                    still.append(i)
            live = still
    return out


def config_items(cfg: ModelConfig) -> dict[str, str]:
    """Flat ``key -> text`` view of a model config (used for checkpoint echoes)."""
    a = cfg.adapter
    return {
        "vocab_size": str(cfg.vocab_size),
        "d_model": str(cfg.d_model),
        "n_layers": str(cfg.n_layers),
        "n_heads": str(cfg.n_heads),
        "max_seq": str(cfg.max_seq),
        "d_ff": str(cfg.d_ff),
        "injection_points": ",".join(cfg.injection_points),
        "adapters_enabled": str(cfg.adapters_enabled).lower(),
        "n_experts": str(a.n_experts),
        "rank": str(a.rank),
        "alpha": repr(float(a.alpha)),
        "hyper_hidden": str(a.hidden or 0),
        "hyper_rank": str(a.hyper_rank),
        "variant": a.variant.value,
        "conditioning": a.conditioning.value,
    }


def config_from_items(items: dict[str, str]) -> ModelConfig:
    def flag(text: str) -> bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")

    adapter = AdapterConfig(
        n_experts=int(items["n_experts"]),
        rank=int(items["rank"]),
        alpha=float(items["alpha"]),
        hidden=int(items["hyper_hidden"]) or None,
        hyper_rank=int(items["hyper_rank"]),
        variant=items["variant"],
        conditioning=items["conditioning"],
    )
    points = tuple(p for p in items["injection_points"].split(",") if p)
    return ModelConfig(
        vocab_size=int(items["vocab_size"]),
        d_model=int(items["d_model"]),
        n_layers=int(items["n_layers"]),
        n_heads=int(items["n_heads"]),
        max_seq=int(items["max_seq"]),
        d_ff=int(items["d_ff"]),
        injection_points=points,
        adapters_enabled=flag(items["adapters_enabled"]),
        adapter=adapter,
    )
