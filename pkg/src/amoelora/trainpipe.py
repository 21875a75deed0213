"""Two-stage training, Adam, answer-masked loss, evaluation and checkpoints.

Stage 1 pretrains the base transformer as a language model on normal-sample
sequences.  Stage 2 freezes the base and trains only the adapters on the
question answering targets.

Checkpoint layout (little-endian)::

    b"AMOE" | u32 version | u32 n + n bytes of UTF-8 "key = value" lines
    | u32 tensor count | per tensor: u16 n + name, u8 ndim (=2), u64 × ndim dims,
    row-major float64 data
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from amoelora import diffcore as dc
from amoelora.diffcore import ContractError, Node
from amoelora.model import (Stage, TinyTransformer, config_from_items, config_items,
                            greedy_decode, make_batch, parameter_digest, trainable_params)
from amoelora.synthdata import EOS, QAStyle, SyntheticSample, render_qa, stream

log = logging.getLogger(__name__)

MAGIC = b"AMOE"
FORMAT_VERSION = 1
_SHUFFLE = 3  # stream purpose for batch order


class CheckpointError(ValueError):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class MissingCheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Node, targets, mask) -> Node:
    """Mean -log p(target) over masked rows; raises on an empty mask."""
    return dc.cross_entropy_rows(logits, targets, mask)


@dataclass
class Example:
    """One training sequence with next-token labels and the rows that carry loss."""

    tokens: list[int]
    labels: list[int]
    mask: list[bool]


def encode_example(s: SyntheticSample, stage: Stage) -> Example:
    prompt, target = render_qa(s)
    full = prompt + target
    tokens, labels = full[:-1], full[1:]
    if stage is Stage.STAGE1:
        mask = [True] * len(labels)
    else:
        mask = [i >= len(prompt) - 1 for i in range(len(labels))]
    return Example(tokens, labels, mask)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Node], st: OptimState) -> None:
    """One bias-corrected Adam update using each parameter's accumulated ``grad``."""
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for name, p in params.items():
        g = p.grad_or_zeros()
        if name not in st.m:
            st.m[name] = np.zeros_like(p.value)
            st.v[name] = np.zeros_like(p.value)
        m, v = st.m[name], st.v[name]
        if m.shape != p.value.shape:
            raise dc.DimensionError(f"optimizer state for {name} has shape {m.shape}, param {p.value.shape}")
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p.value -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    stage: Stage = Stage.STAGE2
    steps: int = 2000
    batch_size: int = 16
    lr: float | None = None  # stage default when unset
    seed: int = 0
    eval_every: int = 200
    eval_size: int = 256
    checkpoint: str | None = None

    def __post_init__(self):
        self.stage = Stage.parse(self.stage)
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr is None:
            self.lr = 3e-3 if self.stage is Stage.STAGE1 else 1e-3


@dataclass
class ReportRow:
    step: int
    loss: float  # mean training loss since the previous row
    disc_loss: float  # held-out loss on the TRUE/FALSE token
    accuracy: float  # held-out discriminative accuracy


@dataclass
class TrainReport:
    stage: Stage
    rows: list[ReportRow] = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None

    def to_tsv(self) -> str:
        lines = ["step\tloss\tdisc_loss\taccuracy"]
        lines += [f"{r.step}\t{r.loss:.6f}\t{r.disc_loss:.6f}\t{r.accuracy:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def _batch_order(n: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Indices for each step: consecutive slices of per-epoch seeded permutations."""
    order: list[int] = []
    epoch = 0
    need = steps * batch_size
    while len(order) < need:
        order.extend(stream(seed, epoch, _SHUFFLE).permutation(n).tolist())
        epoch += 1
    return [np.array(order[i * batch_size:(i + 1) * batch_size]) for i in range(steps)]


def _batch_loss(m: TinyTransformer, examples: Sequence[Example]) -> Node:
    batch = make_batch([e.tokens for e in examples], m.cfg.adapter.conditioning)
    labels = np.concatenate([e.labels for e in examples])
    mask = np.concatenate([e.mask for e in examples])
    return cross_entropy(m.forward(batch), labels, mask)


def discriminative_probe(m: TinyTransformer, samples: Sequence[SyntheticSample],
                         chunk: int = 64) -> tuple[float, float]:
    """(accuracy, mean loss) of the first answer token on discriminative samples."""
    disc = [s for s in samples if s.qa_style is QAStyle.DISCRIMINATIVE]
    if not disc:
        return float("nan"), float("nan")
    correct, nll = 0, 0.0
    with dc.no_tape():
        for lo in range(0, len(disc), chunk):
            part = disc[lo:lo + chunk]
            prompts = [render_qa(s)[0] for s in part]
            batch = make_batch(prompts, m.cfg.adapter.conditioning)
            logits = m.forward(batch).value[batch.ends]
            gold = np.array([s.answer[0] for s in part])
            correct += int((logits.argmax(axis=1) == gold).sum())
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            nll -= logp[np.arange(len(part)), gold].sum()
    return correct / len(disc), float(nll / len(disc))


def _set_trainable(m: TinyTransformer, stage: Stage) -> dict[str, Node]:
    trainable = trainable_params(m, stage)
    for name, p in m.named_parameters().items():
        p.requires_grad = name in trainable
        p.zero_grad()
    return trainable


def run_stage(m: TinyTransformer, data: Sequence[SyntheticSample], cfg: TrainConfig,
              eval_data: Sequence[SyntheticSample] | None = None,
              state: OptimState | None = None) -> TrainReport:
    """Train ``trainable_params(m, cfg.stage)`` for ``cfg.steps`` Adam steps.

    Stage 1 sees only the normal samples of ``data`` and predicts every next
    token; stage 2 sees all samples and is scored on answer tokens.  Stage 2
    refuses to start unless the base came from a stage-1 run or checkpoint.
    """
    stage = cfg.stage
    report = TrainReport(stage)
    if stage is Stage.STAGE2 and not getattr(m, "base_ready", False):
        raise MissingCheckpointError("stage 2 needs a stage-1 base (train stage 1 or load its checkpoint)")
    if cfg.steps == 0:
        return report
    pool = [s for s in data if not s.abnormal] if stage is Stage.STAGE1 else list(data)
    if not pool:
        raise ContractError("no training samples for this stage")
    examples = [encode_example(s, stage) for s in pool]
    probe = list(eval_data or [])[:cfg.eval_size]
    trainable = _set_trainable(m, stage)
    st = state if state is not None else OptimState(lr=cfg.lr)
    st.lr = cfg.lr
    saved_use = m.use_adapters
    # adapters add exactly zero to a base that has never seen stage 2
    m.use_adapters = stage is Stage.STAGE2
    try:
        running, count = 0.0, 0
        for step, idx in enumerate(_batch_order(len(examples), cfg.steps, cfg.batch_size, cfg.seed), 1):
            with dc.Tape() as tape:
                loss = _batch_loss(m, [examples[i] for i in idx])
            dc.backward(tape, loss)
            adam_step(trainable, st)
            for p in trainable.values():
                p.zero_grad()
            value = float(loss.value[0, 0])
            if report.initial_loss is None:
                report.initial_loss = value
            report.final_loss = value
            running += value
            count += 1
            if step % cfg.eval_every == 0 or step == cfg.steps:
                acc, dloss = discriminative_probe(m, probe) if probe else (float("nan"), float("nan"))
                report.rows.append(ReportRow(step, running / count, dloss, acc))
                log.info("stage %d step %d loss %.4f acc %.4f", stage.value, step, running / count, acc)
                running, count = 0.0, 0
    finally:
        m.use_adapters = saved_use
    if stage is Stage.STAGE1:
        m.base_ready = True
    m.optim_state = st
    return report


# ---------------------------------------------------------------- evaluation

def decode_answers(m: TinyTransformer, samples: Sequence[SyntheticSample], max_new: int = 4,
                   chunk: int = 64) -> list[list[int]]:
    """Greedy answers with the trailing EOS removed."""
    out: list[list[int]] = []
    for lo in range(0, len(samples), chunk):
        prompts = [render_qa(s)[0] for s in samples[lo:lo + chunk]]
        for ans in greedy_decode(m, prompts, max_new, stop_token=EOS):
            out.append(ans[:-1] if ans and ans[-1] == EOS else ans)
    return out


# ---------------------------------------------------------------- checkpoints

def _encode_items(items: dict[str, str]) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in items.items()).encode("utf-8")


def _decode_items(blob: bytes) -> dict[str, str]:
    items = {}
    for line in blob.decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            items[key] = value
    return items


def save_checkpoint(path: str | os.PathLike, m: TinyTransformer, st: OptimState | None = None,
                    extra: dict[str, str] | None = None) -> None:
    items = config_items(m.cfg)
    items["base_ready"] = str(bool(getattr(m, "base_ready", False))).lower()
    tensors = dict(sorted(m.named_parameters().items()))
    tensors = {k: p.value for k, p in tensors.items()}
    if st is not None:
        items.update({"optim.lr": repr(st.lr), "optim.beta1": repr(st.beta1),
                      "optim.beta2": repr(st.beta2), "optim.eps": repr(st.eps),
                      "optim.step": str(st.step)})
        for k in sorted(st.m):
            tensors[f"optim.m.{k}"] = st.m[k]
            tensors[f"optim.v.{k}"] = st.v[k]
    for k, v in (extra or {}).items():
        items[f"extra.{k}"] = v
    blob = _encode_items(items)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw (config items, named arrays) from a checkpoint file."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4) if len(r.data) >= 4 else r.data
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}: not an AMOE checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (blob_len,) = r.unpack("<I")
    try:
        items = _decode_items(r.take(blob_len))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config echo is not valid UTF-8: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        if ndim != 2:
            raise ShapeError(f"tensor {name}: ndim {ndim}, expected 2")
        dims = r.unpack(f"<{ndim}Q")
        n = int(np.prod(dims))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    return items, tensors


def load_checkpoint(path: str | os.PathLike, expected=None) -> tuple[TinyTransformer, OptimState | None]:
    """Rebuild the model (and optimizer state, when saved) from ``path``.

    With ``expected`` (a ModelConfig) the stored tensors must fit a model of
    that configuration, otherwise :class:`ShapeError` is raised.
    """
    items, tensors = read_checkpoint(path)
    try:
        cfg = config_from_items(items)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"config echo is incomplete or invalid: {exc}") from None
    m = TinyTransformer(expected if expected is not None else cfg)
    params = m.named_parameters()
    for name, p in params.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint has no tensor {name}")
        if tensors[name].shape != p.value.shape:
            raise ShapeError(f"tensor {name}: checkpoint shape {tensors[name].shape}, "
                             f"model expects {p.value.shape}")
        p.value[...] = tensors[name]
    unknown = [k for k in tensors if k not in params and not k.startswith("optim.")]
    if unknown:
        raise ShapeError(f"checkpoint tensors not in the model: {unknown[:3]}")
    m.base_ready = items.get("base_ready") == "true"
    st = None
    if "optim.step" in items:
        st = OptimState(lr=float(items["optim.lr"]), beta1=float(items["optim.beta1"]),
                        beta2=float(items["optim.beta2"]), eps=float(items["optim.eps"]),
                        step=int(items["optim.step"]))
        for k, arr in tensors.items():
            if k.startswith("optim.m."):
                st.m[k[len("optim.m."):]] = arr.copy()
            elif k.startswith("optim.v."):
                st.v[k[len("optim.v."):]] = arr.copy()
    return m, st


def load_base(m: TinyTransformer, path: str | os.PathLike) -> None:
    """Copy the base weights of a checkpoint into ``m`` (adapters untouched)."""
    items, tensors = read_checkpoint(path)
    for name, p in m.base.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint has no tensor {name}")
        if tensors[name].shape != p.value.shape:
            raise ShapeError(f"tensor {name}: checkpoint shape {tensors[name].shape}, "
                             f"model expects {p.value.shape}")
        p.value[...] = tensors[name]
    if items.get("base_ready") != "true":
        raise MissingCheckpointError(f"{path} does not hold a stage-1 trained base")
    m.base_ready = True


def checkpoint_digest(m: TinyTransformer) -> str:
    return parameter_digest(m.named_parameters())


__all__ = [
    "CheckpointError", "Example", "MagicError", "MissingCheckpointError", "OptimState",
    "ReportRow", "ShapeError", "TrainConfig", "TrainReport", "VersionError", "adam_step",
    "checkpoint_digest", "cross_entropy", "decode_answers", "discriminative_probe",
    "encode_example", "load_base", "load_checkpoint", "read_checkpoint", "run_stage",
    "save_checkpoint",
]
