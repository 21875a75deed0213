"""Synthetic multi-domain anomaly question answering corpus.

Each sample is a token "image" of an object: ``seq_len`` content tokens drawn
from a band of ids owned by that (domain, object) pair.  Abnormal samples have
one contiguous span overwritten with tokens from a band owned by the defect
class.  Two question styles are rendered on top:

* discriminative: the answer is ``TRUE`` (abnormal) or ``FALSE`` (normal);
* open-ended: the answer is ``DEF_k POS_b`` naming the defect class and the
  third of the sequence holding the span centre, or ``NONE`` when normal.

Randomness comes from numpy's Philox counter-based generator keyed by
``(seed, draw index)``, so any single draw can be regenerated on its own.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, SEP, TRUE, FALSE, NONE, POS_BEGIN, POS_MID, POS_END = range(10)
POS_TOKENS = (POS_BEGIN, POS_MID, POS_END)
QUESTION_BASE = 10
N_QUESTION_TOKENS = 8
DOMAIN_BASE = QUESTION_BASE + N_QUESTION_TOKENS

HEADER = "mauqa-synth v1"

# Stream purposes, kept in the high word of the Philox counter.
_DRAW, _OBJECT_WEIGHTS, _SPLIT = 0, 1, 2


class QAStyle(str, enum.Enum):
    DISCRIMINATIVE = "DISCRIMINATIVE"
    OPEN_ENDED = "OPEN_ENDED"


_Q = QUESTION_BASE
QUESTION_POOL = {
    QAStyle.DISCRIMINATIVE: ((_Q + 0, _Q + 1), (_Q + 2, _Q + 1), (_Q + 0, _Q + 3)),
    QAStyle.OPEN_ENDED: ((_Q + 4, _Q + 5), (_Q + 6, _Q + 5), (_Q + 4, _Q + 7)),
}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    n_domains: int = 6
    objects_per_domain: int = 3
    defect_classes: int = 8
    seq_len: int = 16
    normal_ratio: float = 0.5
    seed: int = 0
    n_samples: int = 20000
    object_band: int = 6
    defect_band: int = 3
    span_min: int = 3
    span_max: int = 5
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.normal_ratio < 1.0:
            raise ValueError("normal_ratio must lie strictly between 0 and 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")
        if min(self.n_domains, self.objects_per_domain, self.defect_classes,
               self.object_band, self.defect_band, self.n_samples) < 1:
            raise ValueError("counts must be positive")
        if not 1 <= self.span_min <= self.span_max <= self.seq_len:
            raise ValueError("need 1 <= span_min <= span_max <= seq_len")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def n_objects(self) -> int:
        return self.n_domains * self.objects_per_domain


class Vocab:
    """Id layout: reserved, question, domain, defect-answer, object-band, defect-band tokens."""

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        self.defect_answer_base = DOMAIN_BASE + cfg.n_domains
        self.object_base = self.defect_answer_base + cfg.defect_classes
        self.defect_base = self.object_base + cfg.n_objects * cfg.object_band
        self.size = self.defect_base + cfg.defect_classes * cfg.defect_band

    def domain_token(self, domain_id: int) -> int:
        return DOMAIN_BASE + domain_id

    def defect_answer(self, defect_id: int) -> int:
        return self.defect_answer_base + defect_id - 1

    def object_tokens(self, domain_id: int, object_id: int) -> np.ndarray:
        k = domain_id * self.cfg.objects_per_domain + object_id
        start = self.object_base + k * self.cfg.object_band
        return np.arange(start, start + self.cfg.object_band)

    def defect_tokens(self, defect_id: int) -> np.ndarray:
        start = self.defect_base + (defect_id - 1) * self.cfg.defect_band
        return np.arange(start, start + self.cfg.defect_band)


@dataclass(frozen=True)
class SyntheticSample:
    domain_id: int
    object_id: int
    defect_id: int  # 0 means normal
    content: tuple[int, ...]
    defect_span: tuple[int, int] | None  # (start, length)
    qa_style: QAStyle
    question: tuple[int, ...]
    answer: tuple[int, ...]

    @property
    def abnormal(self) -> bool:
        return self.defect_id != 0

    @property
    def object_key(self) -> tuple[int, int]:
        return (self.domain_id, self.object_id)


def stream(seed: int, index: int, purpose: int = _DRAW) -> np.random.Generator:
    """Independent generator for one (seed, index, purpose) triple."""
    key = ((seed % 2**64) << 64) | (index % 2**64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, purpose]))


def object_weights(cfg: TaskConfig, domain_id: int, object_id: int) -> np.ndarray:
    """Fixed categorical distribution over an object's token band."""
    k = domain_id * cfg.objects_per_domain + object_id
    return stream(cfg.seed, k, _OBJECT_WEIGHTS).dirichlet(np.full(cfg.object_band, 2.0))


def position_bucket(span: tuple[int, int], seq_len: int) -> int:
    """0, 1 or 2 for the third of the sequence containing the span centre ``start + len//2``."""
    start, length = span
    return min(2, 3 * (start + length // 2) // seq_len)


def gen_sample(cfg: TaskConfig, index: int) -> SyntheticSample:
    rng = stream(cfg.seed, index)
    vocab = cfg.vocab
    abnormal = rng.random() >= cfg.normal_ratio
    domain = int(rng.integers(cfg.n_domains))
    obj = int(rng.integers(cfg.objects_per_domain))
    content = rng.choice(vocab.object_tokens(domain, obj), size=cfg.seq_len,
                         p=object_weights(cfg, domain, obj))
    defect, span = 0, None
    if abnormal:
        defect = int(rng.integers(1, cfg.defect_classes + 1))
        length = int(rng.integers(cfg.span_min, cfg.span_max + 1))
        start = int(rng.integers(0, cfg.seq_len - length + 1))
        content[start:start + length] = rng.choice(vocab.defect_tokens(defect), size=length)
        span = (start, length)
    style = QAStyle.DISCRIMINATIVE if rng.random() < 0.5 else QAStyle.OPEN_ENDED
    pool = QUESTION_POOL[style]
    question = pool[int(rng.integers(len(pool)))]
    if style is QAStyle.DISCRIMINATIVE:
        answer = (TRUE,) if abnormal else (FALSE,)
    elif abnormal:
        answer = (vocab.defect_answer(defect), POS_TOKENS[position_bucket(span, cfg.seq_len)])
    else:
        answer = (NONE,)
    return SyntheticSample(domain, obj, defect, tuple(int(t) for t in content), span,
                           style, tuple(question), answer)


def gen_corpus(cfg: TaskConfig) -> list[SyntheticSample]:
    return [gen_sample(cfg, i) for i in range(cfg.n_samples)]


def gen_split(cfg: TaskConfig) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Stratified (domain, defect) train/test split of the generated corpus.

    Every stratum sends ``round(test_fraction * n)`` samples to the test set,
    so both splits keep the corpus' normal/abnormal ratio.
    """
    corpus = gen_corpus(cfg)
    strata: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(corpus):
        strata.setdefault((s.domain_id, s.defect_id), []).append(i)
    rng = stream(cfg.seed, 0, _SPLIT)
    test_idx: set[int] = set()
    for key in sorted(strata):
        members = strata[key]
        n_test = int(round(cfg.test_fraction * len(members)))
        picked = rng.permutation(len(members))[:n_test]
        test_idx.update(members[j] for j in picked)
    train = [s for i, s in enumerate(corpus) if i not in test_idx]
    test = [s for i, s in enumerate(corpus) if i in test_idx]
    return train, test


def render_qa(s: SyntheticSample) -> tuple[list[int], list[int]]:
    """(prompt, target): ``[BOS, domain, content..., SEP, question...]`` and ``answer + [EOS]``."""
    prompt = [BOS, DOMAIN_BASE + s.domain_id, *s.content, SEP, *s.question]
    return prompt, [*s.answer, EOS]


# ---------------------------------------------------------------- file I/O

def _ids(seq) -> str:
    return " ".join(str(t) for t in seq)


def _format(s: SyntheticSample) -> str:
    start, length = s.defect_span if s.defect_span is not None else (-1, -1)
    fields = [s.domain_id, s.object_id, s.defect_id, start, length, s.qa_style.value,
              _ids(s.content), _ids(s.question), _ids(s.answer)]
    return "\t".join(str(f) for f in fields)


def _parse(line: str, lineno: int) -> SyntheticSample:
    parts = line.split("\t")
    if len(parts) != 9:
        raise DatasetFormatError(f"line {lineno}: expected 9 tab-separated fields, got {len(parts)}")
    try:
        domain, obj, defect, start, length = (int(p) for p in parts[:5])
        style = QAStyle(parts[5])
        content, question, answer = (tuple(int(t) for t in p.split()) for p in parts[6:])
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from None
    if (defect == 0) != (start == -1 and length == -1):
        raise DatasetFormatError(f"line {lineno}: defect id and span disagree")
    span = None if defect == 0 else (start, length)
    return SyntheticSample(domain, obj, defect, content, span, style, question, answer)


def write_dataset(path: str | os.PathLike, samples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(HEADER + "\n")
        for s in samples:
            f.write(_format(s) + "\n")


def read_dataset(path: str | os.PathLike) -> list[SyntheticSample]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines[0] != HEADER:
        raise DatasetFormatError(f"line 1: expected header {HEADER!r}, got {lines[0][:40]!r}")
    if lines[-1] == "":
        lines.pop()
    return [_parse(line, n) for n, line in enumerate(lines[1:], start=2)]
