"""Command-line driver: gen-data, train, eval, ablate, sweep, inspect-adapters.

Every command reads a flat ``key = value`` config (``--config``), applies
``--set key=value`` overrides and ``--seed``, and writes the fully resolved
config next to its outputs.  Tables are TSV; logs go to stderr with the level
taken from ``AMOE_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from amoelora.adapters import AdapterConfig, Variant, extract_generated_params
from amoelora.diffcore import ContractError
from amoelora.metrics import (METRIC_NAMES, EvalReport, build_report, format_tsv, pca2,
                              separation_ratio)
from amoelora.model import ModelConfig, Stage, TinyTransformer, make_batch
from amoelora.synthdata import (DatasetFormatError, QAStyle, SyntheticSample, TaskConfig,
                                gen_split, read_dataset, render_qa, write_dataset)
from amoelora.trainpipe import (CheckpointError, MissingCheckpointError, TrainConfig,
                                checkpoint_digest, decode_answers, load_base, load_checkpoint,
                                run_stage, save_checkpoint)

log = logging.getLogger("amoelora")

SWEEP_GRID = ((4, 16), (8, 8), (16, 4), (32, 2))
SWEEP_REFERENCE = (16, 4)  # best cell reported for the full-scale model
ABLATION_VARIANTS = (Variant.LORA_ONLY, Variant.MOE_ONLY, Variant.FULL)
# full-scale reference numbers (ROUGE-1, ROUGE-2, ROUGE-L, BLEU-4), printed only
ABLATION_REFERENCE = {
    Variant.LORA_ONLY: (0.6971, 0.4446, 0.6449, 0.4529),
    Variant.MOE_ONLY: (0.6991, 0.4452, 0.6468, 0.4598),
    Variant.FULL: (0.7026, 0.4537, 0.6531, 0.4773),
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

DEFAULTS: dict[str, str] = {
    # task
    "n_domains": "6", "objects_per_domain": "3", "defect_classes": "8", "seq_len": "16",
    "normal_ratio": "0.5", "n_samples": "20000", "object_band": "6", "defect_band": "3",
    "span_min": "3", "span_max": "5", "test_fraction": "0.2",
    # model
    "d_model": "64", "n_layers": "2", "n_heads": "4", "max_seq": "64", "d_ff": "256",
    "injection_points": "attn_q,attn_v", "n_experts": "16", "rank": "4", "alpha": "16.0",
    "hyper_hidden": "0", "hyper_rank": "1", "variant": "amoe", "conditioning": "causal",
    # training
    "seed": "0", "steps": "2000", "batch_size": "16", "lr": "0.001",
    "stage1_steps": "2000", "stage1_lr": "0.003", "eval_every": "200", "eval_size": "256",
    # decoding
    "max_new": "4",
}

_INT = {"n_domains", "objects_per_domain", "defect_classes", "seq_len", "n_samples",
        "object_band", "defect_band", "span_min", "span_max", "d_model", "n_layers", "n_heads",
        "max_seq", "d_ff", "n_experts", "rank", "hyper_hidden", "hyper_rank", "seed", "steps",
        "batch_size", "stage1_steps", "eval_every", "eval_size", "max_new"}
_FLOAT = {"normal_ratio", "test_fraction", "alpha", "lr", "stage1_lr"}


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Resolved flat configuration with typed views for each subsystem."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key in _INT:
                int(value)
            elif key in _FLOAT:
                float(value)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
        self.values[key] = str(value)

    def int(self, key: str) -> int:
        return int(self.values[key])

    def float(self, key: str) -> float:
        return float(self.values[key])

    def with_overrides(self, **kw) -> RunConfig:
        out = RunConfig(self.values)
        for k, v in kw.items():
            out.set(k, str(v))
        return out

    def task(self) -> TaskConfig:
        names = [f.name for f in dataclasses.fields(TaskConfig)]
        kwargs = {}
        for name in names:
            kwargs[name] = self.float(name) if name in _FLOAT else self.int(name)
        return TaskConfig(**kwargs)

    def model(self) -> ModelConfig:
        variant = Variant.parse(self.values["variant"])
        n_experts, rank, alpha = self.int("n_experts"), self.int("rank"), self.float("alpha")
        if variant is Variant.LORA_ONLY:
            # one expert holding the whole N·r budget (capped at d) at the same alpha/r scale
            lora_rank = min(n_experts * rank, self.int("d_model"))
            n_experts, rank, alpha = 1, lora_rank, alpha * lora_rank / rank
        adapter = AdapterConfig(n_experts=n_experts, rank=rank, alpha=alpha,
                                hidden=self.int("hyper_hidden") or None, variant=variant,
                                hyper_rank=self.int("hyper_rank"),
                                conditioning=self.values["conditioning"])
        points = tuple(p.strip() for p in self.values["injection_points"].split(",") if p.strip())
        return ModelConfig(vocab_size=self.task().vocab_size, d_model=self.int("d_model"),
                           n_layers=self.int("n_layers"), n_heads=self.int("n_heads"),
                           max_seq=self.int("max_seq"), d_ff=self.int("d_ff"),
                           injection_points=points, adapter=adapter)

    def train(self, stage: Stage) -> TrainConfig:
        if stage is Stage.STAGE1:
            steps, lr = self.int("stage1_steps"), self.float("stage1_lr")
        else:
            steps, lr = self.int("steps"), self.float("lr")
        return TrainConfig(stage=stage, steps=steps, batch_size=self.int("batch_size"), lr=lr,
                           seed=self.int("seed"), eval_every=self.int("eval_every"),
                           eval_size=self.int("eval_size"))

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))


def resolve_config(path: str | None, sets: Sequence[str] = (), seed: int | None = None) -> RunConfig:
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), path))
    cfg = RunConfig(values)
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if seed is not None:
        cfg.set("seed", str(seed))
    return cfg


def _write_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(cfg.to_text(), encoding="utf-8")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


# ---------------------------------------------------------------- pipeline pieces

def load_split(data: str | os.PathLike) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    root = Path(data)
    return read_dataset(root / "train.tsv"), read_dataset(root / "test.tsv")


def train_stage1(cfg: RunConfig, train: Sequence[SyntheticSample], test=None) -> tuple[TinyTransformer, object]:
    m = TinyTransformer(cfg.model(), seed=cfg.int("seed"))
    report = run_stage(m, train, cfg.train(Stage.STAGE1), eval_data=test)
    return m, report


def train_stage2(cfg: RunConfig, init: str | os.PathLike, train, test=None):
    m = TinyTransformer(cfg.model(), seed=cfg.int("seed"))
    load_base(m, init)
    report = run_stage(m, train, cfg.train(Stage.STAGE2), eval_data=test)
    return m, report


def evaluate(m: TinyTransformer, samples: Sequence[SyntheticSample], n_domains: int,
             max_new: int = 4) -> tuple[EvalReport, list[list[int]]]:
    preds = decode_answers(m, samples, max_new=max_new)
    report = build_report([s.domain_id for s in samples], [s.qa_style.value for s in samples],
                          [s.answer for s in samples], preds, n_domains)
    return report, preds


def write_predictions(path: Path, samples: Sequence[SyntheticSample], preds) -> None:
    rows = [["index", "domain_id", "qa_style", "gold", "pred"]]
    for i, (s, p) in enumerate(zip(samples, preds)):
        rows.append([str(i), str(s.domain_id), s.qa_style.value,
                     " ".join(map(str, s.answer)), " ".join(map(str, p))])
    path.write_text(format_tsv(rows), encoding="utf-8")


def report_from_predictions(path: str | os.PathLike, n_domains: int) -> EvalReport:
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    domains, styles, golds, preds = [], [], [], []
    for line in lines:
        _, dom, style, gold, pred = line.split("\t")
        domains.append(int(dom))
        styles.append(style)
        golds.append([int(t) for t in gold.split()])
        preds.append([int(t) for t in pred.split()])
    return build_report(domains, styles, golds, preds, n_domains)


def _summary_row(label: str, rep: EvalReport) -> list[str]:
    s = rep.summary()
    return [label, *[f"{s[k]:.4f}" for k in METRIC_NAMES]]


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    train, test = gen_split(cfg.task())
    write_dataset(out / "train.tsv", train)
    write_dataset(out / "test.tsv", test)
    _write_config(cfg, out / "config.txt")
    log.info("wrote %d train and %d test samples to %s", len(train), len(test), out)


def cmd_train(cfg: RunConfig, stage: Stage, data: Path, out: Path, init: str | None) -> str:
    train, test = load_split(data)
    if stage is Stage.STAGE2:
        if not init:
            raise MissingCheckpointError("stage 2 training needs --init pointing at a stage-1 checkpoint")
        m, report = train_stage2(cfg, init, train, test)
    else:
        m, report = train_stage1(cfg, train, test)
    save_checkpoint(out, m, m.optim_state, extra={"seed": cfg.values["seed"]})
    _sidecar(out, ".log.tsv").write_text(report.to_tsv(), encoding="utf-8")
    _write_config(cfg, _sidecar(out, ".config.txt"))
    digest = checkpoint_digest(m)
    log.info("stage %d checkpoint %s digest %s", stage.value, out, digest)
    return digest


def cmd_eval(cfg: RunConfig, checkpoint: str, data: Path, out: Path | None) -> EvalReport:
    m, _ = load_checkpoint(checkpoint)
    _, test = load_split(data)
    report, preds = evaluate(m, test, cfg.task().n_domains, cfg.int("max_new"))
    label = m.cfg.adapter.variant.label
    text = report.to_tsv(label)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")
        write_predictions(_sidecar(out, ".predictions.tsv"), test, preds)
        _write_config(cfg, _sidecar(out, ".config.txt"))
    return report


def _ensure_stage1(cfg: RunConfig, init: str | None, train, test, workdir: Path) -> str:
    if init:
        return init
    path = workdir / "stage1.ckpt"
    m, report = train_stage1(cfg, train, test)
    save_checkpoint(path, m, m.optim_state, extra={"seed": cfg.values["seed"]})
    _sidecar(path, ".log.tsv").write_text(report.to_tsv(), encoding="utf-8")
    return str(path)


def cmd_ablate(cfg: RunConfig, data: Path, out: Path, init: str | None = None) -> list[list[str]]:
    """Train and evaluate LoRA, LoRAMoE and AMoE-LoRA adapters on one stage-1 base."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_split(data)
    init = _ensure_stage1(cfg, init, train, test, out)
    rows = [["architecture", *METRIC_NAMES]]
    timing = [["architecture", "train_seconds"]]
    for variant in ABLATION_VARIANTS:
        vcfg = cfg.with_overrides(variant=variant.value)
        start = time.perf_counter()
        m, report = train_stage2(vcfg, init, train, test)
        timing.append([variant.label, f"{time.perf_counter() - start:.1f}"])
        ckpt = out / f"{variant.value}.ckpt"
        save_checkpoint(ckpt, m, m.optim_state, extra={"seed": cfg.values["seed"]})
        _sidecar(ckpt, ".log.tsv").write_text(report.to_tsv(), encoding="utf-8")
        rep, preds = evaluate(m, test, vcfg.task().n_domains, vcfg.int("max_new"))
        (out / f"{variant.value}.eval.tsv").write_text(rep.to_tsv(variant.label), encoding="utf-8")
        write_predictions(out / f"{variant.value}.predictions.tsv", test, preds)
        rows.append(_summary_row(variant.label, rep))
        log.info("ablation %s: %s", variant.label, rows[-1][1:])
    (out / "ablation.tsv").write_text(format_tsv(rows), encoding="utf-8")
    (out / "ablation_timing.tsv").write_text(format_tsv(timing), encoding="utf-8")
    ref = [["architecture", "rouge1", "rouge2", "rougeL", "bleu4"]]
    ref += [[v.label, *map(str, ABLATION_REFERENCE[v])] for v in ABLATION_VARIANTS]
    (out / "ablation_reference.tsv").write_text(format_tsv(ref), encoding="utf-8")
    _write_config(cfg, out / "config.txt")
    return rows


def cmd_sweep(cfg: RunConfig, data: Path, out: Path, init: str | None = None) -> list[list[str]]:
    """Experts × rank grid at a fixed product of 64."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_split(data)
    init = _ensure_stage1(cfg, init, train, test, out)
    rows = [["n_experts", "rank", "product", *METRIC_NAMES, "note"]]
    for n, r in SWEEP_GRID:
        ccfg = cfg.with_overrides(n_experts=n, rank=r)
        m, _ = train_stage2(ccfg, init, train, test)
        rep, _ = evaluate(m, test, ccfg.task().n_domains, ccfg.int("max_new"))
        note = "reference optimum" if (n, r) == SWEEP_REFERENCE else ""
        rows.append([str(n), str(r), str(n * r), *_summary_row("", rep)[1:], note])
        log.info("sweep N=%d r=%d: %s", n, r, rows[-1][3:-1])
    (out / "sweep.tsv").write_text(format_tsv(rows), encoding="utf-8")
    _write_config(cfg, out / "config.txt")
    return rows


def conditioning_rows(m: TinyTransformer, samples: Sequence[SyntheticSample],
                      chunk: int = 64) -> dict[str, np.ndarray]:
    """Per adapter, one conditioning row per sample: the mean adapter input over the prompt."""
    out: dict[str, list[np.ndarray]] = {k: [] for k in m.adapters}
    for lo in range(0, len(samples), chunk):
        prompts = [render_qa(s)[0] for s in samples[lo:lo + chunk]]
        batch = make_batch(prompts, m.cfg.adapter.conditioning)
        captured = m.capture_adapter_inputs(batch)
        bounds = np.concatenate([[0], np.cumsum(batch.lengths)])
        for name, x in captured.items():
            out[name].extend(x[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:]))
    return {k: np.array(v) for k, v in out.items()}


def inspect_adapters(m: TinyTransformer, samples: Sequence[SyntheticSample]) -> np.ndarray:
    """Generated A0‖B0 factors of every adapter, concatenated per sample."""
    if m.cfg.adapter.variant is not Variant.FULL or not m.adapters:
        raise ContractError(f"inspection needs an AMoE-LoRA checkpoint, got {m.cfg.adapter.variant.label}")
    conds = conditioning_rows(m, samples)
    return np.hstack([extract_generated_params(m.adapters[k], conds[k]) for k in sorted(m.adapters)])


def cmd_inspect_adapters(cfg: RunConfig, checkpoint: str, data: Path, out: Path) -> dict[str, float]:
    m, _ = load_checkpoint(checkpoint)
    if m.cfg.adapter.variant is not Variant.FULL:
        raise ContractError(f"inspection needs an AMoE-LoRA checkpoint, got {m.cfg.adapter.variant.label}")
    _, test = load_split(data)
    factors = inspect_adapters(m, test)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "factors.tsv", factors, delimiter="\t", fmt="%.17g")
    coords = pca2(factors)
    rows = [["index", "domain_id", "object_id", "defect_id", "pc1", "pc2"]]
    for i, (s, (x, y)) in enumerate(zip(test, coords)):
        rows.append([str(i), str(s.domain_id), str(s.object_id), str(s.defect_id), repr(x), repr(y)])
    (out / "pca.tsv").write_text(format_tsv(rows), encoding="utf-8")
    ratios = {
        "object": separation_ratio(factors, [s.object_key for s in test]),
        "defect": separation_ratio(factors, [s.defect_id for s in test]),
    }
    (out / "separation.tsv").write_text(
        format_tsv([["grouping", "separation_ratio"], *[[k, f"{v:.6f}"] for k, v in ratios.items()]]),
        encoding="utf-8")
    _write_config(cfg, out / "config.txt")
    return ratios


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="K=V", dest="sets")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="amoelora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common])
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--stage", choices=["1", "2"], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--init")
    for name in ("eval", "inspect-adapters"):
        e = sub.add_parser(name, parents=[common])
        e.add_argument("--checkpoint", "--init", dest="checkpoint", required=True)
        e.add_argument("--data", required=True)
    for name in ("ablate", "sweep"):
        a = sub.add_parser(name, parents=[common])
        a.add_argument("--data", required=True)
        a.add_argument("--init", help="reuse this stage-1 checkpoint instead of training one")
    return p


def _need_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("AMOE_LOG", "error").strip().upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.sets, args.seed)
        if args.command == "gen-data":
            cmd_gen_data(cfg, _need_out(args))
        elif args.command == "train":
            cmd_train(cfg, Stage.parse(args.stage), Path(args.data), _need_out(args), args.init)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, Path(args.data), Path(args.out) if args.out else None)
        elif args.command == "ablate":
            sys.stdout.write(format_tsv(cmd_ablate(cfg, Path(args.data), _need_out(args), args.init)))
        elif args.command == "sweep":
            sys.stdout.write(format_tsv(cmd_sweep(cfg, Path(args.data), _need_out(args), args.init)))
        elif args.command == "inspect-adapters":
            ratios = cmd_inspect_adapters(cfg, args.checkpoint, Path(args.data), _need_out(args))
            sys.stdout.write(format_tsv([[k, f"{v:.6f}"] for k, v in ratios.items()]))
    except (ConfigError, CheckpointError, DatasetFormatError, MissingCheckpointError,
            ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
