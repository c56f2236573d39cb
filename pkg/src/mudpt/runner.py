"""Experiment orchestration: pretrain if needed, tune, evaluate per protocol, report."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as config_mod
from .config import ExperimentConfig
from .datagen import AccessAudit, SyntheticCorpus, base_new_split, domain_shift, few_shot_sample, gen_corpus
from .encoders import DualEncoder
from .errors import CheckpointError
from .metrics import accuracy, average, harmonic_mean
from .objective import contrastive_pretrain, predict_indices, similarity_gap, train
from .prompting import PromptedModel
from .report import WALL_TIME_KEY, emit_report

log = logging.getLogger(__name__)

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def _pretrain_fingerprint(cfg: ExperimentConfig) -> str:
    p = asdict(cfg.pretrain)
    p.pop("checkpoint")
    doc = {"backbone": asdict(cfg.backbone), "pretrain": p, "corpus": asdict(cfg.pretrain_corpus_config())}
    return json.dumps(doc, sort_keys=True)


def backbone_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.pretrain.checkpoint) if cfg.pretrain.checkpoint else Path(cfg.output) / "backbone.json"


def pretrain_backbone(cfg: ExperimentConfig) -> tuple[DualEncoder, dict]:
    backbone = DualEncoder(cfg.backbone, seed=cfg.pretrain.seed)
    info = {"steps": cfg.pretrain.steps}
    if cfg.pretrain.steps > 0:
        corpus = gen_corpus(cfg.pretrain_corpus_config(), seed=cfg.pretrain.corpus_seed)
        result = contrastive_pretrain(corpus, backbone, cfg.pretrain_schedule(), seed=cfg.pretrain.seed)
        info.update(final_loss=result.trace[-1]["loss"], temperature=result.temperature,
                    similarity_gap=similarity_gap(backbone, corpus))
    return backbone, info


def ensure_backbone(cfg: ExperimentConfig) -> DualEncoder:
    """Load the cached pretrained backbone when its fingerprint matches, else pretrain and save."""
    path = backbone_path(cfg)
    fingerprint = _pretrain_fingerprint(cfg)
    if path.exists():
        try:
            params, meta, _ = checkpoint.load(path, kind="backbone")
            if meta.get("fingerprint") == fingerprint:
                model = DualEncoder(cfg.backbone, seed=cfg.pretrain.seed)
                model.load_state_dict(params)
                return model
            log.info("cached backbone %s was built from a different config; re-pretraining", path)
        except CheckpointError as exc:
            log.warning("ignoring unreadable backbone checkpoint %s: %s", path, exc)
    backbone, info = pretrain_backbone(cfg)
    save_backbone(cfg, backbone, info)
    return backbone


def save_backbone(cfg: ExperimentConfig, backbone: DualEncoder, info: dict) -> Path:
    path = backbone_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, "backbone", backbone.state_dict(),
                    {"config": asdict(backbone.config), "fingerprint": _pretrain_fingerprint(cfg), "pretrain": info})
    return path


def build_model(cfg: ExperimentConfig, backbone: DualEncoder, mode: str) -> PromptedModel:
    template = cfg.data.vocabulary.template
    init = template if cfg.prompt.init_from_template and len(template) == cfg.prompt.length else None
    return PromptedModel(backbone, cfg.prompt_config(mode), seed=cfg.seed,
                         init_tokens=init, template_tokens=template)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

class _Run:
    def __init__(self, cfg: ExperimentConfig, backbone: DualEncoder, out: Path):
        self.cfg = cfg
        self.backbone = backbone
        self.out = out

    def tune(self, mode: str, model: PromptedModel, corpus: SyntheticCorpus, split, audit: AccessAudit):
        """Train unless zero-shot; returns the loss-trace summary (or None)."""
        if mode == "zero_shot":
            return None, []
        res = train(model, corpus, split, self.cfg.schedule, seed=self.cfg.seed, mode=mode, audit=audit)
        summary = {"path": f"loss_{mode}.jsonl", "steps": res.steps,
                   "initial_loss": res.trace[0]["loss"] if res.trace else None,
                   "final_loss": res.trace[-1]["loss"] if res.trace else None,
                   "backbone_hash": res.backbone_hash}
        return summary, res.trace

    def evaluate(self, model, corpus, indices, class_ids, audit=None) -> float:
        preds, truth = predict_indices(model, corpus, indices, class_ids, audit)
        return accuracy(preds, truth)

    def run_mode(self, mode: str, corpus: SyntheticCorpus) -> tuple[dict, list[dict]]:
        cfg = self.cfg
        model = build_model(cfg, self.backbone, mode)
        tune_audit = AccessAudit()
        result: dict = {"mode": mode}
        records: list[dict] = []

        if cfg.protocol == "base_to_new":
            bn = base_new_split(corpus.class_ids, cfg.seed)
            split = few_shot_sample(corpus, cfg.shots, cfg.seed, bn.base)
            summary, records = self.tune(mode, model, corpus, split, tune_audit)
            base = self.evaluate(model, corpus, split.test, bn.base)
            new = self.evaluate(model, corpus, corpus.indices("test", bn.new), bn.new)
            leaked = sorted(tune_audit.classes & set(bn.new))
            result.update(
                accuracies={"base": base, "new": new}, base_acc=base, new_acc=new,
                harmonic_mean=harmonic_mean(base, new) if base > 0 and new > 0 else 0.0,
                arith_mean=average([base, new]),
                base_classes=list(bn.base), new_classes=list(bn.new),
                audit={"tuning_classes": sorted(tune_audit.classes),
                       "tuning_splits": dict(sorted(tune_audit.split_counts.items())),
                       "new_class_images_seen": sum(tune_audit.class_counts[c] for c in leaked),
                       "passed": not leaked and set(tune_audit.split_counts) <= {"train"}})
        else:
            split = few_shot_sample(corpus, cfg.shots, cfg.seed)
            summary, records = self.tune(mode, model, corpus, split, tune_audit)
            source = self.evaluate(model, corpus, split.test, split.class_ids)
            accs = {"source": source}
            targets: list[str] = []
            if cfg.protocol == "cross_dataset":
                for k in range(1, cfg.cross_dataset_targets + 1):
                    target = gen_corpus(cfg.data, seed=cfg.seed + k)
                    name = f"target_seed{cfg.seed + k}"
                    accs[name] = self.evaluate(model, target, target.indices("test"), target.class_ids)
                    targets.append(name)
            elif cfg.protocol == "domain_gen":
                for s in cfg.shifts:
                    shifted = domain_shift(corpus, s.kind, s.severity, seed=cfg.seed)
                    name = f"{s.kind}@{s.severity:g}"
                    accs[name] = self.evaluate(model, shifted, split.test, split.class_ids)
                    targets.append(name)
            result["accuracies"] = accs
            if targets:
                result["target_average"] = average(accs[t] for t in targets)
            result["audit"] = {"tuning_splits": dict(sorted(tune_audit.split_counts.items())),
                               "passed": set(tune_audit.split_counts) <= {"train"}}

        if summary is not None:
            result["loss_trace"] = summary
            model.save_prompts(self.out / f"prompts_{mode}.json")
        for name, acc in result["accuracies"].items():
            records.append({"eval": name, "accuracy": acc})
        return result, records


def _canonical(value):
    """Round floats to 10 significant digits so the JSON text is stable."""
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite value in report")
        return float(f"{value:.10g}")
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.floating):
        return _canonical(float(value))
    return value


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured protocol for every mode and write the report files."""
    t0 = time.perf_counter()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    backbone = ensure_backbone(cfg)
    corpus = gen_corpus(cfg.data, seed=cfg.seed)
    run = _Run(cfg, backbone, out)
    results = {}
    for mode in cfg.modes:
        log.info("running %s / %s", cfg.protocol, mode)
        result, records = run.run_mode(mode, corpus)
        results[mode] = result
        write_jsonl(out / f"loss_{mode}.jsonl", records)
    report = {
        "report_version": REPORT_VERSION,
        "protocol": cfg.protocol,
        "seed": cfg.seed,
        "modes": list(cfg.modes),
        "config": config_mod.to_dict(cfg),
        "backbone_hash": backbone.content_hash(),
        "corpus_hash": checkpoint.content_hash({"images": corpus.images}),
        "results": results,
        WALL_TIME_KEY: time.perf_counter() - t0,
    }
    report = _canonical(report)
    emit_report(report, out)
    return report


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_canonical(rec), sort_keys=True) + "\n")
