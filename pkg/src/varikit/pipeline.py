"""End-to-end desk-scale experiment: backbones, plugins per ratio, evaluation.

All randomness derives from one root seed. Each stage draws its own seed as
``derive_seed(root, stage_name)``, a 32-bit word from
``numpy.random.SeedSequence(root, spawn_key=(crc32(stage_name),))``, so
adding a stage never perturbs the others.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from varikit.backbone import BackboneConfig, BackboneTrainConfig, BackboneWeights, train_backbone
from varikit.cost import CostReport, speedup_report
from varikit.plugin import PluginBundle, init_plugin
from varikit.toy import SEQ_LEN, ToyCorpus, ToyTask, make_toy_corpus, make_toy_task
from varikit.training import (
    DESK_R,
    TrainingConfig,
    adapt_plugin,
    evaluate_accuracy,
    evaluate_distill,
    pretrain_plugin,
)


def derive_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


@dataclass
class PipelineConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    task: str = "token_tag"
    corpus_size: int = 4000
    train_size: int = 4000
    eval_size: int = 1000
    seq_len: int = SEQ_LEN
    backbone_steps: int = 600
    task_steps: int = 1500
    backbone_lr: float = 3e-3
    r: int = DESK_R
    site: str = "FFN"
    pretrain_steps: int = 1000
    adapt_steps: int = 1000
    plugin_lr: float = 3e-3
    batch_size: int = 32


@dataclass
class Data:
    corpus: ToyCorpus
    train: ToyTask
    eval: ToyTask


def make_data(cfg: PipelineConfig) -> Data:
    return Data(
        corpus=make_toy_corpus(derive_seed(cfg.seed, "corpus"), cfg.corpus_size, cfg.seq_len),
        train=make_toy_task(cfg.task, derive_seed(cfg.seed, "task-train"), cfg.train_size, cfg.seq_len),
        eval=make_toy_task(cfg.task, derive_seed(cfg.seed, "task-eval"), cfg.eval_size, cfg.seq_len),
    )


def build_pretrained(cfg: PipelineConfig, data: Data, log: Callable | None = None) -> BackboneWeights:
    hyper = BackboneTrainConfig(cfg.backbone_steps, cfg.batch_size, cfg.backbone_lr)
    return train_backbone(data.corpus, cfg.backbone, hyper, derive_seed(cfg.seed, "backbone"), log=log)


def build_task_model(cfg: PipelineConfig, data: Data, pretrained: BackboneWeights,
                     log: Callable | None = None) -> BackboneWeights:
    hyper = BackboneTrainConfig(cfg.task_steps, cfg.batch_size, cfg.backbone_lr)
    return train_backbone(data.train, cfg.backbone, hyper, derive_seed(cfg.seed, "task-model"),
                          init=pretrained, log=log)


def fresh_bundle(cfg: PipelineConfig, k: int) -> PluginBundle:
    rng = np.random.default_rng(derive_seed(cfg.seed, f"plugin-init-k{k}"))
    return init_plugin(cfg.backbone.d, k, cfg.r, cfg.site, cfg.backbone.n_layers, rng)


def train_bundle(cfg: PipelineConfig, data: Data, pretrained: BackboneWeights, task_model: BackboneWeights,
                 k: int, pretrain: bool = True, compress_mode: str = "learned",
                 decompress_mode: str = "learned", lambda_task: float = 0.0,
                 log: Callable | None = None) -> PluginBundle:
    bundle = fresh_bundle(cfg, k)
    modes = dict(compress_mode=compress_mode, decompress_mode=decompress_mode)
    if pretrain:
        pcfg = TrainingConfig("pretrain", cfg.pretrain_steps, cfg.batch_size, cfg.plugin_lr,
                              seed=derive_seed(cfg.seed, f"pretrain-k{k}"), **modes)
        bundle = pretrain_plugin(data.corpus, pretrained, bundle, pcfg, log=log)
    acfg = TrainingConfig("adapt", cfg.adapt_steps, cfg.batch_size, cfg.plugin_lr, lambda_task=lambda_task,
                          seed=derive_seed(cfg.seed, f"adapt-k{k}"), **modes)
    return adapt_plugin(data.train, task_model, bundle, acfg, log=log)


@dataclass(frozen=True)
class KResult:
    k: int
    accuracy: float
    baseline_accuracy: float
    distill_loss: float
    cost: CostReport

    @property
    def relative_quality(self) -> float:
        return self.accuracy / self.baseline_accuracy

    def row(self) -> dict:
        return {
            "k": self.k,
            "accuracy": round(self.accuracy, 6),
            "baseline_accuracy": round(self.baseline_accuracy, 6),
            "relative_quality": round(self.relative_quality, 6),
            "distill_loss": round(self.distill_loss, 8),
            "ffn_flops_saving": round(self.cost.flops_saving_ratio, 6),
            "param_overhead": round(self.cost.param_overhead_ratio, 6),
        }


def evaluate_bundle(cfg: PipelineConfig, data: Data, task_model: BackboneWeights, bundle: PluginBundle,
                    baseline: float | None = None, **modes) -> KResult:
    if baseline is None:
        baseline = evaluate_accuracy(data.eval, task_model)
    return KResult(
        k=bundle.k,
        accuracy=evaluate_accuracy(data.eval, task_model, bundle, **modes),
        baseline_accuracy=baseline,
        distill_loss=evaluate_distill(data.eval.tokens, task_model, bundle, **modes),
        cost=speedup_report(cfg.seq_len, cfg.backbone.d, min(bundle.k, cfg.seq_len), cfg.r),
    )
