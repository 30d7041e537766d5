"""Two-stage plugin training by output distillation.

Pre-training inserts the plugin into the task-agnostic backbone and fits it
on an unlabelled corpus; adaptation repeats the loop on the frozen task model
with task inputs. In both stages the teacher is the same backbone without the
plugin, and the loss is the mean squared difference between final hidden
states, optionally plus a weighted task loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from varikit import tensor as T
from varikit.backbone import (
    BackboneWeights,
    TrainingError,
    encode,
    head_logits,
    predict,
)
from varikit.optim import Adam, AdamConfig
from varikit.plugin import PluginBundle, plugged_forward
from varikit.tensor import ContractError, Tensor
from varikit.toy import ToyCorpus, ToyTask, make_toy_corpus, make_toy_task  # noqa: F401  (re-export)

# defaults carried over from the full-size setting; desk runs use DESK_R
DEFAULT_K = 4
DEFAULT_R = 64
DESK_R = 8


@dataclass
class TrainingConfig:
    stage: str = "adapt"
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_task: float = 0.0
    seed: int = 0
    eval_every: int = 0
    compress_mode: str = "learned"
    decompress_mode: str = "learned"

    def __post_init__(self):
        if self.stage not in ("pretrain", "adapt"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lambda_task < 0:
            raise ValueError("lambda_task must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class LossTerms:
    distill: float
    task: float | None
    lam: float
    total: float


def distill_loss(teacher: Tensor, student: Tensor) -> Tensor:
    """Mean squared difference over all entries; no gradient reaches the teacher."""
    if teacher.shape != student.shape:
        raise ContractError(f"teacher {teacher.shape} and student {student.shape} shapes differ")
    return T.mse(student, teacher.detach())


def combine_losses(distill: Tensor, task: Tensor | None, lam: float) -> Tensor:
    if task is None or lam == 0.0:
        return distill
    return T.add(T.mul(task, lam), distill)


def _distill_loop(tokens: np.ndarray, labels: np.ndarray | None, weights: BackboneWeights,
                  bundle: PluginBundle, cfg: TrainingConfig, stage: str,
                  log: Callable[[dict], None] | None,
                  evaluate: Callable[[PluginBundle], float] | None) -> PluginBundle:
    if not weights.frozen:
        raise ValueError("the backbone must be frozen while training plugins")
    before = weights.checksum()
    bundle = bundle.copy()
    params = bundle.parameters()
    bundle.set_trainable(True)
    opt = Adam(params, AdamConfig(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps))
    rng = np.random.default_rng(cfg.seed)
    modes = {"compress_mode": cfg.compress_mode, "decompress_mode": cfg.decompress_mode}
    for step in range(cfg.steps):
        idx = rng.integers(0, len(tokens), size=cfg.batch_size)
        batch = tokens[idx]
        teacher = encode(batch, weights)
        with T.Tape() as tape:
            student = plugged_forward(batch, weights, bundle, **modes)
            ld = distill_loss(teacher, student)
            lt = None
            if cfg.lambda_task > 0 and labels is not None:
                lt = T.cross_entropy(head_logits(student, weights), labels[idx])
            total = combine_losses(ld, lt, cfg.lambda_task)
        terms = LossTerms(ld.item(), None if lt is None else lt.item(), cfg.lambda_task, total.item())
        if not math.isfinite(terms.total):
            raise TrainingError("plugin loss is not finite", step)
        tape.backward(total)
        opt.step()
        if log is not None:
            record = {"stage": cfg.stage, "step": step, "distill_loss": terms.distill, "task_loss": terms.task}
            if evaluate is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                record["eval_accuracy"] = evaluate(bundle)
            log(record)
    bundle.set_trainable(False)
    if weights.checksum() != before:
        raise TrainingError("frozen backbone weights changed during plugin training")
    bundle.trained_stage = stage
    return bundle


def pretrain_plugin(corpus: ToyCorpus, backbone: BackboneWeights, bundle: PluginBundle,
                    cfg: TrainingConfig | None = None,
                    log: Callable[[dict], None] | None = None) -> PluginBundle:
    """Task-agnostic distillation on corpus sequences; returns a new bundle."""
    cfg = cfg or TrainingConfig(stage="pretrain")
    if bundle.trained_stage != "init":
        raise ValueError(f"pre-training expects a fresh bundle, got stage {bundle.trained_stage!r}")
    return _distill_loop(corpus.tokens, None, backbone, bundle, cfg, "pretrained", log, None)


def adapt_plugin(task: ToyTask, task_model: BackboneWeights, bundle: PluginBundle,
                 cfg: TrainingConfig | None = None, log: Callable[[dict], None] | None = None,
                 eval_task: ToyTask | None = None) -> PluginBundle:
    """Task-specific distillation against the frozen task model.

    Accepts a pre-trained or a fresh bundle (the latter skips pre-training).
    """
    cfg = cfg or TrainingConfig(stage="adapt")
    if bundle.trained_stage == "adapted":
        raise ValueError("bundle is already adapted")
    evaluate = None
    if eval_task is not None:
        modes = {"compress_mode": cfg.compress_mode, "decompress_mode": cfg.decompress_mode}

        def evaluate(b: PluginBundle) -> float:
            return evaluate_accuracy(eval_task, task_model, b, **modes)

    return _distill_loop(task.tokens, task.labels, task_model, bundle, cfg, "adapted", log, evaluate)


def evaluate_accuracy(task: ToyTask, task_model: BackboneWeights, bundle: PluginBundle | None = None,
                      batch_size: int = 256, **modes) -> float:
    correct = 0
    for start in range(0, len(task), batch_size):
        toks = task.tokens[start:start + batch_size]
        states = plugged_forward(toks, task_model, bundle, **modes)
        correct += int((predict(states, task_model) == task.labels[start:start + batch_size]).sum())
    return correct / task.labels.size


def evaluate_distill(tokens: np.ndarray, weights: BackboneWeights, bundle: PluginBundle | None,
                     batch_size: int = 256, **modes) -> float:
    """Mean distillation loss over a fixed token set (row-weighted)."""
    total = 0.0
    for start in range(0, len(tokens), batch_size):
        toks = tokens[start:start + batch_size]
        teacher = encode(toks, weights)
        student = plugged_forward(toks, weights, bundle, **modes)
        total += distill_loss(teacher, student).item() * len(toks)
    return total / len(tokens)
