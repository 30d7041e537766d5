"""Command-line entry point.

Every subcommand takes ``--config FILE`` (JSON) plus per-key flag overrides,
writes a resolved ``config.json`` next to its outputs and exits 0 on
success, 1 on usage errors and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from varikit import analysis, pipeline
from varikit.backbone import (
    BackboneConfig,
    BackboneTrainConfig,
    accuracy,
    load_backbone,
    save_backbone,
    train_backbone,
)
from varikit.cost import speedup_report
from varikit.pipeline import PipelineConfig, derive_seed
from varikit.plugin import init_plugin, load_plugin, save_plugin
from varikit.scheduler import PluginRegistry, WorkloadTrace, simulate, two_phase_trace
from varikit.toy import make_toy_corpus, make_toy_task
from varikit.training import (
    DEFAULT_K,
    DEFAULT_R,
    DESK_R,
    TrainingConfig,
    adapt_plugin,
    evaluate_accuracy,
    evaluate_distill,
    pretrain_plugin,
)


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _opt_str(text: str) -> str | None:
    return None if text in ("", "none", "null") else text


_BACKBONE = {
    "vocab_size": (int, 64), "d": (int, 32), "n_layers": (int, 2), "n_heads": (int, 4),
    "ffn_mult": (int, 4), "max_seq_len": (int, 64),
}
_PLUGIN = {"k": (int, DEFAULT_K), "r": (int, DESK_R), "site": (str, "FFN")}
_TRAIN = {"steps": (int, 1000), "batch_size": (int, 32), "learning_rate": (float, 3e-3)}
_MODES = {"compress_mode": (str, "learned"), "decompress_mode": (str, "learned")}

SCHEMAS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "train-backbone": {
        "seed": (int, 0), **_BACKBONE, "task": (str, "corpus"), "init": (_opt_str, None),
        "steps": (int, 1500), "batch_size": (int, 32), "learning_rate": (float, 3e-3),
        "data_size": (int, 4000), "eval_size": (int, 1000),
    },
    "pretrain-plugin": {
        "seed": (int, 0), "backbone": (_opt_str, None), **_PLUGIN, **_TRAIN, "corpus_size": (int, 4000),
    },
    "adapt-plugin": {
        "seed": (int, 0), "task_model": (_opt_str, None), "plugin": (_opt_str, None), "task": (str, "token_tag"),
        **_PLUGIN, **_TRAIN, "lambda_task": (float, 0.0), **_MODES, "data_size": (int, 4000),
        "eval_size": (int, 1000),
    },
    "eval": {
        "seed": (int, 0), "task_model": (_opt_str, None), "plugin": (_opt_str, None), "task": (str, "token_tag"),
        **_MODES, "eval_size": (int, 1000),
    },
    "cost": {"seed": (int, 0), "d": (int, 768), "k": (int, DEFAULT_K), "r": (int, DEFAULT_R), "n": (int, 512)},
    "sweep-k": {
        "seed": (int, 0), "ks": (_int_list, [1, 2, 4]), "task": (str, "token_tag"), "r": (int, DESK_R),
        "site": (str, "FFN"), "pretrain_steps": (int, 1000), "adapt_steps": (int, 1000),
        "backbone_steps": (int, 600), "task_steps": (int, 1500),
    },
    "analyze-neurons": {
        "seed": (int, 0), "ks": (_int_list, [1, 2, 4]), "sweep_dir": (_opt_str, None), "samples": (int, 64),
        "pretrain_steps": (int, 1000), "adapt_steps": (int, 1000),
    },
    "simulate": {
        "seed": (int, 0), "trace": (_opt_str, None), "registry": (_opt_str, None), "policy": (str, "all"),
        "r": (int, DESK_R),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varikit", description="Sequence-compression plugins for a frozen encoder.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with parameter values")
        p.add_argument("--out", help="output directory (default $VARIKIT_OUT/<command> or runs/<command>)")
        for key, (typ, default) in schema.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None,
                           help=f"default: {default}")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    schema = SCHEMAS[command]
    cfg = {key: default for key, (_, default) in schema.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            typ = schema[key][0]
            try:
                if value is None or typ is _opt_str:
                    cfg[key] = value
                elif typ is _int_list:
                    cfg[key] = _int_list(value) if isinstance(value, str) else [int(v) for v in value]
                else:
                    cfg[key] = typ(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError):
                raise UsageError(f"config key {key!r}: cannot interpret {value!r}") from None
    for key in schema:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    return cfg


def _out_dir(command: str, args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("VARIKIT_OUT", "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Metrics:
    def __init__(self, path: Path, stage: str | None = None):
        self.fh = path.open("w")
        self.stage = stage

    def __call__(self, record: dict) -> None:
        if self.stage is not None:
            record = {"stage": self.stage, **record}
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(**{k: cfg[k] for k in _BACKBONE})


def _default_pipeline(cfg: dict) -> PipelineConfig:
    fields = {f for f in PipelineConfig.__dataclass_fields__}
    return PipelineConfig(**{k: v for k, v in cfg.items() if k in fields})


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_train_backbone(cfg: dict, out: Path) -> None:
    config = _backbone_config(cfg)
    seed = cfg["seed"]
    init = load_backbone(cfg["init"]) if cfg["init"] else None
    if cfg["task"] == "corpus":
        data = make_toy_corpus(derive_seed(seed, "corpus"), cfg["data_size"])
        evalset = None
    else:
        data = make_toy_task(cfg["task"], derive_seed(seed, "task-train"), cfg["data_size"])
        evalset = make_toy_task(cfg["task"], derive_seed(seed, "task-eval"), cfg["eval_size"])
    metrics = _Metrics(out / "metrics.jsonl")
    hyper = BackboneTrainConfig(cfg["steps"], cfg["batch_size"], cfg["learning_rate"])
    weights = train_backbone(data, config, hyper, derive_seed(seed, "backbone" if init is None else "task-model"),
                             init=init, log=metrics)
    metrics.close()
    save_backbone(weights, out / "backbone.vbkb")
    result = {"checksum": weights.checksum(), "head": weights.head_kind}
    if evalset is not None:
        result["accuracy"] = accuracy(weights, evalset)
        result["majority_baseline"] = evalset.majority_baseline()
    _write_json(out / "eval.json", result)


def _pipeline_models(cfg: dict, need_task: bool):
    pcfg = _default_pipeline(cfg)
    data = pipeline.make_data(pcfg)
    pre = pipeline.build_pretrained(pcfg, data)
    task_model = pipeline.build_task_model(pcfg, data, pre) if need_task else None
    return pcfg, data, pre, task_model


def cmd_pretrain_plugin(cfg: dict, out: Path) -> None:
    seed = cfg["seed"]
    if cfg["backbone"]:
        backbone = load_backbone(cfg["backbone"])
        corpus = make_toy_corpus(derive_seed(seed, "corpus"), cfg["corpus_size"])
    else:
        _, data, backbone, _ = _pipeline_models(cfg, need_task=False)
        corpus = data.corpus
    c = backbone.config
    bundle = init_plugin(c.d, cfg["k"], cfg["r"], cfg["site"], c.n_layers,
                         np.random.default_rng(derive_seed(seed, f"plugin-init-k{cfg['k']}")))
    tcfg = TrainingConfig("pretrain", cfg["steps"], cfg["batch_size"], cfg["learning_rate"],
                          seed=derive_seed(seed, f"pretrain-k{cfg['k']}"))
    metrics = _Metrics(out / "metrics.jsonl", "pretrain")
    bundle = pretrain_plugin(corpus, backbone, bundle, tcfg, log=metrics)
    metrics.close()
    save_plugin(bundle, out / "plugin.vplg")


def _task_model_and_data(cfg: dict):
    seed = cfg["seed"]
    if cfg["task_model"]:
        model = load_backbone(cfg["task_model"])
        train = make_toy_task(cfg["task"], derive_seed(seed, "task-train"), cfg.get("data_size", 4000))
        evalset = make_toy_task(cfg["task"], derive_seed(seed, "task-eval"), cfg["eval_size"])
        return model, train, evalset
    pcfg = _default_pipeline(cfg)
    data = pipeline.make_data(pcfg)
    model = pipeline.build_task_model(pcfg, data, pipeline.build_pretrained(pcfg, data))
    return model, data.train, data.eval


def cmd_adapt_plugin(cfg: dict, out: Path) -> None:
    seed = cfg["seed"]
    model, train, evalset = _task_model_and_data(cfg)
    if model.head_kind != train.kind:
        raise ValueError(f"task model head {model.head_kind!r} does not match task {train.kind!r}")
    if cfg["plugin"]:
        bundle = load_plugin(cfg["plugin"])
    else:
        c = model.config
        bundle = init_plugin(c.d, cfg["k"], cfg["r"], cfg["site"], c.n_layers,
                             np.random.default_rng(derive_seed(seed, f"plugin-init-k{cfg['k']}")))
    tcfg = TrainingConfig("adapt", cfg["steps"], cfg["batch_size"], cfg["learning_rate"],
                          lambda_task=cfg["lambda_task"], seed=derive_seed(seed, f"adapt-k{bundle.k}"),
                          compress_mode=cfg["compress_mode"], decompress_mode=cfg["decompress_mode"])
    metrics = _Metrics(out / "metrics.jsonl", "adapt")
    bundle = adapt_plugin(train, model, bundle, tcfg, log=metrics)
    metrics.close()
    save_plugin(bundle, out / "plugin.vplg")
    save_backbone(model, out / "task_model.vbkb")


def cmd_eval(cfg: dict, out: Path) -> None:
    model, _, evalset = _task_model_and_data({**cfg, "data_size": 1})
    bundle = load_plugin(cfg["plugin"]) if cfg["plugin"] else None
    modes = {"compress_mode": cfg["compress_mode"], "decompress_mode": cfg["decompress_mode"]}
    result = {
        "baseline_accuracy": evaluate_accuracy(evalset, model),
        "accuracy": evaluate_accuracy(evalset, model, bundle, **modes),
        "distill_loss": evaluate_distill(evalset.tokens, model, bundle, **modes),
        "k": bundle.k if bundle else 1,
    }
    if bundle is not None and bundle.site == "FFN":
        n = evalset.tokens.shape[1]
        result["cost"] = asdict(speedup_report(n, model.config.d, min(bundle.k, n), bundle.r))
    _write_json(out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))


def cmd_cost(cfg: dict, out: Path) -> None:
    report = speedup_report(cfg["n"], cfg["d"], cfg["k"], cfg["r"])
    (out / "cost.json").write_text(report.to_json() + "\n")
    (out / "cost.txt").write_text(report.table() + "\n")
    print(report.to_json())
    print(report.table(), file=sys.stderr)


def cmd_sweep_k(cfg: dict, out: Path) -> None:
    pcfg = _default_pipeline(cfg)
    data = pipeline.make_data(pcfg)
    pre = pipeline.build_pretrained(pcfg, data)
    task_model = pipeline.build_task_model(pcfg, data, pre)
    save_backbone(pre, out / "pretrained.vbkb")
    save_backbone(task_model, out / "task_model.vbkb")
    baseline = evaluate_accuracy(data.eval, task_model)
    rows = []
    for k in cfg["ks"]:
        metrics = _Metrics(out / f"metrics_k{k}.jsonl")
        bundle = pipeline.train_bundle(pcfg, data, pre, task_model, k, log=metrics)
        metrics.close()
        save_plugin(bundle, out / f"plugin_k{k}.vplg")
        rows.append(pipeline.evaluate_bundle(pcfg, data, task_model, bundle, baseline).row())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue())
    # quality is clipped to the registry's [0, 1] range and made non-increasing in k
    registry, best = {}, 1.0
    for row in sorted(rows, key=lambda r: r["k"]):
        best = min(best, row["relative_quality"])
        registry[str(row["k"])] = best
    registry["1"] = 1.0
    _write_json(out / "registry.json", {"r": pcfg.r, "d": pcfg.backbone.d, "n_layers": pcfg.backbone.n_layers,
                                        "quality": registry})
    print(buf.getvalue(), end="")


def cmd_analyze_neurons(cfg: dict, out: Path) -> None:
    pcfg = _default_pipeline(cfg)
    data = pipeline.make_data(pcfg)
    bundles = {}
    if cfg["sweep_dir"]:
        sweep = Path(cfg["sweep_dir"])
        task_model = load_backbone(sweep / "task_model.vbkb")
        for k in cfg["ks"]:
            bundles[k] = load_plugin(sweep / f"plugin_k{k}.vplg")
    else:
        pre = pipeline.build_pretrained(pcfg, data)
        task_model = pipeline.build_task_model(pcfg, data, pre)
        for k in cfg["ks"]:
            bundles[k] = pipeline.train_bundle(pcfg, data, pre, task_model, k)
    sample = data.eval.tokens[: cfg["samples"]]
    rows = analysis.activation_ratio_sweep(cfg["ks"], sample, task_model, bundles)
    summaries = [analysis.containment_summary(sample, task_model, bundles[k]) for k in cfg["ks"]]
    (out / "activation.csv").write_text(analysis.sweep_csv(rows))
    (out / "summary.json").write_text(analysis.summary_json(rows, summaries) + "\n")
    print(analysis.sweep_csv(rows), end="")


FALLBACK_QUALITY = {1: 1.0, 2: 0.98, 4: 0.97}


def cmd_simulate(cfg: dict, out: Path) -> None:
    trace = WorkloadTrace.load(cfg["trace"]) if cfg["trace"] else two_phase_trace()
    if cfg["registry"]:
        reg = json.loads(Path(cfg["registry"]).read_text())
        config = replace(BackboneConfig(), d=reg.get("d", 32), n_layers=reg.get("n_layers", 2))
        qualities = {int(k): float(v) for k, v in reg["quality"].items()}
        registry = PluginRegistry.from_qualities(config, int(reg.get("r", cfg["r"])), qualities)
    else:
        registry = PluginRegistry.from_qualities(BackboneConfig(), cfg["r"], FALLBACK_QUALITY)
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    policies: list[str | int]
    if cfg["policy"] == "all":
        policies = ["adaptive", *registry.ratios]
    elif cfg["policy"] == "adaptive":
        policies = ["adaptive"]
    else:
        try:
            policies = [int(cfg["policy"])]
        except ValueError:
            raise UsageError(f"policy must be adaptive, all or an integer k, got {cfg['policy']!r}") from None
    reports = [json.loads(simulate(trace, registry, p).to_json()) for p in policies]
    _write_json(out / "sim_report.json", reports)
    print(json.dumps(reports, indent=2, sort_keys=True))


COMMANDS = {
    "train-backbone": cmd_train_backbone,
    "pretrain-plugin": cmd_pretrain_plugin,
    "adapt-plugin": cmd_adapt_plugin,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "sweep-k": cmd_sweep_k,
    "analyze-neurons": cmd_analyze_neurons,
    "simulate": cmd_simulate,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        cfg = resolve(args.command, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        out = _out_dir(args.command, args)
        _write_json(out / "config.json", {"command": args.command, **cfg})
        COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"varikit {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"varikit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
