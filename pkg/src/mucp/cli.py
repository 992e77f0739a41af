"""Command-line surface tying the modules into reproducible experiments.

Exit codes: 0 success, 2 usage/config errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import (
    CheckpointError,
    checkpoint_from_tensors,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, ExperimentConfig
from .data import make_synth_dataset
from .evals import (
    COST_CSV_HEADER,
    collect_router_trace,
    flops_estimate,
    recall_at_k,
    render_drop_map,
    standard_config_names,
    standard_model_spec,
    zero_shot_classify,
)
from .model import NumericError, encode, init_params
from .train import train_run
from .upcycle import SurgeryError, upcycle_checkpoint, verify_equivalence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

VERIFY_TOLERANCE = 1e-5


def _load_config(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.from_file(args.config)
        if getattr(args, "config", None)
        else ExperimentConfig()
    )
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed", args.seed)
    if getattr(args, "out", None) is not None:
        cfg.set("output_dir", args.out)
    return cfg


def _apply_moe_overrides(cfg: ExperimentConfig, args) -> None:
    if getattr(args, "capacity_image", None) is not None:
        cfg.set("moe.capacity_factor_image", args.capacity_image)
    if getattr(args, "capacity_text", None) is not None:
        cfg.set("moe.capacity_factor_text", args.capacity_text)
    if getattr(args, "normalize_after", None) is not None:
        cfg.set("moe.normalize_gates_after_routing", args.normalize_after == "on")


def _out_dir(cfg: ExperimentConfig) -> str:
    path = cfg.output_dir
    os.makedirs(path, exist_ok=True)
    return path


def _write_metrics(path: str, metrics) -> None:
    with open(path, "w") as f:
        f.write("\n".join(metrics) + "\n")


def _run_training(cfg: ExperimentConfig, start, regime: str):
    dataset = make_synth_dataset(cfg.synth_spec())
    out = _out_dir(cfg)
    result = train_run(start, dataset, cfg.train_config(regime), out_dir=out)
    ckpt_path = os.path.join(out, f"{regime}_final.mucp")
    save_checkpoint(result.final, ckpt_path)
    metrics_path = os.path.join(out, f"metrics_{regime}.csv")
    _write_metrics(metrics_path, result.metrics)
    last = result.metrics[-1].split(",")
    print(f"trained {regime} for {result.final.step - start.step} steps")
    print(f"final loss {last[1]} (contrastive {last[2]}, aux {last[3]})")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics:    {metrics_path}")
    return EXIT_OK


def cmd_train_dense(args) -> int:
    cfg = _load_config(args)
    if args.checkpoint:
        start = load_checkpoint(args.checkpoint)
        if start.spec.moe is not None:
            raise ConfigError("train-dense needs a dense checkpoint")
    else:
        spec = cfg.model_spec(with_moe=False)
        seed = cfg["train.seed"]
        start = checkpoint_from_tensors(init_params(spec, seed), spec, 0, seed)
    return _run_training(cfg, start, "dense")


def cmd_train_sparse(args) -> int:
    cfg = _load_config(args)
    _apply_moe_overrides(cfg, args)
    if args.checkpoint:
        start = load_checkpoint(args.checkpoint)
        if start.spec.moe is None:
            raise ConfigError(
                "train-sparse with --checkpoint expects an upcycled checkpoint; "
                "run `mucp upcycle` first"
            )
        regime = "upcycle"
    else:
        spec = cfg.model_spec(with_moe=True)
        seed = cfg["train.seed"]
        start = checkpoint_from_tensors(init_params(spec, seed), spec, 0, seed)
        regime = "sparse_scratch"
    return _run_training(cfg, start, regime)


def cmd_upcycle(args) -> int:
    cfg = _load_config(args)
    _apply_moe_overrides(cfg, args)
    dense = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg["train.seed"]
    sparse, report = upcycle_checkpoint(
        dense, cfg.moe_spec(), rng_seed=seed, moe_modality=args.modality
    )
    out = _out_dir(cfg)
    ckpt_path = os.path.join(out, "upcycled.mucp")
    save_checkpoint(sparse, ckpt_path)
    print(report.summary())
    report_path = os.path.join(out, "surgery_report.json")
    with open(report_path, "w") as f:
        json.dump(
            {
                "converted_layers": [list(c) for c in report.converted_layers],
                "copied_params": report.copied_params,
                "fresh_params": report.fresh_params,
                "total_params_dense": report.total_params_dense,
                "total_params_sparse": report.total_params_sparse,
            },
            f,
            indent=2,
        )
    print(f"checkpoint: {ckpt_path}")
    print(f"report:     {report_path}")
    if args.verify:
        dataset = make_synth_dataset(cfg.synth_spec())
        batch = dataset.val_batch(np.arange(min(8, cfg["data.val_size"])))
        deviation = verify_equivalence(dense, sparse, batch)
        print(f"max abs deviation vs dense: {deviation:.3e}")
        if deviation >= VERIFY_TOLERANCE:
            raise NumericError(
                f"upcycled model deviates from dense source: {deviation:.3e}"
            )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ck = load_checkpoint(args.checkpoint)
    dataset = make_synth_dataset(cfg.synth_spec())
    params = ck.as_tensors()
    batch = dataset.val_batch()
    img, _ = encode(batch, params, ck.spec, "image")
    txt, _ = encode(batch, params, ck.spec, "text")
    for direction in ("t2i", "i2t"):
        for k in (1, 5):
            value = recall_at_k(img, txt, k, direction)
            print(f"recall@{k} {direction}: {value:.4f}")
    cls_emb, _ = encode(dataset.class_caption_batch(), params, ck.spec, "text")
    top1, top5 = zero_shot_classify(img, cls_emb, dataset.val_classes)
    print(f"zero-shot top-1: {top1:.4f}")
    if top5 is not None:
        print(f"zero-shot top-5: {top5:.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    names = standard_config_names()
    print(COST_CSV_HEADER)
    if args.config and args.config not in names:
        if not os.path.exists(args.config):
            raise ConfigError(
                f"{args.config!r} is neither a standard config ({', '.join(names)}) "
                "nor a config file"
            )
        cfg = ExperimentConfig.from_file(args.config)
        for label, with_moe in (("dense", False), ("moe", True)):
            spec = cfg.model_spec(with_moe=with_moe)
            print(flops_estimate(spec, f"custom-{label}").csv_row())
        return EXIT_OK
    targets = [args.config] if args.config else names
    for name in targets:
        print(flops_estimate(standard_model_spec(name), name).csv_row())
    return EXIT_OK


def cmd_analyze_router(args) -> int:
    cfg = _load_config(args)
    _apply_moe_overrides(cfg, args)
    ck = load_checkpoint(args.checkpoint)
    if ck.spec.moe is None:
        raise ConfigError("analyze-router needs an expert checkpoint")
    spec = ck.spec
    if any(
        getattr(args, a, None) is not None
        for a in ("capacity_image", "capacity_text", "normalize_after")
    ):
        # evaluate the stored weights under the overridden routing settings
        from dataclasses import replace

        moe = cfg.moe_spec()
        spec = replace(spec, moe=replace(
            spec.moe,
            capacity_factor_image=moe.capacity_factor_image,
            capacity_factor_text=moe.capacity_factor_text,
            normalize_gates_after_routing=moe.normalize_gates_after_routing,
        ))
    params = ck.as_tensors()
    dataset = make_synth_dataset(cfg.synth_spec())
    n_val = dataset.val_images.shape[0]
    batches = [dataset.val_batch(np.arange(n_val))]
    trace = collect_router_trace(spec, params, batches)
    out = _out_dir(cfg)
    trace_path = os.path.join(out, "router_trace.csv")
    with open(trace_path, "w") as f:
        f.write(trace.to_csv())
    print(f"trace: {trace_path}")
    image = dataset.val_images[0]
    for layer in spec.moe_layers("image"):
        prefix = os.path.join(out, f"dropmap_layer{layer}")
        drop_map, _ = render_drop_map(spec, params, image, layer, out_prefix=prefix)
        print(
            f"drop map layer {layer}: {drop_map.cell_count} dropped cells "
            f"-> {prefix}.ppm / .txt"
        )
    return EXIT_OK


def _add_common(p, checkpoint=False, checkpoint_required=False):
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="override output_dir")
    if checkpoint:
        p.add_argument(
            "--checkpoint", required=checkpoint_required, help="input checkpoint path"
        )


def _add_moe_overrides(p):
    p.add_argument("--capacity-image", dest="capacity_image", type=float)
    p.add_argument("--capacity-text", dest="capacity_text", type=float)
    p.add_argument("--normalize-after", dest="normalize_after", choices=["on", "off"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mucp",
        description="Desk-scale sparse-upcycled mixture-of-experts dual encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-dense", help="train a dense two-tower model")
    _add_common(p, checkpoint=True)
    p.set_defaults(func=cmd_train_dense)

    p = sub.add_parser(
        "train-sparse",
        help="train an expert model (from scratch, or continue an upcycled checkpoint)",
    )
    _add_common(p, checkpoint=True)
    _add_moe_overrides(p)
    p.set_defaults(func=cmd_train_sparse)

    p = sub.add_parser("upcycle", help="convert a dense checkpoint into an expert model")
    _add_common(p, checkpoint=True, checkpoint_required=True)
    _add_moe_overrides(p)
    p.add_argument("--modality", choices=["image", "text", "both"], default="both")
    p.add_argument(
        "--verify",
        action="store_true",
        help="check the upcycled model reproduces dense embeddings",
    )
    p.set_defaults(func=cmd_upcycle)

    p = sub.add_parser("eval", help="retrieval and zero-shot metrics on the val split")
    _add_common(p, checkpoint=True, checkpoint_required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="inference cost report")
    p.add_argument(
        "--config",
        help=f"standard config name ({', '.join(standard_config_names())}) or config file",
    )
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("analyze-router", help="assignment-ratio trace and drop maps")
    _add_common(p, checkpoint=True, checkpoint_required=True)
    _add_moe_overrides(p)
    p.set_defaults(func=cmd_analyze_router)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, SurgeryError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
