"""Command-line entry points.

Subcommands: gen-data, hyper-search, train, verify-equivalence, convert,
quantize, analyze. Every job reads a flat key=value config (plus --set
overrides and the GRADREP_SEED env var), runs one module, and writes CSV/JSON
reports and checkpoints under --out. Reruns with identical config and seed
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import quantize as quantmod
from .checkpoint import (
    load_checkpoint,
    restore_fused,
    restore_model,
    save_checkpoint,
    snapshot_fused,
    snapshot_model,
)
from .config import RunConfig, load_config
from .data import gen_synthetic, load_cifar, write_cifar10
from .equivlab import (
    convert_model,
    identity_variance_ratio,
    verify_csla_gr,
    verify_ghost_gr,
    verify_scalar_two_branch,
)
from .errors import ConfigError, GradrepError, UsageError
from .hypersearch import degrade_scales, export_scales, import_scales, run_hyper_search
from .models import (
    CslaBlockSpec,
    build_multipliers,
    build_hypersearch,
    build_hypersearch_all_ones,
    build_repvgg,
    build_resnet_reference,
    build_target,
    build_target_equivalent_init,
    count_params_train,
)
from .optim import MultiplierAdamW, MultiplierSgd, OptimizerConfig
from .reports import write_csv, write_json
from .rng import Rng
from .train import evaluate, train_model


def _load_datasets(cfg: RunConfig):
    source = cfg["data.source"]
    if source == "synthetic":
        pool = gen_synthetic(cfg["data.n"] + cfg["data.test_n"],
                             cfg["data.resolution"], cfg["data.classes"],
                             cfg["data.seed"])
        return pool.subset(cfg["data.n"]), pool.subset(cfg["data.test_n"],
                                                       offset=cfg["data.n"])
    if source in ("cifar10", "cifar100"):
        if not cfg["data.path"]:
            raise ConfigError(f"data.source={source} requires data.path")
        train = load_cifar(cfg["data.path"], source, split="train")
        test = load_cifar(cfg["data.path"], source, split="test")
        if cfg["data.n"] and cfg["data.n"] < len(train):
            train = train.subset(cfg["data.n"])
        if cfg["data.test_n"] and cfg["data.test_n"] < len(test):
            test = test.subset(cfg["data.test_n"])
        return train, test
    raise ConfigError(f"unknown data.source {source!r}")


def _scales_for_mode(scales, mode: str):
    mode = mode.replace("-", "_")
    if mode == "searched":
        return scales
    return degrade_scales(scales, mode)


def _metrics_rows(result):
    rows = []
    for i, loss in enumerate(result.train_loss):
        acc = result.test_acc[i] if i < len(result.test_acc) else None
        rows.append((i, loss, acc))
    return rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    if cfg["data.resolution"] != 32:
        raise ConfigError("gen-data writes the 32x32 binary record layout; "
                          "set data.resolution=32")
    train = gen_synthetic(cfg["data.n"], 32, cfg["data.classes"], cfg["data.seed"])
    test = gen_synthetic(cfg["data.test_n"], 32, cfg["data.classes"],
                         cfg["data.seed"] + 1)
    write_cifar10(train, os.path.join(args.out, "train.bin"))
    write_cifar10(test, os.path.join(args.out, "test.bin"))
    write_json(os.path.join(args.out, "summary.json"), {
        "train_records": len(train), "test_records": len(test),
        "classes": cfg["data.classes"], "seed": cfg["data.seed"],
    })
    return 0


def cmd_hyper_search(args, cfg: RunConfig) -> int:
    train, test = _load_datasets(cfg)
    spec = cfg.model_spec(train.num_classes, train.resolution)
    scales, trajectory, result = run_hyper_search(
        spec, train, cfg.optimizer_config(), cfg["seed"],
        epochs=cfg.epochs_to_run(), test_dataset=test,
        augment=cfg["data.augment"],
    )
    export_scales(scales, os.path.join(args.out, "scales.json"))
    trajectory.write_csv(os.path.join(args.out, "trajectory.csv"))
    write_csv(os.path.join(args.out, "metrics.csv"),
              ["epoch", "train_loss", "test_acc"], _metrics_rows(result))
    write_json(os.path.join(args.out, "summary.json"), {
        "final_train_loss": result.train_loss[-1],
        "final_test_acc": result.final_test_acc,
        "epochs": result.epochs_run,
        "config": cfg.as_dict(),
    })
    return 0


def _build_train_model(args, cfg, spec, scales):
    """Model + optimizer for one training arm, honoring the rule flags."""
    model_rng = Rng.spawn(cfg["seed"], 2)[0]
    arch = getattr(args, "arch", "target")
    if arch == "repvgg":
        if scales is not None:
            raise UsageError("--arch repvgg trains the three-branch baseline; "
                             "scales/multipliers do not apply")
        model = build_repvgg(spec, rng=model_rng)
    elif scales is not None and not args.no_reinit:
        model = build_target_equivalent_init(spec, scales, rng=model_rng)
    else:
        model = build_target(spec, rng=model_rng)
    mults = {}
    managed = ()
    if arch != "repvgg" and scales is not None and not args.no_gradmult:
        mults = build_multipliers(model, scales)
        managed = tuple(model.gr_managed_params())
    ocfg = cfg.optimizer_config()
    if args.optimizer == "adamw":
        opt = MultiplierAdamW(dict(model.named_parameters()),
                              weight_decay=ocfg.weight_decay, multipliers=mults,
                              managed=managed)
    else:
        opt = MultiplierSgd(dict(model.named_parameters()), momentum=ocfg.momentum,
                            weight_decay=ocfg.weight_decay, multipliers=mults,
                            managed=managed)
    return model, opt, mults


def _run_one_training(args, cfg, spec, scales, train, test):
    model, opt, mults = _build_train_model(args, cfg, spec, scales)
    data_rng = Rng.spawn(cfg["seed"], 2)[1]
    result = train_model(model, opt, train, test, cfg.optimizer_config(), data_rng,
                         epochs=cfg.epochs_to_run(), augment=cfg["data.augment"])
    return model, opt, mults, data_rng, result


def cmd_train(args, cfg: RunConfig) -> int:
    if args.optimizer == "repopt" and not args.scales:
        raise UsageError("--optimizer repopt requires --scales <file>")
    if args.arch == "repvgg" and (args.optimizer == "repopt" or args.scales):
        raise UsageError("--arch repvgg trains the three-branch baseline with a "
                         "plain optimizer; scales/multipliers do not apply")
    train, test = _load_datasets(cfg)
    spec = cfg.model_spec(train.num_classes, train.resolution)
    base_scales = import_scales(args.scales) if args.scales else None

    if args.ablation_matrix:
        if base_scales is None:
            raise UsageError("--ablation-matrix requires --scales <file>")
        rows = []
        matrix = [
            ("repopt", "searched", True, True),
            ("repopt", "searched", False, True),
            ("repopt", "searched", True, False),
            ("repopt", "all-ones", True, True),
            ("repopt", "hs-init", True, True),
            ("repopt", "channel-mean", True, True),
        ]
        for optimizer, source, reinit, gradmult in matrix:
            sub = argparse.Namespace(optimizer=optimizer, no_reinit=not reinit,
                                     no_gradmult=not gradmult, scales=args.scales)
            scales = _scales_for_mode(base_scales, source)
            _, _, _, _, result = _run_one_training(sub, cfg, spec, scales, train, test)
            rows.append((optimizer, source, int(reinit), int(gradmult),
                         result.final_test_acc, result.train_loss[-1]))
        write_csv(os.path.join(args.out, "ablation_matrix.csv"),
                  ["optimizer", "source", "reinit", "gradmult", "final_test_acc",
                   "final_train_loss"], rows)
        write_json(os.path.join(args.out, "summary.json"),
                   {"rows": len(rows), "config": cfg.as_dict()})
        return 0

    scales = None
    if args.optimizer in ("repopt", "adamw") and base_scales is not None:
        scales = _scales_for_mode(base_scales, args.scales_mode)
    model, opt, mults, data_rng, result = _run_one_training(
        args, cfg, spec, scales, train, test)
    write_csv(os.path.join(args.out, "metrics.csv"),
              ["epoch", "train_loss", "test_acc"], _metrics_rows(result))
    write_json(os.path.join(args.out, "summary.json"), {
        "optimizer": args.optimizer,
        "scales_mode": args.scales_mode if scales is not None else None,
        "rule_of_initialization": scales is not None and not args.no_reinit,
        "rule_of_iteration": bool(mults),
        "final_test_acc": result.final_test_acc,
        "final_train_loss": result.train_loss[-1],
        "params_train": count_params_train(spec, args.arch),
        "config": cfg.as_dict(),
    })
    save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"),
                    snapshot_model(model, opt, data_rng, epoch=result.epochs_run,
                                   step=result.global_step,
                                   multipliers=mults if args.dump_mults else None))
    return 0


def cmd_verify_equivalence(args, cfg: RunConfig) -> int:
    ocfg = OptimizerConfig(base_lr=cfg["eq.lr"], momentum=cfg["eq.momentum"],
                           weight_decay=cfg["eq.weight_decay"], schedule="constant",
                           warmup_epochs=0, total_epochs=1, label_smoothing=0.0,
                           batch_size=cfg["eq.batch"])
    case = cfg["eq.case"]
    seed = cfg["seed"]
    ablation = args.ablation.replace("-", "_") if args.ablation else None
    if case == "scalar":
        report = verify_scalar_two_branch(cfg["eq.alpha_a"], cfg["eq.alpha_b"],
                                          cfg["eq.steps"], ocfg, seed,
                                          channels=cfg["eq.channels"],
                                          batch=cfg["eq.batch"], hw=cfg["eq.hw"],
                                          ablation=ablation)
    elif case == "block":
        c = cfg["eq.channels"]
        draws = Rng(seed).uniform(2 * c)
        block = CslaBlockSpec.square(c, 0.4 + draws[:c], 0.4 + draws[c:])
        report = verify_csla_gr(block, cfg["eq.steps"], ocfg, seed,
                                batch=cfg["eq.batch"], hw=cfg["eq.hw"],
                                ablation=ablation)
    elif case == "ghost":
        report = verify_ghost_gr(cfg["eq.channels"], cfg["eq.steps"], ocfg, seed,
                                 batch=cfg["eq.batch"], hw=cfg["eq.hw"],
                                 ablation=ablation)
    else:
        raise ConfigError(f"eq.case must be scalar|block|ghost, got {case!r}")
    report.write_csv(os.path.join(args.out, "equivalence.csv"))
    report.write_json_summary(os.path.join(args.out, "summary.json"))
    if ablation:
        if report.divergence_at(min(10, cfg["eq.steps"] - 1)) <= 1e-3:
            raise UsageError(
                f"ablation {args.ablation} failed to break equivalence "
                f"(max divergence {report.max_output_divergence!r})"
            )
        return 0
    if report.max_output_divergence > cfg["eq.tolerance"]:
        raise UsageError(
            f"equivalence violated: max output divergence "
            f"{report.max_output_divergence!r} > tolerance {cfg['eq.tolerance']!r}"
        )
    return 0


def cmd_convert(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    fused = convert_model(model)
    save_checkpoint(os.path.join(args.out, "converted.ckpt"),
                    snapshot_fused(fused, model.spec, {"from_kind": model.kind}))
    stream = Rng(cfg["seed"])
    worst = 0.0
    for _ in range(args.check_inputs):
        x = stream.gaussian((2, 3, model.spec.input_hw, model.spec.input_hw))
        want = model.forward(x, training=False).data
        got = fused.forward(x)
        worst = max(worst, float(np.abs(want - got).max()))
    write_json(os.path.join(args.out, "conversion_report.json"), {
        "from_kind": model.kind,
        "eval_inputs_checked": args.check_inputs,
        "max_abs_output_diff": worst,
        "fused_convs": len(fused.convs),
    })
    if worst > 1e-10:
        raise UsageError(f"conversion not inference-equivalent: max diff {worst!r}")
    return 0


def _deploy_model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    if ckpt.model_kind == "fused":
        return restore_fused(ckpt), ckpt.model_kind
    model = restore_model(ckpt)
    return convert_model(model), model.kind


def cmd_quantize(args, cfg: RunConfig) -> int:
    deploy, from_kind = _deploy_model_from_checkpoint(args.checkpoint)
    train, test = _load_datasets(cfg)
    calib = train.normalized(np.arange(min(cfg["quant.calib_n"], len(train))))
    quantized = quantmod.ptq_model(deploy, calib)
    weights_only = quantmod.quantize_weights_only(deploy)
    fp_acc = quantmod.model_accuracy(deploy, test)
    int8_acc = quantmod.model_accuracy(quantized, test)
    wq_acc = quantmod.model_accuracy(weights_only, test)
    write_csv(os.path.join(args.out, "kernel_stats.csv"),
              ["layer", "std_overall", "std_central", "std_surrounding"],
              quantmod.position_stats_report(deploy))
    write_json(os.path.join(args.out, "ptq_report.json"), {
        "from_kind": from_kind,
        "fp_acc": fp_acc,
        "int8_acc": int8_acc,
        "weights_only_acc": wq_acc,
        "accuracy_drop": fp_acc - int8_acc,
        "calibration_samples": int(min(cfg["quant.calib_n"], len(train))),
    })
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    what = cfg["analyze.what"].replace("_", "-")
    if what == "kernel-stats":
        if not args.checkpoint:
            raise UsageError("analyze.what=kernel-stats requires --checkpoint")
        deploy, from_kind = _deploy_model_from_checkpoint(args.checkpoint)
        rows = quantmod.position_stats_report(deploy)
        write_csv(os.path.join(args.out, "kernel_stats.csv"),
                  ["layer", "std_overall", "std_central", "std_surrounding"], rows)
        write_json(os.path.join(args.out, "summary.json"),
                   {"from_kind": from_kind, "layers": len(rows)})
        return 0
    if what == "variance-ratio":
        from scipy import stats

        stage_blocks = [int(v) for v in cfg["analyze.stage_blocks"].split(",")]
        data = Rng(cfg["seed"]).gaussian(
            (cfg["analyze.batch"], 3, cfg["data.resolution"], cfg["data.resolution"]))
        arch = cfg["analyze.arch"]

        def factory(seed):
            if arch == "resnet":
                return build_resnet_reference(stage_blocks, seed=seed,
                                              input_hw=cfg["data.resolution"])
            spec = cfg.model_spec(cfg["data.classes"], cfg["data.resolution"])
            if arch == "hs":
                return build_hypersearch(spec, seed=seed)
            if arch == "hs-ones":
                return build_hypersearch_all_ones(spec, seed=seed)
            raise ConfigError(f"analyze.arch must be resnet|hs|hs-ones, got {arch!r}")

        ids, per_seed, mean = identity_variance_ratio(
            factory, data, cfg["analyze.seeds"], base_seed=cfg["seed"])
        write_csv(os.path.join(args.out, "variance_ratio.csv"),
                  ["block_id", "mean_ratio"], list(zip(ids, mean)))
        longest = max(set(b.split("b")[0] for b in ids),
                      key=lambda st: sum(1 for b in ids if b.startswith(st)))
        depth_idx = [i for i, b in enumerate(ids) if b.startswith(longest)]
        corr = float(stats.spearmanr(np.arange(len(depth_idx)),
                                     mean[depth_idx]).statistic)
        write_json(os.path.join(args.out, "summary.json"), {
            "arch": arch,
            "seeds": cfg["analyze.seeds"],
            "batch": cfg["analyze.batch"],
            "blocks_measured": len(ids),
            "rank_correlation_vs_depth": corr,
        })
        return 0
    raise ConfigError(f"analyze.what must be kernel-stats|variance-ratio, got {what!r}")


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument("--out", required=True, help="output directory for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradrep",
        description="gradient re-parameterization training laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset in the CIFAR "
                                        "binary layout")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("hyper-search", help="train the trainable-scales model and "
                                            "export the searched scales")
    _add_common(p)
    p.set_defaults(fn=cmd_hyper_search)

    p = sub.add_parser("train", help="train the plain target model (or the "
                                     "three-branch baseline)")
    _add_common(p)
    p.add_argument("--arch", choices=["target", "repvgg"], default="target")
    p.add_argument("--optimizer", choices=["sgd", "repopt", "adamw"], default="sgd")
    p.add_argument("--scales", help="scales JSON from hyper-search (enables the "
                                    "multiplier rules)")
    p.add_argument("--scales-mode", default="searched",
                   choices=["searched", "all-ones", "hs-init", "channel-mean"])
    p.add_argument("--no-reinit", action="store_true",
                   help="skip the equivalent-kernel initialization rule")
    p.add_argument("--no-gradmult", action="store_true",
                   help="skip the gradient-multiplier rule")
    p.add_argument("--ablation-matrix", action="store_true",
                   help="run the six-row rule/source ablation grid")
    p.add_argument("--dump-mults", action="store_true",
                   help="store the multiplier tensors in the checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify-equivalence", help="lockstep counterpart verification")
    _add_common(p)
    p.add_argument("--ablation", choices=["skip-reinit", "skip-gradmult"],
                   help="run a negative control instead (must break equivalence)")
    p.set_defaults(fn=cmd_verify_equivalence)

    p = sub.add_parser("convert", help="fuse a trained checkpoint into one conv "
                                       "per block")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--check-inputs", type=int, default=100)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("quantize", help="INT8 post-training quantization report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("analyze", help="kernel position stats or identity-variance "
                                       "ratios")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return args.fn(args, cfg)
    except GradrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, UsageError)) else 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
