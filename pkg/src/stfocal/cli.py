"""Command-line entry point.

Subcommands: train, eval, flops, gradcheck, visualize, compare-designs, synth.
Everything except paths, the seed, and the thread count comes from the config
file, so an experiment is fully described by its archived config echo.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numeric fault. This module defers all numeric imports until after the
--threads flag has pinned the BLAS/OpenMP thread counts via environment
variables, which only take effect before the first numpy import.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _set_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _load_config(path):
    from .config import ExperimentConfig, default_config
    if path is None:
        return default_config()
    return ExperimentConfig.from_file(path)


def _resolve_seed(cfg, seed):
    if seed is not None:
        cfg.train.seed = seed
    return cfg.train.seed


def _make_datasets(cfg, seed):
    import numpy as np
    from .data import make_dataset
    train_rng = np.random.default_rng([seed, 101])
    test_rng = np.random.default_rng([seed, 202])
    train_set = make_dataset(cfg.task, cfg.train_clips, train_rng)
    test_set = make_dataset(cfg.task, cfg.test_clips, test_rng)
    return train_set, test_set


def _build_network(cfg, seed):
    from .backbone import FocalVideoNetwork
    return FocalVideoNetwork(cfg.network, seed=seed)


def cmd_train(args) -> int:
    from .backbone import save_checkpoint
    from .train import evaluate, train
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.echo())
    (train_clips, train_labels), (test_clips, test_labels) = \
        _make_datasets(cfg, seed)
    net = _build_network(cfg, seed)
    train(net, cfg.train, train_clips, train_labels, args.out)
    acc = evaluate(net, test_clips, test_labels)
    save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), net)
    print(f"test_acc {acc:.6f}")
    return 0


def cmd_eval(args) -> int:
    from .backbone import load_checkpoint, load_into, multi_view_inference
    from .data import load_clip_dataset
    cfg = _load_config(args.config)
    net = _build_network(cfg, cfg.train.seed)
    load_into(net, load_checkpoint(args.checkpoint))
    clips, labels = load_clip_dataset(args.data)
    crops = 3 if args.views > 3 and args.views % 3 == 0 else 1
    t_views = args.views // crops
    shape = (cfg.network.frames, cfg.network.height, cfg.network.width)
    correct = 0
    from .data import extract_views
    for clip, label in zip(clips, labels):
        views = extract_views(clip, shape, n_clips=t_views, n_crops=crops)
        probs = multi_view_inference(net, views)
        correct += int(probs.argmax() == label)
    print(f"top1 {correct / len(labels):.6f}")
    return 0


def cmd_flops(args) -> int:
    from .analysis import cost_report
    from .backbone import preset_config
    if args.config is None:
        print("preset,params,flops")
        for name in ("t", "s", "b"):
            cfg = preset_config(name, num_classes=400)
            report = cost_report(cfg, args.shape)
            print(f"{name},{report.total_params},{report.total_flops}")
        return 0
    cfg = _load_config(args.config)
    shape = tuple(args.shape) if args.shape else None
    report = cost_report(cfg.network, shape)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "costs.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np
    from .analysis import gradcheck
    from .modulation import VARIANTS, build_modulation
    from .tensor import NumericFault
    cfg = _load_config(args.config)
    focal = cfg.network.focal_config(8)
    all_ok = True
    for variant in VARIANTS:
        from dataclasses import replace
        layer_cfg = replace(focal, variant=variant, out_drop=0.0)
        roles = {"c_factorized_encoder": ("spatial", "temporal"),
                 "d_alternating": ("spatial", "temporal")}.get(variant,
                                                               ("default",))
        for role in roles:
            rng = np.random.default_rng(args.seed or 0)
            layer = build_modulation(layer_cfg, rng, np.float64, role=role)
            results = gradcheck(layer, (1, 2, 4, 4, 8), rng=rng)
            label = variant if role == "default" else f"{variant}:{role}"
            for res in results:
                status = "PASS" if res.passed else "FAIL"
                extra = f" ({res.note})" if res.note else ""
                print(f"{status} {label}.{res.name} rel {res.max_rel_err:.3e}"
                      f"{extra}")
                all_ok = all_ok and res.passed
    if not all_ok:
        raise NumericFault("gradient check failed")
    print("all gradient checks passed")
    return 0


def cmd_visualize(args) -> int:
    from .analysis import export_modulator_maps
    from .backbone import load_checkpoint, load_into
    from .data import load_tensor
    cfg = _load_config(args.config)
    net = _build_network(cfg, cfg.train.seed)
    if args.checkpoint is not None:
        load_into(net, load_checkpoint(args.checkpoint))
    clip = load_tensor(args.clip)
    paths = export_modulator_maps(net, clip, args.out,
                                  stage=args.stage, block=args.block)
    for path in paths:
        print(path)
    return 0


def cmd_compare_designs(args) -> int:
    from .analysis import cost_report
    from .modulation import VARIANTS
    from .train import evaluate, train
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    (train_clips, train_labels), (test_clips, test_labels) = \
        _make_datasets(cfg, seed)
    shape = (cfg.network.frames, cfg.network.height, cfg.network.width)
    rows = ["variant,params,flops,top1"]
    print("variant,params,flops,top1")
    from dataclasses import replace
    for variant in VARIANTS:
        net_cfg = replace(cfg.network, variant=variant)
        report = cost_report(net_cfg, shape)
        from .backbone import FocalVideoNetwork
        net = FocalVideoNetwork(net_cfg, seed=seed)
        train(net, cfg.train, train_clips, train_labels, args.out,
              log_name=f"metrics_{variant}.log")
        acc = evaluate(net, test_clips, test_labels)
        line = f"{variant},{report.total_params},{report.total_flops},{acc:.6f}"
        rows.append(line)
        print(line)
    with open(os.path.join(args.out, "designs.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return 0


def cmd_synth(args) -> int:
    import numpy as np
    from .data import make_dataset, save_clip_dataset
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    rng = np.random.default_rng([seed, 202])
    clips, labels = make_dataset(cfg.task, args.count, rng)
    save_clip_dataset(args.out, clips, labels)
    print(f"wrote {len(labels)} clips to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stfocal",
        description="Video classification with spatio-temporal focal "
                    "modulation: training, evaluation, cost analysis, "
                    "gradient checking, and modulator visualization.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False, out_required=False):
        p.add_argument("--config", required=config_required, default=None,
                       help="path to an INI config file (defaults apply "
                            "when omitted)")
        p.add_argument("--out", required=out_required, default=None,
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS/OpenMP thread count (default 1, "
                            "deterministic)")

    p = sub.add_parser("train", help="train a network on the synthetic task")
    common(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on saved clips")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="clip dataset directory")
    p.add_argument("--views", type=int, default=1,
                   help="total views per clip (1 = single forward; "
                        "multiples of 3 above 3 use 3 spatial crops)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="print the analytic params/FLOPs table")
    common(p)
    p.add_argument("--shape", type=int, nargs=3, default=None,
                   metavar=("T", "H", "W"),
                   help="input shape override (frames height width)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient verification")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize",
                       help="export modulator heatmaps for one clip")
    common(p, out_required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--clip", required=True, help="tensor file with one clip")
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--block", type=int, default=0)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("compare-designs",
                       help="train all five design variants and tabulate")
    common(p, out_required=True)
    p.set_defaults(func=cmd_compare_designs)

    p = sub.add_parser("synth", help="generate and save a clip dataset")
    common(p, out_required=True)
    p.add_argument("--count", type=int, default=500)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    _set_threads(args.threads)
    from .tensor import ConfigError, NumericFault, UsageError
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
