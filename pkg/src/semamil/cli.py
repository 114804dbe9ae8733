"""Single executable for the whole pipeline.

Commands: gen, train, eval, ablate, gradcheck, flops, reorder-inspect.
One JSON config file feeds every command; any key can be overridden on the
command line with --set section.key=value (values parse as JSON, falling
back to plain strings). Unknown keys are a hard error: silent config typos
are the top reproducibility hazard. --seed N pins synth.seed, train.seed,
split.seed and model_seed at once.

Exit codes: 0 success, 1 validation or check failure, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bagdata import (BagFormatError, SynthConfig, generate_synthetic,
                      load_bag, load_dataset, save_dataset, split_monte_carlo)
from .harness import (TrainConfig, evaluate, model_gradcheck, run_ablation,
                      semamil_protocol, write_ablation, write_metrics)
from .model import (CheckpointError, ModelConfig, SemaMILModel, count_flops,
                    count_params, forward, load_checkpoint, save_checkpoint)
from .reorder import assign, build_permutation, router_forward

GRADCHECK_TOLERANCE = 1e-3

DEFAULT_CONFIG: dict = {
    "model_seed": 0,
    "synth": {
        "n_bags": 400, "n_classes": 2, "L_min": 64, "L_max": 128, "D": 32,
        "n_clusters_true": 40, "signal_cluster_fraction": 0.10,
        "noise_sigma": 0.8, "grid_side": 12, "seed": 7,
    },
    "model": {
        "D_in": 32, "d": 16, "hidden": 32, "n_clusters": 8, "K": 8,
        "n_state": 4, "n_layers": 2, "n_classes": 2, "assign_mode": "hard",
        "tau": 1.0, "directions": ["sem-fwd", "sem-bwd", "spatial-fwd", "spatial-bwd"],
        "lambda_router": 0.01,
    },
    "train": {
        "lr": 5e-5, "epochs": 30, "optimizer": "adam", "beta1": 0.9,
        "beta2": 0.999, "eps": 1e-8, "seed": 0, "lambda_router": 0.01,
        "early_stop_patience": 5,
    },
    "split": {"n_folds": 10, "seed": 0},
}


class ConfigError(ValueError):
    pass


@dataclass
class CliConfig:
    synth: SynthConfig
    model: ModelConfig
    train: TrainConfig
    split_n_folds: int
    split_seed: int
    model_seed: int


def _merge_strict(base: dict, user: dict, prefix: str = "") -> None:
    for key, value in user.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a section")
            _merge_strict(base[key], value, prefix=f"{prefix}{key}.")
        else:
            base[key] = value


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def load_cli_config(path: str | None, overrides, seed: int | None) -> CliConfig:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        _merge_strict(cfg, json.loads(p.read_text()))
    for item in overrides or []:
        _apply_override(cfg, item)
    if seed is not None:
        cfg["synth"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["split"]["seed"] = seed
        cfg["model_seed"] = seed
    try:
        return CliConfig(
            synth=SynthConfig(**cfg["synth"]),
            model=ModelConfig(**cfg["model"]),
            train=TrainConfig(**cfg["train"]),
            split_n_folds=int(cfg["split"]["n_folds"]),
            split_seed=int(cfg["split"]["seed"]),
            model_seed=int(cfg["model_seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _require_empty(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _manifest_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p


def cmd_gen(args) -> int:
    cfg = load_cli_config(args.config, args.set, args.seed)
    out = Path(args.out)
    _require_empty(out, args.force)
    dataset = generate_synthetic(cfg.synth)
    save_dataset(dataset, out)
    hist = np.bincount([b.label for b in dataset.bags], minlength=dataset.n_classes)
    print(f"wrote {len(dataset.bags)} bags to {out}")
    print("class histogram: " + " ".join(f"{k}:{v}" for k, v in enumerate(hist)))
    return 0


def cmd_train(args) -> int:
    cfg = load_cli_config(args.config, args.set, args.seed)
    dataset = load_dataset(_manifest_path(args.data))
    split = split_monte_carlo(dataset, cfg.split_n_folds, cfg.split_seed)
    metrics, models, _ = semamil_protocol(
        dataset, cfg.model, split, cfg.train,
        model_seed=cfg.model_seed, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(models):
        save_checkpoint(m, out / f"fold{i}.semm")
    write_metrics(metrics, out)
    for i, (a, c) in enumerate(metrics.per_fold):
        print(f"fold {i}: auc={a:.4f} acc={c:.4f}")
    (am, asd), (cm, csd) = metrics.mean_std
    print(f"mean: auc={am:.4f}+/-{asd:.4f} acc={cm:.4f}+/-{csd:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(_manifest_path(args.data))
    if dataset.bags and dataset.bags[0].D != model.config.D_in:
        raise ConfigError(
            f"checkpoint expects D_in={model.config.D_in} but bags have "
            f"width {dataset.bags[0].D}")
    auc, acc = evaluate(model, forward, dataset.bags)
    result = {"auc": auc, "acc": acc}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"auc={auc:.4f} acc={acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_cli_config(args.config, args.set, args.seed)
    dataset = load_dataset(_manifest_path(args.data))
    split = split_monte_carlo(dataset, cfg.split_n_folds, cfg.split_seed)
    rows = run_ablation(dataset, cfg.model, split, cfg.train,
                        model_seed=cfg.model_seed, jobs=args.jobs)
    out = Path(args.out)
    write_ablation(rows, out)
    print("sr srsm auc_mean auc_std acc_mean acc_std")
    for r in rows:
        print(f"{int(r['sr'])}  {int(r['srsm'])}    "
              f"{r['auc_mean']:.4f}  {r['auc_std']:.4f}  "
              f"{r['acc_mean']:.4f}  {r['acc_std']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = model_gradcheck(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in report:
        print(f"{name:24s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:.0e} "
          f"-> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_flops(args) -> int:
    cfg = load_cli_config(args.config, args.set, args.seed)
    params = count_params(cfg.model)
    flops = count_flops(cfg.model, args.length)
    print(f"L={args.length}")
    print(f"params: {params} ({params / 1e6:.3f}M)")
    print(f"flops:  {flops} ({flops / 1e9:.3f}G)")
    return 0


def cmd_reorder_inspect(args) -> int:
    cfg = load_cli_config(args.config, args.set, args.seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = SemaMILModel.init(cfg.model, seed=cfg.model_seed)
    bag = load_bag(args.bag)
    if bag.D != model.config.D_in:
        raise ConfigError(f"bag width {bag.D} does not match model D_in "
                          f"{model.config.D_in}")
    with ad.no_grad():
        Xd = ad.matmul(ad.as_tensor(bag.X.astype(np.float64)),
                       ad.transpose(model.Wproj))
        Z = router_forward(model.router, Xd)
        assignment = assign(Z, mode="hard")
    perm = build_permutation(assignment.c)
    assert np.array_equal(perm.pi_inv[perm.pi], np.arange(bag.L))
    sizes = np.bincount(assignment.c, minlength=model.config.n_clusters)
    print(json.dumps({
        "labels": assignment.c.tolist(),
        "pi": perm.pi.tolist(),
        "pi_inv": perm.pi_inv.tolist(),
        "cluster_sizes": sizes.tolist(),
    }, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semamil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. model.d=16")
        p.add_argument("--seed", type=int, help="override every seed at once")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel folds (default 1)")
        if out_required is not None:
            p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run the cross-validation protocol")
    common(p)
    p.add_argument("--data", required=True, help="manifest file or dataset dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="2x2 ablation over SR and SRSM")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, out_required=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("flops", help="parameter and FLOP counts")
    common(p, out_required=None)
    p.add_argument("--length", "-L", type=int, default=1024,
                   help="sequence length for the FLOP count")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("reorder-inspect", help="dump (labels, pi) for one bag")
    common(p, out_required=None)
    p.add_argument("--bag", required=True, help="SEMB bag file")
    p.add_argument("--checkpoint", help="optional model checkpoint")
    p.set_defaults(fn=cmd_reorder_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (BagFormatError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
