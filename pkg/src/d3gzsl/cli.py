"""Command-line entry point: dataset synthesis, runs, ablation sweeps.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 I/O failure. ``D3_THREADS`` caps the numeric libraries' thread pools
(set to 1 for fully deterministic kernels); it is applied here before
numpy is first imported, so invoke runs through this module.
"""

import os


def _cap_threads():
    cap = os.environ.get("D3_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


_cap_threads()

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ThreadPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402

from .data import SyntheticSpec, load_feature_file, make_synthetic, save_dataset  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DataFormatError,
    DivergenceError,
    ParameterError,
    ValidationError,
)
from .nn import save_checkpoint  # noqa: E402
from .pipeline import MODES, RunReport, TrainConfig, run_experiment  # noqa: E402

# key -> (default, coercion, help); every run echoes the fully resolved values
SCHEMA = {
    "data.source": ("synthetic", str, "synthetic | files"),
    "data.features": ("", str, "features file (data.source = files)"),
    "data.attributes": ("", str, "attributes file (data.source = files)"),
    "data.splits": ("", str, "split file (data.source = files)"),
    "synth.seen_classes": (10, int, "number of seen classes"),
    "synth.unseen_classes": (5, int, "number of unseen classes"),
    "synth.feature_dim": (32, int, "feature dimensionality"),
    "synth.attribute_dim": (8, int, "attribute dimensionality"),
    "synth.train_per_class": (60, int, "train rows per seen class"),
    "synth.test_per_class": (20, int, "test rows per class (>= 20 recommended)"),
    "synth.class_sep": (1.8, float, "attribute-map scale separating class means"),
    "synth.noise_sigma": (0.3, float, "within-class feature noise"),
    "synth.map_seed": (7, int, "seed of the attribute-to-mean map"),
    "synth.seed": (0, int, "seed of attributes and samples"),
    "train.mode": ("d3gzsl", str, "d3gzsl | baseline | ts | iv_ts"),
    "train.seeds": ([0, 1, 2, 3, 4], list, "training seeds, one run each"),
    "train.epochs": (15, int, "joint-training epochs"),
    "train.batch_size": (64, int, "real seen rows per batch"),
    "train.syn_per_class": (6, int, "generated rows per unseen class per batch"),
    "train.lambda": (1.0, float, "weight of the distillation losses"),
    "train.use_id2sd": (True, bool, "enable embedding + logit distillation"),
    "train.use_o2dbd": (True, bool, "enable the OOD batch distillation loss"),
    "train.tau_o": (1.0, float, "teacher softmax temperature"),
    "train.tau_s": (1.0, float, "student softmax temperature"),
    "ood.method": ("msp", str, "msp | energy"),
    "ood.temperature": (1.0, float, "energy score temperature"),
    "model.embed_dim": (64, int, "embedding width of teacher and student"),
    "model.hidden_dim": (512, int, "hidden width of the embedding nets"),
    "model.proj_hidden": (16, int, "hidden width of the OOD projector"),
    "fg.variant": ("gaussian_oracle", str, "gaussian_oracle | wgan_gp"),
    "fg.hidden": (256, int, "hidden width of generator and critic"),
    "fg.n_critic": (5, int, "critic updates per generator update"),
    "fg.gp_weight": (10.0, float, "gradient-penalty weight"),
    "fg.cls_weight": (0.01, float, "classification weight in the generator loss"),
    "fg.pretrain_epochs": (30, int, "standalone generator epochs for ts/iv_ts"),
    "optim.lr_student": (1e-3, float, "Adam lr for student and projector"),
    "optim.lr_gan": (1e-4, float, "Adam lr for generator and critic"),
    "optim.teacher_epochs": (12, int, "teacher pretraining epochs"),
    "optim.teacher_lr": (1e-3, float, "teacher Adam lr"),
    "ts.holdout_frac": (0.2, float, "seen-train fraction held out for gamma"),
    "ts.gen_per_class": (60, int, "generated rows per unseen class for experts"),
    "ts.expert_epochs": (20, int, "expert classifier epochs"),
    "ts.expert_hidden": (128, int, "expert classifier hidden width"),
    "ts.gamma_quantiles": (256, int, "score quantiles swept for gamma"),
}

ABLATION_FLAGS = [
    ("none", False, False),
    ("id", True, False),
    ("od", False, True),
    ("both", True, True),
]


def _coerce(key: str, raw: str):
    default, kind, _ = SCHEMA[key]
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if kind is list:
            vals = json.loads(raw)
            if not isinstance(vals, list) or not all(isinstance(v, int) for v in vals):
                raise ValueError("expected a JSON list of integers")
            return vals
        if kind is str:
            return raw.strip().strip('"')
        return kind(raw)
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from None


def parse_config(path) -> dict:
    """Read `key = value` lines; unknown keys are rejected by name."""
    cfg = {k: default for k, (default, _, _) in SCHEMA.items()}
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as f:
        for ln_no, ln in enumerate(f, start=1):
            line = ln.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln_no}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{ln_no}: unknown configuration key {key!r}")
            cfg[key] = _coerce(key, raw.strip())
    return cfg


def synthetic_spec_from(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(
        n_seen=cfg["synth.seen_classes"],
        n_unseen=cfg["synth.unseen_classes"],
        feat_dim=cfg["synth.feature_dim"],
        attr_dim=cfg["synth.attribute_dim"],
        train_per_class=cfg["synth.train_per_class"],
        test_per_class=cfg["synth.test_per_class"],
        class_sep=cfg["synth.class_sep"],
        noise_sigma=cfg["synth.noise_sigma"],
        map_seed=cfg["synth.map_seed"],
        seed=cfg["synth.seed"],
    )


def train_config_from(cfg: dict, mode: str, seed: int, **overrides) -> TrainConfig:
    kwargs = dict(
        mode=mode,
        seed=seed,
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        syn_per_class=cfg["train.syn_per_class"],
        lambda_=cfg["train.lambda"],
        use_id2sd=cfg["train.use_id2sd"],
        use_o2dbd=cfg["train.use_o2dbd"],
        ood_method=cfg["ood.method"],
        ood_temperature=cfg["ood.temperature"],
        tau_o=cfg["train.tau_o"],
        tau_s=cfg["train.tau_s"],
        embed_dim=cfg["model.embed_dim"],
        hidden_dim=cfg["model.hidden_dim"],
        proj_hidden=cfg["model.proj_hidden"],
        fg_variant=cfg["fg.variant"],
        fg_hidden=cfg["fg.hidden"],
        n_critic=cfg["fg.n_critic"],
        gp_weight=cfg["fg.gp_weight"],
        cls_weight=cfg["fg.cls_weight"],
        fg_pretrain_epochs=cfg["fg.pretrain_epochs"],
        lr_student=cfg["optim.lr_student"],
        lr_gan=cfg["optim.lr_gan"],
        teacher_epochs=cfg["optim.teacher_epochs"],
        teacher_lr=cfg["optim.teacher_lr"],
        ts_holdout_frac=cfg["ts.holdout_frac"],
        ts_gen_per_class=cfg["ts.gen_per_class"],
        ts_expert_epochs=cfg["ts.expert_epochs"],
        ts_expert_hidden=cfg["ts.expert_hidden"],
        gamma_quantiles=cfg["ts.gamma_quantiles"],
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def load_dataset(cfg: dict):
    if cfg["data.source"] == "synthetic":
        return make_synthetic(synthetic_spec_from(cfg))
    if cfg["data.source"] == "files":
        for key in ("data.features", "data.attributes", "data.splits"):
            if not cfg[key]:
                raise ConfigError(f"data.source = files requires {key}")
        return load_feature_file(
            cfg["data.features"], cfg["data.attributes"], cfg["data.splits"]
        )
    raise ConfigError(f"data.source must be synthetic or files, got {cfg['data.source']!r}")


def _write_run_outputs(out_dir: Path, reports, models_by_key, prefix: str = "run"):
    rows = sorted(reports, key=lambda r: (r.mode, r.seed))
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(RunReport.CSV_HEADER + "\n")
        for r in rows:
            f.write(r.csv_row() + "\n")
    for r in rows:
        trace_path = out_dir / f"{prefix}_{r.mode}_{r.seed}.json"
        with open(trace_path, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "mode": r.mode,
                    "seed": r.seed,
                    "metrics": {"U": r.unseen_acc, "S": r.seen_acc, "H": r.harmonic},
                    "epoch_losses": r.epoch_losses,
                    "config": r.config,
                },
                f,
                indent=1,
            )
    for (mode, seed), models in models_by_key.items():
        named = []
        for obj in models.values():
            if hasattr(obj, "named_parameters"):
                named.extend(obj.named_parameters())
        if named:
            save_checkpoint(out_dir / f"model_{mode}_{seed}.bin", named)


def cmd_synth(args) -> int:
    cfg = parse_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = make_synthetic(synthetic_spec_from(cfg))
    save_dataset(
        ds,
        out_dir / "features.txt",
        out_dir / "attributes.txt",
        out_dir / "splits.txt",
    )
    print(f"wrote {out_dir}/features.txt attributes.txt splits.txt "
          f"({ds.features.shape[0]} rows, {ds.n_classes} classes)")
    return 0


def _run_one(cfg, mode, seed):
    tc = train_config_from(cfg, mode, seed)
    ds = load_dataset(cfg)
    report, models = run_experiment(tc, ds, return_models=True)
    return report, models


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    mode = args.mode or cfg["train.mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    seeds = [args.seed] if args.seed is not None else cfg["train.seeds"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda s: _run_one(cfg, mode, s), seeds))
    else:
        results = [_run_one(cfg, mode, s) for s in seeds]

    reports = [r for r, _ in results]
    models_by_key = {(r.mode, r.seed): m for r, m in results}
    _write_run_outputs(out_dir, reports, models_by_key)
    for r in sorted(reports, key=lambda r: (r.mode, r.seed)):
        print(f"{r.mode} seed={r.seed}: U={r.unseen_acc:.2f} S={r.seen_acc:.2f} "
              f"H={r.harmonic:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    seeds = [args.seed] if args.seed is not None else cfg["train.seeds"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)

    def one(flags_seed):
        (name, use_id, use_od), seed = flags_seed
        tc = train_config_from(cfg, "d3gzsl", seed, use_id2sd=use_id, use_o2dbd=use_od)
        return name, run_experiment(tc, ds)

    jobs = [(combo, seed) for combo in ABLATION_FLAGS for seed in seeds]
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    order = {name: i for i, (name, _, _) in enumerate(ABLATION_FLAGS)}
    results.sort(key=lambda nr: (order[nr[0]], nr[1].seed))
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("flags," + RunReport.CSV_HEADER + "\n")
        for name, r in results:
            f.write(f"{name}," + r.csv_row() + "\n")
    for name, r in results:
        print(f"flags={name} seed={r.seed}: H={r.harmonic:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="d3gzsl",
        description="Generative zero-shot benchmark: synthesis, training, ablations.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a synthetic dataset in the text format")
    sp.add_argument("--config", default=None, help="config file (defaults used if omitted)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_synth)

    rp = sub.add_parser("run", help="pretrain the teacher and run the configured mode")
    rp.add_argument("--config", default=None)
    rp.add_argument("--out", required=True)
    rp.add_argument("--mode", default=None, choices=MODES)
    rp.add_argument("--seed", type=int, default=None, help="single-seed override")
    rp.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    rp.set_defaults(fn=cmd_run)

    ap = sub.add_parser("ablate", help="run the four distillation-switch combinations")
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParameterError, ValidationError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
