"""Command-line entry points.

Subcommands: ``synth`` (build a synthetic dataset), ``train-rl`` (policy
training), ``train-align`` (alignment curriculum), ``eval`` (separation
metrics over an evaluation manifest), ``separate`` (inference).

Flag > config file > default, for every key. Each run directory receives
an echo of the effective configuration; rerunning with the same config and
seed reproduces all manifests, logs and checkpoints byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime divergence or an
unusable result, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import align, metrics, pipeline, rl, separator, synthdata
from .errors import ConfigError, DivergenceError, NonFiniteGradientError
from .spectral import StftConfig
from .wavio import read_wav, write_wav

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return data


def _merged(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    cfg = dict(defaults)
    for key, value in file_cfg.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _echo_config(run_dir: Path, command: str, cfg: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg}
    (run_dir / "effective_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n"
    )


def _stft_config(cfg: dict) -> StftConfig:
    return StftConfig(
        fft_size=int(cfg["fft_size"]),
        hop=int(cfg["hop"]),
        window_size=int(cfg["window_size"]),
    )


def cmd_synth(args) -> int:
    defaults = {
        "out": None,
        "items": 200,
        "seed": 0,
        "duration": 65535,
        "sample_rate": 16000,
        "embed_dim": 16,
        "noise_sigma": 0.1,
    }
    cfg = _merged(
        defaults,
        _load_config_file(args.config),
        {
            "out": args.out,
            "items": args.items,
            "seed": args.seed,
            "duration": args.duration,
        },
    )
    if cfg["out"] is None:
        raise ConfigError("synth needs --out (or 'out' in the config file)")
    out = Path(cfg["out"])
    _echo_config(out, "synth", cfg)
    manifest = synthdata.build_dataset(
        out,
        n_items=int(cfg["items"]),
        seed=int(cfg["seed"]),
        duration=int(cfg["duration"]),
        sample_rate=int(cfg["sample_rate"]),
        embed_dim=int(cfg["embed_dim"]),
        noise_sigma=float(cfg["noise_sigma"]),
    )
    print(manifest)
    return EXIT_OK


_RL_FLAG_KEYS = (
    "steps", "batch_size", "seed", "lr", "reward_mode", "query_modality",
    "segment_samples", "val_interval", "entropy_coef", "kl_coef",
    "mc_samples", "warm_start_steps",
)


def cmd_train_rl(args) -> int:
    defaults = {
        **rl.RlConfig().to_dict(),
        "dataset": None,
        "run_dir": None,
        "fft_size": 1024,
        "hop": 256,
        "window_size": 1024,
        "model_dtype": "float32",
    }
    flags = {key: getattr(args, key) for key in _RL_FLAG_KEYS}
    flags.update({"dataset": args.dataset, "run_dir": args.run_dir})
    cfg = _merged(defaults, _load_config_file(args.config), flags)
    if cfg["dataset"] is None or cfg["run_dir"] is None:
        raise ConfigError("train-rl needs --dataset and --run-dir")

    run_dir = Path(cfg["run_dir"])
    _echo_config(run_dir, "train-rl", cfg)
    (run_dir / "logs").mkdir(exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)

    rl_cfg = rl.RlConfig.from_dict(
        {k: cfg[k] for k in rl.RlConfig.__dataclass_fields__}
    )
    stft_cfg = _stft_config(cfg)
    dataset = pipeline.load_dataset(cfg["dataset"])
    train_items = pipeline.prepare_train_items(dataset, "train", rl_cfg, stft_cfg)
    val_items = pipeline.prepare_train_items(dataset, "val", rl_cfg, stft_cfg)
    reward_ctx = pipeline.make_reward_context(dataset, rl_cfg)

    if cfg["model_dtype"] not in ("float32", "float64"):
        raise ConfigError("model_dtype must be 'float32' or 'float64'")
    model = separator.init_model(
        np.random.default_rng(rl_cfg.seed),
        query_dim=dataset.store.dimension,
        dtype=np.dtype(cfg["model_dtype"]),
    )
    started = time.perf_counter()
    result = rl.train_loop(
        model,
        train_items,
        val_items,
        rl_cfg,
        reward_ctx,
        log_path=run_dir / "logs" / "train.jsonl",
        checkpoint_dir=run_dir / "checkpoints",
    )
    elapsed = time.perf_counter() - started
    summary = {
        "steps_run": result.steps_run,
        "best_step": result.best_step,
        "best_val_reward": result.best_val_reward,
        "initial_val_reward": result.initial_val_reward,
        "final_val_reward": result.final_val_reward,
        "stopped_early": result.stopped_early,
        "elapsed_seconds": elapsed,
    }
    (run_dir / "reports" / "run_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n"
    )
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train_align(args) -> int:
    defaults = {
        "dataset": None,
        "run_dir": None,
        "seed": 0,
        "tau_init": 0.5,
        "epochs": None,
        "steps_per_epoch": None,
        "gap_items": 64,
        "gap_split": "all",
        "stages": {},
    }
    cfg = _merged(
        defaults,
        _load_config_file(args.config),
        {
            "dataset": args.dataset,
            "run_dir": args.run_dir,
            "seed": args.seed,
            "epochs": args.epochs,
            "steps_per_epoch": args.steps_per_epoch,
        },
    )
    if cfg["dataset"] is None or cfg["run_dir"] is None:
        raise ConfigError("train-align needs --dataset and --run-dir")
    run_dir = Path(cfg["run_dir"])
    _echo_config(run_dir, "train-align", cfg)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)

    stage_configs = []
    for stage in (1, 2, 3):
        overrides = dict(cfg["stages"].get(str(stage), {}))
        if cfg["epochs"] is not None:
            overrides.setdefault("epochs", int(cfg["epochs"]))
        if cfg["steps_per_epoch"] is not None:
            overrides.setdefault("steps_per_epoch", int(cfg["steps_per_epoch"]))
        stage_configs.append(align.StageConfig(stage=stage, **overrides))

    dataset = pipeline.load_dataset(cfg["dataset"])
    entries = pipeline.gap_entries(dataset, cfg["gap_split"],
                                   max_items=int(cfg["gap_items"]))

    initial = align.HeadSet.identity(dataset.store.dimension,
                                     tau_init=float(cfg["tau_init"]))
    align.save_heads(run_dir / "checkpoints" / "heads_init.json", initial)
    gap_before = align.discrimination_gap(entries, dataset.embedder, initial)

    rng = np.random.default_rng(int(cfg["seed"]))
    state = align.run_curriculum(dataset.store, stage_configs, rng,
                                 tau_init=float(cfg["tau_init"]))
    align.save_heads(run_dir / "checkpoints" / "heads_best.json", state.heads)
    for stage in (1, 2, 3):
        align.save_heads(
            run_dir / "checkpoints" / f"heads_stage{stage}.json",
            state.stage_best[stage],
        )
    gap_after = align.discrimination_gap(entries, dataset.embedder, state.heads)

    lines = ["curriculum report", "================="]
    for report in state.stage_reports:
        lines.append(
            f"stage {report.stage}: epochs={report.epochs_run} "
            f"best_val_loss={report.best_val_loss:.6f} "
            f"final_val_loss={report.final_val_loss:.6f}"
        )
    lines.append(
        f"discrimination gap before: {gap_before.mean:.6f} "
        f"+/- {gap_before.std:.6f} (n={len(gap_before.per_item)})"
    )
    lines.append(
        f"discrimination gap after:  {gap_after.mean:.6f} "
        f"+/- {gap_after.std:.6f} (n={len(gap_after.per_item)})"
    )
    (run_dir / "reports" / "curriculum.txt").write_text("\n".join(lines) + "\n")
    (run_dir / "reports" / "gap.json").write_text(
        json.dumps(
            {
                "gap_before_mean": gap_before.mean,
                "gap_before_std": gap_before.std,
                "gap_after_mean": gap_after.mean,
                "gap_after_std": gap_after.std,
                "n_items": len(gap_after.per_item),
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    print("\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    defaults = {"manifest": None, "out": None, "with_bss": False, "seed": 0,
                "bootstrap": 10000}
    cfg = _merged(
        defaults,
        _load_config_file(args.config),
        {
            "manifest": args.manifest,
            "out": args.out,
            "with_bss": args.with_bss or None,
            "seed": args.seed,
        },
    )
    if cfg["manifest"] is None or cfg["out"] is None:
        raise ConfigError("eval needs --manifest and --out")
    out = Path(cfg["out"])
    _echo_config(out, "eval", cfg)

    utterances = pipeline.evaluate_manifest(cfg["manifest"],
                                            with_bss=bool(cfg["with_bss"]))
    with open(out / "report.jsonl", "w") as fh:
        for u in utterances:
            fh.write(json.dumps(u.to_dict(), sort_keys=True) + "\n")
    try:
        report = metrics.aggregate(
            utterances, bootstrap_resamples=int(cfg["bootstrap"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        print(f"eval failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out / "summary.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def _load_query(args, dataset) -> np.ndarray:
    spec = args.query
    if spec.startswith("store:"):
        if dataset is None:
            raise ConfigError("store queries need --dataset")
        _, modality, item_id = spec.split(":", 2)
        return dataset.store.get(modality, item_id)
    data = json.loads(Path(spec).read_text())
    vector = data["vector"] if isinstance(data, dict) else data
    return np.asarray(vector, dtype=np.float64)


def cmd_separate(args) -> int:
    defaults = {
        "checkpoint": None,
        "dataset": None,
        "split": "test",
        "out": None,
        "mixture": None,
        "query": None,
        "query_modality": "text",
        "rate_policy": "reject",
        "fft_size": 1024,
        "hop": 256,
        "window_size": 1024,
    }
    cfg = _merged(
        defaults,
        _load_config_file(args.config),
        {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "split": args.split,
            "out": args.out,
            "mixture": args.mixture,
            "query": args.query,
            "query_modality": args.query_modality,
            "rate_policy": args.rate_policy,
        },
    )
    if cfg["checkpoint"] is None or cfg["out"] is None:
        raise ConfigError("separate needs --checkpoint and --out")
    model = separator.load_model(cfg["checkpoint"])
    stft_cfg = _stft_config(cfg)

    if cfg["mixture"] is not None:
        if cfg["query"] is None:
            raise ConfigError("single-file separation needs --query")
        dataset = (
            pipeline.load_dataset(cfg["dataset"]) if cfg["dataset"] else None
        )
        mix = read_wav(cfg["mixture"], rate_policy=cfg["rate_policy"])
        query = _load_query(args, dataset)
        est = pipeline.separate_waveform(model, mix, query, stft_cfg)
        out_path = Path(cfg["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(out_path, est)
        print(out_path)
        return EXIT_OK

    if cfg["dataset"] is None:
        raise ConfigError("separate needs --mixture or --dataset")
    dataset = pipeline.load_dataset(cfg["dataset"])
    rl_cfg = rl.RlConfig(query_modality=cfg["query_modality"])
    out = Path(cfg["out"])
    _echo_config(out, "separate", cfg)
    manifest = pipeline.separate_split(
        model, dataset, cfg["split"], rl_cfg, stft_cfg, out
    )
    print(manifest)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masksep",
        description="query-conditioned sound separation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--items", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-rl", help="train the mask policy")
    p.add_argument("--dataset")
    p.add_argument("--run-dir")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--reward-mode", dest="reward_mode",
                   choices=["audio", "text", "video", "mixup", "pooled"])
    p.add_argument("--query-modality", dest="query_modality",
                   choices=["audio", "text", "video", "mixup"])
    p.add_argument("--segment-samples", dest="segment_samples", type=int)
    p.add_argument("--val-interval", dest="val_interval", type=int)
    p.add_argument("--entropy-coef", dest="entropy_coef", type=float)
    p.add_argument("--kl-coef", dest="kl_coef", type=float)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--warm-start-steps", dest="warm_start_steps", type=int)
    p.add_argument("--no-warm-start", dest="warm_start_steps",
                   action="store_const", const=0)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("train-align", help="run the alignment curriculum")
    p.add_argument("--dataset")
    p.add_argument("--run-dir")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("eval", help="score separations against references")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--with-bss", dest="with_bss", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="separate mixtures with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--mixture")
    p.add_argument("--query")
    p.add_argument("--query-modality", dest="query_modality")
    p.add_argument("--rate-policy", dest="rate_policy",
                   choices=["reject", "resample", "accept"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_separate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteGradientError) as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError,) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
