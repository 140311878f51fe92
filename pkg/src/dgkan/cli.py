"""Experiment runner: schema-validated flat-text configs, deterministic
artifacts (score CSV, summary JSON, memory snapshot, hash manifest), result
reports, activation-profile dumps, and 2-D PCA embedding dumps.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .continual import (ScoreMatrix, Trainer, TrainerConfig, average_accuracy,
                        average_forgetting, run_stream)
from .continual import AblationSwitches
from .fskdcp import AugmentConfig, save_memory
from .kanheads import DgkdHead, activation_profile
from .losses import LossConfig
from .numcore import ContractViolation
from .synthbench import PROTOCOLS, TaskStream, dataset, gen_sequence

CONFIG_FORMAT_VERSION = 1
SUMMARY_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 2)."""


@dataclass
class ExperimentConfig:
    protocol: str = "four-task"
    seed: int = 11
    head: str = "dgkd"
    use_sc: bool = True
    use_kd: bool = True
    use_kdcp: bool = True
    use_raw_replay: bool = False
    lambda_sc: float = 2.0
    lambda_kd: float = 1.0
    tau: float = 0.1
    sc_normalize: bool = True
    d_x: int = 8
    d_f: int = 16
    groups: int = 4
    hidden: int = 64
    mlp_hidden: int = 32
    memory_budget: int = 500
    epochs: int = 20
    batch_size: int = 64
    train_samples: int = 512
    eval_samples: int = 256
    jitter_scale: float = 0.5
    main_lr: float = 2e-4
    proj_lr: float = 5e-4


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_typed(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config field {name!r}: {exc}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat key = value format, validating against the schema."""
    schema = {f.name: f.type for f in fields(ExperimentConfig)}
    typemap = {"int": int, "float": float, "bool": bool, "str": str}
    cfg = ExperimentConfig()
    seen_version = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "config_version":
            if int(val) != CONFIG_FORMAT_VERSION:
                raise ConfigError(f"unsupported config_version {val}")
            seen_version = True
            continue
        if key not in schema:
            raise ConfigError(f"config line {lineno}: unknown field {key!r}")
        typ = typemap.get(schema[key], str) if isinstance(schema[key], str) else schema[key]
        setattr(cfg, key, _parse_typed(key, val, typ))
    if not seen_version:
        raise ConfigError("config missing required 'config_version' header")
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.protocol not in PROTOCOLS:
        raise ConfigError(f"config field 'protocol': must be one of {PROTOCOLS}, got {cfg.protocol!r}")
    if cfg.head not in ("dgkd", "mlp", "groupkan"):
        raise ConfigError(f"config field 'head': must be dgkd, mlp or groupkan, got {cfg.head!r}")
    for name in ("tau", "main_lr", "proj_lr"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"config field {name!r}: must be > 0")
    for name in ("lambda_sc", "lambda_kd", "jitter_scale"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"config field {name!r}: must be >= 0")
    for name in ("d_x", "d_f", "groups", "hidden", "mlp_hidden", "memory_budget",
                 "epochs", "batch_size", "train_samples", "eval_samples"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"config field {name!r}: must be >= 1")
    if cfg.groups > cfg.d_f:
        raise ConfigError("config field 'groups': must not exceed d_f")
    if cfg.d_x % 4 != 0:
        raise ConfigError("config field 'd_x': protocol geometry requires a multiple of 4")


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """Canonical serialization: version header plus every field, sorted."""
    lines = [f"config_version = {CONFIG_FORMAT_VERSION}"]
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return lines


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256("\n".join(config_lines(cfg)).encode()).hexdigest()


def trainer_config(cfg: ExperimentConfig) -> TrainerConfig:
    return TrainerConfig(
        d_x=cfg.d_x, d_f=cfg.d_f, hidden=cfg.hidden, groups=cfg.groups,
        head_kind=cfg.head, mlp_hidden=cfg.mlp_hidden,
        loss=LossConfig(lambda_sc=cfg.lambda_sc, lambda_kd=cfg.lambda_kd, tau=cfg.tau,
                        sc_normalize=cfg.sc_normalize),
        augment=AugmentConfig(jitter_scale=cfg.jitter_scale),
        switches=AblationSwitches(use_sc=cfg.use_sc, use_kd=cfg.use_kd,
                                  use_kdcp=cfg.use_kdcp, use_raw_replay=cfg.use_raw_replay),
        memory_budget=cfg.memory_budget, batch_size=cfg.batch_size, epochs=cfg.epochs,
        main_lr=cfg.main_lr, proj_lr=cfg.proj_lr)


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    return gen_sequence(cfg.protocol, cfg.seed, d_x=cfg.d_x,
                        train_n=cfg.train_samples, eval_n=cfg.eval_samples)


def scores_csv_text(matrix: ScoreMatrix) -> str:
    lines = ["train_step,eval_task,acc,auc"]
    for i in range(1, matrix.num_steps + 1):
        for j in range(1, i + 1):
            lines.append(f"{i},{j},{matrix.entry(i, j, 'acc')!r},{matrix.entry(i, j, 'auc')!r}")
    return "\n".join(lines) + "\n"


def parse_scores_csv(text: str) -> ScoreMatrix:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != "train_step,eval_task,acc,auc":
        raise ContractViolation("malformed scores CSV header")
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    for line in lines[1:]:
        i_s, j_s, a_s, u_s = line.split(",")
        cells[(int(i_s), int(j_s))] = (float(a_s), float(u_s))
    matrix = ScoreMatrix()
    t = 1
    while (t, 1) in cells:
        accs = [cells[(t, j)][0] for j in range(1, t + 1)]
        aucs = [cells[(t, j)][1] for j in range(1, t + 1)]
        matrix.add_row(accs, aucs)
        t += 1
    return matrix


def summary_dict(matrix: ScoreMatrix, cfg: ExperimentConfig) -> dict:
    steps = []
    for t in range(1, matrix.num_steps + 1):
        entry = {
            "task": t,
            "aa_acc": average_accuracy(matrix, t, "acc"),
            "aa_auc": average_accuracy(matrix, t, "auc"),
            "af_acc": average_forgetting(matrix, t, "acc") if t >= 2 else None,
            "af_auc": average_forgetting(matrix, t, "auc") if t >= 2 else None,
        }
        steps.append(entry)
    return {"schema_version": SUMMARY_SCHEMA_VERSION, "protocol": cfg.protocol,
            "seed": cfg.seed, "head": cfg.head, "steps": steps}


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir) -> ScoreMatrix:
    """Train through the configured stream and write all artifacts.

    On a mid-run failure the partial artifacts stay on disk next to a
    manifest with status=failed and the error message.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text("\n".join(config_lines(cfg)) + "\n")
    manifest = {"schema_version": SUMMARY_SCHEMA_VERSION, "config_hash": config_hash(cfg),
                "seed": cfg.seed, "status": "running", "artifacts": {}}
    try:
        stream = build_stream(cfg)
        matrix, trainer = run_stream(stream, trainer_config(cfg), seed=cfg.seed)
        (out / "scores.csv").write_text(scores_csv_text(matrix))
        (out / "summary.json").write_text(
            json.dumps(summary_dict(matrix, cfg), indent=2, sort_keys=True) + "\n")
        if trainer.memory is not None:
            save_memory(trainer.memory, out / "memory_final.csv")
        manifest["status"] = "complete"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["artifacts"] = {p.name: _sha256_file(p) for p in sorted(out.iterdir())
                                 if p.name != "manifest.json"}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        raise
    manifest["artifacts"] = {p.name: _sha256_file(p) for p in sorted(out.iterdir())
                             if p.name != "manifest.json"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return matrix


def pca_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal directions with a fixed sign convention.

    Each component is flipped so its largest-magnitude loading is positive,
    making the projection deterministic across platforms.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.shape[1] < 2:
        raise ContractViolation("PCA dump needs at least 2 feature dimensions")
    centered = F - F.mean(axis=0)
    cov = centered.T @ centered / max(F.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order].T
    for k in range(2):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    return centered @ comps.T, evals[order] / max(evals.sum(), 1e-300)


def dump_embeddings(trainer: Trainer, stream: TaskStream, path) -> int:
    """Write pooled eval features projected onto their top-2 PCs."""
    feats, doms, labs = [], [], []
    for t in range(min(len(stream), trainer.task)):
        Xe, ye = dataset(stream, t, "eval")
        feats.append(trainer.extractor.forward(Xe))
        doms.append(np.full(len(ye), t))
        labs.append(ye)
    F = np.vstack(feats)
    proj, _ = pca_2d(F)
    dom = np.concatenate(doms)
    lab = np.concatenate(labs)
    lines = ["pc1,pc2,domain,label,split"]
    for i in range(F.shape[0]):
        lines.append(f"{float(proj[i, 0])!r},{float(proj[i, 1])!r},{int(dom[i])},{int(lab[i])},eval")
    Path(path).write_text("\n".join(lines) + "\n")
    return F.shape[0]


def dump_profile(trainer: Trainer, path, group_index: int = 0, x_min: float = -3.0,
                 x_max: float = 3.0, points: int = 201) -> None:
    """Write the composite activation scan of one group as CSV."""
    if not isinstance(trainer.head, DgkdHead):
        raise ContractViolation("activation profiles are defined for the dgkd head only")
    xs = np.linspace(x_min, x_max, points)
    vals = activation_profile(trainer.head, group_index, xs)
    lines = ["x,value,task_count"]
    tc = trainer.head.active_task
    for x, v in zip(xs, vals):
        lines.append(f"{float(x)!r},{float(v)!r},{tc}")
    Path(path).write_text("\n".join(lines) + "\n")


def report(results_dir) -> str:
    """Render the AA/AF table from a results directory.

    The AF column is recomputed from the score CSV and checked against the
    summary JSON; missing artifacts are listed explicitly.
    """
    out = Path(results_dir)
    needed = ["scores.csv", "summary.json"]
    missing = [name for name in needed if not (out / name).exists()]
    if missing:
        raise ContractViolation(f"missing artifacts in {out}: {', '.join(missing)}")
    summary = json.loads((out / "summary.json").read_text())
    matrix = parse_scores_csv((out / "scores.csv").read_text())
    lines = [
        f"Results for protocol={summary['protocol']} seed={summary['seed']} head={summary['head']}",
        "",
        "| task | AA (acc) | AF (acc) | AA (auc) | AF (auc) |",
        "|------|----------|----------|----------|----------|",
    ]
    for step in summary["steps"]:
        t = step["task"]
        af_csv = average_forgetting(matrix, t, "acc") if t >= 2 else None
        if af_csv is not None and abs(af_csv - step["af_acc"]) > 1e-9:
            raise ContractViolation(
                f"summary/CSV disagree on AF at task {t}: {step['af_acc']} vs {af_csv}")
        fmt = lambda v: "-" if v is None else f"{v:.2f}"
        lines.append(f"| {t} | {fmt(step['aa_acc'])} | {fmt(step['af_acc'])} "
                     f"| {fmt(step['aa_auc'])} | {fmt(step['af_auc'])} |")
    return "\n".join(lines)


def verify(results_dir) -> bool:
    """Re-run from the stored config and compare artifact hashes."""
    out = Path(results_dir)
    cfg = parse_config_text((out / "config_resolved.txt").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    with tempfile.TemporaryDirectory() as tmp:
        run_experiment(cfg, tmp)
        for name in ("scores.csv", "summary.json"):
            if _sha256_file(Path(tmp) / name) != manifest["artifacts"].get(name):
                return False
    return True


# -- command line --------------------------------------------------------------


def _load_cfg(args) -> ExperimentConfig:
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text())
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "head", None) is not None:
        cfg.head = args.head
    if getattr(args, "protocol", None) is not None:
        cfg.protocol = args.protocol
    if getattr(args, "ablate", None):
        for name in args.ablate.split(","):
            name = name.strip()
            if name not in ("sc", "kd", "kdcp"):
                raise ConfigError(f"--ablate: unknown component {name!r}")
            setattr(cfg, f"use_{name}", False)
    if getattr(args, "replay_raw", False):
        cfg.use_raw_replay = True
    validate_config(cfg)
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgkan", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="path to a flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--head", choices=["dgkd", "mlp", "groupkan"])
        p.add_argument("--protocol", choices=list(PROTOCOLS))
        p.add_argument("--ablate", help="comma list from {sc, kd, kdcp} to switch off")
        p.add_argument("--replay-raw", action="store_true", dest="replay_raw")
        p.add_argument("--out", required=out_required, help="output directory/file")

    common(sub.add_parser("run", help="run an experiment and write artifacts"))
    p_rep = sub.add_parser("report", help="render AA/AF tables from a results directory")
    p_rep.add_argument("--dir", required=True)
    common(sub.add_parser("dump-profile", help="write an activation-profile CSV"))
    sub.choices["dump-profile"].add_argument("--group", type=int, default=0)
    sub.choices["dump-profile"].add_argument("--x-min", type=float, default=-3.0)
    sub.choices["dump-profile"].add_argument("--x-max", type=float, default=3.0)
    sub.choices["dump-profile"].add_argument("--points", type=int, default=201)
    common(sub.add_parser("dump-embeddings", help="write a 2-D PCA embedding CSV"))
    p_ver = sub.add_parser("verify", help="re-run a results directory and compare hashes")
    p_ver.add_argument("--dir", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.verb == "run":
            cfg = _load_cfg(args)
            run_experiment(cfg, args.out)
            print(f"run complete: artifacts in {args.out}")
            return 0
        if args.verb == "report":
            print(report(args.dir))
            return 0
        if args.verb == "dump-profile":
            cfg = _load_cfg(args)
            stream = build_stream(cfg)
            _, trainer = run_stream(stream, trainer_config(cfg), seed=cfg.seed)
            dump_profile(trainer, args.out, group_index=args.group,
                         x_min=args.x_min, x_max=args.x_max, points=args.points)
            print(f"profile written to {args.out}")
            return 0
        if args.verb == "dump-embeddings":
            cfg = _load_cfg(args)
            stream = build_stream(cfg)
            _, trainer = run_stream(stream, trainer_config(cfg), seed=cfg.seed)
            n = dump_embeddings(trainer, stream, args.out)
            print(f"{n} embedding rows written to {args.out}")
            return 0
        if args.verb == "verify":
            if verify(args.dir):
                print("verification OK: artifacts reproduce byte-identically")
                return 0
            print("verification FAILED: artifact hashes differ", file=sys.stderr)
            return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
