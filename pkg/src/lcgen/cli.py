"""Command-line pipeline: mine, calibrate, train, generate, evaluate, plot.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 input or config error, 3 incompatible artifact.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .episodes import episode_risk, generate_episodes, load_traces, trace_series, write_episode
from .gail import ExpertBuffer
from .ingest import IngestError, Schema, load_lane_map, load_trajectories
from .mining import MiningConfig, mine_corpus, read_catalog, write_catalog
from .nn import CheckpointError, LayoutError
from .risk import RiskError, RiskThresholds, calibrate_thresholds, dangerousness, expert_episodes
from .sim import EnvError, EpisodeTrace
from .svg import reward_curve_svg, trace_svg
from .trainer import ConfigError, TrainerConfig, git_describe, load_trained, train, write_json_atomic

EXIT_OK, EXIT_INPUT, EXIT_ARTIFACT = 0, 2, 3
CONFIG_DIR_ENV = "LCGEN_CONFIG_DIR"
SWEEP_ANGLES = ("-45", "-15", "15", "45", "none")
DEFAULT_DT = 0.1


class UsageError(Exception):
    pass


def _resolve_config(name: Optional[str], default_name: str) -> Optional[Path]:
    """Explicit path, else a file in the config directory named by the environment."""
    cfg_dir = os.environ.get(CONFIG_DIR_ENV)
    if name:
        p = Path(name)
        if p.exists() or not cfg_dir:
            return p
        return Path(cfg_dir) / name
    if cfg_dir and (Path(cfg_dir) / default_name).exists():
        return Path(cfg_dir) / default_name
    return None


def _read_json_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _manifest(out: Path, command: str, config: dict, inputs: dict, outputs: Sequence[Path], seeds: dict,
              summary: dict, started: float) -> None:
    write_json_atomic(out / "manifest.json", {
        "command": command,
        "config_hash": _hash(config),
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(p) for p in outputs),
        "seeds": seeds,
        "tool_version": __version__,
        "git_describe": git_describe(),
        "started": started,
        "finished": time.time(),
        "summary": summary,
    })


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------

def cmd_mine(args) -> int:
    started = time.time()
    cfg_path = _resolve_config(args.config, "mining.json")
    raw = _read_json_config(cfg_path)
    schema_raw = raw.pop("schema", None)
    known = set(MiningConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown mining config key {unknown[0]!r}")
    if args.workers is not None:
        raw["workers"] = 1 if args.deterministic else args.workers
    cfg = MiningConfig(**raw)
    if args.schema == "ngsim":
        schema = Schema.ngsim()
    elif schema_raw is not None:
        schema = Schema.from_dict(schema_raw)
    else:
        schema = Schema()
    corpus = load_trajectories(args.trajectories, schema)
    lane_map = load_lane_map(args.lane_map)
    catalog, stats = mine_corpus(corpus, lane_map, cfg)
    out = _out_dir(args)
    cat_path, stats_path, table_path = out / "catalog.jsonl", out / "mining_stats.json", out / "roles.txt"
    write_catalog(cat_path, catalog)
    stats_path.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    table_path.write_text(stats.table() + "\n")
    print(stats.table())
    _manifest(out, "mine", {"mining": cfg.__dict__, "schema": schema.__dict__},
              {"trajectories": args.trajectories, "lane_map": args.lane_map},
              [cat_path, stats_path, table_path], {}, stats.to_dict(), started)
    return EXIT_OK


def _load_catalog(path):
    try:
        catalog = read_catalog(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not catalog:
        raise UsageError(f"{path}: catalog is empty")
    return catalog


def cmd_calibrate(args) -> int:
    started = time.time()
    catalog = _load_catalog(args.catalog)
    episodes = expert_episodes(catalog, args.role)
    th = calibrate_thresholds(episodes, args.q_lo, args.q_hi)
    out = _out_dir(args)
    path = out / "thresholds.json"
    th.save(path)
    print(json.dumps(th.to_dict(), sort_keys=True))
    _manifest(out, "calibrate", {"role": args.role, "q_lo": args.q_lo, "q_hi": args.q_hi},
              {"catalog": args.catalog}, [path], {}, {"thresholds": th.to_dict(), "n_episodes": len(episodes)},
              started)
    return EXIT_OK


def _svo_overrides(angle: Optional[str]) -> dict:
    if angle is None:
        return {}
    if angle.lower() == "none":
        return {"svo_mode": "none"}
    return {"svo_mode": "fixed", "svo_angle_deg": float(angle)}


def _train_config(args) -> TrainerConfig:
    path = _resolve_config(args.config, "train.json")
    raw = _read_json_config(path)
    cfg = TrainerConfig.from_dict(raw)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if args.iterations is not None:
        over["iterations"] = args.iterations
    over.update(_svo_overrides(args.svo_angle))
    if args.deterministic:
        over["workers"] = 1
    return cfg.replace(**over) if over else cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    catalog = _load_catalog(args.catalog)
    out = _out_dir(args)
    log = (lambda r: print(f"iter {r['iteration']:5d}  adv {r['mean_adv_reward']:.4f}  "
                           f"reward {r['mean_reward']:.4f}  W {r['w_distance']:.4f}")) if args.verbose else None
    arts = train(cfg, catalog, out_dir=out, log=log, manifest_extra={"inputs": {"catalog": str(args.catalog)}})
    tail = arts.metrics[-50:]
    if tail:
        print(f"trained {len(arts.metrics)} iterations; final mean adversarial score "
              f"{np.mean([r['mean_adv_reward'] for r in tail]):.4f}")
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_trained(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except ConfigError as exc:
        raise CheckpointError(f"{path}: incompatible embedded config ({exc})") from None


def _check_catalog(catalog, cfg: TrainerConfig, path) -> None:
    from .sim import select_adversary
    for s in catalog:
        try:
            select_adversary(s, cfg.adversary_role)
        except EnvError as exc:
            raise UsageError(f"{path}: {exc}") from None


def cmd_generate(args) -> int:
    started = time.time()
    policy, _, cfg = _checkpoint(args.checkpoint)
    catalog = _load_catalog(args.catalog)
    _check_catalog(catalog, cfg, args.catalog)
    if policy.layout.n_vehicles != cfg.n_vehicles or policy.layout != cfg.layout():
        raise CheckpointError(f"{args.checkpoint}: network layout does not match its embedded config")
    seed = cfg.seed if args.seed is None else args.seed
    expert = ExpertBuffer.from_catalog(catalog, cfg.adversary_role, cfg.n_vehicles)
    svo = cfg.replace(**_svo_overrides(args.svo_angle)).svo()
    traces = generate_episodes(policy, catalog, cfg, args.n_episodes, seed, expert.actions, args.greedy, svo)
    out = _out_dir(args)
    written = []
    for i, tr in enumerate(traces):
        written += write_episode(tr, out, i)
    n_coll = sum(t.collided_with_ego for t in traces)
    print(f"wrote {len(traces)} episodes to {out} ({n_coll} ego collisions)")
    _manifest(out, "generate", {"trainer": cfg.to_dict(), "n_episodes": args.n_episodes, "greedy": args.greedy,
                                "svo_angle": args.svo_angle},
              {"checkpoint": args.checkpoint, "catalog": args.catalog}, written, {"generate": seed},
              {"episodes": len(traces), "ego_collisions": n_coll}, started)
    return EXIT_OK


def _thresholds(args) -> RiskThresholds:
    if args.thresholds:
        return RiskThresholds.load(args.thresholds)
    if args.catalog:
        return calibrate_thresholds(expert_episodes(_load_catalog(args.catalog)))
    raise UsageError("evaluate needs --thresholds or an expert --catalog to calibrate from")


def _format_table(rows: List[dict]) -> str:
    head = f"{'svo angle':>10} {'D_risk %':>9} {'collision %':>12} {'psi_a':>7} {'psi_t':>7}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['svo_angle']:>10} {r['danger_pct']:>9.2f} {r['collision_pct']:>12.2f} "
                     f"{r['psi_a']:>7.3f} {r['psi_t']:>7.3f}")
    return "\n".join(lines)


def _sweep(args, th: RiskThresholds, out: Path) -> List[dict]:
    if not (args.checkpoint and args.catalog):
        raise UsageError("an SVO sweep needs --checkpoint and --catalog to regenerate episodes")
    policy, disc, cfg = _checkpoint(args.checkpoint)
    catalog = _load_catalog(args.catalog)
    _check_catalog(catalog, cfg, args.catalog)
    expert = ExpertBuffer.from_catalog(catalog, cfg.adversary_role, cfg.n_vehicles)
    seed = cfg.seed if args.seed is None else args.seed
    angles = SWEEP_ANGLES if args.svo_angle in (None, "sweep") else tuple(a.strip() for a in args.svo_angle.split(","))
    rows = []
    for angle in angles:
        acfg = cfg.replace(**_svo_overrides(angle), seed=seed, workers=1 if args.deterministic else cfg.workers)
        net = policy
        if args.finetune_iterations > 0:
            arts = train(acfg.replace(iterations=args.finetune_iterations, disc_pretrain_steps=0), catalog,
                         expert, init={"policy": policy, "disc": disc})
            net = arts.policy
        traces = generate_episodes(net, catalog, acfg, args.n_episodes, seed, expert.actions, False, acfg.svo())
        rep = dangerousness([episode_risk(t, args.dt, f"{angle}:{i}") for i, t in enumerate(traces)], th,
                            aggregation=args.aggregation)
        rows.append({"svo_angle": angle if angle == "none" else f"{float(angle):g}", **rep.aggregate()})
    path = out / "svo_sweep.csv"
    with path.open("w", newline="") as fh:
        keys = ["svo_angle", "d_risk", "danger_pct", "c_coll", "collision_pct", "jerk", "smoothness", "psi_a",
                "psi_t", "n_episodes"]
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], (str, int)) else repr(float(r[k])) for k in keys])
    (out / "svo_sweep.txt").write_text(_format_table(rows) + "\n")
    return rows


def cmd_evaluate(args) -> int:
    started = time.time()
    th = _thresholds(args)
    out = _out_dir(args)
    outputs: List[Path] = []
    summary: dict = {"thresholds": th.to_dict()}
    if args.traces:
        traces = load_traces(args.traces)
        rep = dangerousness([episode_risk(t, args.dt) for t in traces], th, aggregation=args.aggregation)
        rep.write_json(out / "risk_report.json")
        rep.write_csv(out / "risk_report.csv")
        outputs += [out / "risk_report.json", out / "risk_report.csv"]
        summary["report"] = rep.aggregate()
        print(json.dumps(rep.aggregate(), sort_keys=True))
    elif not args.checkpoint:
        raise UsageError("evaluate needs --traces, or --checkpoint with --catalog for an SVO sweep")
    if args.checkpoint:
        rows = _sweep(args, th, out)
        outputs += [out / "svo_sweep.csv", out / "svo_sweep.txt"]
        summary["sweep"] = rows
        print(_format_table(rows))
    _manifest(out, "evaluate", {"aggregation": args.aggregation, "dt": args.dt, "svo_angle": args.svo_angle,
                                "finetune_iterations": args.finetune_iterations, "n_episodes": args.n_episodes},
              {"traces": args.traces, "thresholds": args.thresholds, "catalog": args.catalog,
               "checkpoint": args.checkpoint}, outputs, {"seed": args.seed}, summary, started)
    return EXIT_OK


def _read_rows(path) -> List[dict]:
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not rows:
        raise UsageError(f"{path}: no data rows to plot")
    return rows


def cmd_plot(args) -> int:
    started = time.time()
    out = _out_dir(args)
    written = []
    for src in args.inputs:
        rows = _read_rows(src)
        if "mean_adv_reward" in rows[0]:
            text = reward_curve_svg(rows, title=Path(src).stem)
        elif "role" in rows[0]:
            text = trace_svg(trace_series(EpisodeTrace.read_csv(src)), title=Path(src).stem)
        else:
            raise UsageError(f"{src}: neither a metrics CSV nor an episode trace")
        path = out / (Path(src).stem + ".svg")
        path.write_text(text)
        written.append(path)
    print("\n".join(str(p) for p in written))
    _manifest(out, "plot", {}, {f"input{i}": p for i, p in enumerate(args.inputs)}, written, {},
              {"plots": len(written)}, started)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcgen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lcgen {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help=f"JSON config (bare names are looked up in ${CONFIG_DIR_ENV})")
        sp.add_argument("--deterministic", action="store_true", help="single worker, reproducible outputs")
        sp.add_argument("--workers", type=int)
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("mine", help="extract lane-change scenarios from a trajectory CSV")
    sp.add_argument("trajectories")
    sp.add_argument("lane_map")
    sp.add_argument("--schema", choices=("default", "ngsim"), default="default")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("calibrate", help="risk thresholds from expert (logged) motion")
    sp.add_argument("catalog")
    sp.add_argument("--role", choices=("LF", "LB", "RF", "RB"))
    sp.add_argument("--q-lo", type=float, default=0.75)
    sp.add_argument("--q-hi", type=float, default=0.95)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("train", help="train the adversary policy")
    sp.add_argument("catalog")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--svo-angle", help="fixed SVO angle in degrees, or 'none'")
    sp.add_argument("--verbose", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="roll out a trained adversary")
    sp.add_argument("checkpoint")
    sp.add_argument("catalog")
    sp.add_argument("--n-episodes", type=int, default=10)
    sp.add_argument("--greedy", action="store_true", help="use mean actions instead of sampling")
    sp.add_argument("--svo-angle", help="SVO angle for the reward columns")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="dangerousness report and optional SVO-angle sweep")
    sp.add_argument("--traces", help="directory of episode_*.csv traces")
    sp.add_argument("--thresholds", help="thresholds JSON from 'calibrate'")
    sp.add_argument("--catalog", help="expert catalog (calibration and sweep scenarios)")
    sp.add_argument("--checkpoint", help="trained checkpoint; enables the SVO sweep")
    sp.add_argument("--svo-angle", help="comma-separated angles (degrees or 'none'); default sweep: "
                                        + ",".join(SWEEP_ANGLES))
    sp.add_argument("--finetune-iterations", type=int, default=0,
                    help="per-angle fine-tuning iterations before regenerating")
    sp.add_argument("--n-episodes", type=int, default=10)
    sp.add_argument("--aggregation", choices=("mean", "median"), default="mean")
    sp.add_argument("--dt", type=float, default=DEFAULT_DT)
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="SVG of a metrics CSV or an episode trace")
    sp.add_argument("inputs", nargs="+")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (CheckpointError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (IngestError, ConfigError, RiskError, UsageError, EnvError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
