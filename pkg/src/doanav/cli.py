"""Command-line entry points: train, eval, ablate, diagnose.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as mx
from . import model as M
from .autodiff import Tensor
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .sim import NavEnv
from .trainer import build_worlds, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SNAPSHOT = "config.resolved.json"
log = logging.getLogger("doanav")


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override) if override else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(path, cfg: ExperimentConfig) -> M.ModelParams:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return M.ModelParams.load(p, expect=cfg.model)


def _split_rows(records) -> dict:
    rep = mx.MetricsReport.from_records(records)
    return {"all": {"sr": rep.sr, "spl": rep.spl, "sae": rep.sae, "n": rep.n_episodes}, "long": rep.long}


def run_eval(params: M.ModelParams, cfg: ExperimentConfig, feature_log=None) -> tuple:
    """Evaluate once per eval seed on the held-out worlds; returns (records, per-seed summaries)."""
    if cfg.eval.n_episodes <= 0:
        raise mx.EmptyInputError("eval.n_episodes is 0; nothing to evaluate")
    worlds = build_worlds(cfg.eval.held_out_world_seeds, cfg.world)
    records, per_seed = [], []
    for seed in cfg.eval.seeds:
        recs = evaluate(params, worlds, cfg.eval.n_episodes, seed, cfg.eval.greedy, cfg.train.targets, feature_log)
        per_seed.append({"seed": seed, **_split_rows(recs)})
        records.extend(recs)
    return records, per_seed


def aggregate(per_seed: list) -> dict:
    out = {}
    for split in ("all", "long"):
        rows = [p[split] for p in per_seed if p[split] is not None]
        if not rows:
            out[split] = None
            continue
        out[split] = {k: {"mean": float(np.mean([r[k] for r in rows])), "std": float(np.std([r[k] for r in rows]))}
                      for k in ("sr", "spl", "sae")}
    return out


# -- commands ------------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _out_dir(cfg, args.out)
    save_config(cfg, out / SNAPSHOT)
    res = train(cfg.train, cfg.model, cfg.world, out)
    print(f"trained {res.episodes} episodes / {res.env_steps} steps; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params = _load_checkpoint(args.checkpoint, cfg)
    out = _out_dir(cfg, args.out)
    save_config(cfg, out / SNAPSHOT)
    records, per_seed = run_eval(params, cfg)
    mx.write_records(records, out / "records.jsonl")
    summary = {"seeds": cfg.eval.seeds, "per_seed": per_seed, "aggregate": aggregate(per_seed),
               "pooled": mx.MetricsReport.from_records(records).to_dict()}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "metric", "mean", "std"])
        for split, vals in summary["aggregate"].items():
            for k, ms in (vals or {}).items():
                w.writerow([split, k, repr(ms["mean"]), repr(ms["std"])])
    agg = summary["aggregate"]["all"]
    print(f"SR {agg['sr']['mean']:.3f}±{agg['sr']['std']:.3f}  SPL {agg['spl']['mean']:.3f}  "
          f"SAE {agg['sae']['mean']:.3f}  ({len(records)} episodes)")
    return EXIT_OK


def parse_grid(spec: str) -> list:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    if not names:
        raise ConfigError("empty --grid")
    bad = [n for n in names if n not in M.TOGGLES or not isinstance(getattr(M.ModelConfig(), n), bool)]
    if bad:
        raise ConfigError(f"invalid toggle(s) in --grid: {bad}; boolean toggles are {list(M.TOGGLES)}")
    if len(set(names)) != len(names):
        raise ConfigError("duplicate toggle in --grid")
    return names


ABLATION_METRICS = ("sr_all", "spl_all", "sae_all", "sr_long", "spl_long", "sae_long")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    names = parse_grid(args.grid)
    out = _out_dir(cfg, args.out)
    save_config(cfg, out / SNAPSHOT)
    rows = []
    for combo in itertools.product([False, True], repeat=len(names)):
        toggles = dict(zip(names, combo))
        run_cfg = cfg.with_model(**toggles)
        tag = "_".join(f"{n}{int(v)}" for n, v in toggles.items())
        run_dir = out / f"run_{tag}"
        run_cfg.output_dir = str(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(run_cfg, run_dir / SNAPSHOT)
        res = train(run_cfg.train, run_cfg.model, run_cfg.world, run_dir)
        _, per_seed = run_eval(res.best_params, run_cfg)
        agg = aggregate(per_seed)
        row = {**{n: int(v) for n, v in toggles.items()}}
        for split in ("all", "long"):
            for k in ("sr", "spl", "sae"):
                row[f"{k}_{split}"] = agg[split][k]["mean"] if agg[split] else float("nan")
        rows.append(row)
        log.info("ablation %s: SR %.3f", tag, row["sr_all"])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*names, *ABLATION_METRICS])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return EXIT_OK


def gv_vectors(params: M.ModelParams, samples: list) -> np.ndarray:
    """View-adaptive graph for logged (observation, target) pairs."""
    cfg = params.cfg
    oi = M.object_index_embedding(params)
    rows = []
    for obs, target in samples:
        mask = obs.conf > cfg.conf_threshold if cfg.use_cf else obs.conf > 0.0
        q = M.image_query(Tensor(obs.image), oi, target)
        rows.append(M.view_adaptive_graph(q, Tensor(obs.detections), mask, params).data[:, 0])
    return np.array(rows)


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    params = _load_checkpoint(args.checkpoint, cfg)
    out = _out_dir(cfg, args.out)
    save_config(cfg, out / SNAPSHOT)
    features: dict = {}
    records, _ = run_eval(params, cfg, feature_log=features)
    mx.write_records(records, out / "records.jsonl")
    dist = mx.attention_distribution(records)
    with open(out / "attention.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "mean_attention"])
        for q, v in enumerate(dist):
            w.writerow([q, repr(float(v))])
    bias = mx.bias_ratio(dist) if dist.size and dist.max() > 0 else None
    report = {"bias": bias.to_dict() if bias else None, "n_steps": sum(len(r.per_step_attention) for r in records),
              "gcn_baseline": cfg.model.use_gcn_baseline}
    (out / "bias.json").write_text(json.dumps(report, indent=2) + "\n")
    # G_v samples are recomputed from the first logged step of each of the first episodes
    worlds = {w.seed: w for w in build_worlds(cfg.eval.held_out_world_seeds, cfg.world)}
    samples = []
    for r in records[: args.gv_samples]:
        env = NavEnv(worlds[r.world_seed])
        _, obs = env.reset(r.target, r.seed)
        samples.append((obs, r.target))
    mx.export_graphs(params, out, gv_vectors(params, samples) if samples and not cfg.model.use_gcn_baseline else None)
    with open(out / "feature_entropy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "n_samples", "knn_entropy"])
        for q in sorted(features):
            x = np.array(features[q])
            h = mx.knn_entropy(x, 3) if len(x) > 3 and not np.all(x == x[0]) else float("nan")
            w.writerow([q, len(x), repr(float(h))])
    if bias:
        print(f"bias ratio {bias.ratio:.3f}  normalized entropy {bias.normalized_entropy:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doanav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy from a config")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out worlds")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every combination of boolean toggles")
    a.add_argument("config")
    a.add_argument("--grid", required=True, help="comma-separated toggles, e.g. use_uaoa,use_uaia,use_abed")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="attention-bias report and graph exports")
    d.add_argument("checkpoint")
    d.add_argument("config")
    d.add_argument("--out", default=None)
    d.add_argument("--gv-samples", type=int, default=64)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, M.CheckpointError, mx.EmptyInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
