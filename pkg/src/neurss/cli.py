"""Command-line front end.

All subcommands take --config <json>; keys mirror the corresponding dataclass
configs one-to-one.  Numeric outputs are CSV, heightmaps NRGD, checkpoints
NRSS.  Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline as pl
from .geometry import write_trajectory_csv
from .renderer import RenderConfig
from .simulator import (SurveyPlan, Terrain, TerrainFeature, generate_survey,
                        load_survey, save_survey, terrain_preset)
from .slam import RansacConfig
from .surface import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainData, build_modules, train


class ConfigError(Exception):
    pass


def _load_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _build(cls, raw: dict | None, **extra):
    raw = dict(raw or {})
    raw.update(extra)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {cls.__name__}: {e}") from e


def _terrain_from_config(spec) -> Terrain:
    if isinstance(spec, str):
        try:
            return terrain_preset(spec)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if not isinstance(spec, dict):
        raise ConfigError("terrain must be a preset name or an object")
    try:
        features = [TerrainFeature(f["amplitude"], tuple(f["center"]),
                                   f["sx"], f["sy"])
                    for f in spec.get("features", [])]
        return Terrain(spec["base_depth"], features,
                       domain_half_extent=spec.get("domain_half_extent", 100.0))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad terrain: {e}") from e


def _pipeline_config(cfg: dict) -> pl.PipelineConfig:
    sub = {k: cfg.get(k) for k in ("train", "render", "ransac") if k in cfg}
    rest = {k: v for k, v in cfg.items() if k not in sub}
    return _build(pl.PipelineConfig, rest,
                  train=_build(TrainConfig, sub.get("train")),
                  render=_build(RenderConfig, sub.get("render")),
                  ransac=_build(RansacConfig, sub.get("ransac")))


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required config key {key!r}")
    return cfg[key]


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(cfg: dict) -> None:
    terrain = _terrain_from_config(cfg.get("terrain", "complex"))
    plan = _build(SurveyPlan, cfg.get("plan"))
    if "seed" in cfg:
        plan = dataclasses.replace(plan, seed=int(cfg["seed"]))
    out = Path(_require(cfg, "out"))
    survey = generate_survey(terrain, plan)
    out.mkdir(parents=True, exist_ok=True)
    save_survey(survey, out)


def cmd_train(cfg: dict) -> None:
    survey = load_survey(_require(cfg, "survey"))
    tcfg = _build(TrainConfig, cfg.get("train"))
    rcfg = _build(RenderConfig, cfg.get("render"))
    data = TrainData.from_survey(survey)
    torch.manual_seed(tcfg.seed)   # module init draws from the global torch RNG
    modules = build_modules(data, rcfg, n_layers=int(cfg.get("n_layers", 5)),
                            hidden=int(cfg.get("hidden", 128)))
    train(modules, data, tcfg, rcfg)
    save_checkpoint(_require(cfg, "out"), modules.surface, modules.beam,
                    modules.reflectivity, modules.gains)


def cmd_slam(cfg: dict) -> None:
    survey = load_survey(_require(cfg, "survey"))
    pcfg = _pipeline_config(cfg.get("pipeline", {}))
    surface = None
    if "checkpoint" in cfg:
        surface, _, _, _ = load_checkpoint(cfg["checkpoint"])
    poses, closures, audits = pl.slam_pass(survey, list(survey.dr_trajectory),
                                           surface, pcfg,
                                           seed=pcfg.ransac.seed)
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "trajectory.csv",
                         [(i, float(survey.times[i]), p)
                          for i, p in enumerate(poses)])
    _write_rows(out / "closures.csv",
                ["index_a", "index_b", "dx", "dy", "dyaw", "ratio"],
                [[lc.index_a, lc.index_b, *lc.relative, lc.ratio]
                 for lc in closures])
    _write_rows(out / "closure_audit.csv",
                ["submap_a", "submap_b", "n_landmarks", "accepted", "ratio"],
                [[a.pair[0], a.pair[1], a.n_landmarks, int(a.accepted), a.ratio]
                 for a in audits])


def cmd_run(cfg: dict) -> None:
    survey = load_survey(_require(cfg, "survey"))
    pcfg = _pipeline_config(cfg.get("pipeline", {}))
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    result = pl.run(survey, pcfg)
    for j, traj in enumerate(result.trajectories):
        write_trajectory_csv(out / f"trajectory_{j}.csv",
                             [(i, float(survey.times[i]), p)
                              for i, p in enumerate(traj)])
    for j, surf in enumerate(result.surfaces):
        ref = result.trajectories[min(j, len(result.trajectories) - 1)] \
            if result.trajectories else survey.dr_trajectory
        pl.export_height_grid(out / f"height_{j}.grid", surf, ref,
                              survey.plan.slant_range_max)
    _write_rows(out / "closures.csv",
                ["iteration", "index_a", "index_b", "dx", "dy", "dyaw", "ratio"],
                [[j, lc.index_a, lc.index_b, *lc.relative, lc.ratio]
                 for j, lcs in enumerate(result.closures) for lc in lcs])
    _write_rows(out / "losses.csv",
                ["phase", "epoch", "height_loss", "intensity_loss"],
                [[j, e, rep.height_losses[e], rep.intensity_losses[e]]
                 for j, rep in enumerate(result.train_reports)
                 for e in range(rep.epochs_run)])
    save_checkpoint(out / "surface.nrss", result.modules.surface,
                    result.modules.beam, result.modules.reflectivity,
                    result.modules.gains)


def cmd_eval(cfg: dict) -> None:
    survey = load_survey(_require(cfg, "survey"))
    pcfg = _pipeline_config(cfg.get("pipeline", {}))
    out = Path(_require(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    gt = survey.gt_trajectory
    rows = [["dr", pl.compute_ate(survey.dr_trajectory, gt),
             pl.compute_rte(survey.dr_trajectory, gt)]]
    from .geometry import read_trajectory_csv
    for name in cfg.get("trajectories", []):
        poses = [p for _, _, p in read_trajectory_csv(name)]
        rows.append([name, pl.compute_ate(poses, gt), pl.compute_rte(poses, gt)])
    _write_rows(out / "metrics.csv", ["trajectory", "ate", "rte"], rows)
    if cfg.get("sweep", False):
        surface = None
        if "checkpoint" in cfg:
            surface, _, _, _ = load_checkpoint(cfg["checkpoint"])
        table = pl.sweep_accept_threshold(survey, list(survey.dr_trajectory),
                                          surface, pcfg)
        _write_rows(out / "sweep.csv", ["threshold", "n_accepted", "rte"],
                    [[r["threshold"], r["n_accepted"], r["rte"]] for r in table])


_COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "slam": cmd_slam,
             "run": cmd_run, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="neurss",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON config")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
