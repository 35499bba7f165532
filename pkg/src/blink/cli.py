"""Command-line entry point: ``blink <command> --config run.json [flags]``.

Configuration precedence, lowest to highest: built-in defaults, the JSON
config file, the ``BLINK_SEED`` environment variable (global seed only),
command-line flags (including ``--set section.key=value``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from blink import __version__

log = logging.getLogger("blink")

COMMANDS = ("simulate", "train", "evaluate", "forecast", "analyze")

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "sim": {},
    "data": {"dir": None, "n_train": 200, "n_val": 12, "n_test": 24},
    "model": {"kind": "blink"},
    "train": {},
    "eval": {"split": "test", "max_len": 600, "zero_action_forecast": False, "n_boot": 1000,
             "baselines": ["zero", "mean"]},
    "analyze": {"length": 30, "stride": 30, "change": "mean_diff", "split_fit": "train", "split_project": "test"},
}


class CLIError(Exception):
    def __init__(self, code: str, message: str, path=None):
        super().__init__(message)
        self.code = code
        self.path = path

    def line(self) -> str:
        parts = [f"error code={self.code}"]
        if self.path is not None:
            parts.append(f"path={self.path}")
        parts.append(f"message={json.dumps(str(self))}")
        return " ".join(parts)


def _deep_update(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise CLIError("missing_config", "config file not found", p)
        try:
            _deep_update(cfg, json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise CLIError("bad_config", f"invalid JSON: {e}", p) from e
    env_seed = os.environ.get("BLINK_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as e:
            raise CLIError("bad_config", f"BLINK_SEED must be an integer, got {env_seed!r}") from e
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CLIError("bad_flag", f"--set expects section.key=value, got {item!r}")
        node = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = _parse_value(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    if args.data_dir is not None:
        cfg["data"]["dir"] = args.data_dir
    if getattr(args, "model", None):
        cfg["model"]["kind"] = args.model
    if getattr(args, "split", None):
        cfg["eval"]["split"] = args.split
    if cfg["data"]["dir"] is None:
        cfg["data"]["dir"] = str(Path(cfg["out_dir"]) / "data")
    return cfg


def write_run_json(cfg: dict, command: str, out_dir: Path, argv) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    (out_dir / f"run_{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _load_split(cfg: dict, split: str):
    from blink.dataset import load_split

    root = Path(cfg["data"]["dir"])
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise CLIError("missing_dataset", "dataset manifest not found; run `blink simulate` first", manifest)
    try:
        return load_split(root, split)
    except KeyError as e:
        raise CLIError("missing_split", str(e), manifest) from e


def _checkpoints(cfg: dict, args) -> list[Path]:
    if args.checkpoint:
        paths = [Path(p) for p in args.checkpoint]
    else:
        paths = [Path(cfg["out_dir"]) / cfg["model"]["kind"] / "checkpoint.bin"]
    for p in paths:
        if not p.exists():
            raise CLIError("missing_checkpoint", "checkpoint not found", p)
    return paths


def cmd_simulate(cfg: dict, args) -> None:
    from blink.synthetic_world import SimConfig, generate_dataset

    sim = SimConfig.from_dict({**cfg["sim"], "seed": cfg["seed"]})
    d = cfg["data"]
    manifest = generate_dataset(sim, d["n_train"], d["n_val"], d["n_test"], cfg["seed"], d["dir"])
    print(f"wrote {len(manifest)} episodes to {d['dir']} (manifest {manifest.digest()[:12]})")


def cmd_train(cfg: dict, args) -> None:
    from blink.rssm import ModelConfig
    from blink.training import TrainConfig, make_model, train

    train_eps = _load_split(cfg, "train")
    val_eps = _load_split(cfg, "val")
    if not train_eps:
        raise CLIError("empty_dataset", "training split is empty", cfg["data"]["dir"])
    mcfg = ModelConfig.from_dict({**cfg["model"], "obs_shape": list(train_eps[0].obs.shape[1:])})
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    model = make_model(mcfg, cfg["seed"])
    out = Path(cfg["out_dir"]) / mcfg.kind
    res = train(model, train_eps, val_eps, tcfg, out_dir=out)
    print(f"trained {mcfg.kind}: {res.steps} steps, best epoch {res.best_epoch}, "
          f"val MAE {res.best_val_mae:.4f} -> {out / 'checkpoint.bin'}")


def _evaluate_all(cfg: dict, args, forecast: bool):
    from blink.baselines import MeanPredictor, ZeroPredictor
    from blink.evaluation import evaluate_predictor
    from blink.rssm import load_checkpoint

    ckpts = _checkpoints(cfg, args)
    split = cfg["eval"]["split"]
    eps = _load_split(cfg, split)
    max_len = cfg["eval"]["max_len"]
    results = []
    for name in cfg["eval"].get("baselines", []):
        if name == "zero":
            pred = ZeroPredictor()
        elif name == "mean":
            pred = MeanPredictor.fit([ep.total_kills for ep in _load_split(cfg, "train")])
        else:
            raise CLIError("bad_config", f"unknown constant baseline {name!r}")
        results.append((name, cfg["seed"], evaluate_predictor(pred, eps, max_len, forecast=forecast)))
    for path in ckpts:
        model, sidecar = load_checkpoint(path)
        seed = sidecar.get("train", {}).get("seed", cfg["seed"])
        if cfg["eval"].get("zero_action_forecast"):
            from blink.evaluation import forecast_fmae30

            rep = evaluate_predictor(model, eps, max_len, forecast=False)
            rep["fmae30"] = forecast_fmae30(model, eps, max_len=max_len, zero_actions=True) if forecast else None
        else:
            rep = evaluate_predictor(model, eps, max_len, forecast=forecast)
        results.append((model.cfg.kind, seed, rep))
    return results


def cmd_evaluate(cfg: dict, args) -> None:
    from blink.evaluation import bootstrap_report, write_metrics_csv, write_per_track_csv, write_report_csv

    results = _evaluate_all(cfg, args, forecast=True)
    out = Path(cfg["out_dir"])
    write_metrics_csv([(n, s, r) for n, s, r in results], out / "metrics.csv")
    write_per_track_csv([(n, s, r["per_track"]) for n, s, r in results], out / "per_track.csv")
    by_model: dict = {}
    for n, s, r in results:
        by_model.setdefault(n, []).append(r["per_track"])
    reports = {n: bootstrap_report(tr, n_boot=cfg["eval"]["n_boot"], seed=cfg["seed"]) for n, tr in by_model.items()}
    write_report_csv(reports, out / "metrics_summary.csv")
    for n, s, r in results:
        fm = "NA" if r["fmae30"] is None else f"{r['fmae30']:.3f}"
        print(f"{n:16s} seed={s} MAE={r['mae']:.3f} RMSE={r['rmse']:.3f} r={r['pearson']:.3f} "
              f"within1={r['within_pm1']:.1f}% F-MAE30={fm}")


def cmd_forecast(cfg: dict, args) -> None:
    from blink.baselines import MeanPredictor, ZeroPredictor
    from blink.evaluation import forecast_errors, forecast_fmae30
    from blink.rssm import load_checkpoint

    ckpts = _checkpoints(cfg, args)
    eps = _load_split(cfg, cfg["eval"]["split"])
    max_len = cfg["eval"]["max_len"]
    zero = bool(cfg["eval"].get("zero_action_forecast"))
    rows = []
    preds = [("zero", cfg["seed"], ZeroPredictor()),
             ("mean", cfg["seed"], MeanPredictor.fit([ep.total_kills for ep in _load_split(cfg, "train")]))]
    for path in ckpts:
        model, sidecar = load_checkpoint(path)
        preds.append((model.cfg.kind, sidecar.get("train", {}).get("seed", cfg["seed"]), model))
    for name, seed, m in preds:
        errs = [forecast_errors(m, ep, None, max_len=max_len, zero_actions=zero) for ep in eps]
        n = sum(len(e) for e in errs if e is not None)
        rows.append((name, seed, forecast_fmae30(m, eps, max_len=max_len, zero_actions=zero), n))
    out = Path(cfg["out_dir"])
    with open(out / "forecast_metrics.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["model", "seed", "fmae30", "n_starts", "zero_actions"])
        for name, seed, v, n in rows:
            w.writerow([name, seed, "NA" if v is None else repr(float(v)), n, int(zero)])
    for name, seed, v, n in rows:
        print(f"{name:16s} seed={seed} F-MAE30={'NA' if v is None else f'{v:.4f}'} over {n} starts")


def cmd_analyze(cfg: dict, args) -> None:
    from blink import behavior_analysis as ba
    from blink.rssm import WorldModel, load_checkpoint

    path = _checkpoints(cfg, args)[0]
    model, _ = load_checkpoint(path)
    if not isinstance(model, WorldModel):
        raise CLIError("bad_checkpoint", "behavior analysis needs a world-model checkpoint", path)
    a = cfg["analyze"]
    fit_eps = _load_split(cfg, a["split_fit"])
    proj_eps = _load_split(cfg, a["split_project"])
    res = ba.analyze(model, fit_eps, proj_eps, a["length"], a["stride"], cfg["seed"], a["change"],
                     max_len=cfg["eval"]["max_len"])
    out = Path(cfg["out_dir"]) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    names = res.modes.cluster_names
    with open(out / "modes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["split", "track", "window", "cluster", "mode", "outcome", "speed", "true_mode"])
        for split, wins, labels in ((a["split_fit"], res.train_windows, res.modes.labels),
                                    (a["split_project"], res.projection.windows, res.projection.labels)):
            for win, c in zip(wins, labels):
                w.writerow([split, win.track_id, win.window_index, int(c), names[int(c)],
                            repr(win.window_outcome), repr(win.window_speed),
                            "" if win.true_mode is None else win.true_mode])
    with open(out / "cluster_stats.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["cluster", "mode", "mean_outcome", "mean_speed", "fraction"])
        for c in range(len(res.modes.centroids)):
            w.writerow([c, names[c], repr(float(res.modes.mean_outcome[c])), repr(float(res.modes.mean_speed[c])),
                        repr(float(res.modes.fraction[c]))])
    with open(out / "transition_matrix.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["from", *ba.MODE_LABELS, "count", "uniform_fill"])
        for i, lab in enumerate(ba.MODE_LABELS):
            w.writerow([lab, *(repr(float(x)) for x in res.transition[i]), int(res.transition_counts[i].sum()),
                        int(res.empty_rows[i])])
    ba.plot_embedding(res, out / "embedding.png")
    ba.plot_transitions(res.transition, out / "transitions.png")
    for c in range(len(res.modes.centroids)):
        print(f"{names[c]:14s} outcome={res.modes.mean_outcome[c]:.3f} speed={res.modes.mean_speed[c]:.2f} "
              f"fraction={100 * res.modes.fraction[c]:.1f}%")


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blink", description="NK cytotoxicity world model toolkit")
    p.add_argument("--version", action="version", version=f"blink {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--data-dir")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (JSON-parsed); repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--model", choices=["blink", "frame_ae", "gru_regress", "gru_monotone",
                                                "blink_no_action"])
        if name in ("evaluate", "forecast", "analyze"):
            sp.add_argument("--checkpoint", nargs="+")
            sp.add_argument("--split", choices=["train", "val", "test"])
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _seed_everything(cfg["seed"])
        out = Path(cfg["out_dir"])
        write_run_json(cfg, args.command, out, argv)
        HANDLERS[args.command](cfg, args)
    except CLIError as e:
        print(e.line(), file=sys.stderr)
        return 2
    except (ValueError, TypeError) as e:
        print(CLIError("invalid", str(e)).line(), file=sys.stderr)
        return 2
    except OSError as e:
        print(CLIError("io", str(e), getattr(e, "filename", None)).line(), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
