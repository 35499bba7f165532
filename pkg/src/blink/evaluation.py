"""Track-level evaluation: sequential rollout, final-outcome metrics and
observation-free forecast error."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from blink.baselines import MONOTONE_KINDS, MeanPredictor, ZeroPredictor
from blink.dataset import Episode

log = logging.getLogger(__name__)

MAX_EVAL_LEN = 600
FORECAST_HORIZON = 30
METRIC_NAMES = ("mae", "rmse", "pearson", "within_pm1", "fmae30")


def _pair(preds, trues):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(trues, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("metrics need at least one track")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    return p, t


def mae(preds, trues) -> float:
    p, t = _pair(preds, trues)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, trues) -> float:
    p, t = _pair(preds, trues)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def pearson(preds, trues) -> float:
    """Pearson correlation; 0 when either side has zero variance."""
    p, t = _pair(preds, trues)
    dp, dt = p - p.mean(), t - t.mean()
    if not np.any(dp) or not np.any(dt):
        return 0.0
    return float(np.sum(dp * dt) / np.sqrt(np.sum(dp * dp) * np.sum(dt * dt)))


def within_pm1(preds, trues) -> float:
    """Percentage of tracks with |pred - true| <= 1 (closed, unrounded)."""
    p, t = _pair(preds, trues)
    return float(100.0 * np.mean(np.abs(p - t) <= 1.0))


def _kind(model) -> str:
    return getattr(model, "kind", None) or model.cfg.kind


def _tensors(model, ep: Episode, T: int):
    dtype = next(model.parameters()).dtype
    return (torch.from_numpy(ep.obs[:T]).to(dtype), torch.from_numpy(ep.actions[:T]).to(dtype))


def rollout_track(model, ep: Episode, max_len: int = MAX_EVAL_LEN) -> np.ndarray:
    """Filtered cumulative prediction from the track start, truncated to ``max_len``."""
    T = min(ep.T, max_len)
    if isinstance(model, (ZeroPredictor, MeanPredictor)):
        return model.predict_series(T)
    obs, act = _tensors(model, ep, T)
    was_training = model.training
    model.eval()
    cum, _ = model.filter_track(obs, act)
    model.train(was_training)
    cum = cum.double().numpy()
    if _kind(model) in MONOTONE_KINDS:
        if cum[0] != 0.0 or np.any(np.diff(cum) < 0):
            raise AssertionError(f"{_kind(model)} produced a non-monotone series on {ep.id}")
    return cum


def forecast_starts(T: int, horizon: int = FORECAST_HORIZON, every: int = FORECAST_HORIZON) -> list[int]:
    """Grid of forecast origins t_f = every, 2*every, ... leaving ``horizon`` frames after each."""
    return list(range(every, T - horizon, every))


def forecast_errors(model, ep: Episode, starts=None, horizon: int = FORECAST_HORIZON,
                    max_len: int = MAX_EVAL_LEN, zero_actions: bool = False):
    """Per-start mean |pred - true| over a ``horizon``-step rollout, or None if
    the model has no forecast mode."""
    if not getattr(model, "can_forecast", False):
        return None
    T = min(ep.T, max_len)
    starts = forecast_starts(T, horizon) if starts is None else [s for s in starts if s + horizon < T]
    if not starts:
        return np.zeros(0)
    y = ep.cum_kills[:T].astype(np.float64)
    truth = np.stack([y[s + 1:s + 1 + horizon] - y[s] for s in starts])
    if isinstance(model, (ZeroPredictor, MeanPredictor)):
        pred = model.forecast_series(T, starts, horizon)
    else:
        obs, act = _tensors(model, ep, T)
        if zero_actions:
            act = torch.zeros_like(act)
        model.eval()
        pred = model.forecast(obs, act, starts, horizon).double().numpy()
    return np.abs(pred - truth).mean(axis=1)


def forecast_fmae30(model, episodes: Sequence[Episode], horizon: int = FORECAST_HORIZON,
                    max_len: int = MAX_EVAL_LEN, zero_actions: bool = False):
    """Mean forecast error pooled over all starts of all episodes."""
    errs = [forecast_errors(model, ep, None, horizon, max_len, zero_actions) for ep in episodes]
    if any(e is None for e in errs):
        return None
    pooled = np.concatenate(errs) if errs else np.zeros(0)
    return float(pooled.mean()) if pooled.size else float("nan")


@dataclass
class TrackResult:
    id: str
    final_pred: float
    final_true: float
    abs_err: float
    forecast_errs: np.ndarray | None = None


def evaluate_predictor(model, episodes: Sequence[Episode], max_len: int = MAX_EVAL_LEN,
                       forecast: bool = True) -> dict:
    """Per-track results plus the aggregate metrics for one trained model."""
    tracks = []
    for ep in episodes:
        cum = rollout_track(model, ep, max_len)
        T = len(cum)
        true_final = float(ep.cum_kills[T - 1] - ep.cum_kills[0])
        f = forecast_errors(model, ep, None, FORECAST_HORIZON, max_len) if forecast else None
        tracks.append(TrackResult(ep.id, float(cum[-1]), true_final, abs(float(cum[-1]) - true_final), f))
    return {"per_track": tracks, **aggregate(tracks, with_forecast=forecast)}


def aggregate(tracks: Sequence[TrackResult], with_forecast: bool = True) -> dict:
    p = [t.final_pred for t in tracks]
    y = [t.final_true for t in tracks]
    out = {"mae": mae(p, y), "rmse": rmse(p, y), "pearson": pearson(p, y), "within_pm1": within_pm1(p, y)}
    if with_forecast and tracks and all(t.forecast_errs is not None for t in tracks):
        pooled = np.concatenate([t.forecast_errs for t in tracks])
        out["fmae30"] = float(pooled.mean()) if pooled.size else float("nan")
    else:
        out["fmae30"] = None
    return out


@dataclass
class MetricReport:
    """Metrics as mean and population std over seeds, plus a track-bootstrap std."""

    per_seed: list
    mean: dict
    std: dict
    bootstrap_std: dict
    per_track: list = field(default_factory=list)


def bootstrap_report(per_seed_tracks: Sequence[Sequence[TrackResult]], n_boot: int = 1000,
                     seed: int = 0) -> MetricReport:
    """Aggregate per-track results from several training seeds."""
    per_seed = [aggregate(tr) for tr in per_seed_tracks]
    mean, std = {}, {}
    for k in METRIC_NAMES:
        vals = [m[k] for m in per_seed if m[k] is not None]
        mean[k] = float(np.mean(vals)) if vals else None
        std[k] = float(np.std(vals)) if vals else None
    rng = np.random.Generator(np.random.Philox(seed))
    boot: dict[str, list] = {k: [] for k in METRIC_NAMES}
    for tracks in per_seed_tracks:
        n = len(tracks)
        if n == 0:
            continue
        for _ in range(n_boot):
            sample = [tracks[i] for i in rng.integers(0, n, size=n)]
            m = aggregate(sample)
            for k in METRIC_NAMES:
                if m[k] is not None:
                    boot[k].append(m[k])
    bstd = {k: (float(np.std(v)) if v else None) for k, v in boot.items()}
    flat = [t for tr in per_seed_tracks for t in tr]
    return MetricReport(per_seed, mean, std, bstd, flat)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    return repr(float(v))


def write_metrics_csv(rows, path) -> None:
    """``rows``: iterable of (model, seed, metrics dict)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["model", "seed", *METRIC_NAMES])
        for model, seed, m in rows:
            w.writerow([model, seed, *(_fmt(m.get(k)) for k in METRIC_NAMES)])


def write_per_track_csv(rows, path) -> None:
    """``rows``: iterable of (model, seed, [TrackResult])."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["model", "seed", "id", "final_pred", "final_true", "abs_err", "fmae30"])
        for model, seed, tracks in rows:
            for t in tracks:
                fm = None
                if t.forecast_errs is not None and len(t.forecast_errs):
                    fm = float(np.mean(t.forecast_errs))
                w.writerow([model, seed, t.id, _fmt(t.final_pred), _fmt(t.final_true), _fmt(t.abs_err), _fmt(fm)])


def write_report_csv(reports: dict, path) -> None:
    """Summary table: one row per model with seed mean/std and bootstrap std."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["model", "n_seeds"]
        for k in METRIC_NAMES:
            header += [f"{k}_mean", f"{k}_seed_std", f"{k}_boot_std"]
        w.writerow(header)
        for name, r in reports.items():
            row = [name, len(r.per_seed)]
            for k in METRIC_NAMES:
                row += [_fmt(r.mean[k]), _fmt(r.std[k]), _fmt(r.bootstrap_std[k])]
            w.writerow(row)
