"""Joint objective and training loop.

Per window the objective sums, over its L frames, the reconstruction NLL, the
beta-weighted posterior/prior KL and the alpha-weighted Huber loss on the
cumulative outcome. Batches average over windows.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from blink.baselines import FrameAE, GRUBaseline, build_model
from blink.dataset import Episode, window_at
from blink.rssm import CategoricalBelief, ModelConfig, WorldModel, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 10.0
    beta: float = 0.3
    L: int = 50
    batch_size: int = 16
    lr: float = 3e-4
    adam_eps: float = 1e-5
    grad_clip: float = 100.0
    epochs: int = 10
    seed: int = 0
    kl_mix: float = 0.8
    huber_delta: float = 1.0
    windows_per_episode: int = 1
    # validation rollouts are truncated like test rollouts
    max_eval_len: int = 600

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.L < 2:
            raise ValueError("window length L must be >= 2")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if not 0.0 <= self.kl_mix <= 1.0:
            raise ValueError("kl_mix must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def huber(pred, target, delta: float = 1.0):
    """0.5 e^2 inside |e| <= delta, delta (|e| - delta/2) outside; e = pred - target."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        e = torch.as_tensor(pred) - torch.as_tensor(target)
        a = e.abs()
        return torch.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(e)
    out = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _kl(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(p_logits, -1)
    logq = torch.log_softmax(q_logits, -1)
    return (logp.exp() * (logp - logq)).sum(-1).sum(-1)


def kl_categorical(post: CategoricalBelief, prior: CategoricalBelief, mix: float = 0.8) -> torch.Tensor:
    """Balanced KL(post || prior), summed over latent groups.

    ``mix`` of the gradient trains the prior toward a frozen posterior, the rest
    regularizes the posterior toward a frozen prior. The value equals plain KL.
    """
    pl, ql = post.logits, prior.logits
    lhs = _kl(pl.detach(), ql)
    rhs = _kl(pl, ql.detach())
    return mix * lhs + (1.0 - mix) * rhs


def loss_joint(recon_nll, kl, outcome_loss, cfg: TrainConfig):
    for name, v in (("recon", recon_nll), ("kl", kl), ("outcome", outcome_loss)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite {name} component: {val}")
    return recon_nll + cfg.beta * kl + cfg.alpha * outcome_loss


def recon_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian NLL per frame without the constant term."""
    return 0.5 * ((pred - target) ** 2).flatten(-3).sum(-1)


def window_losses(model: nn.Module, obs: torch.Tensor, actions: torch.Tensor, labels: torch.Tensor,
                  cfg: TrainConfig, generator: torch.Generator | None = None,
                  fixed_z: torch.Tensor | None = None) -> dict:
    """Loss components for a (B, L, ...) batch, summed over time, averaged over B."""
    zero = obs.new_zeros(())
    if isinstance(model, WorldModel):
        out = model.observe_sequence(obs, actions, sample=True, generator=generator, fixed_z=fixed_z)
        feat = torch.cat([out["h"], out["z"]], -1)
        recon = recon_nll(model.decode(feat), obs).sum(1).mean()
        kl = kl_categorical(out["post"], out["prior"], cfg.kl_mix).sum(1).mean()
        _, cum = model.outcome(feat)
    elif isinstance(model, FrameAE):
        rec, cum = model(obs)
        recon = recon_nll(rec, obs).sum(1).mean()
        kl = zero
    elif isinstance(model, GRUBaseline):
        cum = model(obs, actions)
        recon, kl = zero, zero
    else:
        raise TypeError(f"no training objective for {type(model).__name__}")
    outcome = huber(cum, labels, cfg.huber_delta).sum(1).mean()
    total = loss_joint(recon, kl, outcome, cfg)
    return {"recon": recon, "kl": kl, "outcome": outcome, "total": total}


def make_model(model_cfg: ModelConfig, seed: int) -> nn.Module:
    torch.manual_seed(seed)
    return build_model(model_cfg)


def action_stats(episodes: Sequence[Episode]):
    acts = np.concatenate([ep.actions[1:] for ep in episodes if ep.T > 1])
    return acts.mean(0), acts.std(0)


def sample_batches(episodes: Sequence[Episode], cfg: TrainConfig, rng: np.random.Generator):
    """One epoch of (obs, actions, rel_labels) tensor batches with random window starts."""
    usable = [ep for ep in episodes if ep.T >= cfg.L]
    picks = []
    for i in rng.permutation(len(usable)):
        ep = usable[i]
        for t0 in rng.integers(0, ep.T - cfg.L + 1, size=cfg.windows_per_episode):
            picks.append((ep, int(t0)))
    for b in range(0, len(picks), cfg.batch_size):
        wins = [window_at(ep, t0, cfg.L) for ep, t0 in picks[b:b + cfg.batch_size]]
        yield (
            torch.from_numpy(np.stack([w.obs for w in wins])),
            torch.from_numpy(np.stack([w.action for w in wins])),
            torch.from_numpy(np.stack([w.rel_label for w in wins]).astype(np.float32)),
        )


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    steps: int = 0
    seconds: float = 0.0


LOG_FIELDS = ("epoch", "recon", "kl", "outcome", "total", "val_mae")


def train(model: nn.Module, train_eps: Sequence[Episode], val_eps: Sequence[Episode], cfg: TrainConfig,
          out_dir=None, max_steps: int | None = None) -> TrainResult:
    """Optimize ``model`` in place; keeps the best-on-validation weights.

    With ``out_dir`` set, writes ``checkpoint.bin`` (+ JSON sidecar),
    ``config.json`` and ``train_log.csv`` there.
    """
    from blink.evaluation import evaluate_predictor

    if not train_eps:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    gen = torch.Generator().manual_seed(cfg.seed)
    if hasattr(model, "set_action_stats"):
        model.set_action_stats(*action_stats(train_eps))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, eps=cfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = TrainResult()
    best_state = copy.deepcopy(model.state_dict())
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        sums = {k: 0.0 for k in ("recon", "kl", "outcome", "total")}
        n = 0
        for obs, act, lab in sample_batches(train_eps, cfg, rng):
            if max_steps is not None and res.steps >= max_steps:
                break
            try:
                parts = window_losses(model, obs.to(_dtype(model)), act.to(_dtype(model)),
                                      lab.to(_dtype(model)), cfg, gen)
            except NonFiniteLossError:
                model.load_state_dict(best_state)
                if out is not None:
                    _write_outputs(model, cfg, out, res)
                raise
            opt.zero_grad()
            parts["total"].backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k in sums:
                sums[k] += float(parts[k].detach())
            n += 1
            res.steps += 1
        model.eval()
        val_mae = float("nan")
        if val_eps:
            report = evaluate_predictor(model, val_eps, max_len=cfg.max_eval_len, forecast=False)
            val_mae = report["mae"]
        row = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()}, "val_mae": val_mae}
        res.history.append(row)
        log.info("epoch %d total %.4f val_mae %.4f", epoch, row["total"], val_mae)
        if not val_eps or val_mae < res.best_val_mae or res.best_epoch < 0:
            res.best_val_mae = val_mae
            res.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if max_steps is not None and res.steps >= max_steps:
            break
    model.load_state_dict(best_state)
    model.eval()
    res.seconds = time.perf_counter() - t_start
    if out is not None:
        _write_outputs(model, cfg, out, res)
    return res


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _write_outputs(model: nn.Module, cfg: TrainConfig, out: Path, res: TrainResult) -> None:
    save_checkpoint(model, model.cfg, out / "checkpoint.bin", {"train": cfg.to_dict()})
    (out / "config.json").write_text(
        json.dumps({"model": model.cfg.to_dict(), "train": cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    write_train_log(res.history, out / "train_log.csv")


def write_train_log(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
