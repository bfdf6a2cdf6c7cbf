"""Optimization loop around the per-edge ELBO, checkpoints and metrics."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .embed import EmbeddingMatrix
from .flow import FlowNumericalError
from .graphcore import Graph
from .model import GEVAE, ElboNumericalError, GraphBatch, ModelConfig, elbo
from .utils import spawn_seeds, torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    model: GEVAE
    optimizer: torch.optim.Optimizer
    step: int = 0
    skipped: int = 0
    clip: float = 5.0


def make_optimizer(model: GEVAE, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def objective(report) -> torch.Tensor:
    """Batch mean of ELBO / max(|E|, 1) (to be maximized)."""
    return report.elbo_per_edge.mean()


def train_step(state: TrainState, batch: GraphBatch, seed: int) -> dict:
    """One gradient ascent step on the mean per-edge ELBO.

    Updates ``state`` in place. Non-finite ELBOs or gradients skip the update
    and bump ``state.skipped``.
    """
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad(set_to_none=True)
    metrics = {"step": state.step, "seed": int(seed)}
    try:
        report = elbo(model, batch, generator=torch_generator(seed))
        loss = -objective(report)
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        grad_norm = torch.nn.utils.clip_grad_norm_(params, state.clip)
        ok = bool(torch.isfinite(grad_norm))
        metrics.update(report.summary())
        metrics["objective"] = float(-loss.detach())
        metrics["grad_norm"] = float(grad_norm)
    except (ElboNumericalError, FlowNumericalError) as exc:
        logger.warning("step %d: %s", state.step, exc)
        ok = False
    if ok:
        opt.step()
    else:
        state.skipped += 1
        opt.zero_grad(set_to_none=True)
        logger.warning("step %d skipped (non-finite gradient); %d skipped so far",
                       state.step, state.skipped)
    metrics["skipped"] = not ok
    state.step += 1
    return metrics


class BatchSampler:
    """Seeded random mini-batches over a fixed list of (graph, embedding)."""

    def __init__(self, graphs: Sequence[Graph], embeddings: Sequence[EmbeddingMatrix],
                 batch_size: int, seed: int):
        if len(graphs) != len(embeddings) or not graphs:
            raise ValueError("need matching, non-empty graphs and embeddings")
        self.graphs = list(graphs)
        self.embeddings = list(embeddings)
        self.batch_size = min(int(batch_size), len(self.graphs))
        self.rng = np.random.default_rng(seed)

    def next(self) -> GraphBatch:
        idx = self.rng.choice(len(self.graphs), size=self.batch_size, replace=False)
        idx.sort()
        return GraphBatch.collate([self.graphs[i] for i in idx], [self.embeddings[i] for i in idx])


class MetricsLog:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(path, state: TrainState, run_config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.config.to_dict(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "step": state.step,
        "skipped": state.skipped,
        "clip": state.clip,
        "config_hash": config_hash(run_config or state.model.config.to_dict()),
        "run_config": run_config,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, lr: float = 1e-3) -> tuple[TrainState, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = GEVAE(ModelConfig(**payload["model_config"]), seed=None)
    model.load_state_dict(payload["model_state"])
    opt = make_optimizer(model, lr)
    opt.load_state_dict(payload["optimizer_state"])
    state = TrainState(model, opt, payload["step"], payload["skipped"], payload["clip"])
    return state, payload


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def trend_ok(values: Sequence[float], window: int, start: int = 0, z: float = 3.0) -> bool:
    """Whether ``values[start:]``, smoothed by block means, is nondecreasing.

    The series is cut into consecutive blocks of ``window`` steps (a shorter
    trailing block is dropped). A block mean may fall below the best earlier
    block mean only by ``z`` standard deviations of a difference of two block
    means, with the per-step noise estimated from first differences.
    """
    v = np.asarray(values, dtype=float)[start:]
    blocks = v.size // window
    if blocks < 2:
        return True
    v = v[: blocks * window]
    means = v.reshape(blocks, window).mean(axis=1)
    noise = np.std(np.diff(v)) / np.sqrt(2.0)
    tol = z * noise * np.sqrt(2.0 / window)
    drop = np.max(np.maximum.accumulate(means) - means)
    return bool(drop <= tol)


def fit(state: TrainState, graphs: Sequence[Graph], embeddings: Sequence[EmbeddingMatrix],
        steps: int, batch_size: int, seed: int, metrics: MetricsLog | None = None,
        log_every: int = 1, callback=None) -> list[dict]:
    """Run ``steps`` training steps; returns the metrics of every step."""
    seeds = spawn_seeds(seed, ["batches", "steps"])
    sampler = BatchSampler(graphs, embeddings, batch_size, seeds["batches"])
    step_seeds = np.random.SeedSequence(seeds["steps"]).generate_state(max(steps, 1), dtype=np.uint32)
    history = []
    for k in range(steps):
        rec = train_step(state, sampler.next(), int(step_seeds[k]))
        history.append(rec)
        if metrics is not None and (k % log_every == 0 or k == steps - 1):
            metrics.append(rec)
        if callback is not None:
            callback(rec)
    return history
