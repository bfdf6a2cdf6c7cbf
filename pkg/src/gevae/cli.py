"""Command-line entry point.

Usage::

    gevae COMMAND [-c CONFIG] [--count N] [section.key=value ...]

Every command validates the configuration first, then writes under
``[run] output``::

    config.echo   effective configuration (re-runnable as is)
    INCOMPLETE    present while a command runs; removed on success
    data/         dataset edge lists and manifest
    embeddings/   embedding cache
    checkpoints/  model checkpoints
    metrics.log   training metrics, one JSON record per line
    samples/      sampled graphs as edge lists
    reports/      JSON reports
    figures/      tab-separated plot data
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dataset_params, load_config, model_config_kwargs
from .embed import EmbeddingCache, embed_dataset
from .evaluate import (
    KernelSpec,
    er_bits_per_dim,
    er_density,
    graph_statistic,
    interpolate_latents,
    is_loglik,
    ladder_tables,
    mmd,
    summarize,
)
from .graphcore import GraphDataset, er_graph, generate, load_dataset, save_dataset, write_edge_list
from .model import GEVAE, ModelConfig
from .sampler import SampleRequest, sample_graph_fast
from .training import MetricsLog, TrainState, fit, load_checkpoint, make_optimizer, save_checkpoint
from .utils import spawn_seeds

logger = logging.getLogger("gevae")

COMMANDS = ("gen-data", "embed", "train", "eval", "sample", "interpolate", "figure")
SUBSYSTEMS = ("data", "model", "train", "eval", "sample", "interpolate")
MARKER = "INCOMPLETE"
FINAL_CHECKPOINT = "final.pt"


class Run:
    """Paths, seeds and cached artifacts of one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.output
        self.seeds = spawn_seeds(cfg.run.seed, SUBSYSTEMS)
        self._dataset: GraphDataset | None = None

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- data ---------------------------------------------------------------

    def generate(self) -> GraphDataset:
        d = self.cfg.data
        if d.directory:
            return load_dataset(d.directory)
        return generate(d.kind, dataset_params(self.cfg), seed=self.seeds["data"],
                        train_fraction=d.train_fraction)

    def dataset(self) -> GraphDataset:
        """The configured dataset, reusing ``data/`` when it exists."""
        if self._dataset is None:
            local = self.out / "data"
            if (local / "manifest.json").exists():
                self._dataset = load_dataset(local)
            else:
                self._dataset = self.generate()
                save_dataset(self._dataset, local)
        return self._dataset

    def embeddings(self, graphs):
        cache = EmbeddingCache(self.out / "embeddings")
        return embed_dataset(graphs, self.cfg.model.embed_dim, self.cfg.data.embedding, cache,
                             self.cfg.data.workers)

    # -- model --------------------------------------------------------------

    def checkpoint_path(self) -> Path:
        return self.out / "checkpoints" / FINAL_CHECKPOINT

    def load_model(self) -> tuple[GEVAE, str]:
        path = self.checkpoint_path()
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}; run 'train' first")
        state, _ = load_checkpoint(path, self.cfg.train.lr)
        state.model.eval()
        return state.model, hashlib.sha256(path.read_bytes()).hexdigest()

    def sample_sizes(self, count: int) -> list[int]:
        """Node counts for generated graphs, cycling through the test graphs."""
        ds = self.dataset()
        ref = ds.test or ds.train
        return [ref[k % len(ref)].n for k in range(count)]


def _statistics(graphs, kind: str, workers: int):
    if workers > 1 and len(graphs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(graph_statistic, graphs, [kind] * len(graphs)))
    return [graph_statistic(g, kind) for g in graphs]


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> None:
    ds = run.generate()
    save_dataset(ds, run.out / "data")
    run._dataset = ds
    sizes = [g.n for g in ds.graphs]
    _write_json(run.path("reports", "dataset.json"), {
        "meta": ds.meta, "graphs": len(ds), "train": len(ds.train), "test": len(ds.test),
        "nodes": summarize(sizes), "edges": summarize([g.num_edges for g in ds.graphs]),
    })


def cmd_embed(run: Run, args) -> None:
    ds = run.dataset()
    embs = run.embeddings(list(ds.graphs))
    _write_json(run.path("reports", "embeddings.json"), {
        "method": run.cfg.data.embedding, "dim": run.cfg.model.embed_dim, "graphs": len(embs),
        "degenerate": int(sum(e.degenerate for e in embs)),
        "sign_ambiguous": int(sum(e.sign_ambiguous for e in embs)),
    })


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    ds = run.dataset()
    graphs = ds.train
    embs = run.embeddings(graphs)
    model = GEVAE(ModelConfig(**model_config_kwargs(cfg)), seed=run.seeds["model"])
    state = TrainState(model, make_optimizer(model, cfg.train.lr), clip=cfg.train.clip)
    metrics_path = run.path("metrics.log")
    metrics_path.write_text("")
    run_config = cfg.to_dict()
    every = cfg.train.checkpoint_every

    def checkpoint(rec):
        if every and state.step % every == 0 and state.step < cfg.train.steps:
            save_checkpoint(run.path("checkpoints", f"step_{state.step:06d}.pt"), state, run_config)

    if cfg.train.steps > 0:
        fit(state, graphs, embs, cfg.train.steps, cfg.train.batch_size, run.seeds["train"],
            MetricsLog(metrics_path), cfg.train.log_every, checkpoint)
    save_checkpoint(run.path("checkpoints", FINAL_CHECKPOINT), state, run_config)


def evaluate_run(run: Run) -> dict:
    """Held-out likelihood, the ER baseline and MMD of model and ER samples."""
    cfg, ev = run.cfg, run.cfg.eval
    ds = run.dataset()
    test = ds.test
    if not test:
        raise ValueError("the dataset has no test graphs")
    model, digest = run.load_model()
    seeds = spawn_seeds(run.seeds["eval"], ["likelihood", "model_samples", "er_samples"])
    embs = run.embeddings(test)
    lik_seeds = np.random.SeedSequence(seeds["likelihood"]).generate_state(len(test))
    bits = [is_loglik(model, g, e, ev.num_samples, seed=int(s))[1]
            for g, e, s in zip(test, embs, lik_seeds)]
    p = er_density(ds.train)
    er_bits = [er_bits_per_dim(g, p) for g in test]

    count = ev.num_generated or len(test)
    sizes = run.sample_sizes(count)
    sample_seeds = np.random.SeedSequence(seeds["model_samples"]).generate_state(count)
    generated = [sample_graph_fast(SampleRequest(n, int(s), model=model))
                 for n, s in zip(sizes, sample_seeds)]
    er_rng = np.random.default_rng(seeds["er_samples"])
    er_samples = [er_graph(n, p, er_rng) for n in sizes]

    kernel = KernelSpec(ev.kernel, ev.bandwidth)
    metrics = {"bits_per_dim": summarize(bits), "er_bits_per_dim": summarize(er_bits),
               "er_density": p}
    for kind in ev.statistics:
        ref = _statistics(test, kind, cfg.data.workers)
        ours = _statistics(generated, kind, cfg.data.workers)
        base = _statistics(er_samples, kind, cfg.data.workers)
        metrics[f"mmd_{kind}"] = mmd(ours, ref, kernel, ev.estimator).mmd
        metrics[f"er_mmd_{kind}"] = mmd(base, ref, kernel, ev.estimator).mmd
    return {
        "dataset": ds.meta, "test_graphs": len(test), "generated": count,
        "checkpoint": str(run.checkpoint_path()), "checkpoint_sha256": digest,
        "metrics": metrics, "kernel": {"distance": ev.kernel, "bandwidth": ev.bandwidth,
                                       "estimator": ev.estimator},
        "seeds": {"root": cfg.run.seed, **run.seeds, **seeds},
    }


def cmd_eval(run: Run, args) -> None:
    _write_json(run.path("reports", "eval.json"), evaluate_run(run))


def cmd_sample(run: Run, args) -> None:
    model, _ = run.load_model()
    count = args.count if args.count is not None else (run.cfg.eval.num_generated
                                                        or len(run.dataset().test))
    seeds = np.random.SeedSequence(run.seeds["sample"]).generate_state(max(count, 1))
    width = max(4, len(str(count)))
    for k, n in enumerate(run.sample_sizes(count)):
        g = sample_graph_fast(SampleRequest(n, int(seeds[k]), model=model))
        write_edge_list(g, run.path("samples", f"sample_{k:0{width}d}.txt"))


def cmd_interpolate(run: Run, args) -> None:
    ev = run.cfg.eval
    model, _ = run.load_model()
    test = run.dataset().test
    for name in ("interpolate_a", "interpolate_b"):
        if getattr(ev, name) >= len(test):
            raise ValueError(f"[eval] {name}: index {getattr(ev, name)} but only "
                             f"{len(test)} test graphs")
    ga, gb = test[ev.interpolate_a], test[ev.interpolate_b]
    ea, eb = run.embeddings([ga, gb])
    result = interpolate_latents(model, ga, ea, gb, eb, ev.interpolation_steps,
                                 seed=run.seeds["interpolate"])
    rows = ["step\tweight\tnodes\tedges\tmean_degree"]
    for k, (t, g) in enumerate(zip(result.weights, result.graphs)):
        rows.append(f"{k}\t{t:.6f}\t{g.n}\t{g.num_edges}\t{2 * g.num_edges / g.n:.6f}")
        write_edge_list(g, run.path("figures", "interpolation", f"step_{k:03d}.txt"))
    run.path("figures", "interpolation.tsv").write_text("\n".join(rows) + "\n")


def write_ladder_tables(directory: Path, rungs, dim: int) -> list[Path]:
    """One table per rung count: a commented eigenvalue header then node coordinates."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (values, coords) in ladder_tables(rungs, dim).items():
        header = "\t".join(f"x{c}" for c in range(coords.shape[1]))
        lines = ["# eigenvalues\t" + "\t".join(f"{v:.12g}" for v in values),
                 f"node\t{header}"]
        lines += [f"{i}\t" + "\t".join(f"{v + 0.0:.12g}" for v in row) for i, row in enumerate(coords)]
        path = directory / f"ladder_{k}.tsv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def read_ladder_table(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    values = np.array([float(t) for t in lines[0].split("\t")[1:]])
    coords = np.array([[float(t) for t in line.split("\t")[1:]] for line in lines[2:]])
    return values, coords


def cmd_figure(run: Run, args) -> None:
    write_ladder_tables(run.out / "figures", run.cfg.data.rungs, run.cfg.eval.figure_dim)


HANDLERS = {
    "gen-data": cmd_gen_data, "embed": cmd_embed, "train": cmd_train, "eval": cmd_eval,
    "sample": cmd_sample, "interpolate": cmd_interpolate, "figure": cmd_figure,
}


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gevae", description="Graph generative model command line.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", help="INI configuration file (defaults if omitted)")
    parser.add_argument("--count", type=int, help="number of graphs for 'sample'")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                        help="configuration overrides, e.g. model.sigma=0.3")
    return parser


def _one_line(exc: BaseException) -> str:
    text = str(exc).strip().splitlines()
    return text[0] if text else type(exc).__name__


def run(command: str, config_path=None, overrides=(), count: int | None = None) -> int:
    """Validate the configuration and execute one command; returns the exit status."""
    return main([command] + (["-c", str(config_path)] if config_path else [])
                + ([f"--count={count}"] if count is not None else []) + list(overrides))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.count is not None and args.count < 0:
            raise ConfigError(f"--count must be >= 0, got {args.count}")
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"gevae: error: {_one_line(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    r = Run(cfg)
    r.out.mkdir(parents=True, exist_ok=True)
    marker = r.out / MARKER
    marker.write_text(f"{args.command}\n")
    (r.out / "config.echo").write_text(cfg.to_ini())
    start = time.perf_counter()
    try:
        HANDLERS[args.command](r, args)
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"gevae: {args.command} failed: {type(exc).__name__}: {_one_line(exc)}",
              file=sys.stderr)
        return 1
    marker.unlink()
    logger.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
