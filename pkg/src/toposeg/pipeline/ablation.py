"""Toy ablations: loss-term rows A-D and TopoAug placement, several seeds each."""

from __future__ import annotations

import os
from dataclasses import replace
from multiprocessing import get_context

import numpy as np

from .. import formats
from .data import generate_corpus
from .train import TrainConfig, train_loop

LOSS_ROWS = {
    "A": ("con",),
    "B": ("con", "dist"),
    "C": ("con", "dist", "align"),
    "D": ("con", "dist", "align", "ref"),
}
SEEDS = (0, 1, 2)
CORPUS_SIZE = 200
CORPUS_SEED = 0
# each run is scored by its best checkpoint, evaluated every 5 epochs and at the end
ABLATION_BASE = TrainConfig(eval_every=5)


def ablation_configs(base: TrainConfig = ABLATION_BASE, seeds=SEEDS) -> list[tuple[str, TrainConfig]]:
    """Rows A-D with student-side TopoAug, plus full-loss teacher-side TopoAug.

    Row D already is the student-placement run, so only ``tea`` is added.
    """
    runs = []
    for seed in seeds:
        for row, terms in LOSS_ROWS.items():
            runs.append((row, replace(base, seed=seed, loss_terms=terms, placement="stu")))
        runs.append(("tea", replace(base, seed=seed, loss_terms=LOSS_ROWS["D"], placement="tea")))
    return runs


_CORPUS = None


def _init_worker(n_scenes: int, corpus_seed: int) -> None:
    global _CORPUS
    _CORPUS = generate_corpus(n_scenes, corpus_seed)


def _run(job):
    name, cfg = job
    result = train_loop(_CORPUS, cfg)
    return {"run": name, "seed": cfg.seed, "best_miou": result.best_miou, "final_miou": result.history[-1]["miou"]}


def run_ablation(
    base: TrainConfig = ABLATION_BASE,
    seeds=SEEDS,
    n_scenes: int = CORPUS_SIZE,
    corpus_seed: int = CORPUS_SEED,
    processes: int | None = None,
) -> list[dict]:
    """Train every ablation run, in parallel worker processes; one result row per run.

    Each run is deterministic on its own, so the rows do not depend on the
    number of processes.
    """
    jobs = ablation_configs(base, seeds)
    processes = processes or min(len(jobs), os.cpu_count() or 1)
    if processes == 1:
        _init_worker(n_scenes, corpus_seed)
        return [_run(j) for j in jobs]
    with get_context("spawn").Pool(processes, _init_worker, (n_scenes, corpus_seed)) as pool:
        return pool.map(_run, jobs, chunksize=1)


def run_one(name: str, cfg: TrainConfig, n_scenes: int = CORPUS_SIZE, corpus_seed: int = CORPUS_SEED) -> dict:
    """A single ablation run in this process, e.g. to re-check one row."""
    _init_worker(n_scenes, corpus_seed)
    return _run((name, cfg))


def summarize(rows: list[dict]) -> dict[str, float]:
    """Mean best-checkpoint mIoU per run name."""
    names = list(dict.fromkeys(r["run"] for r in rows))
    return {n: float(np.mean([r["best_miou"] for r in rows if r["run"] == n])) for n in names}


def rows_csv(rows: list[dict]) -> str:
    header = ("run", "seed", "best_miou", "final_miou")
    return formats.csv_text(header, ([r[h] for h in header] for r in rows))
