"""Seeded multi-run evaluation over sampled test episodes."""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import netpbm
from .encoder import EncoderParams
from .episodes import DatasetSplit, Source, dump_episode, mask_to_pgm, sample_episode
from .metrics import IoUAccumulator, accumulate_binary, binary_accumulator, binary_iou, mean_iou
from .refine import RefineConfig, refine_and_segment


@dataclass(frozen=True)
class EvalSettings:
    n_ways: int = 1
    k_shots: int = 1
    n_queries: int = 1
    episodes: int = 1000
    runs: int = 5
    seed: int = 0
    refine: RefineConfig = RefineConfig()


@dataclass
class RunResult:
    run: int
    run_seed: int
    mean_iou: float
    binary_iou: float
    acc: IoUAccumulator
    binary_acc: IoUAccumulator
    baseline_mean_iou: float  # support-only prediction of the same episodes


def run_seed(seed: int, run: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(run), 0x52554E]).generate_state(1)[0])


def episode_seed(seed: int, run: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed(seed, run), int(index)]).generate_state(1)[0])


def _evaluate_chunk(params, source, split, settings: EvalSettings, run: int, indices, dump_dir):
    n_cls = max(source.classes)
    acc, bacc, base = IoUAccumulator(n_cls), binary_accumulator(), IoUAccumulator(n_cls)
    for e in indices:
        ep = sample_episode(
            source, split, settings.n_ways, settings.k_shots, settings.n_queries, seed=episode_seed(settings.seed, run, e)
        )
        result = refine_and_segment(params, ep, settings.refine)
        table = ep.global_ids()
        for t, (pred, truth) in enumerate(zip(result.masks, ep.query_masks)):
            acc.accumulate(pred, truth, table)
            accumulate_binary(bacc, pred, truth)
            base.accumulate(result.support_only_masks[t], truth, table)
        if dump_dir is not None:
            _dump(Path(dump_dir) / f"run{run}" / f"episode{e:05d}", ep, result)
    return acc, bacc, base


def _dump(out: Path, episode, result) -> None:
    dump_episode(episode, out)
    table = episode.global_ids()
    for t, truth in enumerate(episode.query_masks):
        for name, mask in (("truth", truth), ("support_only", result.support_only_masks[t]), ("fused", result.masks[t])):
            glob = np.where(mask > 0, table[np.clip(mask, 0, None)], mask)
            netpbm.write(out / f"query_{t}_{name}.pgm", mask_to_pgm(glob))
    (out / "refine_trace.txt").write_text(result.trace.to_text())


def evaluate(
    params: EncoderParams,
    source: Source,
    split: DatasetSplit,
    settings: EvalSettings,
    jobs: int = 1,
    dump_dir=None,
) -> list[RunResult]:
    """Run ``settings.runs`` runs of ``settings.episodes`` episodes each.

    Episode ``e`` of run ``r`` is fully determined by ``(seed, r, e)``;
    with ``jobs > 1`` episodes are spread over worker processes and the
    integer IoU counts are merged, so results do not depend on ``jobs``.
    """
    if split.role != "test":
        split = split.with_role("test")
    if settings.n_ways > len(split.classes):
        raise ValueError(f"{settings.n_ways}-way episodes need more than the fold's {len(split.classes)} classes")
    results = []
    pool = cf.ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for run in range(settings.runs):
            indices = list(range(settings.episodes))
            if pool is None:
                parts = [_evaluate_chunk(params, source, split, settings, run, indices, dump_dir)]
            else:
                chunks = [indices[i::jobs] for i in range(jobs)]
                futures = [
                    pool.submit(_evaluate_chunk, params, source, split, settings, run, c, dump_dir) for c in chunks if c
                ]
                parts = [f.result() for f in futures]
            acc, bacc, base = parts[0]
            for a, b, c in parts[1:]:
                acc, bacc, base = acc + a, bacc + b, base + c
            results.append(
                RunResult(run, run_seed(settings.seed, run), mean_iou(acc), binary_iou(bacc), acc, bacc, mean_iou(base))
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return results


def grid(
    params: EncoderParams,
    source: Source,
    split: DatasetSplit,
    settings: EvalSettings,
    adapt_values,
    fusion_values,
    jobs: int = 1,
) -> list[dict]:
    """Evaluate every (adapt_steps, fusion_steps) pair with the same episodes."""
    rows = []
    for a in adapt_values:
        for f in fusion_values:
            s = replace(settings, refine=replace(settings.refine, adapt_steps=int(a), fusion_steps=int(f)))
            runs = evaluate(params, source, split, s, jobs=jobs)
            rows.append({"adapt_steps": int(a), "fusion_steps": int(f), "runs": runs})
    return rows
