"""Batch grounding over many queries, optionally across threads."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .ranking import GroundingOutput, ground
from .scorer import proposals_from_rows
from .windowing import slice_windows

THREADS_ENV = "LONGVTG_THREADS"


def resolve_threads(requested: int | None, default: int | None = None) -> int:
    if requested:
        return max(1, requested)
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return default or os.cpu_count() or 1


def ground_all(instances, cfg, scorer=None, adapter=None, external_rows=None, threads: int = 1):
    """Ground every instance; results keep the input order.

    ``external_rows`` maps query id to raw external-score rows; when given the
    internal scorer is bypassed.
    """

    def run(inst) -> GroundingOutput:
        external = None
        if external_rows is not None:
            ws = slice_windows(len(inst.video), cfg.window_length)
            external = proposals_from_rows(external_rows.get(inst.query_id, []), ws, inst.video.fps)
        return ground(inst, cfg, scorer, adapter, external)

    instances = list(instances)
    if threads <= 1:
        return [run(inst) for inst in instances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, instances))
