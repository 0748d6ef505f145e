"""Frame-pair scheduling and per-pair descriptor matching for reconstruction."""
from __future__ import annotations

import math

from ..descriptors import MatchPair, ratio_test_match
from ..errors import InvalidParametersError
from .model import PairTask, SurveyFrame

DEFAULT_WINDOW = 300
DEFAULT_STRIDE = 10
DEFAULT_BUDGET = 500


def pair_budget(d: int, window: int, stride: int, base_budget: int) -> int:
    """Matches kept for a pair ``d`` frames apart: linear from the base budget down to a quarter."""
    floor = math.ceil(base_budget / 4)
    if window == stride:
        return base_budget
    frac = (d - stride) / (window - stride)
    return max(1, math.ceil(base_budget - (base_budget - floor) * frac - 1e-9))


def schedule_pairs(frame_count: int, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                   base_budget: int = DEFAULT_BUDGET) -> list[PairTask]:
    """Pairs ``(i, i + d)`` for anchors ``i`` every ``stride`` frames and ``d`` up to ``window``."""
    if stride < 1 or base_budget < 1:
        raise InvalidParametersError("stride and base_budget must be positive")
    if stride >= window:
        raise InvalidParametersError("stride must be smaller than the window")
    if frame_count < 2 * stride:
        raise InvalidParametersError(f"need at least {2 * stride} frames, got {frame_count}")
    tasks = []
    for i in range(0, frame_count, stride):
        for d in range(stride, window + 1, stride):
            if i + d >= frame_count:
                break
            tasks.append(PairTask(i, i + d, pair_budget(d, window, stride, base_budget)))
    return tasks


def match_pair(task: PairTask, frames: dict[int, SurveyFrame], ratio_threshold: float = 0.7) -> list[MatchPair]:
    """Ratio-test matches from ``frame_a`` into ``frame_b``, best first, cut to the pair budget."""
    a, b = frames[task.frame_a], frames[task.frame_b]
    if len(a.descriptors) == 0 or len(b.descriptors) == 0:
        return []
    return ratio_test_match(a.descriptors, b.descriptors, ratio_threshold)[:task.match_budget]
