"""
Galton-Watson tree generation, one level at a time.

A level is stored as flat parallel arrays: parent index into the previous
level, the last displacement X_u and the path sum S_n(u). Children are laid
out parent-major, in birth order within a parent, so a level's parent_index
is non-decreasing and every node of level n owns one contiguous slice of
level n+1.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from brwmf import model, output
from brwmf.errors import NodeBudgetExceeded, UsageError

log = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 30000000

MATERIALIZE = "materialize"
STREAM = "stream"


@dataclass(frozen=True)
class LevelFrame:
    depth: int
    parent_index: np.ndarray = field(repr=False)
    path_sum: np.ndarray = field(repr=False)
    displacement: np.ndarray = field(repr=False)

    @property
    def node_count(self):
        return len(self.parent_index)

    @property
    def d(self):
        return self.path_sum.shape[1]


def root_frame(d):
    zeros = np.zeros((1, d))
    zeros.setflags(write=False)
    parent = np.array([-1], dtype=np.int64)
    parent.setflags(write=False)
    return LevelFrame(depth=0, parent_index=parent, path_sum=zeros, displacement=zeros)


def grow_level(spec, frame, rng, budget=DEFAULT_NODE_BUDGET):
    """Gives every node of `frame` an independent offspring draw.

    Raises NodeBudgetExceeded naming the new level when it would hold more
    than `budget` nodes.
    """
    counts = model.sample_counts(spec, frame.node_count, rng)
    total = int(counts.sum())
    if total > budget:
        raise NodeBudgetExceeded(frame.depth + 1, total, budget)
    displacements = model.sample_displacements(spec, total, rng)

    parent_index = np.repeat(np.arange(frame.node_count, dtype=np.int64), counts)
    path_sum = frame.path_sum[parent_index] + displacements
    for arr in (parent_index, path_sum, displacements):
        arr.setflags(write=False)
    return LevelFrame(depth=frame.depth + 1, parent_index=parent_index,
                      path_sum=path_sum, displacement=displacements)


@dataclass
class TreeRun:
    spec: model.ModelSpec
    max_depth: int
    mode: str
    seed: tuple = ()
    frames: list = field(default_factory=list, repr=False)
    last_frame: LevelFrame = field(default=None, repr=False)
    complete: bool = True
    deepest_level: int = 0

    @property
    def materialized(self):
        return self.mode == MATERIALIZE

    def level(self, k):
        if self.materialized and 0 <= k < len(self.frames):
            return self.frames[k]
        if self.last_frame is not None and self.last_frame.depth == k:
            return self.last_frame
        raise UsageError("level %d is not retained by this %s run" % (k, self.mode))

    def child_offsets(self, k):
        """Start offset, inside level k+1, of the children of each level-k node."""
        parents = self.level(k).node_count
        return np.searchsorted(self.level(k + 1).parent_index, np.arange(parents))


def run_to_depth(spec, n, rng, mode=MATERIALIZE, budget=DEFAULT_NODE_BUDGET, sinks=(), seed=()):
    """Grows the tree from the root down to level n.

    materialize keeps every frame; stream keeps only the current one and hands
    each frame, root included, to every sink as it is produced. When a level
    would exceed the node budget the run stops there and is flagged
    incomplete with the deepest completed level.
    """
    if n < 0:
        raise UsageError("depth must be >= 0, got %d" % n)
    if mode not in (MATERIALIZE, STREAM):
        raise UsageError("unknown run mode %r" % (mode,))

    run = TreeRun(spec=spec, max_depth=n, mode=mode, seed=tuple(seed))
    frame = root_frame(spec.d)
    while True:
        if run.materialized:
            run.frames.append(frame)
        run.last_frame = frame
        run.deepest_level = frame.depth
        for sink in sinks:
            sink(frame)
        if frame.depth >= n:
            break
        try:
            frame = grow_level(spec, frame, rng, budget)
        except NodeBudgetExceeded as e:
            log.warning("run stopped at level %d: %s", run.deepest_level, e)
            run.complete = False
            break
    return run


def write_frames_csv(frames, path):
    """Debug dump: level, node_index, parent_index, S coordinates."""
    frames = list(frames)
    header = ["level", "node_index", "parent_index"] + output.coordinate_columns("S", frames[0].d)

    def rows():
        for frame in frames:
            for u in range(frame.node_count):
                yield [frame.depth, u, frame.parent_index[u]] + list(frame.path_sum[u])

    return output.write_csv(path, header, rows())
