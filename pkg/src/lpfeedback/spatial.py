"""Static bounding-volume hierarchy over axis-aligned boxes."""

from __future__ import annotations

import numpy as np


class BoxTree:
    """AABB tree answering "which boxes contain this point".

    Built once by median splits along the widest centroid axis; leaves hold
    at most ``leaf_size`` boxes.  Every input box is stored in exactly one
    leaf.
    """

    def __init__(self, lo: np.ndarray, hi: np.ndarray, leaf_size: int = 16):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        n = len(self.lo)
        self.leaf_size = leaf_size
        self.order = np.arange(n)
        # node arrays: bounds, child indices (-1 for leaf), [start, stop) into order
        self._nlo: list[np.ndarray] = []
        self._nhi: list[np.ndarray] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._start: list[int] = []
        self._stop: list[int] = []
        if n:
            self._build(0, n)
        self.node_lo = np.array(self._nlo).reshape(-1, self.lo.shape[1] if self.lo.ndim == 2 else 0)
        self.node_hi = np.array(self._nhi).reshape(self.node_lo.shape)
        self.left = np.array(self._left, dtype=int)
        self.right = np.array(self._right, dtype=int)
        self.start = np.array(self._start, dtype=int)
        self.stop = np.array(self._stop, dtype=int)

    def _build(self, start: int, stop: int) -> int:
        idx = self.order[start:stop]
        node = len(self._nlo)
        self._nlo.append(self.lo[idx].min(axis=0))
        self._nhi.append(self.hi[idx].max(axis=0))
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._stop.append(stop)
        if stop - start <= self.leaf_size:
            return node
        centers = 0.5 * (self.lo[idx] + self.hi[idx])
        axis = int(np.argmax(centers.max(axis=0) - centers.min(axis=0)))
        perm = np.argsort(centers[:, axis], kind="stable")
        self.order[start:stop] = idx[perm]
        mid = (start + stop) // 2
        self._left[node] = self._build(start, mid)
        self._right[node] = self._build(mid, stop)
        return node

    def __len__(self) -> int:
        return len(self.lo)

    def query(self, x: np.ndarray, pad: float = 0.0) -> np.ndarray:
        """Indices of boxes containing ``x`` (boxes inflated by ``pad``)."""
        x = np.asarray(x, dtype=float)
        if not len(self):
            return np.zeros(0, dtype=int)
        hits = []
        stack = [0]
        while stack:
            nd = stack.pop()
            if np.any(x < self.node_lo[nd] - pad) or np.any(x > self.node_hi[nd] + pad):
                continue
            if self.left[nd] < 0:
                idx = self.order[self.start[nd]:self.stop[nd]]
                inside = np.all((self.lo[idx] - pad <= x) & (x <= self.hi[idx] + pad), axis=1)
                hits.append(idx[inside])
            else:
                stack.append(self.left[nd])
                stack.append(self.right[nd])
        return np.sort(np.concatenate(hits)) if hits else np.zeros(0, dtype=int)

    def count_entries(self) -> np.ndarray:
        """How many leaves reference each box (1 for a well-formed tree)."""
        counts = np.zeros(len(self), dtype=int)
        for nd in np.nonzero(self.left < 0)[0]:
            counts[self.order[self.start[nd]:self.stop[nd]]] += 1
        return counts
