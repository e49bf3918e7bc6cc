"""Attention store: collects post-softmax maps during one UNet forward."""

import numpy as np

from .errors import CaptureShapeError


class AttentionStore:
    """Receives (1, heads, queries, keys) probability tensors from every
    attention layer, validates their shapes, averages over heads, and keeps
    the resolutions the job asked for in capture order.

    Shape validation runs on every layer, wanted or not, so an anomaly
    anywhere in the network aborts the export with the layer's name.
    """

    def __init__(self, resolutions, n_tokens: int):
        self.wanted = frozenset(int(r) for r in resolutions)
        self.n_tokens = int(n_tokens)
        self._maps = {}

    def put(self, kind: str, side: int, tag: str, probs) -> None:
        shape = tuple(probs.shape)
        if len(shape) != 4 or shape[0] != 1:
            raise CaptureShapeError(tag, f"expected a (1, heads, q, k) tensor, "
                                         f"got shape {shape}")
        want_k = side * side if kind == "self" else self.n_tokens
        if shape[2] != side * side or shape[3] != want_k:
            raise CaptureShapeError(tag, f"{kind} map has shape {shape[2:]}, "
                                         f"expected ({side * side}, {want_k})")
        if side in self.wanted:
            avg = probs[0].mean(dim=0).numpy()
            key = (kind, side)
            self._maps.setdefault(key, []).append((tag, np.asarray(avg, np.float32)))

    def take(self, kind: str, side: int):
        """Captured (layer tag, head-averaged map) pairs in forward order."""
        return self._maps.get((kind, int(side)), [])
