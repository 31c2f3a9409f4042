"""Cross-window self-attention and the hook objects a backbone routes attention through.

Frame features ``h`` are ``[L, D]`` token matrices. For the frame at window
``i``, position ``j``, keys and values are built from four stacked blocks::

    [h(1, 1), h(i - 1, K), h(i, j), h(i, K)]    # shape [4L, D]

i.e. the first frame of the video, the last frame of the previous window,
the frame itself and the last frame of the current window.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import AttentionError

FIRST = "first"
PREVIOUS_LAST = "previous_last"
CURRENT_LAST = "current_last"


@dataclass(frozen=True)
class AttentionProjection:
    """Weights of one attention layer: ``to_q/to_k/to_v`` are ``[D, inner]``, ``to_out`` ``[inner, D]``."""

    to_q: np.ndarray
    to_k: np.ndarray
    to_v: np.ndarray
    to_out: np.ndarray
    heads: int = 1

    @property
    def head_dim(self) -> int:
        return self.to_q.shape[1] // self.heads

    @classmethod
    def random(cls, dim: int, inner: int | None = None, heads: int = 1,
               rng: np.random.Generator | None = None) -> "AttentionProjection":
        rng = rng or np.random.default_rng(0)
        inner = inner or dim
        scale = 1.0 / np.sqrt(dim)
        mats = [rng.normal(0.0, scale, (dim, inner)) for _ in range(3)]
        out = rng.normal(0.0, 1.0 / np.sqrt(inner), (inner, dim))
        return cls(*mats, out, heads=heads)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


_SCORE_BLOCK = 1 << 20  # attention scores per block


def attention_with_context(h: np.ndarray, kv: np.ndarray, proj: AttentionProjection) -> np.ndarray:
    """Scaled dot-product attention with queries from ``h`` and keys/values from ``kv``.

    Accepts ``h`` of shape ``[L, D]`` or ``[B, L, D]`` with a matching ``kv``.
    """
    if not (np.isfinite(h).all() and np.isfinite(kv).all()):
        raise AttentionError("non-finite attention input")
    squeeze = h.ndim == 2
    if squeeze:
        h, kv = h[None], kv[None]
    if kv.ndim != 3 or kv.shape[0] != h.shape[0] or kv.shape[2] != h.shape[2]:
        raise AttentionError(f"kv shape {kv.shape} incompatible with queries {h.shape}")
    if proj.to_q.shape[0] != h.shape[2] or proj.to_k.shape != proj.to_q.shape \
            or proj.to_v.shape != proj.to_q.shape or proj.to_out.shape[0] != proj.to_q.shape[1]:
        raise AttentionError("projection shapes do not agree with the features")
    b, n_q, _ = h.shape
    n_kv = kv.shape[1]
    heads, dh = proj.heads, proj.head_dim

    q = (h @ proj.to_q).reshape(b, n_q, heads, dh).transpose(0, 2, 1, 3) / np.sqrt(dh)
    k_t = (kv @ proj.to_k).reshape(b, n_kv, heads, dh).transpose(0, 2, 3, 1)
    v = (kv @ proj.to_v).reshape(b, n_kv, heads, dh).transpose(0, 2, 1, 3)
    mixed = np.empty((b, heads, n_q, dh))
    # query blocks keep the score matrix small enough to stay in cache
    step = max(1, _SCORE_BLOCK // max(1, b * heads * n_kv))
    for start in range(0, n_q, step):
        scores = q[:, :, start:start + step] @ k_t
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        mixed[:, :, start:start + step] = scores @ v
    out = mixed.transpose(0, 2, 1, 3).reshape(b, n_q, heads * dh) @ proj.to_out
    return out[0] if squeeze else out


class FeatureCache:
    """Anchor features for cross-window attention, keyed by ``(layer, timestep, branch)``.

    First-frame features are kept for the whole video; the previous window's
    last-frame features are replaced at every window boundary. Every read is
    appended to ``access_log`` as ``(reading_window, role, source_window)``.
    """

    def __init__(self, window_size: int):
        self.window_size = window_size
        self.window: int | None = None
        self._store: dict[str, dict[Hashable, np.ndarray]] = {
            FIRST: {}, PREVIOUS_LAST: {}, CURRENT_LAST: {},
        }
        self.access_log: list[tuple[int, str, int]] = []

    def begin_window(self, i: int) -> None:
        if self.window is not None and i != self.window + 1:
            raise AttentionError(f"windows must be processed in order ({self.window} -> {i})")
        if self.window is None and i != 1:
            raise AttentionError("the first processed window must be window 1")
        self.window = i

    def end_window(self) -> None:
        self._store[PREVIOUS_LAST] = self._store[CURRENT_LAST]
        self._store[CURRENT_LAST] = {}

    def put(self, role: str, key: Hashable, h: np.ndarray) -> None:
        self._store[role][key] = np.array(h, copy=True)

    def has(self, role: str, key: Hashable) -> bool:
        return key in self._store[role]

    def get(self, role: str, key: Hashable) -> np.ndarray:
        try:
            h = self._store[role][key]
        except KeyError:
            raise AttentionError(f"missing {role} anchor for {key} in window {self.window}") from None
        i = self.window or 1
        source = {FIRST: 1, PREVIOUS_LAST: i - 1, CURRENT_LAST: i}[role]
        self.access_log.append((i, role, source))
        return h

    def nbytes(self) -> int:
        return sum(a.nbytes for part in self._store.values() for a in part.values())


def cross_window_kv(h_self: np.ndarray, cache: FeatureCache, i: int, j: int, t: int,
                    layer: str, branch: str = "cond") -> np.ndarray:
    """Stack the four ``[L, D]`` blocks used as keys/values for frame ``(i, j)``.

    Anchors that do not exist yet resolve as follows: in window 1 the
    previous-window anchor is the first frame; frame ``(1, 1)`` uses its own
    features for every block; the last frame of a window is its own
    current-window anchor.
    """
    k = cache.window_size
    key = (layer, t, branch)
    if (i, j) == (1, 1):
        return np.concatenate([h_self] * 4, axis=0)
    first = cache.get(FIRST, key)
    prev = first if i == 1 else cache.get(PREVIOUS_LAST, key)
    last = h_self if j == k else cache.get(CURRENT_LAST, key)
    for name, block in (("first", first), ("previous", prev), ("current", last)):
        if block.shape != h_self.shape:
            raise AttentionError(f"{name} anchor shape {block.shape} != frame features {h_self.shape}")
    return np.concatenate([first, prev, h_self, last], axis=0)


# -- hooks --------------------------------------------------------------------

class AttentionHooks:
    """Plain per-frame attention; the default routing for every backbone call.

    A backbone calls :meth:`self_attention` for each self-attention layer with
    the batch of input features ``[B, L, D]`` and :meth:`cross_attention` with
    the text cross-attention probabilities ``[B, heads, L, tokens]``.
    """

    timestep: int = 0
    # backbones may skip the context round trip / explicit probabilities when these are False
    routes_self_attention = False
    wants_cross_attention = False

    def context(self, layer: str, hidden: np.ndarray) -> np.ndarray:
        """Key/value features ``[B, L', D]`` each frame attends to."""
        return hidden

    def self_attention(self, layer: str, hidden: np.ndarray, proj: AttentionProjection) -> np.ndarray:
        return attention_with_context(hidden, self.context(layer, hidden), proj)

    def cross_attention(self, layer: str, probs: np.ndarray, grid: tuple[int, int]) -> None:
        return None


class CrossWindowHooks(AttentionHooks):
    """Routes self-attention through :func:`cross_window_kv` for a batch of frames.

    ``frames`` lists the ``(i, j)`` position of each batch element. Anchor
    frames (``(1, 1)`` and ``j == K``) write their features into the cache.
    """

    def __init__(self, cache: FeatureCache, frames: Sequence[tuple[int, int]], timestep: int,
                 branch: str = "cond"):
        self.cache = cache
        self.frames = list(frames)
        self.timestep = timestep
        self.branch = branch

    routes_self_attention = True

    def context(self, layer, hidden):
        if hidden.shape[0] != len(self.frames):
            raise AttentionError(f"batch of {hidden.shape[0]} features for {len(self.frames)} frames")
        key = (layer, self.timestep, self.branch)
        kvs = []
        for (i, j), h in zip(self.frames, hidden):
            kvs.append(cross_window_kv(h, self.cache, i, j, self.timestep, layer, self.branch))
        # anchors are published only after every frame in the batch resolved its context
        for (i, j), h in zip(self.frames, hidden):
            if (i, j) == (1, 1):
                self.cache.put(FIRST, key, h)
            if j == self.cache.window_size:
                self.cache.put(CURRENT_LAST, key, h)
        return np.stack(kvs)


@dataclass
class CrossAttnMapStack:
    """Per-layer object-token attention maps of one frame: ``{layer: [timesteps, h_a, w_a]}``."""

    maps: dict[str, np.ndarray]
    timesteps: tuple[int, ...] = ()

    def __len__(self) -> int:
        return sum(m.shape[0] for m in self.maps.values())


def aggregate_token_map(probs: np.ndarray, positions: Sequence[int], grid: tuple[int, int]) -> np.ndarray:
    """Collapse ``[heads, L, tokens]`` probabilities into one ``[h, w]`` object map.

    Heads are averaged, the object's token columns summed, and the result
    divided by its maximum (left as zeros when it is all zero).
    """
    if not positions:
        raise AttentionError("object token positions are empty")
    if probs.ndim != 3:
        raise AttentionError(f"expected [heads, L, tokens] probabilities, got {probs.shape}")
    h, w = grid
    if probs.shape[1] != h * w:
        raise AttentionError(f"{probs.shape[1]} positions do not fit a {h}x{w} grid")
    if max(positions) >= probs.shape[2] or min(positions) < 0:
        raise AttentionError(f"token positions {list(positions)} outside {probs.shape[2]} tokens")
    m = probs.mean(axis=0)[:, list(positions)].sum(axis=-1).reshape(h, w)
    peak = m.max()
    return m / peak if peak > 0 else m


def decoder_low_res(layer: str, grid: tuple[int, int], max_side: int = 32) -> bool:
    return layer.startswith("up") and max(grid) <= max_side


class CaptureHooks(AttentionHooks):
    """Plain attention that also records object-token cross-attention maps.

    Maps are stored per batch element, per layer, in call order; set
    :attr:`timestep` before each backbone call.
    """

    wants_cross_attention = True

    def __init__(self, token_positions: Sequence[int], batch: int,
                 layer_filter: Callable[[str, tuple[int, int]], bool] = decoder_low_res):
        if not token_positions:
            raise AttentionError("capturing cross-attention needs object token positions")
        self.positions = list(token_positions)
        self.layer_filter = layer_filter
        self.timestep = 0
        self._maps: list[dict[str, list[np.ndarray]]] = [defaultdict(list) for _ in range(batch)]
        self._timesteps: list[int] = []

    def cross_attention(self, layer, probs, grid):
        if not self.layer_filter(layer, grid):
            return
        if probs.shape[0] != len(self._maps):
            raise AttentionError(f"batch of {probs.shape[0]} maps for {len(self._maps)} frames")
        if not self._timesteps or self._timesteps[-1] != self.timestep:
            self._timesteps.append(self.timestep)
        for b in range(probs.shape[0]):
            self._maps[b][layer].append(aggregate_token_map(probs[b], self.positions, grid))

    def stacks(self) -> list[CrossAttnMapStack]:
        return [CrossAttnMapStack({k: np.stack(v) for k, v in m.items()}, tuple(self._timesteps))
                for m in self._maps]
