"""Byte-level corpus: every byte is a token, vocabulary 256."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def ingest_corpus(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from None
    if not data:
        raise ConfigError(f"corpus {path} is empty")
    return np.frombuffer(data, dtype=np.uint8)


def window_count(num_tokens, n) -> int:
    return num_tokens // (n + 1)


class WindowSampler:
    """Non-overlapping (n+1)-token windows in a seeded order, reshuffled each epoch.

    Iterating yields int64 arrays of shape (b, n+1); inputs are ``w[:, :-1]``
    and next-token targets ``w[:, 1:]``. The stream never ends: when an epoch
    runs out, a fresh permutation is drawn from the same generator.
    """

    def __init__(self, tokens, batch, n, seed=0):
        tokens = np.asarray(tokens, dtype=np.uint8)
        count = window_count(len(tokens), n)
        if count == 0:
            raise ConfigError(f"corpus of {len(tokens)} bytes is shorter than one window of {n + 1}")
        self.windows = tokens[: count * (n + 1)].reshape(count, n + 1)
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self.rng.permutation(count)
        self._pos = 0

    def __len__(self) -> int:
        return len(self.windows)

    def _take(self) -> int:
        if self._pos == len(self._order):
            self.epoch += 1
            self._order = self.rng.permutation(len(self.windows))
            self._pos = 0
        idx = self._order[self._pos]
        self._pos += 1
        return idx

    def next_batch(self) -> np.ndarray:
        idx = [self._take() for _ in range(self.batch)]
        return self.windows[idx].astype(np.int64)

    def __iter__(self):
        while True:
            yield self.next_batch()
