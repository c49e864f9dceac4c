import zlib
from typing import Hashable, Optional

import jax
import numpy as np


def _seed_words(seed: int) -> list[int]:
    """Splits a non-negative seed of any width into 32-bit words, least significant first (at least two)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    words = []
    while seed or len(words) < 2:
        words.append(seed & 0xFFFFFFFF)
        seed >>= 32
    return words


def derive_key(seed: int, *labels: str) -> jax.Array:
    """
    Derives an independent PRNG key for a named sub-stream of a master seed.

    Labels are folded in through a stable CRC32 hash, so the key of one stream never depends on which other
    streams were drawn from, nor on the order in which they were created.

    :param int seed: Master seed (64 bits or wider)
    :param str labels: Stream path, e.g. ("propagation", "24ghz")
    """
    key = jax.random.PRNGKey(0)
    for word in _seed_words(seed):
        key = jax.random.fold_in(key, word)
    for label in labels:
        key = jax.random.fold_in(key, zlib.crc32(label.encode("utf-8")))
    return key


def make_rng(seed: int, *labels: str) -> np.random.Generator:
    """Returns a numpy generator seeded from `derive_key(seed, *labels)`"""
    key_words = np.asarray(derive_key(seed, *labels), dtype=np.uint32)
    return np.random.default_rng(key_words.tolist())


class MetricLogger:
    """
    Records metric values over a seed sweep and summarises each group by its median and interquartile range.
    """
    def __init__(self, values_to_record: list[str]) -> None:
        self.values_to_record = values_to_record
        self.history: dict[Hashable, dict[str, list[float]]] = {}
        self.groups: list[Hashable] = []

    def record(self, group: Hashable, **values: Optional[float]) -> None:
        """
        Adds one observation of each given metric to a group. Missing (None) values are skipped.
        """
        if group not in self.history:
            self.groups.append(group)
            self.history[group] = {k: [] for k in self.values_to_record}
        for k, v in values.items():
            if k not in self.history[group]:
                raise KeyError(f"metric {k!r} is not recorded by this logger")
            if v is not None:
                self.history[group][k].append(float(v))

    def summary(self, group: Hashable, metric_name: str) -> Optional[tuple[float, float, float, int]]:
        """
        :return (median, q25, q75, count) of the recorded values, or None when nothing was recorded
        """
        logged_values = self.history.get(group, {}).get(metric_name, [])
        if not logged_values:
            return None
        q25, median, q75 = np.percentile(np.asarray(logged_values), [25, 50, 75])
        return float(median), float(q25), float(q75), len(logged_values)

    def rows(self) -> list[tuple[Hashable, str, float, float, float, int]]:
        """All non-empty summaries, in recording order of the groups"""
        summarised = []
        for group in self.groups:
            for metric_name in self.values_to_record:
                stats = self.summary(group, metric_name)
                if stats is not None:
                    summarised.append((group, metric_name, *stats))
        return summarised
