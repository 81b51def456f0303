"""Deterministic synthetic instruction data.

Every example is ``[BOS, TASK, prompt..., SEP, response..., EOS]`` right-padded
with PAD. Only response tokens (and the closing EOS) are supervised; prompt
and padding targets are ``IGNORE_INDEX``.

Tasks: ``copy`` and ``reverse`` over a symbol string, ``add`` (two symbols,
answer is their sum modulo the symbol count) and ``fact`` (a fixed random
key -> value map standing in for world knowledge).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import IGNORE_INDEX

PAD, BOS, SEP, EOS = 0, 1, 2, 3
TASK_TOKENS = {"copy": 4, "reverse": 5, "add": 6, "fact": 7}
FIRST_SYMBOL = 8
MIN_TEMPLATE = 6  # BOS TASK x SEP y EOS

GRAMMARS = {
    "copy": {"copy": 1.0},
    "reverse": {"reverse": 1.0},
    "add": {"add": 1.0},
    "fact": {"fact": 1.0},
    "pretrain": {"copy": 0.3, "add": 0.3, "fact": 0.4},
    "instruct": {"reverse": 0.6, "add": 0.2, "copy": 0.2},
}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_train: int = 2048
    n_eval: int = 256
    seq_len: int = 24
    task_grammar_id: str = "instruct"
    vocab_size: int = 64
    min_len: int = 2
    max_len: int = 8
    world_seed: int = 1234

    def to_dict(self) -> dict:
        return asdict(self)


def n_symbols(vocab_size: int) -> int:
    return vocab_size - FIRST_SYMBOL


def fact_table(vocab_size: int, world_seed: int) -> np.ndarray:
    """value symbol for each key symbol; shared by pretraining data and benchmarks."""
    return np.random.default_rng([world_seed, 7]).permutation(n_symbols(vocab_size))


def _example(task: str, rng: np.random.Generator, spec: DatasetSpec, table) -> tuple[list, list]:
    n_sym = n_symbols(spec.vocab_size)
    tt = TASK_TOKENS[task]
    if task in ("copy", "reverse"):
        hi = min(spec.max_len, (spec.seq_len + 1 - 4) // 2)
        n = int(rng.integers(spec.min_len, hi + 1))
        xs = (rng.integers(0, n_sym, size=n) + FIRST_SYMBOL).tolist()
        ys = xs if task == "copy" else xs[::-1]
        return [BOS, tt, *xs, SEP], [*ys, EOS]
    if task == "add":
        a, b = (int(v) for v in rng.integers(0, n_sym, size=2))
        return [BOS, tt, a + FIRST_SYMBOL, b + FIRST_SYMBOL, SEP], [(a + b) % n_sym + FIRST_SYMBOL, EOS]
    key = int(rng.integers(0, n_sym))
    return [BOS, tt, key + FIRST_SYMBOL, SEP], [int(table[key]) + FIRST_SYMBOL, EOS]


def _encode(prompt: list, response: list, length: int) -> tuple[np.ndarray, np.ndarray]:
    seq = prompt + response
    tokens = np.full(length, PAD, dtype=np.int64)
    tokens[:len(seq)] = seq
    supervised = np.zeros(length, dtype=bool)
    supervised[len(prompt):len(seq)] = True
    return tokens, supervised


class Split:
    """A fixed set of encoded examples (``tokens`` has seq_len + 1 columns)."""

    def __init__(self, tokens: np.ndarray, supervised: np.ndarray):
        self.tokens = tokens
        self.supervised = supervised

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, rows) -> tuple[np.ndarray, np.ndarray]:
        tok = self.tokens[rows]
        inputs = tok[:, :-1]
        targets = np.where(self.supervised[rows][:, 1:], tok[:, 1:], IGNORE_INDEX)
        return np.ascontiguousarray(inputs), np.ascontiguousarray(targets)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, len(self))))


class Dataset:
    def __init__(self, spec: DatasetSpec, train: Split, eval_set: Split):
        self.spec = spec
        self.train = train
        self.eval_set = eval_set

    def _epoch_order(self, order_seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([order_seed, epoch]).permutation(len(self.train))

    def train_batch(self, index: int, batch_size: int, order_seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch ``index`` of the endless shuffled stream, ``batch_size`` rows each.

        The stream is defined per example, so two consecutive batches of size
        ``b`` are exactly one batch of size ``2b``.
        """
        n = len(self.train)
        start = index * batch_size
        rows = []
        epoch_cache: dict[int, np.ndarray] = {}
        for pos in range(start, start + batch_size):
            epoch, off = divmod(pos, n)
            if epoch not in epoch_cache:
                epoch_cache[epoch] = self._epoch_order(order_seed, epoch)
            rows.append(epoch_cache[epoch][off])
        return self.train.batch(np.asarray(rows))

    def train_batches(self, count: int, batch_size: int, order_seed: int) -> list:
        return [self.train_batch(i, batch_size, order_seed) for i in range(count)]


def generate_dataset(spec: DatasetSpec) -> Dataset:
    if spec.task_grammar_id not in GRAMMARS:
        raise ValueError(f"unknown task grammar {spec.task_grammar_id!r}")
    if spec.seq_len + 1 < MIN_TEMPLATE:
        raise ValueError(f"seq_len {spec.seq_len} is shorter than the minimum template "
                         f"({MIN_TEMPLATE - 1})")
    if n_symbols(spec.vocab_size) < 4:
        raise ValueError(f"vocab_size {spec.vocab_size} leaves fewer than 4 symbols")
    if not 1 <= spec.min_len <= spec.max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    if (spec.seq_len + 1 - 4) // 2 < spec.min_len:
        raise ValueError(f"seq_len {spec.seq_len} too short for min_len {spec.min_len}")
    mix = GRAMMARS[spec.task_grammar_id]
    tasks = list(mix)
    probs = np.array([mix[t] for t in tasks])
    rng = np.random.default_rng([spec.seed, 11])
    table = fact_table(spec.vocab_size, spec.world_seed)
    length = spec.seq_len + 1

    def draw():
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        return _encode(*_example(task, rng, spec, table), length)

    train = [draw() for _ in range(spec.n_train)]
    seen = {t.tobytes() for t, _ in train}
    held_out, attempts = [], 0
    while len(held_out) < spec.n_eval:
        attempts += 1
        if attempts > 50 * max(spec.n_eval, 1) + 1000:
            raise ValueError("could not draw enough held-out examples disjoint from train")
        tok, sup = draw()
        key = tok.tobytes()
        if key in seen:
            continue
        seen.add(key)
        held_out.append((tok, sup))

    def stack(items):
        if not items:
            return Split(np.zeros((0, length), np.int64), np.zeros((0, length), bool))
        return Split(np.stack([t for t, _ in items]), np.stack([s for _, s in items]))

    return Dataset(spec, stack(train), stack(held_out))
