"""Held-out loss, synthetic benchmarks and forgetting arithmetic.

The three benchmark stand-ins:

``mmlu``  multiple choice over the fact table (4 options)
``math``  exact-match greedy generation of ``add`` answers
``code``  exact-match greedy generation of ``copy`` responses
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .data import (BOS, EOS, FIRST_SYMBOL, PAD, SEP, TASK_TOKENS, fact_table, n_symbols)
from .model import IGNORE_INDEX

BENCHMARKS = ("mmlu", "math", "code")


@dataclass
class BenchmarkItem:
    prompt: list[int]
    choices: list[list[int]] | None = None
    answer: int = 0
    target: list[int] | None = None


@dataclass
class BenchmarkTask:
    name: str
    kind: str  # "multiple_choice" | "exact_match_generation"
    items: list[BenchmarkItem] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("multiple_choice", "exact_match_generation"):
            raise ValueError(f"unknown benchmark kind {self.kind!r}")
        if not self.items:
            raise ValueError(f"benchmark {self.name!r} has no items")
        for i, item in enumerate(self.items):
            if self.kind == "multiple_choice":
                if not item.choices or not 0 <= item.answer < len(item.choices):
                    raise ValueError(f"item {i}: answer index {item.answer} invalid")
            elif not item.target:
                raise ValueError(f"item {i}: generation item without target")


@dataclass(frozen=True)
class BenchmarkScore:
    name: str
    accuracy: float
    n_items: int

    @property
    def correct(self) -> int:
        return round(self.accuracy * self.n_items)


@dataclass(frozen=True)
class ForgettingDelta:
    name: str
    base_acc: float
    ft_acc: float
    delta_pp: float


# --------------------------------------------------------------------------
# JSON-lines task files: one item per line,
#   {"name": str, "kind": str, "prompt": [int], "choices": [[int]], "answer": int}
#   {"name": str, "kind": str, "prompt": [int], "target": [int]}
# --------------------------------------------------------------------------

def save_task(task: BenchmarkTask, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in task.items:
            row = {"name": task.name, "kind": task.kind, "prompt": item.prompt}
            if task.kind == "multiple_choice":
                row["choices"] = item.choices
                row["answer"] = item.answer
            else:
                row["target"] = item.target
            fh.write(json.dumps(row) + "\n")


def load_task(path) -> BenchmarkTask:
    name = kind = None
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if name is None:
                name, kind = row["name"], row["kind"]
            elif (row["name"], row["kind"]) != (name, kind):
                raise ValueError("mixed task names or kinds in one file")
            if kind == "multiple_choice":
                items.append(BenchmarkItem(list(row["prompt"]), [list(c) for c in row["choices"]],
                                           int(row["answer"])))
            else:
                items.append(BenchmarkItem(list(row["prompt"]), target=list(row["target"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed benchmark item ({exc})") from exc
    if name is None:
        raise ValueError(f"{path}: empty benchmark file")
    return BenchmarkTask(name, kind, items)


def make_benchmark(name: str, n_items: int = 200, seed: int = 0, vocab_size: int = 64,
                   world_seed: int = 1234, n_choices: int = 4, copy_len: int = 3) -> BenchmarkTask:
    rng = np.random.default_rng([seed, 97, BENCHMARKS.index(name) if name in BENCHMARKS else 99])
    n_sym = n_symbols(vocab_size)
    items = []
    if name == "mmlu":
        table = fact_table(vocab_size, world_seed)
        n_choices = min(n_choices, n_sym)
        for _ in range(n_items):
            key = int(rng.integers(0, n_sym))
            right = int(table[key])
            wrong = [int(v) for v in rng.permutation(n_sym) if v != right][:n_choices - 1]
            options = [right, *wrong]
            order = rng.permutation(len(options))
            choices = [[options[j] + FIRST_SYMBOL, EOS] for j in order]
            answer = int(np.flatnonzero(order == 0)[0])
            items.append(BenchmarkItem([BOS, TASK_TOKENS["fact"], key + FIRST_SYMBOL, SEP],
                                       choices, answer))
        return BenchmarkTask(name, "multiple_choice", items)
    if name == "math":
        for _ in range(n_items):
            a, b = (int(v) for v in rng.integers(0, n_sym, size=2))
            items.append(BenchmarkItem([BOS, TASK_TOKENS["add"], a + FIRST_SYMBOL, b + FIRST_SYMBOL, SEP],
                                       target=[(a + b) % n_sym + FIRST_SYMBOL, EOS]))
        return BenchmarkTask(name, "exact_match_generation", items)
    if name == "code":
        for _ in range(n_items):
            xs = (rng.integers(0, n_sym, size=copy_len) + FIRST_SYMBOL).tolist()
            items.append(BenchmarkItem([BOS, TASK_TOKENS["copy"], *xs, SEP], target=[*xs, EOS]))
        return BenchmarkTask(name, "exact_match_generation", items)
    raise ValueError(f"unknown benchmark {name!r}; expected one of {BENCHMARKS}")


def benchmark_suite(n_items: int = 200, seed: int = 0, vocab_size: int = 64,
                    world_seed: int = 1234) -> dict[str, BenchmarkTask]:
    return {n: make_benchmark(n, n_items, seed, vocab_size, world_seed) for n in BENCHMARKS}


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def eval_loss(model, eval_set, batch_size: int = 64) -> float:
    """Token-weighted mean cross-entropy over all supervised positions."""
    if len(eval_set) == 0:
        raise ValueError("empty eval set")
    total, count = 0.0, 0
    with no_grad():
        for inputs, targets in eval_set.batches(batch_size):
            valid = targets != IGNORE_INDEX
            if not valid.any():
                continue
            lp = _log_softmax(model.forward(inputs).data)
            rows = np.nonzero(valid)
            total -= float(lp[rows + (targets[rows],)].sum())
            count += int(valid.sum())
    if count == 0:
        raise ValueError("eval set has no supervised positions")
    return total / count


def _pad(seqs: list[list[int]]) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _score_choices(model, task: BenchmarkTask, length_normalize: bool, batch_size: int) -> int:
    max_seq = model.config.max_seq
    seqs, spans, owners = [], [], []
    for i, item in enumerate(task.items):
        for c in item.choices:
            seq = item.prompt + c
            if len(seq) - 1 > max_seq:
                raise ValueError(f"choice sequence of length {len(seq)} exceeds max_seq {max_seq}")
            seqs.append(seq)
            spans.append((len(item.prompt), len(seq)))
            owners.append(i)
    scores = np.empty(len(seqs))
    with no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            tok = _pad(chunk)
            lp = _log_softmax(model.forward(tok[:, :-1]).data)
            for j, seq in enumerate(chunk):
                a, b = spans[start + j]
                pos = np.arange(a - 1, b - 1)
                s = float(lp[j, pos, tok[j, a:b]].sum())
                scores[start + j] = s / (b - a) if length_normalize else s
    correct, k = 0, 0
    for item in task.items:
        n = len(item.choices)
        if int(np.argmax(scores[k:k + n])) == item.answer:
            correct += 1
        k += n
    return correct


def _score_generation(model, task: BenchmarkTask, batch_size: int) -> int:
    max_seq = model.config.max_seq
    correct = 0
    with no_grad():
        for start in range(0, len(task.items), batch_size):
            chunk = task.items[start:start + batch_size]
            need = max(len(it.prompt) + len(it.target) - 1 for it in chunk)
            if need > max_seq:
                raise ValueError(f"decoding needs {need} positions, max_seq is {max_seq}")
            lens = np.array([len(it.prompt) for it in chunk])
            width = need
            tok = np.full((len(chunk), width), PAD, dtype=np.int64)
            for j, it in enumerate(chunk):
                tok[j, :len(it.prompt)] = it.prompt
            steps = max(len(it.target) for it in chunk)
            out = [[] for _ in chunk]
            for _ in range(steps):
                cur = int(lens.max())
                logits = model.forward(tok[:, :cur]).data
                nxt = logits[np.arange(len(chunk)), lens - 1].argmax(axis=-1)
                for j, it in enumerate(chunk):
                    if len(out[j]) < len(it.target):
                        out[j].append(int(nxt[j]))
                        if lens[j] < width:
                            tok[j, lens[j]] = nxt[j]
                        lens[j] += 1
            correct += sum(out[j] == it.target for j, it in enumerate(chunk))
    return correct


def score_benchmark(model, task: BenchmarkTask, length_normalize: bool = False,
                    batch_size: int = 128) -> BenchmarkScore:
    if task.kind == "multiple_choice":
        correct = _score_choices(model, task, length_normalize, batch_size)
    else:
        correct = _score_generation(model, task, batch_size)
    return BenchmarkScore(task.name, correct / len(task.items), len(task.items))


def _same_task(a, b) -> None:
    if a.name != b.name:
        raise ValueError(f"task mismatch: {a.name!r} vs {b.name!r}")


def forgetting_delta(base: BenchmarkScore, ft: BenchmarkScore) -> ForgettingDelta:
    _same_task(base, ft)
    return ForgettingDelta(base.name, base.accuracy, ft.accuracy,
                           100.0 * (ft.accuracy - base.accuracy))


def extra_forgetting(std_delta: ForgettingDelta, ale_delta: ForgettingDelta) -> float:
    """Selective recipe's delta minus the all-layer recipe's delta, in pp."""
    _same_task(std_delta, ale_delta)
    return ale_delta.delta_pp - std_delta.delta_pp


def benchmark_delta(std: BenchmarkScore, ale: BenchmarkScore) -> float:
    _same_task(std, ale)
    return 100.0 * (ale.accuracy - std.accuracy)
