"""Deterministic synthetic seq2seq task families and batching.

Each task owns an input "domain" (its alphabet plus optional character
weights) and a transform rule. Domains are what make tasks recognizable from
inputs alone, which is what prototype retrieval relies on. Generators reject
degenerate inputs (already-sorted strings for sort, palindromes for reverse,
and so on) so that every (input, target) pair identifies exactly one family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .errors import ConfigError, ContractError, TokenizationError

FAMILIES = ("copy", "reverse", "sort", "shift-cipher", "vowel-mask", "pair-compare")
VOWELS = set("aeiou")
LETTERS = "abcdefghijklmnopqrstuvwxyz"

# Letters, the pair separator, the vowel mask char, and comparison outputs.
DEFAULT_ALPHABET = LETTERS + "#_<=>"

PAD, BOS, EOS = 0, 1, 2


class CharTokenizer:
    """Character-level tokenizer with PAD/BOS/EOS specials."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigError("tokenizer alphabet has duplicate characters")
        self.alphabet = alphabet
        self._to_id = {ch: i + 3 for i, ch in enumerate(alphabet)}
        self._to_char = {i + 3: ch for i, ch in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 3

    def tokenize(self, text: str) -> list[int]:
        ids = [BOS]
        for ch in text:
            if ch not in self._to_id:
                raise TokenizationError(f"character {ch!r} not in alphabet")
            ids.append(self._to_id[ch])
        ids.append(EOS)
        return ids

    def detokenize(self, ids) -> str:
        chars = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            if i not in self._to_char:
                raise TokenizationError(f"token id {i} not in vocabulary")
            chars.append(self._to_char[i])
        return "".join(chars)


@dataclass(frozen=True)
class TaskSpec:
    """Identity of one synthetic task: domain plus transform rule."""

    name: str
    family: str
    alphabet: str
    min_len: int
    max_len: int
    seed: int
    shift: int | None = None          # shift-cipher only
    weights: tuple[float, ...] | None = None  # sampling weights over alphabet

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"task {self.name!r}: unknown family {self.family!r}")
        if not (1 <= self.min_len <= self.max_len):
            raise ConfigError(f"task {self.name!r}: bad length range")
        if any(ch not in LETTERS for ch in self.alphabet):
            raise ConfigError(f"task {self.name!r}: alphabet must be lowercase letters")
        if self.family == "shift-cipher":
            if self.shift is None or not (1 <= self.shift <= 25):
                raise ConfigError(f"task {self.name!r}: shift-cipher needs shift in [1, 25]")
        elif self.shift is not None:
            raise ConfigError(f"task {self.name!r}: shift only applies to shift-cipher")
        if self.family == "vowel-mask" and not any(ch in VOWELS for ch in self.alphabet):
            raise ConfigError(f"task {self.name!r}: vowel-mask alphabet needs a vowel")
        if self.weights is not None and len(self.weights) != len(self.alphabet):
            raise ConfigError(f"task {self.name!r}: weights length must match alphabet")

    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.alphabet), 1.0 / len(self.alphabet))
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


@dataclass
class Example:
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    task_id: int
    input_text: str = ""
    target_text: str = ""


@dataclass
class TaskBatch:
    """Padded mixed minibatch; every example carries its task identity."""

    input_ids: np.ndarray       # [B, T_in] int64, PAD-filled
    input_mask: np.ndarray      # [B, T_in] float64, 1 on real positions
    target_ids: np.ndarray      # [B, T_tgt] int64, PAD-filled
    task_ids: np.ndarray        # [B] int64

    def task_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.task_ids, return_counts=True)
        return {int(t): int(c) for t, c in zip(ids, counts)}


def apply_rule(spec: TaskSpec, text: str) -> str:
    """Reference transform for the family; generators and tests share it."""
    if spec.family == "copy":
        return text
    if spec.family == "reverse":
        return text[::-1]
    if spec.family == "sort":
        return "".join(sorted(text))
    if spec.family == "shift-cipher":
        return "".join(chr((ord(c) - 97 + spec.shift) % 26 + 97) for c in text)
    if spec.family == "vowel-mask":
        return "".join("_" if c in VOWELS else c for c in text)
    if spec.family == "pair-compare":
        left, right = text.split("#")
        return "<" if left < right else (">" if left > right else "=")
    raise ConfigError(f"unknown family {spec.family!r}")


def _draw_string(spec: TaskSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    chars = rng.choice(list(spec.alphabet), size=n, p=spec.probs())
    return "".join(chars)


def _acceptable(spec: TaskSpec, text: str) -> bool:
    # Rejections keep (input, target) pairs unambiguous across families.
    if spec.family == "copy":
        return text != "".join(sorted(text)) and text != text[::-1]
    if spec.family == "reverse":
        return text != text[::-1] and text != "".join(sorted(text, reverse=True))
    if spec.family == "sort":
        s = sorted(text)
        return list(text) != s and list(text) != s[::-1]
    if spec.family == "vowel-mask":
        return any(c in VOWELS for c in text)
    return True


def _generate_input(spec: TaskSpec, rng: np.random.Generator) -> str:
    if spec.family == "pair-compare":
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        left = "".join(rng.choice(list(spec.alphabet), size=n, p=spec.probs()))
        if rng.random() < 1.0 / 3.0:
            right = left
        else:
            right = "".join(rng.choice(list(spec.alphabet), size=n, p=spec.probs()))
        return left + "#" + right
    while True:
        text = _draw_string(spec, rng)
        if _acceptable(spec, text):
            return text


def generate_examples(spec: TaskSpec, n: int, task_id: int = 0,
                      tokenizer: CharTokenizer | None = None) -> list[Example]:
    """Deterministic stream of n examples for one task."""
    if n < 1:
        raise ContractError("generate_examples needs n >= 1")
    tok = tokenizer or CharTokenizer()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(n):
        text = _generate_input(spec, rng)
        target = apply_rule(spec, text)
        out.append(Example(
            input_ids=tuple(tok.tokenize(text)),
            target_ids=tuple(tok.tokenize(target)),
            task_id=task_id,
            input_text=text,
            target_text=target,
        ))
    return out


def pad_batch(examples: list[Example], max_len: int) -> TaskBatch:
    """Pad a list of examples into arrays, truncating anything overlong."""
    if not examples:
        raise ContractError("pad_batch on empty example list")
    ins = [list(e.input_ids[:max_len]) for e in examples]
    tgts = [list(e.target_ids[:max_len]) for e in examples]
    t_in = max(len(s) for s in ins)
    t_tgt = max(len(s) for s in tgts)
    b = len(examples)
    input_ids = np.full((b, t_in), PAD, dtype=np.int64)
    input_mask = np.zeros((b, t_in), dtype=np.float64)
    target_ids = np.full((b, t_tgt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(ins, tgts)):
        input_ids[i, :len(s)] = s
        input_mask[i, :len(s)] = 1.0
        target_ids[i, :len(t)] = t
    return TaskBatch(input_ids, input_mask, target_ids,
                     np.asarray([e.task_id for e in examples], dtype=np.int64))


def sample_multitask_batch(datasets: list[list[Example]], batch_size: int,
                           rng: np.random.Generator, max_len: int) -> TaskBatch:
    """Draw a mixed batch, proportional to dataset sizes (concatenated pool)."""
    if batch_size < 2:
        raise ContractError("batch_size must be at least 2")
    pool = [ex for ds in datasets for ex in ds]
    idx = rng.integers(0, len(pool), size=batch_size)
    return pad_batch([pool[i] for i in idx], max_len)


def split_few_shot(dataset: list[Example], k: int, seed: int) -> tuple[list[Example], list[Example]]:
    """Disjoint (support, test) split with k support examples."""
    if k >= len(dataset):
        raise ContractError(f"k={k} must be smaller than dataset size {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    support = [dataset[i] for i in order[:k]]
    test = [dataset[i] for i in order[k:]]
    return support, test


def dump_examples(path, examples: list[Example], task_names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"task": task_names[ex.task_id],
                                 "input": ex.input_text,
                                 "target": ex.target_text}) + "\n")


def load_examples(path, task_names: list[str],
                  tokenizer: CharTokenizer | None = None) -> list[Example]:
    tok = tokenizer or CharTokenizer()
    name_to_id = {n: i for i, n in enumerate(task_names)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(Example(
                input_ids=tuple(tok.tokenize(rec["input"])),
                target_ids=tuple(tok.tokenize(rec["target"])),
                task_id=name_to_id[rec["task"]],
                input_text=rec["input"],
                target_text=rec["target"],
            ))
    return out
