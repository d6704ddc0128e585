"""Built-in experiment configurations.

Tasks are given distinct input domains (alphabet slices or weighted letter
distributions) because prototype retrieval can only work if tasks are
recognizable from inputs alone. The two registered shift ciphers share the
full alphabet but with mirrored frequency tilts, and the held-out cipher sits
between them, which is what makes sibling retrieval testable.
"""

from __future__ import annotations

import json

from .config import RunConfig, parse_run_config


def geometric_weights(n: int, ratio: float, reverse: bool = False) -> list[float]:
    w = [ratio ** i for i in range(n)]
    if reverse:
        w = w[::-1]
    total = sum(w)
    return [x / total for x in w]


CIPHER_ALPHABET = "stuvwxyz"


def _cipher_task(name: str, shift: int, seed: int, tilt: str) -> dict:
    # The registered ciphers share an alphabet and differ by frequency tilt;
    # the held-out tilt is milder and sits nearest the up-tilted sibling.
    ratios = {"down": (0.78, False), "up": (0.78, True), "mild-up": (0.82, True)}
    weights = None
    if tilt in ratios:
        ratio, rev = ratios[tilt]
        weights = geometric_weights(len(CIPHER_ALPHABET), ratio, reverse=rev)
    return {"name": name, "family": "shift-cipher", "alphabet": CIPHER_ALPHABET,
            "min_len": 4, "max_len": 8, "seed": seed, "shift": shift,
            "weights": weights, "n_train": 512, "n_eval": 64}


def _slice_task(name: str, family: str, alphabet: str, seed: int,
                min_len: int = 4, max_len: int = 8) -> dict:
    return {"name": name, "family": family, "alphabet": alphabet,
            "min_len": min_len, "max_len": max_len, "seed": seed,
            "n_train": 512, "n_eval": 64}


def reference_6task(seed: int = 0) -> dict:
    """The six-task suite used for the similarity, transfer, and ablation runs."""
    return {
        "schema_version": 1,
        "seed": seed,
        "model": {"d": 64, "n_heads": 4, "d_ff": 128, "enc_layers": 2, "dec_layers": 2,
                  "bottleneck": 8, "max_len": 32, "retrieval_dim": 16, "hyper_dim": 8},
        "train": {"total_steps": 1500, "warmup_steps": 100, "peak_lr": 1e-3,
                  "lambda": 0.1, "batch_size": 32, "eval_every": 500,
                  "temperature": 1.0, "adapt_steps": 10, "adapt_lr": 0.01},
        "pretrain": {"steps": 3000, "warmup_steps": 100, "peak_lr": 1e-3,
                     "batch_size": 32, "noise_rate": 0.1, "min_len": 3, "max_len": 10,
                     "target_accuracy": 0.95, "eval_every": 200, "eval_n": 96},
        "tasks": [
            _slice_task("copy", "copy", "abcdef", 101),
            _slice_task("reverse", "reverse", "ghijkl", 102, min_len=6),
            _slice_task("sort", "sort", "mnopqr", 103, min_len=6),
            _cipher_task("cipher1", 1, 104, "down"),
            _cipher_task("cipher2", 2, 105, "up"),
            _slice_task("vowel-mask", "vowel-mask", "aeiouy", 106),
        ],
        "heldout_tasks": [_cipher_task("cipher3", 2, 107, "mild-up")],
    }


def reference_4task(seed: int = 0) -> dict:
    """Four substitution-style tasks; the high-accuracy reference run."""
    base = reference_6task(seed)
    base["tasks"] = [
        _slice_task("copy", "copy", "abcdef", 101),
        _cipher_task("cipher1", 1, 104, "down"),
        _cipher_task("cipher2", 2, 105, "up"),
        _slice_task("vowel-mask", "vowel-mask", "aeiouy", 106),
    ]
    base["heldout_tasks"] = []
    return base


def tiny(seed: int = 0) -> dict:
    """Smallest config that exercises every code path; used by verify and tests."""
    return {
        "schema_version": 1,
        "seed": seed,
        "model": {"d": 16, "n_heads": 2, "d_ff": 32, "enc_layers": 1, "dec_layers": 1,
                  "bottleneck": 4, "max_len": 16, "retrieval_dim": 8, "hyper_dim": 4},
        "train": {"total_steps": 30, "warmup_steps": 5, "peak_lr": 1e-3,
                  "lambda": 0.1, "batch_size": 8, "eval_every": 15},
        "pretrain": {"steps": 400, "warmup_steps": 40, "peak_lr": 2e-3,
                     "batch_size": 16, "noise_rate": 0.05, "min_len": 3, "max_len": 6,
                     "target_accuracy": 0.95, "eval_every": 100, "eval_n": 48},
        "tasks": [
            {"name": "copy", "family": "copy", "alphabet": "abcdef",
             "min_len": 3, "max_len": 6, "seed": 11, "n_train": 64, "n_eval": 16},
            {"name": "cipher1", "family": "shift-cipher", "alphabet": "abcdefgh",
             "min_len": 3, "max_len": 6, "seed": 12, "shift": 1,
             "n_train": 64, "n_eval": 16},
        ],
    }


def load_preset(name: str, seed: int = 0) -> RunConfig:
    builders = {"reference-6task": reference_6task, "reference-4task": reference_4task,
                "tiny": tiny}
    return parse_run_config(builders[name](seed))


def write_preset(path, name: str, seed: int = 0) -> None:
    builders = {"reference-6task": reference_6task, "reference-4task": reference_4task,
                "tiny": tiny}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(builders[name](seed), fh, indent=2)
        fh.write("\n")
