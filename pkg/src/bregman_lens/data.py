"""Byte-level corpora and synthetic task generators.

The default corpus mixes templated English prose (sentence-initial capitals),
repeated-block sequences (induction) and key=value bindings (recency), so the
three downstream probes have in-distribution prompts.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigurationError

NOUNS = (
    "cat dog bird house river tree king queen man woman boy girl child road city garden ship "
    "stone window letter book table door field forest mountain village teacher doctor farmer "
    "baker horse friend mother father sister brother morning evening night water fire light"
).split()
VERBS = (
    "sees finds takes holds wants likes keeps makes builds reads writes opens paints carries "
    "follows watches helps calls meets knows"
).split()
ADJS = "old young small large quiet bright dark green red cold warm happy tired clever gentle".split()
ADVS = "slowly quickly often never always softly gladly early late".split()
PREPS = "near under behind beside across over into from".split()
NAMES = "Anna Ben Clara David Ella Frank Grace Henry Iris Jack Kate Leo Mary Noah Olive Paul".split()
DETS = ("the", "a", "this", "that", "every", "my", "our")
LOWER = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"


def tokenize(data: bytes | bytearray | str) -> np.ndarray:
    """Identity byte -> token id map (vocabulary of 256)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise ValueError("token ids outside the byte range")
    return ids.astype(np.uint8).tobytes()


def sample_text() -> bytes:
    """Small public-domain text shipped with the package."""
    return resources.files("bregman_lens").joinpath("resources/gettysburg.txt").read_bytes()


def _noun_phrase(rng: np.random.Generator) -> str:
    if rng.random() < 0.2:
        return NAMES[rng.integers(len(NAMES))]
    words = [DETS[rng.integers(len(DETS))]]
    if rng.random() < 0.5:
        words.append(ADJS[rng.integers(len(ADJS))])
    words.append(NOUNS[rng.integers(len(NOUNS))])
    return " ".join(words)


def sentence(rng: np.random.Generator) -> str:
    parts = [_noun_phrase(rng), VERBS[rng.integers(len(VERBS))], _noun_phrase(rng)]
    if rng.random() < 0.4:
        parts.append(ADVS[rng.integers(len(ADVS))])
    if rng.random() < 0.4:
        parts += [PREPS[rng.integers(len(PREPS))], _noun_phrase(rng)]
    s = " ".join(parts)
    return s[0].upper() + s[1:] + "."


def prose(rng: np.random.Generator, n_sentences: int) -> str:
    return " ".join(sentence(rng) for _ in range(n_sentences)) + "\n"


def induction_record(rng: np.random.Generator, block_len: int | None = None) -> str:
    k = int(block_len or rng.integers(6, 13))
    block = "".join(LOWER[i] for i in rng.integers(0, 26, size=k))
    return f"#{block} {block}\n"


def recency_record(rng: np.random.Generator) -> tuple[str, str, str]:
    """``"k=v1 ... k=v2 k?"`` with answer ``v2``; returns (prompt, answer, stale value)."""
    keys = rng.choice(list("pqrstuvwxyz"), size=3, replace=False)
    key = keys[0]
    v1, v2 = rng.choice(list(DIGITS), size=2, replace=False)
    other = [f"{keys[1]}={DIGITS[rng.integers(10)]}", f"{keys[2]}={DIGITS[rng.integers(10)]}"]
    items = [f"{key}={v1}", other[0], f"{key}={v2}", other[1]]
    if rng.random() < 0.5:
        items[1], items[3] = items[3], items[1]
    return " ".join(items) + f" {key}?", str(v2), str(v1)


def synthetic_corpus(n_bytes: int = 1_000_000, seed: int = 0) -> bytes:
    rng = np.random.default_rng(seed)
    chunks, size = [], 0
    while size < n_bytes:
        r = rng.random()
        if r < 0.6:
            c = prose(rng, int(rng.integers(2, 6)))
        elif r < 0.8:
            c = induction_record(rng)
        else:
            prompt, ans, _ = recency_record(rng)
            c = prompt + ans + "\n"
        chunks.append(c)
        size += len(c)
    return "".join(chunks).encode("ascii")[:n_bytes]


@dataclass(frozen=True)
class TaskExample:
    prompt: np.ndarray  # token ids
    answer: int  # correct next token
    contrast: tuple[int, ...]  # tokens the answer competes with


def task_examples(task: str, n: int, seed: int = 0) -> list[TaskExample]:
    """Byte-level probes whose correct continuation is known by construction."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if task == "induction":
            rec = induction_record(rng, block_len=8)
            block = rec[1:9]
            cut = int(rng.integers(2, 7))
            prompt = f"#{block} {block[:cut]}"
            ans = block[cut]
            contrast = tuple(ord(c) for c in LOWER if c != ans)
        elif task == "recency":
            prompt, ans, stale = recency_record(rng)
            contrast = (ord(stale),)
        elif task == "capitalization":
            head = prose(rng, int(rng.integers(1, 3))).rstrip("\n")
            nxt = sentence(rng)
            prompt = head + " "
            ans = nxt[0]
            contrast = (ord(ans.lower()),)
        else:
            raise ConfigurationError(f"unknown task {task!r}; valid: induction, recency, capitalization")
        out.append(TaskExample(tokenize(prompt), ord(ans), contrast))
    return out


TASKS = ("induction", "recency", "capitalization")
