"""Closed-lexicon word tokenizer and the instruction prompt template."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

import numpy as np

from . import synthenv
from .errors import ContractError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

PROMPT_TEMPLATE = ("System: You are controlling a robotic agent. Your task is to {task}.\n"
                   "User: What should the robot do next?\n"
                   "Answer:")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]|\n")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace (metric-side text normalisation)."""
    return " ".join(re.findall(r"[a-z0-9]+", text.lower()))


def _lexicon() -> list[str]:
    words: set[str] = set()
    words.update(synthenv.SHAPES)
    words.update(synthenv.COLORS)
    for phrase in (*synthenv.RELATIONS, *synthenv.REGIONS, *synthenv.TASK_FAMILIES.values(),
                   "move the push the towards", PROMPT_TEMPLATE.format(task="")):
        words.update(split_words(phrase))
    return sorted(words)


class Tokenizer:
    def __init__(self, words: Iterable[str] | None = None, max_len: int = 24):
        vocab = list(SPECIALS) + [w for w in (words if words is not None else _lexicon())
                                  if w not in SPECIALS]
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.max_len = max_len
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.vocab[i])
        return " ".join(words)

    def batch(self, texts: Sequence[str], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and validity mask, truncated to ``max_len``."""
        max_len = max_len or self.max_len
        seqs = []
        for t in texts:
            ids = self.encode(t)
            if not ids:
                raise ContractError("cannot encode an empty string")
            seqs.append(ids[:max_len])
        L = max(len(s) for s in seqs)
        ids = np.full((len(seqs), L), self.pad_id, dtype=np.int64)
        valid = np.zeros((len(seqs), L), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
            valid[i, :len(s)] = True
        return ids, valid


def render_prompt(high_level: str) -> str:
    if not high_level or not high_level.strip():
        raise ContractError("high-level instruction must be nonempty")
    return PROMPT_TEMPLATE.format(task=high_level)


def build_prompt(high_level: str, tokenizer: Tokenizer) -> list[int]:
    return [tokenizer.bos_id] + tokenizer.encode(render_prompt(high_level))
