"""Pluggable text front-end. The default is a lower-cased character
vocabulary; an external phonemizer can be supplied as ``normalize``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class TextError(ValueError):
    pass


@dataclass
class PhonemeSequence:
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) == 0:
            raise TextError("phoneme sequence must be a non-empty 1-D id list")

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    def __init__(self, symbols: str, normalize: Callable[[str], str] | None = None, pad: str = "_"):
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        self.normalize = normalize or (lambda t: " ".join(t.lower().split()))
        self.pad_id = self.index.get(pad, 0)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> PhonemeSequence:
        norm = self.normalize(text)
        ids = [self.index[c] for c in norm if c in self.index]
        if not ids:
            raise TextError(f"no known symbols in {text!r}")
        return PhonemeSequence(np.array(ids))

    def decode(self, seq: PhonemeSequence) -> str:
        return "".join(self.symbols[i] for i in seq.ids)
