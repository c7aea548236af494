"""Synthetic grid-captioning task.

An image is a ``side x side`` grid of RGB-like cells on a black background
with exactly one colored cell.  Its caption names the color and the cell
position, e.g. ``"red at row 1 col 2"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"

COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}

PROMPT_WORDS = ("describe", "the", "image")
MAX_SIDE = 8


class Vocab:
    """Fixed word-level vocabulary; ids 0, 1, 2 are PAD, BOS, EOS."""

    def __init__(self, words: Sequence[str]):
        self.words: List[str] = [PAD, BOS, EOS]
        for w in words:
            if w not in self.words:
                self.words.append(w)
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def default(cls) -> "Vocab":
        words = list(PROMPT_WORDS) + list(COLORS) + ["at", "row", "col"]
        words += [str(i) for i in range(MAX_SIDE)]
        return cls(words)

    def __len__(self):
        return len(self.words)

    pad_id = property(lambda self: self.index[PAD])
    bos_id = property(lambda self: self.index[BOS])
    eos_id = property(lambda self: self.index[EOS])

    def encode(self, text: str) -> List[int]:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise KeyError(f"word {w!r} is not in the vocabulary")
            ids.append(self.index[w])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)


@dataclass
class SyntheticTask:
    side: int = 4
    colors: Tuple[str, ...] = tuple(COLORS)
    seed: int = 0
    vocab: Vocab = field(default_factory=Vocab.default)

    def __post_init__(self):
        if not 1 <= self.side <= MAX_SIDE:
            raise ValueError(f"grid side must lie in [1, {MAX_SIDE}]")
        unknown = [c for c in self.colors if c not in COLORS]
        if unknown:
            raise ValueError(f"unknown colors {unknown}")

    @property
    def prompt(self) -> str:
        return " ".join(PROMPT_WORDS)

    def prompt_ids(self) -> List[int]:
        return [self.vocab.bos_id] + self.vocab.encode(self.prompt)

    def render(self, color: str, row: int, col: int) -> np.ndarray:
        image = np.zeros((self.side, self.side, 3))
        image[row, col] = COLORS[color]
        return image

    @staticmethod
    def caption(color: str, row: int, col: int) -> str:
        return f"{color} at row {row} col {col}"

    def describe(self, image: np.ndarray) -> str:
        """Caption recovered from the image itself; inverse of :meth:`render`."""
        lit = np.argwhere(np.asarray(image).sum(axis=-1) > 0)
        if len(lit) != 1:
            raise ValueError("image must contain exactly one colored cell")
        row, col = (int(v) for v in lit[0])
        rgb = tuple(float(v) for v in image[row, col])
        color = next(name for name, value in COLORS.items() if value == rgb)
        return self.caption(color, row, col)

    def sample(self, rng: np.random.Generator):
        color = self.colors[rng.integers(len(self.colors))]
        row, col = (int(v) for v in rng.integers(self.side, size=2))
        return self.render(color, row, col), self.caption(color, row, col)

    def batch(self, rng: np.random.Generator, size: int):
        images, captions = zip(*(self.sample(rng) for _ in range(size)))
        return np.stack(images), list(captions)

    def sequences(self, captions: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Teacher-forcing inputs and targets for a batch of captions.

        Inputs are ``prompt + caption``; targets are the caption shifted by
        one followed by EOS, aligned to the last prompt position onward.
        Captions here always have the same length, so no padding is needed.
        """
        prompt = self.prompt_ids()
        inputs, targets = [], []
        for text in captions:
            words = self.vocab.encode(text)
            inputs.append(prompt + words)
            targets.append(words + [self.vocab.eos_id])
        return np.array(inputs), np.array(targets)
