"""Command templates for the synthetic pick-place source and the word vocabulary."""

from __future__ import annotations

from pathlib import Path

from .errors import VocabularyError

PAD = "<pad>"
OBJECTS = ("red cube", "blue block", "green cylinder")
DESTINATIONS = {"left": 0.18, "center": 0.0, "right": -0.18}
HOLD_STILL = "hold still"


def command_templates() -> list[str]:
    """Every command the generator can emit, in a fixed order."""
    out = []
    for obj in OBJECTS:
        for dest in DESTINATIONS:
            out.append(f"pick up the {obj} and place it on the {dest}")
            out.append(f"put the {obj} on the {dest}")
    out.append(HOLD_STILL)
    return out


def destination_of(command: str) -> str | None:
    words = command.split()
    for dest in DESTINATIONS:
        if dest in words:
            return dest
    return None


class Vocabulary:
    """Word → one-hot index; index 0 is reserved for the pad symbol."""

    def __init__(self, words: list[str]):
        if not words or words[0] != PAD:
            words = [PAD] + [w for w in words if w != PAD]
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words = sorted({w for c in command_templates() for w in c.split()})
        return cls([PAD] + words)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, command: str, length: int) -> list[int]:
        """Word indices padded/truncated to ``length``."""
        words = command.lower().split()
        missing = [w for w in words if w not in self.index]
        if missing:
            raise VocabularyError(missing)
        ids = [self.index[w] for w in words][:length]
        return ids + [0] * (length - len(ids))
