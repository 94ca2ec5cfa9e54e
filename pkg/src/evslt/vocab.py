"""Token vocabulary and sentinel-delimited sentences."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from evslt.errors import ConfigError, DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class TokenSentence:
    """Vocabulary ids starting with BOS and ending with EOS."""

    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
            raise ValueError(f"sentence must be BOS ... EOS, got {ids}")
        if BOS in ids[1:] or EOS in ids[:-1] or PAD in ids:
            raise ValueError(f"misplaced sentinel in {ids}")

    @classmethod
    def from_body(cls, body: Iterable[int]) -> "TokenSentence":
        return cls((BOS, *body, EOS))

    @property
    def body(self) -> tuple[int, ...]:
        return self.ids[1:-1]

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    """Bijective token/id map; ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens:
            raise ConfigError("vocabulary must not be empty")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok) or tok in RESERVED:
                raise ConfigError(f"invalid vocabulary token {tok!r}")
        self.tokens = tokens
        self._ids = {tok: i + len(RESERVED) for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if idx < len(RESERVED):
            return RESERVED[idx]
        return self.tokens[idx - len(RESERVED)]

    def encode(self, text: str) -> TokenSentence:
        """Whitespace tokenization into a complete sentence."""
        return TokenSentence.from_body(self.id_of(tok) for tok in text.split())

    def decode(self, sentence: TokenSentence | Sequence[int]) -> str:
        ids = sentence.ids if isinstance(sentence, TokenSentence) else sentence
        return " ".join(self.token_of(i) for i in ids if i not in (PAD, BOS, EOS))

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls([ln for ln in lines if ln])
