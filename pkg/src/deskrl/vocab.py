"""Token vocabulary shared by the policy and the task generators.

Ids 0-3 are reserved (PAD, EOS, answer-open, answer-close). The remaining ids
are task symbols: digits, operators, parentheses, two colour symbols and
twelve node/letter symbols.
"""

from dataclasses import dataclass

PAD, EOS, ANSWER_OPEN, ANSWER_CLOSE = 0, 1, 2, 3

_RESERVED = ("<pad>", "<eos>", "<answer>", "</answer>")
_SYMBOLS = (
    tuple(str(i) for i in range(10))
    + ("+", "-", "*", "%", "=", "|", "(", ")", "X", "Y")
    + tuple("abcdefghijkl")
)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        if tuple(self.tokens[:4]) != _RESERVED:
            raise ValueError("first four tokens must be the reserved tokens")
        if not 8 <= len(self.tokens) <= 64:
            raise ValueError(f"vocabulary size {len(self.tokens)} outside [8, 64]")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self):
        return len(self.tokens)

    def id(self, token):
        return self._index[token]

    def encode(self, symbols):
        return tuple(self._index[s] for s in symbols)

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def render(self, ids):
        return " ".join(self.decode(ids))


VOCAB = Vocabulary(_RESERVED + _SYMBOLS)

DIGITS = VOCAB.encode(str(i) for i in range(10))
COLORS = VOCAB.encode("XY")
LETTERS = VOCAB.encode("abcdefghijkl")
