from __future__ import annotations

START, END, UNK = "<start>", "<end>", "<unk>"
RESERVED = (START, END, UNK)


class Vocabulary:
    """Token <-> index bijection; reserved tokens occupy indices 0, 1, 2."""

    def __init__(self, words):
        tokens = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.start, self.end, self.unk = (self.index[t] for t in RESERVED)

    @classmethod
    def build(cls, sentences):
        words = sorted({w for s in sentences for w in s.split()})
        return cls(words)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, sentence):
        ids = [self.index.get(w, self.unk) for w in sentence.split()]
        return ids

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"{path}: vocabulary must start with {RESERVED}")
        return cls(tokens[3:])
