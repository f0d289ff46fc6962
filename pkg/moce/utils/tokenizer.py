from pathlib import Path
from typing import Iterable, List, Sequence, Union

from .exceptions import DataFormatError

SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<sep>", "<eos>")
PAD_ID, UNK_ID, BOS_ID, SEP_ID, EOS_ID = range(len(SPECIAL_TOKENS))
BYTE_OFFSET = len(SPECIAL_TOKENS)
WORD_OFFSET = BYTE_OFFSET + 256

VOCAB_HEADER = "MOCE-VOCAB v1"


class WhitespaceTokenizer:
    """Whitespace word vocabulary with a UTF-8 byte fallback for unseen words."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: List[str] = sorted(set(words))
        self._word_ids = {word: WORD_OFFSET + i for i, word in enumerate(self.words)}

    @classmethod
    def fit(cls, texts: Iterable[str]) -> "WhitespaceTokenizer":
        vocabulary = set()
        for text in texts:
            vocabulary.update(text.split())
        return cls(vocabulary)

    @property
    def vocab_size(self) -> int:
        return WORD_OFFSET + len(self.words)

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for word in text.split():
            word_id = self._word_ids.get(word)
            if word_id is not None:
                ids.append(word_id)
            else:
                ids.extend(BYTE_OFFSET + b for b in word.encode("utf-8"))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words: List[str] = []
        pending = bytearray()
        for token_id in ids:
            if BYTE_OFFSET <= token_id < WORD_OFFSET:
                pending.append(token_id - BYTE_OFFSET)
                continue
            if pending:
                words.append(pending.decode("utf-8", errors="replace"))
                pending = bytearray()
            if token_id >= WORD_OFFSET:
                words.append(self.words[token_id - WORD_OFFSET])
        if pending:
            words.append(pending.decode("utf-8", errors="replace"))
        return " ".join(words)

    def save(self, path: Union[str, Path]) -> None:
        lines = [f"{VOCAB_HEADER} {len(self.words)}"] + self.words
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WhitespaceTokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(VOCAB_HEADER):
            raise DataFormatError(f"{path}: missing '{VOCAB_HEADER}' header")
        try:
            count = int(lines[0].split()[-1])
        except ValueError:
            raise DataFormatError(f"{path}: malformed vocabulary header '{lines[0]}'")
        words = lines[1:]
        if len(words) != count:
            raise DataFormatError(f"{path}: header declares {count} words, found {len(words)}")
        return cls(words)
