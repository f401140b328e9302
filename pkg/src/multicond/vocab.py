"""Closed token vocabulary shared by the caption grammar, text encoder and
condition evaluator.

The vocabulary is fixed and tiny: special tokens, the caption grammar words,
a 4-word instruction prefix, and one query token per condition slot
(``<cond0>`` .. ``<cond11>``).  Checkpoints embed the table so rankings stay
reproducible across runs.
"""

from __future__ import annotations

COLOR_WORDS = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"]
SHAPE_WORDS = ["circle", "square", "triangle"]
RELATION_WORDS = ["left", "right", "above", "below"]
INSTRUCTION_WORDS = ["rank", "these", "control", "maps"]

MAX_CONDITIONS = 12  # condition slots supported per sample

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


def _build_table() -> list[str]:
    words = [PAD, BOS, EOS, "a", "of"]
    words += RELATION_WORDS
    words += COLOR_WORDS
    words += SHAPE_WORDS
    words += INSTRUCTION_WORDS
    words += [f"<cond{i}>" for i in range(MAX_CONDITIONS)]
    return words


VOCAB: list[str] = _build_table()
TOKEN_TO_ID: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}

PAD_ID = TOKEN_TO_ID[PAD]
BOS_ID = TOKEN_TO_ID[BOS]
EOS_ID = TOKEN_TO_ID[EOS]

INSTRUCTION_PREFIX_IDS = [TOKEN_TO_ID[w] for w in INSTRUCTION_WORDS]
CONDITION_TOKEN_IDS = [TOKEN_TO_ID[f"<cond{i}>"] for i in range(MAX_CONDITIONS)]

VOCAB_SIZE = len(VOCAB)


def encode(words: list[str]) -> list[int]:
    """Map grammar words to token ids; unknown words raise KeyError."""
    return [TOKEN_TO_ID[w] for w in words]


def decode(ids: list[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def condition_token_id(slot: int) -> int:
    if not 0 <= slot < MAX_CONDITIONS:
        raise IndexError(f"condition slot {slot} outside 0..{MAX_CONDITIONS - 1}")
    return CONDITION_TOKEN_IDS[slot]
