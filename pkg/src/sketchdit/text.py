"""Prompt vocabulary and tokenizer for the synthetic scene grammar.

Prompts are comma-joined clauses of the form "<color> <kind> <motion>", e.g.
"red square moves right, blue circle still". The tokenizer lowercases, splits
on whitespace and treats commas as their own token. Unknown words map to UNK
rather than raising, so arbitrary prompts never crash the model.
"""

from __future__ import annotations

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
KINDS = ("square", "circle", "triangle")
MOTION_WORDS = ("moves", "left", "right", "up", "down", "still")

PAD, UNK = "<pad>", "<unk>"
VOCAB: tuple[str, ...] = (PAD, UNK, ",") + COLORS + KINDS + MOTION_WORDS
PAD_ID = 0
UNK_ID = 1

_TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().replace(",", " , ").split()


def encode(prompt: str, pad_to: int | None = None) -> list[int]:
    """Token ids for a prompt; optionally right-padded/truncated to pad_to.

    The empty prompt encodes to a zero-length sequence even when pad_to is
    set: that is the unconditional representation, not a padded one.
    """
    ids = [_TOKEN_IDS.get(tok, UNK_ID) for tok in tokenize(prompt)]
    if pad_to is not None and ids:
        ids = ids[:pad_to] + [PAD_ID] * (pad_to - len(ids))
    return ids
