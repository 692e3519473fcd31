"""Closed prompt vocabulary and prompt construction.

The generic prompt is ``photo of a person``; age prompts read
``photo of a <k> year-old person`` with one numeral token per integer age.
"""

from __future__ import annotations

import math

import torch

SPECIAL = ["<pad>", "photo", "of", "a", "person", "year-old"]
DESCRIPTORS = ["oversaturated", "blurry", "cartoon-like", "malformed"]
MAX_AGE = 100

VOCAB: list[str] = SPECIAL + [f"AGE_{k}" for k in range(MAX_AGE + 1)] + DESCRIPTORS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD = TOKEN_ID["<pad>"]
AGE_OFFSET = TOKEN_ID["AGE_0"]
MAX_PROMPT_LEN = 12


class PromptError(ValueError):
    pass


def age_token(age: int) -> int:
    if not 0 <= age <= MAX_AGE:
        raise PromptError(f"age {age} outside vocabulary 0..{MAX_AGE}")
    return AGE_OFFSET + int(age)


def is_age_token(ids: torch.Tensor) -> torch.Tensor:
    return (ids >= AGE_OFFSET) & (ids <= AGE_OFFSET + MAX_AGE)


def encode(words: list[str]) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise PromptError(f"unknown token {exc.args[0]!r}") from None


def generic_prompt(negatives: bool = False, descriptors: list[str] | None = None) -> list[int]:
    ids = encode(["photo", "of", "a", "person"])
    if negatives:
        ids += encode(descriptors if descriptors is not None else DESCRIPTORS)
    return ids


def age_prompt(age: float) -> list[int]:
    if not 0 <= age <= MAX_AGE:
        raise PromptError(f"age {age} outside vocabulary 0..{MAX_AGE}")
    k = int(math.floor(age + 0.5))
    return encode(["photo", "of", "a"]) + [age_token(k)] + encode(["year-old", "person"])


def build_prompts(target_age: float, negatives: bool = True) -> tuple[list[int], list[int]]:
    """(source prompt c, age prompt c') for guidance; negatives go on c only."""
    return generic_prompt(negatives), age_prompt(target_age)


def pad_batch(prompts: list[list[int]], length: int | None = None) -> torch.Tensor:
    """Right-pad token lists into a (B, L) long tensor."""
    length = length or max(len(p) for p in prompts)
    if length > MAX_PROMPT_LEN:
        raise PromptError(f"prompt longer than {MAX_PROMPT_LEN} tokens")
    out = torch.full((len(prompts), length), PAD, dtype=torch.long)
    for i, p in enumerate(prompts):
        out[i, : len(p)] = torch.tensor(p, dtype=torch.long)
    return out


def decode(ids) -> list[str]:
    return [VOCAB[int(i)] for i in ids if int(i) != PAD]
