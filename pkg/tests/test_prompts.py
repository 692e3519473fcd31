import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from agerestore import prompts


def test_age_prompt_contains_age_token():
    _, c_prime = prompts.build_prompts(24)
    assert prompts.age_token(24) in c_prime
    assert "AGE_24" in prompts.decode(c_prime)


def test_plain_source_prompt_is_training_prompt():
    c, _ = prompts.build_prompts(40, negatives=False)
    assert c == prompts.generic_prompt()
    assert prompts.decode(c) == ["photo", "of", "a", "person"]


def test_negatives_only_on_source():
    c, c_prime = prompts.build_prompts(40, negatives=True)
    assert set(prompts.DESCRIPTORS) <= set(prompts.decode(c))
    assert not set(prompts.DESCRIPTORS) & set(prompts.decode(c_prime))


@given(st.floats(0, 100))
def test_rounding_half_up(age):
    expect = int(age + 0.5)
    assert prompts.age_prompt(age) == prompts.age_prompt(expect)


def test_rounding_examples():
    assert prompts.age_prompt(24.4) == prompts.age_prompt(24)
    assert prompts.age_prompt(24.5) == prompts.age_prompt(25)


@pytest.mark.parametrize("age", [-1, 100.6, 150])
def test_out_of_vocabulary_age(age):
    with pytest.raises(prompts.PromptError):
        prompts.age_prompt(age)


def test_pad_batch_and_age_mask():
    batch = prompts.pad_batch([prompts.generic_prompt(), prompts.age_prompt(7)])
    assert batch.shape == (2, 6)
    assert batch[0, -1] == prompts.PAD
    mask = prompts.is_age_token(batch)
    assert mask.sum() == 1 and mask[1].any()


def test_unknown_word():
    with pytest.raises(prompts.PromptError):
        prompts.encode(["photo", "dog"])
