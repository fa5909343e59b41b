import numpy as np
import pytest

from promptir.encoder import EncoderConfig, init_model
from promptir.prompts import PromptSet
from promptir.tokenizer import Vocabulary

TINY_TEXTS = [
    "the cat sat on the mat and purred softly.",
    "dogs chase the red ball across the park every day.",
    "a quick brown fox jumps over the lazy dog.",
    "rivers flow down the mountain into the quiet valley.",
    "the chef cooked a warm soup with fresh herbs.",
    "students read many books before the final exam.",
    "the old clock on the wall ticked through the night.",
    "bright stars fill the sky far from the city lights.",
]


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary.build(TINY_TEXTS)


def make_tiny_model(vocab, num_layers=2, hidden_size=16, num_heads=2,
                    ffn_size=32, max_seq_len=32, prompt_length=4, seed=0,
                    **kwargs):
    config = EncoderConfig(
        num_layers=num_layers,
        hidden_size=hidden_size,
        num_heads=num_heads,
        ffn_size=ffn_size,
        vocab_size=len(vocab),
        max_seq_len=max_seq_len,
        prompt_length=prompt_length,
        **kwargs,
    )
    return init_model(config, vocab, seed=seed)


def make_tiny_prompts(model, seed=1, **kwargs):
    cfg = model.config
    return PromptSet.create(
        "tiny-task",
        cfg.prompt_length,
        cfg.hidden_size,
        cfg.num_layers,
        reparam_mode=cfg.reparam_mode,
        mlp_hidden=cfg.mlp_hidden,
        seed=seed,
        **kwargs,
    )


@pytest.fixture
def tiny_model(tiny_vocab):
    return make_tiny_model(tiny_vocab)


@pytest.fixture
def tiny_prompts(tiny_model):
    return make_tiny_prompts(tiny_model)
