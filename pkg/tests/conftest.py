import pytest
import torch

from peftweave.model import ModelConfig, TinyTransformer
from peftweave.tokenizer import Vocab


def tiny_config(**overrides) -> ModelConfig:
    params = dict(vocab=Vocab(sentinel_count=8), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32,
                  max_input_length=64, max_target_length=32, relative_buckets=8, relative_max_distance=16)
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return TinyTransformer(tiny_cfg)


def random_batch(cfg: ModelConfig, batch: int, src_len: int, tgt_len: int, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    src = torch.randint(0, 256, (batch, src_len), generator=g)
    tgt = torch.randint(0, 256, (batch, tgt_len), generator=g)
    src[:, -1] = cfg.vocab.eos_id
    tgt[:, -1] = cfg.vocab.eos_id
    return src, tgt


# smallest experiment the CLI accepts; runs end to end in seconds
TINY_EXPERIMENT = {
    "output_dir": "out",
    "seeds": [0],
    "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 32,
              "max_input_length": 96, "max_target_length": 32, "relative_buckets": 8,
              "relative_max_distance": 16, "sentinel_count": 8},
    "backbone": {"path": None, "pretrain_steps": 2, "batch_size": 4, "corpus_size": 20},
    "languages": [{"name": "lang_a", "synth": "lang_a", "corpus_size": 24},
                  {"name": "lang_b", "synth": "lang_b", "corpus_size": 24}],
    "tasks": [{"name": "qa", "synth": "copy", "train_size": 12, "test_size": 3}],
    "configurations": ["TaskAdapterOnly", "SoftLangPrompt+SoftTaskPrompt"],
    "prompt_tokens": 3,
    "hyperparams": {phase: {"total_steps": 2, "eval_every_steps": 1, "batch_size": 4}
                    for phase in ("language_adapter", "language_prompt", "task_adapter", "task_prompt")},
}


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
