import numpy as np
import pytest

from selora.data import DatasetSpec, generate_dataset
from selora.model import ModelConfig, build_model

TINY = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, vocab_size=24, max_seq=16, seed=3,
                   name="tiny", family="tiny")


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(DatasetSpec(n_train=128, n_eval=32, seq_len=TINY.max_seq,
                                        vocab_size=TINY.vocab_size, max_len=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_campaign(work_dir, **kw):
    """A campaign over two tiny models that finishes in seconds."""
    from dataclasses import replace

    from selora.campaign import CampaignSpec
    from selora.trainer import TrainConfig

    other = replace(TINY, n_layers=2, seed=4, name="tiny-2", family="tiny-b")
    base = dict(model_configs=[TINY, other], seeds=(42, 123, 999), steps_matched=4, steps_cm=5,
                attn_rank=2, mlp_rank=2, alpha=4.0,
                train=TrainConfig(lr_max=1e-2, warmup_steps=1, total_steps=4, micro_batch=2),
                dataset=DatasetSpec(n_train=64, n_eval=16, max_len=5),
                pretrain_steps=3, pretrain_micro_batch=2, bench_items=8, work_dir=str(work_dir))
    base.update(kw)
    return CampaignSpec(**base)


CRITERIA_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    CRITERIA_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}" + (
        f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA_LINES):
            terminalreporter.write_line(CRITERIA_LINES[n])
