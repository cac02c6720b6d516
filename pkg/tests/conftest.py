import numpy as np
import pytest
import torch

from promptmtl import vocab as V
from promptmtl.model import ModelConfig, build_model
from promptmtl.prompts import default_pool_dir, load_pools
from promptmtl.tasks import INPUT_TOKENS, synth_classification, synth_seqgen

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def pools():
    return load_pools(default_pool_dir())


@pytest.fixture(scope="session")
def small_suite():
    """Two small classification tasks and one tagging task with disjoint labels."""
    a = synth_classification(11, 4, n_train=60, n_dev=20, n_test=30, task_type="scr", dataset="synth_scr")
    b = synth_classification(
        12, 3, n_train=40, n_dev=20, n_test=30, task_type="er", dataset="synth_er", exclude_labels=a.descriptor.labels
    )
    c = synth_seqgen(13, n_train=40, n_dev=20, n_test=30)
    return [a, b, c]


@pytest.fixture(scope="session")
def small_vocab(small_suite, pools):
    return V.build_vocabulary([m.descriptor for m in small_suite], pools=list(pools.values()), input_tokens=INPUT_TOKENS)


@pytest.fixture
def tiny_model(small_vocab):
    cfg = ModelConfig(len(small_vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_width=32, seed=3)
    return build_model(cfg, small_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -------------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 11


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(passed, detail)`` per criterion; printed at the end of the session."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            passed, detail = results[n]
            terminalreporter.write_line(f"acceptance {n:>2} {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"acceptance {n:>2} NOT RUN")
