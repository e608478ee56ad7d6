import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from texp.synth import SynthParams, gen_api_corpus, gen_cfg_corpus

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL = SynthParams(n_benign=12, n_malicious=12, trace_len=400, vocab_size=64, anomaly_len=40, n_reference=12, seed=3)


@pytest.fixture(scope="session")
def small_params():
    return SMALL


@pytest.fixture(scope="session")
def small_cfg():
    return gen_cfg_corpus(SMALL)


@pytest.fixture(scope="session")
def small_api():
    return gen_api_corpus(SynthParams(n_benign=12, n_malicious=12, trace_len=300, vocab_size=40, anomaly_len=30, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
