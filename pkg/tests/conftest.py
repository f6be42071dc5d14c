import numpy as np
import pytest

from san_mdtc.data import PRESETS, SynthSpec, synth_generate
from san_mdtc.model import Architecture, build_model


def tiny_arch(input_dim=6, num_classes=3, num_domains=3, **kw):
    base = dict(hidden=(5, 4), shared_dim=3, specific_dim=2, dropout=0.3)
    base.update(kw)
    return Architecture(input_dim, num_classes, num_domains, **base)


@pytest.fixture
def tiny_san():
    return build_model("san", tiny_arch(), seed=3)


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(num_domains=3, num_classes=2, n_labeled=40, n_unlabeled=60, n_test=40,
                     input_dim=70, block=10, seed=1)
    return synth_generate(spec)


def rand_batch(rng, n, dim):
    return rng.standard_normal((n, dim))


def jitter_biases(model, seed=0, scale=0.1):
    """Random biases keep ReLU pre-activations away from the kink at 0
    (finite differences are meaningless exactly there)."""
    rng = np.random.default_rng(seed)
    for p in model.all_params():
        if p.name.endswith(".b") or p.name.endswith("bias_mu"):
            p.value[...] = rng.standard_normal(p.shape) * scale
    return model
