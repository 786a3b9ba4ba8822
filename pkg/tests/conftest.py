import os

# Single-threaded BLAS: the determinism checks compare bitwise.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from attrfuse.data import SynthSpec, gen_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """8 identities x 10 images, 32x32, one confusable pair."""
    out = tmp_path_factory.mktemp("synth_small")
    spec = SynthSpec(identities=8, attributes=3, transient=2, images_per_identity=10,
                     image_size=32, noise=0.1, confusable_pairs=1)
    summary = gen_synthetic(spec, out, seed=7)
    return out, summary


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
