import numpy as np
import pytest

from pftlab.data import CorpusTemplate, SynthSpec, generate_suite
from pftlab.kernel import EncoderParams, HeadParams, ModelState


def random_model(seed, input_dim=3, hidden_dim=4, labels=(2,), scale=1.0):
    rng = np.random.default_rng(seed)
    model = ModelState(EncoderParams(rng.normal(size=(hidden_dim, input_dim)) * scale,
                                     rng.normal(size=hidden_dim) * scale))
    for i, n in enumerate(labels):
        model.add_head(HeadParams(rng.normal(size=(n, hidden_dim)) * scale, rng.normal(size=n) * scale, f"t{i}"))
    return model


SMALL_CORPORA = (
    CorpusTemplate("alpha", ("happy", "sadness", "anger", "neutral"), 4, 80),
    CorpusTemplate("beta", ("anger", "happiness", "surprised", "neutral", "other"), 5, 100),
    CorpusTemplate("gamma", ("anger", "elation", "neutral"), 3, 60, 1.0),
)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(corpora=SMALL_CORPORA, speakers_per_language=2,
                     downstream_train_per_class=40, downstream_test_per_class=10, seed=3)


@pytest.fixture(scope="session")
def small_suite(small_spec):
    return generate_suite(small_spec)


@pytest.fixture(scope="session")
def default_suite():
    return generate_suite(SynthSpec())


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, ok, detail)``; the verdict lines print at the end of the run."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion: str, ok: bool, detail: str) -> bool:
        results[criterion] = (ok, detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda s: (int(s.split()[0].rstrip("abc")), s)):
        ok, detail = results[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
