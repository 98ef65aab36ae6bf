import numpy as np
import pytest

from xaidetect import data, models


@pytest.fixture(scope="session")
def small_corpus():
    return data.generate_corpus(seed=3, n_videos=12, frames_per_video=4)


@pytest.fixture(scope="session")
def trained_a(small_corpus):
    """arch-A trained briefly on the small corpus; good enough to separate its classes."""
    m = models.build("arch-A", seed=0)
    hyper = models.TrainHyper(steps=150, seed=0)
    m, _ = models.train_deepfake_detector(m, small_corpus.frames(), small_corpus.frame_labels(), hyper)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng):
    return rng.random((3, 3, 32, 32), dtype=np.float32)


# ---------------------------------------------------------------- acceptance summary

_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if call.when == "setup" and call.excinfo is not None:
        _VERDICTS[n] = ("FAIL", f"setup error: {call.excinfo.typename}")
    elif call.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        if call.excinfo is None:
            _VERDICTS[n] = ("PASS", detail)
        else:
            msg = str(call.excinfo.value).splitlines()[0] if str(call.excinfo.value) else call.excinfo.typename
            _VERDICTS[n] = ("FAIL", f"{detail} | {msg}" if detail else msg)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        verdict, detail = _VERDICTS[n]
        terminalreporter.write_line(f"ACCEPTANCE C{n:<2} {verdict}: {detail}")
