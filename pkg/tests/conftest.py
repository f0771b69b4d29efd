import numpy as np
import pytest

from robustscore.curation import SynthConfig, generate_synthetic, split_manifest
from robustscore.imageio import Image
from robustscore.models import TrainConfig, init_mlp, train_mlp

# Settings shared by the end-to-end tests: 3 classes x 300 gratings, seed 7.
BENCH_SEED = 7
BENCH_TEST_FRACTION = 0.3
BENCH_DIMS = (1024, 64, 3)


def random_image(rng, h=6, w=6, c=1, lo=0.0, hi=1.0) -> Image:
    return Image(rng.uniform(lo, hi, size=(h, w, c)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return init_mlp((36, 10, 4), seed=3)


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """The synthetic benchmark plus a victim MLP trained on its train split."""
    root = tmp_path_factory.mktemp("bench")
    manifest = generate_synthetic(SynthConfig(seed=BENCH_SEED), root)
    train, test = split_manifest(manifest, BENCH_TEST_FRACTION, BENCH_SEED)
    model = train_mlp(train.labelled(), BENCH_DIMS, TrainConfig(seed=BENCH_SEED))
    return {"root": root, "manifest": manifest, "train": train, "test": test, "model": model}


@pytest.fixture(scope="session")
def second_model(benchmark):
    """An independently seeded MLP on half of the training split."""
    from robustscore.curation import shard_manifest

    half = shard_manifest(benchmark["train"], 2, 0, seed=11)
    return train_mlp(half.labelled(), BENCH_DIMS, TrainConfig(seed=11))


# Acceptance criteria: each test tagged ``@pytest.mark.acceptance(n, "title")``
# gets one PASS/FAIL line in the terminal summary, with any measured details.
_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "details": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["passed"] else "FAIL"
        details = f" [{'; '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"{status} criterion {number}: {entry['title']}{details}")
