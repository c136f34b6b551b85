import numpy as np
import pytest

from modiqa import PRESETS, QualityModel, SamplerConfig
from modiqa.data import SplitSpec
from modiqa.synthetic import make_dataset
from modiqa.training import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    return QualityModel(PRESETS["tiny"])


@pytest.fixture(scope="session")
def blur_dataset(tmp_path_factory):
    """20 procedural references x 5 blur levels, written once per session."""
    return make_dataset(tmp_path_factory.mktemp("blur"), n_refs=20, distortion="blur", seed=0)


@pytest.fixture(scope="session")
def blur_split(blur_dataset):
    ids = blur_dataset.reference_ids
    return SplitSpec(frozenset(ids[:15]), frozenset(ids[15:]), frozenset(), 0)


TOY_TRAIN = TrainConfig(
    batch_size=10,
    patches_train=64,
    patches_eval=64,
    epochs=50,
    lr_initial=1e-3,
    lr_decay_epoch=35,
    weight_decay=0.0,
    seed=0,
)
TOY_SAMPLER = SamplerConfig(patch_size=8)


@pytest.fixture(scope="session")
def trained_toy(blur_dataset, blur_split):
    """Toy model trained on 15 references; records train-set SROCC after every epoch."""
    from modiqa.data import ImageCache
    from modiqa.metrics import srocc
    from modiqa.training import predict_records, train

    model = QualityModel(PRESETS["toy"])
    images = ImageCache()
    train_idx = blur_dataset.subset(blur_split.train)
    targets = blur_dataset.normalized_scores()[train_idx]
    train_srocc = []

    def on_epoch(rec, m):
        pred = predict_records(m, blur_dataset, train_idx, images, TOY_SAMPLER, TOY_TRAIN.patches_eval, 99, run=rec.epoch)
        train_srocc.append(srocc(pred, targets))

    result = train(model, blur_dataset, blur_split, TOY_TRAIN, TOY_SAMPLER, images, on_epoch)
    return model, result, train_srocc


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed or report.skipped):
        number, title = marker.args
        results = item.config.stash[_ACCEPTANCE]
        entry = results.setdefault(number, {"title": title, "passed": True, "details": []})
        entry["passed"] = entry["passed"] and report.passed
        if report.when == "call":
            entry["details"].extend(str(v) for k, v in item.user_properties if k == "detail")
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        line = f"{'PASS' if entry['passed'] else 'FAIL'}  criterion {number:2d}: {entry['title']}"
        details = "; ".join(entry["details"])
        terminalreporter.write_line(f"{line}  [{details}]" if details else line)
