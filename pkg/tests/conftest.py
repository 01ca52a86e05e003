import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lret.data import SynthSpec, load_manifest, synth_generate  # noqa: E402


@pytest.fixture(scope="session")
def synth_texture64(tmp_path_factory):
    """4 classes x 50 images, 64 px, texture style."""
    root = tmp_path_factory.mktemp("texture64")
    return load_manifest(synth_generate(SynthSpec(4, 50, 64, seed=7), root))


@pytest.fixture(scope="session")
def localized_model(tmp_path_factory):
    """Model trained on localized-evidence images; see helpers.train_localized_model."""
    from helpers import train_localized_model

    return train_localized_model(tmp_path_factory.mktemp("localized"), seed=0)


# --- acceptance summary: one PASS/FAIL line per criterion -------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "detail": ""})
    if rep.failed:
        entry["status"] = "FAIL"
        if call.excinfo is not None:
            entry["detail"] = " ".join(str(call.excinfo.value).split())[:160]
    elif rep.when == "call":
        detail = [v for k, v in item.user_properties if k == "detail"]
        entry["detail"] = "; ".join(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number:2d} {e['status']}  {e['title']}"
        terminalreporter.write_line(f"{line}  [{e['detail']}]" if e["detail"] else line)
