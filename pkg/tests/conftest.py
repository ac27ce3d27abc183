from __future__ import annotations

import json

import pytest

from pairjudge.context import JudgeContext
from pairjudge.core import Aspect, Instance, PreferenceLabel, TaskCategory
from pairjudge.gateway import Gateway, MockBackend, MockRule, MockScript, RunStore
from pairjudge.harness import Dataset
from pairjudge.mock import SyntheticJudge


def make_instance(k: int = 0, **kw) -> Instance:
    cats = list(TaskCategory)
    labels = [PreferenceLabel.A, PreferenceLabel.B, PreferenceLabel.TIE]
    base = dict(
        id=f"inst{k:03d}",
        instruction=f"Write a program number {k} that plots a bar chart of the input data.",
        response_a=f"```python\nimport matplotlib\ndef solve_{k}(xs):\n    return sorted(xs)\n```",
        response_b=f"```python\ndef solve_{k}(xs):\n    return list(reversed(xs)) + [{k}]\n```",
        category=cats[k % len(cats)],
        human_overall=labels[k % 3],
        human_aspect_votes={Aspect.CORRECTNESS: labels[(k + 1) % 3], Aspect.EFFICIENCY: None},
    )
    base.update(kw)
    return Instance(**base)


def make_dataset(n: int = 5) -> Dataset:
    return Dataset(tuple(make_instance(k) for k in range(n)))


def scripted_ctx(rules=(), default="{}", **ctx_kw) -> tuple[JudgeContext, MockBackend]:
    backend = MockBackend(MockScript(list(rules), default=default))
    gw = Gateway(backend, RunStore(), sleep=lambda s: None)
    return JudgeContext(gw, **ctx_kw), backend


def synthetic_ctx(**judge_kw) -> tuple[JudgeContext, MockBackend]:
    backend = MockBackend(SyntheticJudge(**judge_kw))
    gw = Gateway(backend, RunStore(), sleep=lambda s: None)
    return JudgeContext(gw), backend


def rule(tag: str, value, **kw) -> MockRule:
    if isinstance(value, (dict, list)):
        value = json.dumps(value)
    return MockRule(response=value, tag=tag, **kw)


@pytest.fixture
def instance() -> Instance:
    return make_instance(0)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): acceptance criterion test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    cid, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        prev = _ACCEPTANCE.get(cid)
        if prev is None or prev[0] == "PASS":
            _ACCEPTANCE[cid] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[2:])):
        status, title = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:5s} {status:4s}  {title}")
