import pytest

from convexp.synth import SynthSpec, generate

SMALL = SynthSpec(num_sessions=30, turns_per_session=6, num_topics_per_session=2, num_docs=400, vocab_size=1200, seed=3)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SMALL)


@pytest.fixture(scope="session")
def default_synth():
    return generate(SynthSpec())


def pytest_collection_modifyitems(items):
    # the runtime-budget check must run last
    items.sort(key=lambda item: "test_a10_" in item.name)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(mod.RESULTS, key=lambda n: int(n[1:])):
        ok, detail = mod.RESULTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
