import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_spec():
    from dcae.corpus import CorpusSpec

    return CorpusSpec(num_phones=5, feat_dim=6, spk_embed_dim=3, num_speakers=3, num_utts=6,
                      num_test_per_condition=3, vocab_size=6, utt_len_range=(12, 30), seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    from dcae.corpus import gen_corpus

    return gen_corpus(tiny_spec)
