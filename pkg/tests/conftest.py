import numpy as np
import pytest

from adtrec.data import Dataset, Interactions, inject_false_positives, split_holdout, synthesize_dataset


def make_dataset(pairs, n_users, n_items, noise=None, extra=None, test=None):
    users, items = zip(*pairs) if pairs else ((), ())
    train = Interactions.from_arrays(users, items, noise, extra)
    kw = {}
    if test is not None:
        tu, ti = zip(*test)
        kw["test"] = Interactions.from_arrays(tu, ti, np.ones(len(tu)))
    return Dataset(n_users, n_items, train, **kw)


@pytest.fixture(scope="session")
def small_noisy():
    ds = synthesize_dataset(120, 80, latent_dim=4, density=0.1, seed=3)
    ds = split_holdout(ds, (0.8, 0.1, 0.1), seed=3)
    return inject_false_positives(ds, 0.3, seed=3)


ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
