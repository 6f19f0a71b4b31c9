import warnings

import numpy as np
import pytest

from kgelab.graph import DuplicateTriplesWarning, from_labeled


def make_kg(triples, types, schema=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateTriplesWarning)
        kg, _ = from_labeled(triples, types, schema, order="catalog")
    return kg


TABLE1_ENTITIES = {"disease": 4596, "drug": 13945, "gene": 20017, "protein": 24242}


def table1_graph():
    """Four-type graph with a fixed composition: 62,800 entities, 183,000 triples."""
    from kgelab.synthetic import random_kg

    return random_kg(
        TABLE1_ENTITIES,
        [
            ("treats", "drug", "disease", 72976),
            ("subclass_of", "disease", "disease", 21913),
            ("targets", "drug", "protein", 50000),
            ("encodes", "gene", "protein", 38111),
        ],
        seed=7,
    )


@pytest.fixture
def write_tsv(tmp_path):
    def write(name, rows):
        path = tmp_path / name
        path.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
        return path
    return write


@pytest.fixture
def toy_kg():
    """Three drugs, three diseases, two genes."""
    types = {
        "aspirin": "drug", "ibuprofen": "drug", "metformin": "drug",
        "pain": "disease", "fever": "disease", "diabetes": "disease",
        "COX1": "gene", "AMPK": "gene",
    }
    triples = [
        ("aspirin", "treats", "pain"),
        ("aspirin", "treats", "fever"),
        ("ibuprofen", "treats", "pain"),
        ("metformin", "treats", "diabetes"),
        ("aspirin", "targets", "COX1"),
        ("ibuprofen", "targets", "COX1"),
        ("metformin", "targets", "AMPK"),
        ("COX1", "associated_with", "pain"),
        ("AMPK", "associated_with", "diabetes"),
        ("fever", "subclass_of", "pain"),
    ]
    return make_kg(triples, types)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------

_criteria = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    _criteria.append((marker[0], marker[1], report.outcome))


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, text, outcome in sorted(_criteria, key=lambda c: c[0]):
        label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{label}] criterion {number}: {text}")
