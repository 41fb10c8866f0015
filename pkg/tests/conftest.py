import pytest

from autocomp.captions import CaptionEngine
from autocomp.concepts import default_vocabulary, load_vocabulary

# Small vocabulary with every structural wrinkle: multi-token names, an
# inherently-plural entry, and the relation set used by the examples.
TOY_DOC = {
    "objects": [
        {"name": "cube"},
        {"name": "sphere"},
        {"name": "cone"},
        {"name": "chair"},
        {"name": "lamp"},
        {"name": "monitor"},
        {"name": "bicycle"},
        {"name": "table"},
        {"name": "coffee table"},
        {"name": "glove", "plural": "gloves", "number": "inherently-plural",
         "expected_count": 2},
    ],
    "colors": ["red", "blue", "green", "yellow", "olive"],
    "relations": [
        {"name": "over", "inverse": "under"},
        {"name": "under", "inverse": "over"},
        {"name": "to the left of", "inverse": "to the right of"},
        {"name": "to the right of", "inverse": "to the left of"},
        {"name": "on top of", "inverse": "beneath"},
        {"name": "beneath", "inverse": "on top of"},
    ],
}


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def toy_vocab():
    return load_vocabulary(TOY_DOC)


@pytest.fixture(scope="session")
def toy_engine(toy_vocab):
    return CaptionEngine(toy_vocab)


@pytest.fixture(scope="session")
def engine(vocab):
    return CaptionEngine(vocab)
