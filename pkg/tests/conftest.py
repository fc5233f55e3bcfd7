"""Shared fixtures: a five-document corpus, a ten-pair dataset, mock ports."""

import json

import pytest

from ragmark.corpus import chunk_corpus, load_corpus
from ragmark.indexing import IndexBundle, build_indexes
from ragmark.metrics import METRIC_SPECS
from ragmark.modelgw import MockEmbedder, MockLLM, MockReranker, PortSet

FIXTURE_DOCS = {
    "station.txt": (
        "The Meadowbrook power station generates 42 megawatts of electricity. "
        "The station opened in 1998 and burns wood chip biomass from nearby "
        "forestry operations. Leftover ash from the boilers is sold to farms "
        "as fertilizer. The plant supplies roughly 30,000 homes across the valley."
    ),
    "river.txt": (
        "The Silver River runs 210 kilometers from the Quill Mountains to the "
        "sea at Eastford. Its largest tributary is the Quill River, which joins "
        "near the town of Marlow. After the flood of 2003 the city built a "
        "levee, finished in 2005, that protects the harbor district. Salmon "
        "return to the upper reaches every autumn."
    ),
    "observatory.md": (
        "# Pinegrove Observatory\n\n"
        "The **Pinegrove Observatory** sits at an altitude of 2,400 meters on "
        "Mount Harrow. Its main telescope has a mirror 3.5 meters across. "
        "Astronomers use it to survey variable stars.\n\n"
        "## Operations\n\n"
        "The dome opens roughly 280 nights per year. A small "
        "[visitor center](https://example.org/visit) hosts school groups in summer."
    ),
    "railway.md": (
        "# Harrow Valley Railway\n\n"
        "The Harrow Valley Railway opened in 1887 to carry timber. The line "
        "uses standard gauge track of 1,435 millimeters. Steam service ended "
        "in 1967, and a heritage trust now runs weekend excursions."
    ),
    "orchard.txt": (
        "Greenfield Orchard covers 120 hectares on the south bank of the "
        "Silver River. The orchard grows 15 varieties of apple and presses "
        "cider every October. Bees from forty hives pollinate the trees each spring."
    ),
}

FIXTURE_PAIRS = [
    {
        "qa_id": "q01",
        "question": "How many megawatts does the Meadowbrook power station generate?",
        "ground_truth": "The Meadowbrook power station generates 42 megawatts.",
        "source_doc_ids": ["station.txt"],
        "tags": ["factual", "numerical"],
        "is_numeric": True,
    },
    {
        "qa_id": "q02",
        "question": "What is the largest tributary of the Silver River?",
        "ground_truth": "The Quill River is the largest tributary of the Silver River.",
        "source_doc_ids": ["river.txt"],
        "tags": ["factual"],
        "is_numeric": False,
    },
    {
        "qa_id": "q03",
        "question": "How wide is the mirror of the Pinegrove Observatory telescope?",
        "ground_truth": "The main telescope has a mirror 3.5 meters across.",
        "source_doc_ids": ["observatory.md"],
        "tags": ["factual", "numerical"],
        "is_numeric": True,
    },
    {
        "qa_id": "q04",
        "question": "In what year did the Harrow Valley Railway open?",
        "ground_truth": "The Harrow Valley Railway opened in 1887.",
        "source_doc_ids": ["railway.md"],
        "tags": ["numerical"],
        "is_numeric": True,
    },
    {
        "qa_id": "q05",
        "question": "How many hectares does Greenfield Orchard cover?",
        "ground_truth": "Greenfield Orchard covers 120 hectares.",
        "source_doc_ids": ["orchard.txt"],
        "tags": ["numerical"],
        "is_numeric": True,
    },
    {
        "qa_id": "q06",
        "question": "When was the levee that protects the harbor district finished?",
        "ground_truth": "The levee was finished in 2005.",
        "source_doc_ids": ["river.txt"],
        "tags": ["numerical"],
        "is_numeric": True,
    },
    {
        "qa_id": "q07",
        "question": "What fuel does the Meadowbrook power station burn?",
        "ground_truth": "The station burns wood chip biomass.",
        "source_doc_ids": ["station.txt"],
        "tags": ["factual"],
        "is_numeric": False,
    },
    {
        "qa_id": "q08",
        "question": "What happens to the leftover ash from the Meadowbrook boilers?",
        "ground_truth": "The leftover ash is sold to farms as fertilizer.",
        "source_doc_ids": ["station.txt"],
        "tags": ["factual"],
        "is_numeric": False,
    },
    {
        "qa_id": "q09",
        "question": "Which number is larger, the Silver River's length in kilometers or Greenfield Orchard's area in hectares?",
        "ground_truth": "The Silver River's 210 kilometers is larger than the orchard's 120 hectares.",
        "source_doc_ids": ["river.txt", "orchard.txt"],
        "tags": ["comparative", "multi_document"],
        "is_numeric": True,
    },
    {
        "qa_id": "q10",
        "question": "At what altitude does the Pinegrove Observatory sit?",
        "ground_truth": "The observatory sits at an altitude of 2,400 meters.",
        "source_doc_ids": ["observatory.md"],
        "tags": ["numerical"],
        "is_numeric": True,
    },
]


def write_fixture_corpus(directory) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in FIXTURE_DOCS.items():
        (directory / name).write_text(text, encoding="utf-8")


def write_fixture_dataset(path) -> None:
    lines = [json.dumps(pair, sort_keys=True) for pair in FIXTURE_PAIRS]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@pytest.fixture()
def corpus_dir(tmp_path):
    directory = tmp_path / "corpus"
    write_fixture_corpus(directory)
    return directory


@pytest.fixture()
def documents(corpus_dir):
    return load_corpus(corpus_dir)


@pytest.fixture()
def bundle(documents):
    chunks = chunk_corpus(documents)
    vector, keyword = build_indexes(chunks, MockEmbedder(dim=16, seed=0))
    return IndexBundle(chunks={c.chunk_id: c for c in chunks}, vector=vector, keyword=keyword)


@pytest.fixture()
def dataset_path(tmp_path):
    path = tmp_path / "dataset.jsonl"
    write_fixture_dataset(path)
    return path


@pytest.fixture()
def mock_ports():
    llm = MockLLM(seed=0)
    return PortSet(
        embedder=MockEmbedder(dim=16, seed=0),
        reranker=MockReranker(),
        generator=llm,
        judge=llm,
    )


@pytest.fixture(autouse=True)
def _restore_metric_specs():
    # Weight/threshold overrides mutate the process-global registry.
    snapshot = dict(METRIC_SPECS)
    yield
    METRIC_SPECS.clear()
    METRIC_SPECS.update(snapshot)
