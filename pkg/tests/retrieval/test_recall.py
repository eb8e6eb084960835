import numpy as np
import pytest

from qdavpr.config import EvalProtocol, ProtocolMode
from qdavpr.data import ManifestRow, Split
from qdavpr.error import ProtocolError
from qdavpr.retrieval import DescriptorIndex, recall_at_n

from ..helpers import random_unit

FRAME = EvalProtocol(mode=ProtocolMode.FRAME)
PAIRWISE = EvalProtocol(mode=ProtocolMode.PAIRWISE)


def frame_rows(frames: list[int], split: Split) -> list[ManifestRow]:
    return [
        ManifestRow(f"{split.value}{i}.png", i, frame_id=frame, split=split)
        for i, frame in enumerate(frames)
    ]


@pytest.fixture
def frame_index() -> DescriptorIndex:
    rows = frame_rows([100 * j for j in range(10)], Split.DB)
    return DescriptorIndex(np.eye(10, dtype=np.float32), rows=rows)


def ranked_query() -> np.ndarray:
    # ranks the database as 0, 1, ..., 9
    weights = np.arange(10, 0, -1, dtype=np.float32)
    return weights / np.linalg.norm(weights)


def test_hand_scored_frame_recall(frame_index: DescriptorIndex):
    queries = np.tile(ranked_query(), (4, 1))

    report = recall_at_n(frame_index, queries, frame_rows([0, 0, 600, 600], Split.QUERY), FRAME)

    assert report.recalls == {1: 50.0, 5: 50.0, 10: 100.0}
    assert report.first_hits == [0, 0, 6, 6]
    assert report.n_queries == 4
    assert report.zero_positive == 0
    assert report.mode is ProtocolMode.FRAME


def test_query_without_positive_is_a_miss(frame_index: DescriptorIndex):
    queries = np.tile(ranked_query(), (2, 1))

    report = recall_at_n(frame_index, queries, frame_rows([5, 5000], Split.QUERY), FRAME)

    assert report.zero_positive == 1
    assert report.first_hits == [0, -1]
    assert report.recalls[10] == 50.0


def test_geo_recall():
    db_rows = [
        ManifestRow(f"db{i}.png", i, lat=0.0, lon=i * 0.01, split=Split.DB) for i in range(3)
    ]
    index = DescriptorIndex(np.eye(3, dtype=np.float32), rows=db_rows)
    query_rows = [ManifestRow("q.png", 2, lat=0.0, lon=0.02001, split=Split.QUERY)]

    report = recall_at_n(index, [[0.6, 0.0, 0.8]], query_rows, EvalProtocol(recall_ranks=(1, 2)))

    assert report.recalls == {1: 100.0, 2: 100.0}
    swapped = recall_at_n(index, [[0.8, 0.0, 0.6]], query_rows, EvalProtocol(recall_ranks=(1, 2)))
    assert swapped.recalls == {1: 0.0, 2: 100.0}


def test_pairwise_recall():
    rng = np.random.default_rng(0)
    matrix = rng.standard_normal((6, 5)).astype(np.float32)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)

    report = recall_at_n(DescriptorIndex(matrix), matrix[:4], None, PAIRWISE)

    assert report.recalls == {1: 100.0, 5: 100.0, 10: 100.0}
    with pytest.raises(ProtocolError):
        recall_at_n(DescriptorIndex(matrix[:3]), matrix, None, PAIRWISE)


def test_metadata_requirements(frame_index: DescriptorIndex):
    query = ranked_query()[None]

    with pytest.raises(ProtocolError):
        recall_at_n(frame_index, query, None, FRAME)
    with pytest.raises(ProtocolError):
        recall_at_n(frame_index, query, [ManifestRow("q.png", 0, lat=0.0, lon=0.0)], FRAME)
    with pytest.raises(ProtocolError):
        recall_at_n(frame_index, query, [ManifestRow("q.png", 0, frame_id=0)], EvalProtocol())
    with pytest.raises(ProtocolError):
        recall_at_n(frame_index, np.tile(query, (2, 1)), frame_rows([0], Split.QUERY), FRAME)


def test_report_rendering(frame_index: DescriptorIndex):
    queries = np.tile(ranked_query(), (4, 1))
    report = recall_at_n(frame_index, queries, frame_rows([0, 0, 600, 600], Split.QUERY), FRAME)

    assert report.key_values() == "recall@1=50.0\nrecall@5=50.0\nrecall@10=100.0\n"
    table = report.table()
    assert "protocol: frame" in table
    assert "   R@1 |   50.00" in table.splitlines()


@pytest.mark.parametrize("seed", range(10))
def test_recall_is_monotone_in_n(seed):
    rng = np.random.default_rng(seed)
    index = DescriptorIndex(
        random_unit(rng, 30, 5).astype(np.float32),
        rows=frame_rows(rng.integers(0, 60, 30).tolist(), Split.DB),
    )
    queries = random_unit(rng, 12, 5).astype(np.float32)
    protocol = EvalProtocol(
        mode=ProtocolMode.FRAME, frame_tolerance=2, recall_ranks=(1, 2, 3, 5, 8, 13, 21, 30)
    )

    report = recall_at_n(
        index, queries, frame_rows(rng.integers(0, 60, 12).tolist(), Split.QUERY), protocol
    )

    values = list(report.recalls.values())
    assert all(lower <= higher for lower, higher in zip(values, values[1:]))
    hit_share = (report.n_queries - report.zero_positive) / report.n_queries
    assert values[-1] == pytest.approx(100.0 * hit_share)
