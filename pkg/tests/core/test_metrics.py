import csv

import numpy as np
import pytest
import torch

from ap_attack.core.defenses import JpegDefense
from ap_attack.core.errors import (
    ConfigError,
    EvaluationError,
    InputError,
    NoRelevantItemsError,
    NormalizationError,
)
from ap_attack.core.metrics import (
    EvaluationReport,
    RetrievalSplit,
    aap,
    average_precision,
    distance_matrix,
    evaluate,
    mdr,
    mean_average_precision,
    rank_k_accuracy,
    round_half_up,
)
from ap_attack.data.handcrafted import HandcraftedExtractor


def one_query_split():
    # gallery at distances 0, 1, 2, 3 from the query; the closest shares its camera
    return RetrievalSplit(
        query_feats=[[0.0]],
        query_pids=[1],
        query_camids=[0],
        gallery_feats=[[0.0], [1.0], [2.0], [3.0]],
        gallery_pids=[1, 2, 1, 1],
        gallery_camids=[0, 1, 1, 1],
    )


def test_average_precision():
    assert average_precision([True, False, True]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([False, True]) == pytest.approx(0.5)


def test_average_precision_needs_relevant_items():
    with pytest.raises(NoRelevantItemsError):
        average_precision([False, False])


def test_map_with_junk_rule():
    split = one_query_split()

    assert mean_average_precision(split, "l2") == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert rank_k_accuracy(split, 1, "l2") == 0.0
    assert rank_k_accuracy(split, 2, "l2") == 1.0


def test_map_without_junk_rule():
    split = one_query_split()

    assert mean_average_precision(split, "l2", exclude_same_camera=False) == pytest.approx(
        (1 + 2 / 3 + 3 / 4) / 3
    )
    assert rank_k_accuracy(split, 1, "l2", exclude_same_camera=False) == 1.0


def test_perfect_retrieval():
    feats = np.eye(3)
    split = RetrievalSplit(feats, [0, 1, 2], [0, 0, 0], feats, [0, 1, 2], [1, 1, 1])

    assert mean_average_precision(split) == 1.0
    assert rank_k_accuracy(split) == 1.0


def test_queries_without_valid_match_are_skipped():
    split = RetrievalSplit(
        query_feats=[[0.0], [5.0]],
        query_pids=[1, 3],
        query_camids=[0, 0],
        gallery_feats=[[0.0], [5.0]],
        gallery_pids=[1, 3],
        gallery_camids=[1, 0],
    )

    # the second query's only match is junk
    assert mean_average_precision(split, "l2") == 1.0


def test_all_queries_excluded():
    split = RetrievalSplit([[0.0]], [1], [0], [[0.0]], [1], [0])

    with pytest.raises(EvaluationError):
        mean_average_precision(split, "l2")


def test_distance_matrix():
    query = np.array([[1.0, 0.0]])
    gallery = np.array([[0.0, 2.0], [3.0, 0.0]])

    np.testing.assert_allclose(distance_matrix(query, gallery, "cosine"), [[1.0, 0.0]])
    np.testing.assert_allclose(distance_matrix(query, gallery, "l2"), [[np.sqrt(5), 2.0]])
    with pytest.raises(NormalizationError):
        distance_matrix(np.zeros((1, 2)), gallery, "cosine")
    with pytest.raises(ConfigError):
        distance_matrix(query, gallery, "hamming")


def test_split_validation():
    with pytest.raises(InputError):
        RetrievalSplit([[0.0]], [1, 2], [0], [[0.0]], [1], [0])
    with pytest.raises(InputError):
        RetrievalSplit(np.zeros((0, 1)), [], [], [[0.0]], [1], [0])


def test_aap_and_mdr():
    assert round_half_up(aap([6.1, 2.2, 6.7, 6.4, 3.7, 4.7, 10.4, 15.0])) == 6.9
    assert round_half_up(aap([41.9, 75.5, 52.3])) == 56.6
    assert round_half_up(aap([4.2, 7.6, 5.3])) == 5.7
    assert round_half_up(mdr(56.6, 5.7)) == 89.9
    assert round_half_up(mdr(65.0, 6.9)) == 89.4
    assert round_half_up(mdr(76.7, 21.2)) == 72.4
    assert mdr(50.0, 50.0) == 0.0


def test_aap_and_mdr_errors():
    with pytest.raises(InputError):
        aap([])
    with pytest.raises(InputError):
        mdr(0.0, 1.0)


def test_round_half_up():
    assert round_half_up(0.25) == 0.3
    assert round_half_up(0.35) == 0.4
    assert round_half_up(2.675, 2) == 2.68


def query_gallery(dataset):
    return dataset.subset(range(0, len(dataset), 2)), dataset.subset(range(1, len(dataset), 2))


def victims():
    return {
        "handcrafted:0": HandcraftedExtractor((32, 16), seed=0),
        "handcrafted:1": HandcraftedExtractor((32, 16), seed=1),
    }


def test_evaluate_clean(tiny_dataset):
    query, gallery = query_gallery(tiny_dataset)

    report = evaluate(victims(), query, gallery, seed=2)

    assert [v.name for v in report.victims] == ["handcrafted:0", "handcrafted:1"]
    assert all(0.0 < v.clean_map <= 1.0 for v in report.victims)
    assert report.aap_clean == pytest.approx(100 * np.mean([v.clean_map for v in report.victims]))
    assert report.aap_adversarial is None
    assert report.mdr is None
    assert report.seed == 2


def test_evaluate_with_zero_perturbation(tiny_dataset):
    query, gallery = query_gallery(tiny_dataset)

    report = evaluate(
        victims(), query, gallery, generator=lambda x: torch.zeros_like(x), attack_gallery=True
    )

    assert report.aap_adversarial == pytest.approx(report.aap_clean)
    assert report.mdr == pytest.approx(0.0)
    assert report.epsilon is not None


def test_evaluate_records_defenses(tiny_dataset):
    query, gallery = query_gallery(tiny_dataset)

    report = evaluate(victims(), query, gallery, defenses=(JpegDefense(90),))

    assert report.defenses == ["jpeg:90"]


def test_evaluate_needs_victims(tiny_dataset):
    query, gallery = query_gallery(tiny_dataset)

    with pytest.raises(InputError):
        evaluate({}, query, gallery)


def test_report_files(tmp_path, tiny_dataset):
    query, gallery = query_gallery(tiny_dataset)
    report = evaluate(victims(), query, gallery, config_digest="abc")

    report.save_json(tmp_path / "report.json")
    report.save_csv(tmp_path / "report.csv")

    assert EvaluationReport.load_json(tmp_path / "report.json") == report
    with open(tmp_path / "report.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["victim", "clean_map", "clean_rank1", "adversarial_map", "adversarial_rank1"]
    assert rows[1][0] == "handcrafted:0"
    assert rows[1][3] == ""
    assert "aAP" in report.to_table()
