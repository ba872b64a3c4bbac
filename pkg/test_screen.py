"""
基因对筛选测试 - Fisher 精确检验、列联表、PAGE 比例、枚举、排名与特征化
"""
import math
from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.genomics import ContingencyTable, DgpPanel, ExpressionMatrix, GenePair, LabelVector, PathwayCatalog
from services.data_service import DataService, SynthConfig
from services.screen_service import EXPR_EPS, ScreenService, binarize_labels, r_dis, rank_key
from utils.errors import DataError, ParameterError
from utils.stats import (
    _log_point_probabilities,
    fisher_exact_two_sided,
    fisher_point_probability,
    margin_support
)


def _exact_distribution(row1, row2, col1):
    n = row1 + row2
    denominator = math.comb(n, col1)
    return {a: Fraction(math.comb(row1, a) * math.comb(row2, col1 - a), denominator)
            for a in range(max(0, col1 - row2), min(row1, col1) + 1)}


def _tables_up_to(max_total):
    for n in range(1, max_total + 1):
        for row1 in range(n + 1):
            for col1 in range(n + 1):
                yield row1, n - row1, col1


def _check_fisher_against_oracle(max_total):
    for row1, row2, col1 in _tables_up_to(max_total):
        distribution = _exact_distribution(row1, row2, col1)
        if not distribution:
            continue
        for a, p_obs in distribution.items():
            t = ContingencyTable(a=a, b=row1 - a, c=col1 - a, d=row2 - (col1 - a))
            expected = float(sum(p for p in distribution.values() if p <= p_obs))
            assert fisher_point_probability(t) == pytest.approx(float(p_obs), abs=1e-10)
            assert fisher_exact_two_sided(t) == pytest.approx(expected, abs=1e-10), t


def _expr(rows, genes=None, samples=None):
    values = np.asarray(rows, dtype=float)
    genes = genes or [f'G{i}' for i in range(values.shape[0])]
    samples = samples or [f'S{i}' for i in range(values.shape[1])]
    return ExpressionMatrix(gene_ids=genes, sample_ids=samples, values=values)


# ==================== Fisher ====================

def test_fisher_matches_oracle_small_tables():
    """总数 ≤ 12 的全部列联表与精确枚举一致"""
    _check_fisher_against_oracle(12)


@pytest.mark.slow
def test_fisher_matches_oracle_exhaustive():
    """总数 ≤ 25 的全部列联表与精确枚举一致"""
    _check_fisher_against_oracle(25)


def test_point_probabilities_sum_to_one():
    for row1, row2, col1 in [(3, 4, 2), (10, 10, 10), (12, 13, 7), (1, 24, 5)]:
        t = ContingencyTable(a=min(row1, col1), b=row1 - min(row1, col1),
                             c=col1 - min(row1, col1), d=row2 - col1 + min(row1, col1))
        total = np.exp(_log_point_probabilities(margin_support(t), row1, row2, col1)).sum()
        assert total == pytest.approx(1.0, abs=1e-10)


def test_fisher_known_values():
    """经典 [[8,2],[1,5]] 表与对称表"""
    assert fisher_exact_two_sided(ContingencyTable(8, 2, 1, 5)) == pytest.approx(0.03496503496503, abs=1e-10)
    assert fisher_exact_two_sided(ContingencyTable(5, 5, 5, 5)) == pytest.approx(1.0)


def test_fisher_degenerate_margins_give_one():
    t = ContingencyTable(3, 0, 4, 0)
    assert t.degenerate
    assert fisher_exact_two_sided(t) == 1.0


def test_fisher_large_table_stays_in_unit_interval():
    p = fisher_exact_two_sided(ContingencyTable(270, 30, 30, 270))
    assert 0.0 <= p < 1e-50


# ==================== r_dis / 列联表 / PAGE ====================

def test_r_dis_values():
    assert r_dis(math.e, 1.0) == pytest.approx(1.0)
    assert r_dis(1.0, 1.0) == 0.0
    assert r_dis(0.0, 1.0) == pytest.approx(math.log(EXPR_EPS))
    # 低于 ε 的表达值截断为 ε
    assert r_dis(EXPR_EPS, 0.0) == 0.0
    assert r_dis(EXPR_EPS / 10, 1.0) == r_dis(0.0, 1.0)
    with pytest.raises(DataError):
        r_dis(-1.0, 1.0)


def test_build_contingency_hand_case():
    expr = _expr([[5, 1, 5, 1, 5, 5], [1, 5, 1, 5, 1, 1]])
    labels = LabelVector(sample_ids=expr.sample_ids, labels=[0, 0, 0, 1, 1, 1])
    t = ScreenService.build_contingency(('G0', 'G1'), expr, labels)
    assert t.as_tuple() == (2, 2, 1, 1)


def test_build_contingency_ties_count_as_not_greater():
    expr = _expr([[2, 2], [2, 2]])
    labels = LabelVector(sample_ids=expr.sample_ids, labels=[0, 1])
    assert ScreenService.build_contingency(('G0', 'G1'), expr, labels).as_tuple() == (0, 0, 1, 1)


def test_build_contingency_requires_aligned_labels():
    expr = _expr([[1, 2], [2, 1]])
    labels = LabelVector(sample_ids=['S1', 'S0'], labels=[0, 1])
    with pytest.raises(DataError):
        ScreenService.build_contingency(('G0', 'G1'), expr, labels)


def test_binarize_labels_collapses_infection_classes():
    assert_array_equal(binarize_labels([0, 1, 2, 0, 2]), [0, 1, 1, 0, 1])


def test_page_ratio_strict_and_empty_subset():
    expr = _expr([[3, 1, 2, 2], [1, 3, 2, 0]])
    assert ScreenService.page_ratio(('G0', 'G1'), expr, expr.sample_ids) == pytest.approx(0.5)
    assert ScreenService.page_ratio(('G0', 'G1'), expr, ['S0']) == 1.0
    with pytest.raises(ParameterError):
        ScreenService.page_ratio(('G0', 'G1'), expr, [])


# ==================== 枚举与排名 ====================

def test_enumerate_pairs_lexicographic_first_pathway_wins():
    expr = _expr(np.ones((4, 2)), genes=['A', 'B', 'C', 'D'])
    catalog = PathwayCatalog(pathways={'P2': ['C', 'A', 'B', 'X'], 'P1': ['A', 'B', 'D']})
    pairs = list(ScreenService.enumerate_pairs(catalog, expr))
    assert [(g1, g2) for g1, g2, _ in pairs] == [('A', 'B'), ('A', 'C'), ('A', 'D'), ('B', 'C'), ('B', 'D')]
    assert dict(((g1, g2), p) for g1, g2, p in pairs)[('A', 'B')] == 'P2'
    assert all(g1 < g2 for g1, g2, _ in pairs)


def test_score_candidates_orients_towards_case():
    expr = _expr([[1, 1, 5, 5], [5, 5, 1, 1]])
    labels = LabelVector(sample_ids=expr.sample_ids, labels=[0, 0, 1, 1])
    catalog = PathwayCatalog(pathways={'P': ['G0', 'G1']})
    result = ScreenService.score_candidates(expr, labels, catalog)
    pair = result.candidates[0]
    assert (pair.g1, pair.g2) == ('G0', 'G1')
    assert pair.page_ratio_case == 1.0 and pair.page_ratio_control == 0.0

    flipped = LabelVector(sample_ids=expr.sample_ids, labels=[1, 1, 0, 0])
    pair = ScreenService.score_candidates(expr, flipped, catalog).candidates[0]
    assert (pair.g1, pair.g2) == ('G1', 'G0')
    assert pair.page_ratio_case >= pair.page_ratio_control


def test_rank_key_tie_breaks():
    pairs = [
        GenePair('B', 'C', 'P', p_value=0.01, page_ratio_case=0.9, page_ratio_control=0.1),
        GenePair('A', 'C', 'P', p_value=0.01, page_ratio_case=0.9, page_ratio_control=0.1),
        GenePair('A', 'B', 'P', p_value=0.01, page_ratio_case=0.95, page_ratio_control=0.05),
        GenePair('A', 'D', 'P', p_value=0.001, page_ratio_case=0.6, page_ratio_control=0.4)
    ]
    ranked = sorted(pairs, key=rank_key)
    assert [(p.g1, p.g2) for p in ranked] == [('A', 'D'), ('A', 'B'), ('A', 'C'), ('B', 'C')]


def test_select_dgps_errors():
    expr = _expr([[1, 2, 3, 4], [4, 3, 2, 1], [1, 1, 2, 2]])
    labels = LabelVector(sample_ids=expr.sample_ids, labels=[0, 0, 1, 1])
    catalog = PathwayCatalog(pathways={'P': ['G0', 'G1', 'G2']})
    with pytest.raises(DataError) as exc:
        ScreenService.select_dgps(expr, labels, catalog, k=4)
    assert '3' in str(exc.value)
    with pytest.raises(ParameterError):
        ScreenService.select_dgps(expr, labels, catalog, k=0)
    assert ScreenService.select_dgps(expr, labels, catalog, k=3).k == 3


def test_screening_single_class_labels_is_all_degenerate():
    expr = _expr([[1, 2, 3], [3, 2, 1]])
    labels = LabelVector(sample_ids=expr.sample_ids, labels=[1, 1, 1])
    result = ScreenService.score_candidates(expr, labels, PathwayCatalog(pathways={'P': ['G0', 'G1']}))
    assert result.degenerate_tables == 1
    assert result.candidates[0].p_value == 1.0


def test_parallel_screening_matches_serial():
    data = DataService.generate_synthetic(SynthConfig(n_samples=40, n_genes=60, n_pathways=5, planted_pairs=4, seed=3))
    serial = ScreenService.score_candidates(data.expression, data.labels, data.catalog, parallel=1)
    parallel = ScreenService.score_candidates(data.expression, data.labels, data.catalog, parallel=2)
    assert serial.candidates == parallel.candidates


# ==================== 特征化 ====================

def test_featurize_binary_and_continuous():
    expr = _expr([[2.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    panel = DgpPanel([GenePair('G0', 'G1', 'P')])
    assert_array_equal(ScreenService.featurize(expr, panel), [[1.0], [0.0], [0.0]])
    continuous = ScreenService.featurize(expr, panel, mode='continuous')
    assert_allclose(continuous[:, 0], [math.log(2.0), 0.0, math.log(EXPR_EPS)])


def test_featurize_lists_every_missing_gene():
    expr = _expr([[1.0], [2.0]])
    panel = DgpPanel([GenePair('G0', 'X1', 'P'), GenePair('X2', 'G1', 'P')])
    with pytest.raises(DataError) as exc:
        ScreenService.featurize(expr, panel)
    assert 'X1' in str(exc.value) and 'X2' in str(exc.value)


def test_featurize_rejects_unknown_mode():
    expr = _expr([[1.0], [2.0]])
    with pytest.raises(ParameterError):
        ScreenService.featurize(expr, DgpPanel([GenePair('G0', 'G1', 'P')]), mode='ranks')


# ==================== 合成数据验收 ====================

@pytest.fixture(scope='module')
def planted_cohort():
    return DataService.generate_synthetic(SynthConfig(n_samples=300, n_genes=300, planted_pairs=15,
                                                      flip_noise=0.1, seed=11))


def test_planted_pairs_recovered(planted_cohort):
    data = planted_cohort
    panel = ScreenService.select_dgps(data.expression, data.labels, data.catalog, k=15)
    recovered = set(p.key for p in panel.pairs) & set(data.planted_keys())
    assert len(recovered) >= 13
    summary = ScreenService.panel_summary(panel)
    assert summary['share_case_ratio_above_threshold'] >= 13 / 15


def test_screening_is_deterministic(planted_cohort):
    data = planted_cohort
    first = ScreenService.select_dgps(data.expression, data.labels, data.catalog, k=15)
    second = ScreenService.select_dgps(data.expression, data.labels, data.catalog, k=15)
    assert first.to_records() == second.to_records()


@pytest.mark.slow
def test_shuffled_labels_do_not_recover_planted_pairs(planted_cohort):
    data = planted_cohort
    hits = {key: 0 for key in data.planted_keys()}
    scored_once = ScreenService.score_candidates(data.expression, data.labels, data.catalog)
    assert scored_once.n_candidates > 15
    for seed in range(20):
        shuffled = np.random.default_rng(seed).permutation(data.labels.labels)
        labels = LabelVector(sample_ids=data.labels.sample_ids, labels=shuffled,
                             class_names=data.labels.class_names)
        panel = ScreenService.select_dgps(data.expression, labels, data.catalog, k=15)
        for pair in panel.pairs:
            if pair.key in hits:
                hits[pair.key] += 1
    assert max(hits.values()) <= 2


def test_zero_flip_noise_gives_perfect_ratios():
    data = DataService.generate_synthetic(SynthConfig(n_samples=30, n_genes=40, n_pathways=4,
                                                      planted_pairs=3, flip_noise=0.0, seed=5))
    case = [s for s, l in zip(data.labels.sample_ids, data.labels.labels) if l == 1]
    control = [s for s, l in zip(data.labels.sample_ids, data.labels.labels) if l == 0]
    for planted in data.planted:
        pair = (planted['g1'], planted['g2'])
        assert ScreenService.page_ratio(pair, data.expression, case) == 1.0
        assert ScreenService.page_ratio(pair, data.expression, control) == 0.0
