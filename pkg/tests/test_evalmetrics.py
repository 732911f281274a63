import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from croptopo.evalmetrics import (
    AccuracyCurve,
    ConfusionMatrix,
    StepMetrics,
    class_score,
    confusion,
    earliest_date,
    f1,
    oa,
    report,
)
from croptopo.raster import CONFLICT, UNKNOWN, LabelRaster


def lr(cells, table=None):
    return LabelRaster(np.asarray(cells, dtype=np.uint16), table or {1: "corn", 2: "soybean"})


def cm_from(counts, strict=True):
    counts = np.asarray(counts, dtype=np.int64)
    k = counts.shape[0]
    if counts.shape[1] == k:  # pad an empty unclassified column
        counts = np.hstack([counts, np.zeros((k, 1), dtype=np.int64)])
    return ConfusionMatrix(counts, list(range(k)), {i: f"c{i}" for i in range(k)}, strict)


# ---------------------------------------------------------------------------
# confusion counts
# ---------------------------------------------------------------------------

def test_confusion_diagonal_when_equal():
    truth = lr([[0, 1], [2, 1]])
    cm = confusion(lr([[0, 1], [2, 1]]), truth)
    assert np.array_equal(cm.counts[:, :-1], np.diag([1, 2, 1]))
    assert cm.counts[:, -1].sum() == 0


def test_confusion_swapped_pixels_hand_count():
    truth = lr([[1, 1], [2, 2]])
    pred = lr([[2, 1], [1, 2]])  # two pixels swapped
    cm = confusion(pred, truth)
    # rows/cols: [background, 1, 2]
    assert cm.counts[1, 1] == 1 and cm.counts[1, 2] == 1
    assert cm.counts[2, 1] == 1 and cm.counts[2, 2] == 1


def test_confusion_empty_mask_zero_matrix():
    truth = lr([[1, 2]])
    cm = confusion(lr([[1, 2]]), truth, eval_mask=np.zeros((1, 2), bool))
    assert cm.total == 0
    assert oa(cm) == 0.0


def test_confusion_unclassified_column():
    truth = lr([[1, 1, 2]])
    pred = lr([[UNKNOWN, CONFLICT, 2]])
    cm = confusion(pred, truth)
    assert cm.counts[1, -1] == 2
    assert oa(cm) == pytest.approx(1 / 3)
    loose = confusion(pred, truth, strict=False)
    assert oa(loose) == pytest.approx(1.0)


def test_confusion_totals_equal_evaluated_pixels(rng):
    for _ in range(20):
        truth_cells = rng.integers(0, 3, (9, 9)).astype(np.uint16)
        pred_cells = rng.choice([0, 1, 2, UNKNOWN, CONFLICT], (9, 9)).astype(np.uint16)
        mask = rng.random((9, 9)) > 0.3
        cm = confusion(lr(pred_cells), lr(truth_cells), eval_mask=mask)
        assert cm.total == int(mask.sum())


def test_confusion_geometry_mismatch():
    with pytest.raises(ValueError, match="geometry"):
        confusion(lr([[1]]), lr([[1, 2]]))


# ---------------------------------------------------------------------------
# F1 / OA
# ---------------------------------------------------------------------------

def test_f1_perfect():
    cm = cm_from([[5, 0, 0], [0, 7, 0], [0, 0, 3]])
    assert f1(cm, 1) == 1.0


def test_f1_hand_value():
    # class 1: UA = 0.8 (8 of 10 predicted correct), PA = 0.9 (8 of 9 truth plus unclassified 0)
    counts = np.zeros((2, 3), dtype=np.int64)
    counts[1, 1] = 8
    counts[0, 1] = 2      # false positives -> UA = 8/10
    counts[1, 0] = 1      # misses -> PA = 8/9... adjust to reach 0.9: use 72/80, 72/90
    counts = np.zeros((2, 3), dtype=np.int64)
    counts[1, 1] = 72
    counts[0, 1] = 18     # UA = 72/90 = 0.8
    counts[1, 0] = 8      # PA = 72/80 = 0.9
    counts[0, 0] = 10
    cm = ConfusionMatrix(counts, [0, 1], {0: "bg", 1: "corn"}, True)
    s = class_score(cm, 1)
    assert s.ua == pytest.approx(0.8) and s.pa == pytest.approx(0.9)
    assert s.f1 == pytest.approx(2 * 0.8 * 0.9 / 1.7, abs=1e-6)
    assert s.f1 == pytest.approx(0.847059, abs=1e-6)


def test_f1_degenerate_class_flagged():
    cm = cm_from([[5, 0, 0], [0, 3, 0], [0, 0, 0]])
    s = class_score(cm, 2)
    assert s.f1 == 0.0 and s.degenerate


def test_f1_symmetry_and_bound(rng):
    for _ in range(200):
        counts = rng.integers(0, 30, (3, 4))
        cm = cm_from(counts)
        for c in cm.classes:
            s = class_score(cm, c)
            assert s.f1 <= 2 * min(s.ua, s.pa) + 1e-12
            # harmonic mean is symmetric in (ua, pa)
            if s.ua + s.pa > 0:
                assert s.f1 == pytest.approx(2 * s.pa * s.ua / (s.pa + s.ua))


def test_oa_permutation_invariant(rng):
    counts = rng.integers(0, 50, (3, 4))
    cm = cm_from(counts)
    perm = [2, 0, 1]
    permuted = counts[np.ix_(perm, perm + [3])]
    cm2 = cm_from(permuted)
    assert oa(cm) == pytest.approx(oa(cm2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metrics_match_brute_force_oracle(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 5))
    counts = r.integers(0, 12, (k, k + 1))
    cm = cm_from(counts)
    total = counts.sum()
    diag = sum(counts[i, i] for i in range(k))
    assert oa(cm) == pytest.approx(diag / total if total else 0.0)
    for c in range(k):
        pred_c = counts[:, c].sum()
        truth_c = counts[c, :].sum()
        ua = counts[c, c] / pred_c if pred_c else 0.0
        pa = counts[c, c] / truth_c if truth_c else 0.0
        expect = 2 * ua * pa / (ua + pa) if ua + pa else 0.0
        assert f1(cm, c) == pytest.approx(expect)


# ---------------------------------------------------------------------------
# curves / report
# ---------------------------------------------------------------------------

def curve_of(oas, start=1):
    return AccuracyCurve([StepMetrics(step=i + start, doy=100 + 10 * i, oa=v, f1={1: v})
                          for i, v in enumerate(oas)])


def test_earliest_date_walk():
    assert earliest_date(curve_of([0.2, 0.84, 0.86, 0.83])) == 3
    assert earliest_date(curve_of([0.2, 0.3])) is None
    assert earliest_date(curve_of([0.9, 0.3])) == 1


def test_curve_requires_increasing_steps():
    with pytest.raises(ValueError, match="strictly increasing"):
        AccuracyCurve([StepMetrics(2, 100, 0.5, {}), StepMetrics(2, 110, 0.6, {})])


def test_report_zero_deltas_for_identical_inputs():
    main = curve_of([0.5, 0.9])
    text, csv = report(main, {"boundary": curve_of([0.5, 0.9])}, {1: "corn"})
    lines = csv.strip().split("\n")
    header = lines[0].split(",")
    di = header.index("delta_oa_boundary")
    for line in lines[1:]:
        assert float(line.split(",")[di]) == 0.0
    assert "best OA (main): 0.9" in text


def test_report_single_method():
    text, csv = report(curve_of([0.4]), {}, {1: "corn"})
    assert "delta" not in csv.split("\n")[0]
    assert "oa_main" in csv.split("\n")[0]


def test_report_deltas_match_subtraction(rng):
    a = [float(x) for x in rng.random(5)]
    b = [float(x) for x in rng.random(5)]
    _, csv = report(curve_of(a), {"x": curve_of(b)}, {1: "corn"})
    lines = csv.strip().split("\n")
    header = lines[0].split(",")
    di = header.index("delta_oa_x")
    for i, line in enumerate(lines[1:]):
        assert float(line.split(",")[di]) == pytest.approx(a[i] - b[i], abs=1e-6)
