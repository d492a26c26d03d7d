import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcn.errors import DimensionError, DomainError
from pcn.metrics import IoUAccumulator, h_mean, iou, mean_over, miou_all


def test_iou_hand_case():
    pred = np.array([[1, 1, 0, 0]])
    gt = np.array([[1, 0, 1, 0]])
    assert iou(pred, gt, 1) == pytest.approx(1 / 3)
    assert iou(pred, gt, 0) == pytest.approx(1 / 3)
    assert iou(pred, gt, 7) is None
    with pytest.raises(DimensionError):
        iou(pred, gt.T, 1)


def test_accumulator_sums_counts_over_images():
    acc = IoUAccumulator([0, 1])
    acc.add(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))  # class 1: I=1, U=3
    acc.add(np.array([1, 1]), np.array([1, 1]))  # class 1: I=2, U=2
    assert acc.per_class()[1] == pytest.approx(3 / 5)
    other = IoUAccumulator([0, 1])
    other.add(np.array([0]), np.array([1]))
    acc.merge(other)
    assert acc.per_class()[1] == pytest.approx(3 / 6)
    assert mean_over({1: 0.5, 2: 0.25}, [1, 2, 9]) == pytest.approx(0.375)
    assert mean_over({}, [1]) is None


@pytest.mark.parametrize(
    "args, expected",
    [((29.38, 51.86), 37.51), ((59.37, 16.74), 26.12)],
)
def test_h_mean_reference_values(args, expected):
    assert h_mean(*args) == pytest.approx(expected, abs=0.01)


@pytest.mark.parametrize(
    "args, expected",
    [((29.38, 51.86, 15, 5), 35.00), ((59.37, 16.74, 15, 5), 48.71), ((62.81, 16.00, 15, 5), 51.11)],
)
def test_miou_all_reference_values(args, expected):
    assert miou_all(*args) == pytest.approx(expected, abs=0.01)


def test_degenerate_inputs():
    assert h_mean(0.0, 0.0) == 0.0
    assert h_mean(0.7, 0.0) == 0.0
    with pytest.raises(DomainError):
        h_mean(-0.1, 0.5)
    with pytest.raises(DomainError):
        miou_all(0.5, 0.5, 0, 2)


unit = st.floats(0, 1, allow_nan=False)


@given(unit, unit)
def test_h_mean_between_min_and_mean(a, b):
    h = h_mean(a, b)
    assert h == pytest.approx(h_mean(b, a))
    assert min(a, b) - 1e-12 <= h <= (a + b) / 2 + 1e-12


@given(unit, st.integers(1, 50), st.integers(1, 50))
def test_miou_all_of_equal_parts(a, nb, nn):
    assert miou_all(a, a, nb, nn) == pytest.approx(a)
