import numpy as np
import pytest

from errors import ModelDomainError
from perturbation import PERTURBATION_KINDS, PerturbationSpec, f_prime, f_second, f_value

ENTROPY = PerturbationSpec(kind="modified_entropy")
QUADRATIC = PerturbationSpec(kind="quadratic")


def test_modified_entropy_values():
    assert f_value(ENTROPY, 0.0) == 0.0
    assert f_value(ENTROPY, 1.0) == pytest.approx(2 * np.log(2) - 1)
    assert f_prime(ENTROPY, 1.0) == pytest.approx(np.log(2))
    assert f_second(ENTROPY, 1.0) == pytest.approx(0.5)


def test_quadratic_values():
    assert f_value(QUADRATIC, 3.0) == 9.0
    assert f_prime(QUADRATIC, 3.0) == 6.0
    assert f_second(QUADRATIC, 3.0) == 2.0


@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
def test_zero_at_zero_and_strictly_convex(kind):
    spec = PerturbationSpec(kind=kind)
    xs = np.linspace(0.0, 10.0, 41)
    assert f_value(spec, 0.0) == 0.0
    assert f_prime(spec, 0.0) == 0.0
    assert np.all(f_second(spec, xs) > 0)


@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
def test_derivatives_match_finite_differences(kind):
    """중앙 차분과 해석적 도함수 비교"""
    spec = PerturbationSpec(kind=kind)
    xs = np.linspace(0.01, 10.0, 50)
    h = 1e-5
    numeric_prime = (f_value(spec, xs + h) - f_value(spec, xs - h)) / (2 * h)
    numeric_second = (f_prime(spec, xs + h) - f_prime(spec, xs - h)) / (2 * h)
    np.testing.assert_allclose(numeric_prime, f_prime(spec, xs), atol=1e-6)
    np.testing.assert_allclose(numeric_second, f_second(spec, xs), atol=1e-6)


def test_vector_input_keeps_shape():
    xs = np.array([0.0, 0.5, 2.0])
    assert f_value(ENTROPY, xs).shape == (3,)
    assert isinstance(f_value(ENTROPY, 0.5), float)


@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
def test_negative_argument_rejected(kind):
    with pytest.raises(ModelDomainError):
        f_value(PerturbationSpec(kind=kind), -0.1)
    with pytest.raises(ModelDomainError):
        f_prime(PerturbationSpec(kind=kind), np.array([0.2, -1e-6]))


def test_roundoff_negatives_clamped_to_zero():
    assert f_value(ENTROPY, -1e-13) == 0.0
    assert f_prime(QUADRATIC, -1e-13) == 0.0


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        PerturbationSpec(kind="logit")
