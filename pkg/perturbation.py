from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import DEFAULT_PERTURBATION, logger
from errors import ModelDomainError

PERTURBATION_KINDS = ("modified_entropy", "quadratic")

# 솔버 반올림 오차 흡수 구간 (-1e-12, 0)
ROUNDOFF_FLOOR = -1e-12


class PerturbationSpec(BaseModel):
    """교란 함수 F 선택"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["modified_entropy", "quadratic"] = "modified_entropy"

    @classmethod
    def default(cls) -> "PerturbationSpec":
        return cls(kind=DEFAULT_PERTURBATION)

    def __str__(self) -> str:
        return self.kind


def _domain(x):
    """음수 입력 검사 후 반올림 오차 구간을 0 으로 고정"""
    array = np.asarray(x, dtype=float)
    if np.any(array <= ROUNDOFF_FLOOR) or np.any(np.isnan(array)):
        raise ModelDomainError(f"교란 함수 인자는 0 이상이어야 합니다 (min={np.nanmin(array):.3g})")
    return np.where(array < 0.0, 0.0, array)


def _result(x, value):
    return float(value) if np.ndim(x) == 0 else value


def f_value(spec: PerturbationSpec, x):
    """F(x): 수정 엔트로피 (1+x)ln(1+x) - x, 또는 x²"""
    xs = _domain(x)
    if spec.kind == "modified_entropy":
        value = (1.0 + xs) * np.log1p(xs) - xs
    else:
        value = xs * xs
    return _result(x, value)


def f_prime(spec: PerturbationSpec, x):
    """F'(x): ln(1+x), 또는 2x"""
    xs = _domain(x)
    value = np.log1p(xs) if spec.kind == "modified_entropy" else 2.0 * xs
    return _result(x, value)


def f_second(spec: PerturbationSpec, x):
    """F''(x): 1/(1+x), 또는 2"""
    xs = _domain(x)
    value = 1.0 / (1.0 + xs) if spec.kind == "modified_entropy" else np.full_like(xs, 2.0)
    return _result(x, value)


if __name__ == "__main__":
    # 테스트 실행
    for kind in PERTURBATION_KINDS:
        spec = PerturbationSpec(kind=kind)
        logger.info("교란 함수", kind=kind, F1=f_value(spec, 1.0), dF1=f_prime(spec, 1.0), d2F1=f_second(spec, 1.0))
