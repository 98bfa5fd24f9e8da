"""PURC 예외 계층

CLI 종료 코드: UsageError 2, DataError 3, NumericalError 4
"""


class PurcError(Exception):
    """모든 PURC 예외의 루트"""
    exit_code = 1


class UsageError(PurcError):
    """잘못된 CLI 인자"""
    exit_code = 2


class DataError(PurcError, ValueError):
    """입력 파싱/검증 실패"""
    exit_code = 3


class ModelDomainError(DataError):
    """모델 정의역 위반 (u ≥ 0, 음수 흐름 등)"""


class InfeasibleError(DataError):
    """목적지에 도달할 수 없는 OD"""


class NumericalError(PurcError):
    """수치 계산 실패"""
    exit_code = 4


class ConvergenceError(NumericalError):
    """반복 상한 도달 후에도 KKT 잔차가 허용치를 넘음"""


class DecompositionError(NumericalError):
    """흐름 분해 후 잔여 흐름이 남음 (수치적 순환 흐름)"""


class EstimationError(NumericalError):
    """회귀 추정 실패 (랭크 부족, 관측 부족, 빈 선택)"""


class CalibrationError(NumericalError):
    """베이스라인 파라미터 탐색 실패"""


class RouteExplosionError(NumericalError):
    """경로 열거가 상한을 넘음"""


class SimulationError(NumericalError):
    """랜덤 워크 실패 (막다른 노드, 스텝 상한)"""
