import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from config import DEFAULT_JOBS, logger
from errors import DataError, EstimationError, ModelDomainError
from network import DemandSpec, Network, incidence_matrix
from perturbation import PerturbationSpec, f_prime
from simulate import Trip
from solver import FlowSolution

INTEGRALITY_TOL = 1e-9


@dataclass
class EmpiricalFlow:
    """OD 하나의 관측 흐름 (통행 수로 나눈 링크 통과 횟수)"""
    demand: DemandSpec
    flows: np.ndarray
    trip_count: Optional[int] = None
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=float)
        if np.any(self.flows < 0):
            raise ModelDomainError(f"{self.demand.label()}: 음수 흐름이 있습니다")
        if self.trip_count is not None:
            if self.trip_count < 1:
                raise DataError(f"{self.demand.label()}: 통행 수는 1 이상이어야 합니다")
            scaled = self.flows * self.trip_count
            if np.max(np.abs(scaled - np.round(scaled)), initial=0.0) > INTEGRALITY_TOL:
                raise DataError(f"{self.demand.label()}: 흐름이 정수 통행 수와 맞지 않습니다")

    @property
    def is_degenerate(self) -> bool:
        """모든 통행이 같은 링크만 사용 (양수 흐름이 전부 1)"""
        positive = self.flows[self.flows > 0]
        return positive.size > 0 and bool(np.all(np.abs(positive - 1.0) <= INTEGRALITY_TOL))


@dataclass
class RegressionSystem:
    """변환된 (y, w) 행 모음. 행마다 OD 와 링크 인덱스를 기록"""
    y: np.ndarray
    w: np.ndarray
    od_ids: np.ndarray
    link_indices: np.ndarray
    feature_names: List[str] = field(default_factory=list)

    @property
    def n_obs(self) -> int:
        return int(self.y.size)

    @classmethod
    def stack(cls, systems: Sequence["RegressionSystem"]) -> "RegressionSystem":
        if not systems:
            raise EstimationError("쌓을 회귀 행이 없습니다")
        return cls(
            y=np.concatenate([s.y for s in systems]),
            w=np.vstack([s.w for s in systems]),
            od_ids=np.concatenate([s.od_ids for s in systems]),
            link_indices=np.concatenate([s.link_indices for s in systems]),
            feature_names=list(systems[0].feature_names),
        )


@dataclass
class ODDiagnostics:
    od: str
    active_links: int
    rows: int
    rank: int
    seconds: float
    penrose: float


@dataclass
class FitResult:
    """β̂, 강건 공분산, 조정 R²"""
    beta: np.ndarray
    robust_se: np.ndarray
    cov: np.ndarray
    adj_r2: float
    n_obs: int
    r2: float = float("nan")
    r2_defined: bool = True
    cov_type: str = "HC1"
    feature_names: List[str] = field(default_factory=list)
    diagnostics: List[ODDiagnostics] = field(default_factory=list)
    dropped_ods: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        """fit.json 내용"""
        return {
            "features": self.feature_names,
            "beta": self.beta.tolist(),
            "robust_se": self.robust_se.tolist(),
            "cov": self.cov.tolist(),
            "cov_type": self.cov_type,
            "adj_r2": None if not self.r2_defined else self.adj_r2,
            "r2": None if not self.r2_defined else self.r2,
            "r2_defined": self.r2_defined,
            "n_obs": self.n_obs,
            "dropped_ods": self.dropped_ods,
            "per_od": [vars(d) for d in self.diagnostics],
        }


class EstimationOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    cov_type: Literal["HC1", "HC0", "cluster"] = "HC1"
    min_count: Optional[int] = Field(default=None, ge=1)
    drop_degenerate: bool = True
    jobs: int = Field(default=DEFAULT_JOBS, ge=1)


def empirical_flows(trips: Sequence[Trip], net: Network, d: DemandSpec) -> EmpiricalFlow:
    """통행 목록 → 단위 수요로 정규화한 링크 흐름"""
    if not trips:
        raise DataError(f"{d.label()}: 통행이 없습니다")
    counts = np.zeros(net.n_links)
    for trip in trips:
        if (trip.origin, trip.destination) != d.key:
            raise DataError(f"{d.label()}: 다른 OD 의 통행이 섞였습니다 ({trip.origin}->{trip.destination})")
        trip.check(net)
        np.add.at(counts, [net.link_index[link_id] for link_id in trip.links], 1.0)
    return EmpiricalFlow(demand=d, flows=counts / len(trips), trip_count=len(trips), counts=counts)


def flows_from_solution(sol: FlowSolution) -> EmpiricalFlow:
    """모형 해를 그대로 관측 흐름으로 (정확 복원 검증용)"""
    if sol.demand is None:
        raise DataError("수요가 없는 해입니다")
    return EmpiricalFlow(demand=sol.demand, flows=sol.flows.copy(), trip_count=None)


def build_selection(x: EmpiricalFlow, min_count: Optional[int] = None) -> np.ndarray:
    """선택 행렬 B 의 링크 인덱스 (양수 흐름, 선택적으로 최소 통과 횟수)"""
    if min_count is None:
        selection = np.flatnonzero(x.flows > 0)
    else:
        if x.counts is None:
            raise DataError(f"{x.demand.label()}: 최소 통과 횟수 정책에는 통과 횟수가 필요합니다")
        selection = np.flatnonzero(x.counts >= min_count)
    if selection.size == 0:
        raise EstimationError(f"{x.demand.label()}: 선택된 링크가 없습니다")
    return selection


def _reduced_incidence(net: Network, selection: np.ndarray) -> np.ndarray:
    """BAᵀ (|B| × |V| 밀집 행렬)"""
    return incidence_matrix(net)[:, selection].T.toarray()


def reduced_pseudoinverse(net: Network, selection) -> np.ndarray:
    """BAᵀ 의 무어-펜로즈 역행렬 C (|V| × |B|)"""
    selection = np.asarray(selection, dtype=np.int64)
    if selection.size == 0:
        raise EstimationError("빈 선택입니다")
    reduced = _reduced_incidence(net, selection)
    touched = np.flatnonzero(np.any(reduced != 0.0, axis=0))
    inverse = np.zeros((net.n_nodes, selection.size))
    inverse[touched, :] = linalg.pinv(reduced[:, touched])
    return inverse


def penrose_residuals(reduced: np.ndarray, inverse: np.ndarray) -> Dict[str, float]:
    """네 가지 펜로즈 항등식의 최대 절대 잔차"""
    mc = reduced @ inverse
    cm = inverse @ reduced
    return {
        "MCM=M": float(np.max(np.abs(mc @ reduced - reduced))),
        "CMC=C": float(np.max(np.abs(cm @ inverse - inverse))),
        "(MC)ᵀ=MC": float(np.max(np.abs(mc.T - mc))),
        "(CM)ᵀ=CM": float(np.max(np.abs(cm.T - cm))),
    }


def build_regression_rows(net: Network, x: EmpiricalFlow, selection, inverse: np.ndarray,
                          pert: PerturbationSpec) -> RegressionSystem:
    """y = (I - BAᵀC)B(l∘F'(x̂)), w = (I - BAᵀC)B(l∘z)"""
    selection = np.asarray(selection, dtype=np.int64)
    if inverse.shape != (net.n_nodes, selection.size):
        raise DataError(f"C 차원 불일치: {inverse.shape} != {(net.n_nodes, selection.size)}")
    reduced = _reduced_incidence(net, selection)
    projector = np.eye(selection.size) - reduced @ inverse
    lengths = net.lengths[selection]
    y = projector @ (lengths * f_prime(pert, x.flows[selection]))
    w = projector @ (lengths[:, None] * net.z[selection])
    return RegressionSystem(
        y=y,
        w=w,
        od_ids=np.full(selection.size, x.demand.label(), dtype=object),
        link_indices=selection,
        feature_names=list(net.feature_names),
    )


def ols_fit(system: RegressionSystem, cov_type: str = "HC1") -> FitResult:
    """OLS (절편 없음) + 강건 공분산"""
    n_obs, n_params = system.w.shape
    if n_obs < n_params:
        raise EstimationError(f"관측 수({n_obs})가 파라미터 수({n_params})보다 적습니다")
    rank = int(np.linalg.matrix_rank(system.w))
    if rank < n_params:
        raise EstimationError(f"설계 행렬 랭크 부족: {rank} < {n_params} (특성 공선성)")

    model = sm.OLS(system.y, system.w)
    if cov_type == "cluster":
        _, groups = np.unique(system.od_ids.astype(str), return_inverse=True)
        fit_kwargs = {"cov_type": "cluster", "cov_kwds": {"groups": groups}}
    elif cov_type in ("HC0", "HC1"):
        fit_kwargs = {"cov_type": cov_type}
    else:
        raise DataError(f"지원하지 않는 공분산 유형: {cov_type}")

    r2_defined = bool(np.any(system.y != 0.0))
    with warnings.catch_warnings(), np.errstate(divide="ignore", invalid="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        results = model.fit(**fit_kwargs)
        cov = np.asarray(results.cov_params(), dtype=float)
        r2 = float(results.rsquared) if r2_defined else float("nan")
        adj_r2 = float(results.rsquared_adj) if r2_defined else float("nan")

    cov = 0.5 * (cov + cov.T)
    return FitResult(
        beta=np.asarray(results.params, dtype=float),
        robust_se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        cov=cov,
        adj_r2=adj_r2,
        r2=r2,
        r2_defined=r2_defined,
        n_obs=n_obs,
        cov_type=cov_type,
        feature_names=list(system.feature_names),
    )


class RouteChoiceEstimator:
    """OD 별 회귀 행 구성 후 하나의 OLS 로 β 추정"""

    def __init__(self, options: Optional[EstimationOptions] = None):
        self.options = options or EstimationOptions()

    def od_rows(self, net: Network, x: EmpiricalFlow, pert: PerturbationSpec,
                min_count: Optional[int] = None):
        started = time.perf_counter()
        selection = build_selection(x, min_count)
        inverse = reduced_pseudoinverse(net, selection)
        system = build_regression_rows(net, x, selection, inverse, pert)
        reduced = _reduced_incidence(net, selection)
        diagnostics = ODDiagnostics(
            od=x.demand.label(),
            active_links=int(selection.size),
            rows=system.n_obs,
            rank=int(np.linalg.matrix_rank(reduced)),
            seconds=time.perf_counter() - started,
            penrose=max(penrose_residuals(reduced, inverse).values()),
        )
        logger.debug("OD 회귀 행 구성", od=diagnostics.od, rows=diagnostics.rows, rank=diagnostics.rank,
                     seconds=round(diagnostics.seconds, 4))
        return system, diagnostics

    def estimate(self, net: Network, flows: Sequence[EmpiricalFlow], pert: Optional[PerturbationSpec] = None,
                 options: Optional[EstimationOptions] = None) -> FitResult:
        pert = pert or PerturbationSpec()
        options = options or self.options

        kept, dropped = [], []
        for x in flows:
            if options.drop_degenerate and x.is_degenerate:
                dropped.append(x.demand.label())
            else:
                kept.append(x)
        if dropped:
            logger.warning("⚠️ 단일 경로 OD 제외", count=len(dropped))
        if not kept:
            raise EstimationError("추정에 쓸 OD 가 없습니다 (모두 단일 경로)")

        def work(x: EmpiricalFlow):
            return self.od_rows(net, x, pert, options.min_count)

        if options.jobs > 1 and len(kept) > 1:
            with ThreadPoolExecutor(max_workers=options.jobs) as pool:
                parts = list(pool.map(work, kept))
        else:
            parts = [work(x) for x in kept]

        system = RegressionSystem.stack([s for s, _ in parts])
        result = ols_fit(system, options.cov_type)
        result.diagnostics = [d for _, d in parts]
        result.dropped_ods = dropped
        logger.info("📈 추정 완료", ods=len(kept), n_obs=result.n_obs, beta=result.beta.round(6).tolist(),
                    adj_r2=result.adj_r2, cov_type=result.cov_type)
        return result


# 전역 추정기 인스턴스
estimator = RouteChoiceEstimator()


def estimate(net: Network, flows: Sequence[EmpiricalFlow], pert: Optional[PerturbationSpec] = None,
             options: Optional[EstimationOptions] = None) -> FitResult:
    return estimator.estimate(net, flows, pert, options)


if __name__ == "__main__":
    # 테스트 실행
    from network import link_utilities, make_grid_network
    from solver import solve_flow

    grid = make_grid_network(5, 5, seed=3)
    solution = solve_flow(grid, link_utilities(grid, [-1.5]), DemandSpec(origin="0_0", destination="4_4"))
    fit = estimate(grid, [flows_from_solution(solution)])
    logger.info("정확 복원", beta=fit.beta.tolist(), n_obs=fit.n_obs)
