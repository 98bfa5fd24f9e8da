from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import DEFAULT_JOBS, DEFAULT_SEED, logger
from errors import DataError, PurcError
from estimation import EstimationOptions, FitResult, empirical_flows, estimate
from network import DemandSpec, Network, UtilityRates, link_utilities
from perturbation import PerturbationSpec
from preprocess import group_by_od, trip_coverage
from simulate import Trip
from solver import FlowSolution, SolverOptions, flow_solver

ZERO_FLOW = 1e-12
DIVERGENCE_TOL = 1e-6


@dataclass
class UnusedLinkStats:
    """예측/관측 미사용 링크 집합 비교"""
    overlap: float                 # |P∩O| / |P∪O|
    predicted_relative: float      # |P∩O| / |P|
    observed_relative: float       # |P∩O| / |O|
    predicted_zero: int
    observed_zero: int
    predicted_zero_km: float
    observed_zero_km: float

    def to_dict(self) -> Dict:
        return dict(vars(self))


@dataclass
class ValidationReport:
    link_ids: List[str]
    observed: np.ndarray
    predicted: np.ndarray
    adj_r2: float
    adj_r2_printed: float
    outside_utility_shares: np.ndarray
    unused: UnusedLinkStats
    n_params: int
    n_trips: int
    n_ods: int
    extra: Dict = field(default_factory=dict)

    @property
    def adj_r2_divergent(self) -> bool:
        return abs(self.adj_r2 - self.adj_r2_printed) > DIVERGENCE_TOL

    @property
    def fully_covered_share(self) -> float:
        """활성 집합 안에만 있는 통행 비율"""
        if self.outside_utility_shares.size == 0:
            return float("nan")
        return float(np.mean(self.outside_utility_shares <= ZERO_FLOW))

    def to_dict(self) -> Dict:
        shares = self.outside_utility_shares
        return {
            "adj_r2": self.adj_r2,
            "adj_r2_printed": self.adj_r2_printed,
            "adj_r2_divergent": self.adj_r2_divergent,
            "n_params": self.n_params,
            "n_links": len(self.link_ids),
            "n_trips": self.n_trips,
            "n_ods": self.n_ods,
            "observed_total": float(self.observed.sum()),
            "predicted_total": float(self.predicted.sum()),
            "outside_share_mean": float(shares.mean()) if shares.size else None,
            "outside_share_median": float(np.median(shares)) if shares.size else None,
            "fully_covered_share": self.fully_covered_share,
            "unused_links": self.unused.to_dict(),
            **self.extra,
        }

    def scatter_frame(self) -> pd.DataFrame:
        """flows_scatter.csv: 링크별 관측/예측 합계와 로그 차이"""
        return pd.DataFrame({
            "link_id": self.link_ids,
            "observed": self.observed,
            "predicted": self.predicted,
            "log_diff": log_difference(self.predicted, self.observed),
        })

    def outside_cdf_frame(self) -> pd.DataFrame:
        """outside_cdf.csv: 활성 집합 밖 효용 비율의 경험적 CDF"""
        shares = np.sort(self.outside_utility_shares)
        cdf = np.arange(1, shares.size + 1) / max(shares.size, 1)
        return pd.DataFrame({"outside_share": shares, "cdf": cdf})


def observed_link_totals(trips: Sequence[Trip], net: Network) -> np.ndarray:
    totals = np.zeros(net.n_links)
    for trip in trips:
        np.add.at(totals, [net.link_index[link_id] for link_id in trip.check(net).links], 1.0)
    return totals


def _solve_counted(net: Network, u: UtilityRates, demands: Sequence[Tuple[DemandSpec, int]],
                   pert: Optional[PerturbationSpec], opts: Optional[SolverOptions], jobs: int) -> List[FlowSolution]:
    ods = [d for d, count in demands if count > 0]
    try:
        return flow_solver.solve_many(net, u, ods, pert, opts, jobs)
    except PurcError:
        logger.error("❌ OD 예측 실패", ods=[d.label() for d in ods][:20])
        raise


def aggregate_predicted_flows(net: Network, beta, demands: Sequence[Tuple[DemandSpec, int]],
                              pert: Optional[PerturbationSpec] = None, opts: Optional[SolverOptions] = None,
                              jobs: int = DEFAULT_JOBS) -> np.ndarray:
    """Σ_od count_od · x̂(od)"""
    u = beta if isinstance(beta, UtilityRates) else link_utilities(net, beta)
    totals = np.zeros(net.n_links)
    solutions = _solve_counted(net, u, demands, pert, opts, jobs)
    counts = [count for _, count in demands if count > 0]
    for count, sol in zip(counts, solutions):
        totals += count * sol.flows
    return totals


def prediction_adj_r2(observed, predicted, p: int,
                      variant: Literal["conventional", "printed"] = "conventional") -> float:
    """링크 합계 예측의 조정 R²"""
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape != predicted.shape:
        raise DataError(f"벡터 길이 불일치: {observed.shape} != {predicted.shape}")
    n = observed.size
    if n <= p:
        raise DataError(f"관측 수({n})가 파라미터 수({p})보다 커야 합니다")
    sst = float(np.sum((observed - observed.mean()) ** 2))
    if sst == 0.0:
        raise DataError("관측 벡터가 상수입니다 (SST = 0)")
    sse = float(np.sum((predicted - observed) ** 2))

    if variant == "printed":
        return 1.0 - (1.0 - sse / sst) * (1.0 - n) / (1.0 - p - n)
    if sse == 0.0:
        return 1.0
    if n - p - 1 <= 0:
        raise DataError(f"조정 R² 자유도 부족: N={n}, p={p}")
    return 1.0 - (sse / sst) * (n - 1) / (n - p - 1)


def outside_utility_share(trip: Trip, active, u: UtilityRates, net: Network) -> float:
    """통행 |u| 가중 길이 중 예측 활성 집합 밖의 비율"""
    links = np.array([net.link_index[link_id] for link_id in trip.links])
    if links.size == 0 or np.sum(net.lengths[links] * np.abs(u.values[links])) == 0.0:
        raise DataError(f"효용이 0 인 통행입니다: {trip.origin}->{trip.destination}")
    return 1.0 - trip_coverage(trip, net, u, np.asarray(active, dtype=bool))


def unused_link_stats(predicted, observed, net: Network) -> UnusedLinkStats:
    predicted_zero = np.asarray(predicted, dtype=float) <= ZERO_FLOW
    observed_zero = np.asarray(observed, dtype=float) <= ZERO_FLOW
    both = int(np.count_nonzero(predicted_zero & observed_zero))
    union = int(np.count_nonzero(predicted_zero | observed_zero))
    n_pred, n_obs = int(predicted_zero.sum()), int(observed_zero.sum())
    return UnusedLinkStats(
        overlap=both / union if union else 1.0,
        predicted_relative=both / n_pred if n_pred else 1.0,
        observed_relative=both / n_obs if n_obs else 1.0,
        predicted_zero=n_pred,
        observed_zero=n_obs,
        predicted_zero_km=float(net.lengths[predicted_zero].sum()),
        observed_zero_km=float(net.lengths[observed_zero].sum()),
    )


def log_difference(predicted, observed) -> np.ndarray:
    """ln(q̂+1) - ln(q+1)"""
    return np.log1p(np.asarray(predicted, dtype=float)) - np.log1p(np.asarray(observed, dtype=float))


def validate(net: Network, trips: Sequence[Trip], beta, pert: Optional[PerturbationSpec] = None,
             opts: Optional[SolverOptions] = None, jobs: int = DEFAULT_JOBS,
             n_params: Optional[int] = None) -> ValidationReport:
    """관측 통행과 모형 예측 비교"""
    if not trips:
        raise DataError("검증할 통행이 없습니다")
    u = link_utilities(net, beta)
    groups = group_by_od(trips)
    demands = [(members[0].od, len(members)) for members in groups.values()]
    solutions = _solve_counted(net, u, demands, pert, opts, jobs)

    predicted = np.zeros(net.n_links)
    shares = []
    for (od, count), members, sol in zip(demands, groups.values(), solutions):
        predicted += count * sol.flows
        shares.extend(outside_utility_share(trip, sol.active, u, net) for trip in members)
    observed = observed_link_totals(trips, net)

    p = n_params if n_params is not None else net.n_features
    report = ValidationReport(
        link_ids=net.link_ids,
        observed=observed,
        predicted=predicted,
        adj_r2=prediction_adj_r2(observed, predicted, p),
        adj_r2_printed=prediction_adj_r2(observed, predicted, p, variant="printed"),
        outside_utility_shares=np.array(shares),
        unused=unused_link_stats(predicted, observed, net),
        n_params=p,
        n_trips=len(trips),
        n_ods=len(groups),
    )
    logger.info("✅ 검증 완료", adj_r2=round(report.adj_r2, 4), overlap=round(report.unused.overlap, 4),
                fully_covered=round(report.fully_covered_share, 4), trips=report.n_trips)
    return report


def split_by_od(trips: Sequence[Trip], seed: int = DEFAULT_SEED,
                fraction: float = 0.5) -> Tuple[List[Trip], List[Trip]]:
    """OD 단위 무작위 분할 (학습, 검증)"""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"분할 비율은 (0, 1) 안이어야 합니다: {fraction}")
    groups = group_by_od(trips)
    keys = list(groups)
    if len(keys) < 2:
        raise DataError("OD 가 2개 이상이어야 분할할 수 있습니다")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B])))
    order = rng.permutation(len(keys))
    cut = min(max(1, int(round(fraction * len(keys)))), len(keys) - 1)
    train = [trip for k in sorted(order[:cut]) for trip in groups[keys[k]]]
    test = [trip for k in sorted(order[cut:]) for trip in groups[keys[k]]]
    return train, test


def holdout_validation(net: Network, trips: Sequence[Trip], pert: Optional[PerturbationSpec] = None,
                       seed: int = DEFAULT_SEED, fraction: float = 0.5,
                       options: Optional[EstimationOptions] = None,
                       jobs: int = DEFAULT_JOBS) -> Tuple[FitResult, ValidationReport]:
    """절반 OD 로 추정, 나머지 OD 로 예측 검증"""
    train, test = split_by_od(trips, seed, fraction)
    flows = [empirical_flows(members, net, members[0].od) for members in group_by_od(train).values()]
    fit = estimate(net, flows, pert, options)
    report = validate(net, test, fit.beta, pert, jobs=jobs, n_params=len(fit.beta))
    report.extra["holdout"] = {"train_trips": len(train), "test_trips": len(test), "seed": seed}
    return fit, report


if __name__ == "__main__":
    # 테스트 실행
    x = np.array([3.0, 0.0, 5.0, 1.0, 0.0])
    logger.info("조정 R²", same=prediction_adj_r2(x, x, 1), printed=prediction_adj_r2(x, x, 1, "printed"))
