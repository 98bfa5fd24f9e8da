from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy import optimize, special

from config import ROUTE_CAP, logger
from errors import CalibrationError, InfeasibleError, RouteExplosionError
from network import DemandSpec, Network, UtilityRates


@dataclass
class RouteSet:
    """OD 의 루프 없는 경로 전체와 경로 효용 U_n = Σ l_e u_e"""
    demand: DemandSpec
    routes: List[Tuple[int, ...]]
    utilities: np.ndarray
    route_lengths: np.ndarray
    link_lengths: np.ndarray
    link_ids: List[str]

    def __len__(self) -> int:
        return len(self.routes)

    def incidence(self) -> np.ndarray:
        """경로 × 링크 0/1 행렬"""
        matrix = np.zeros((len(self.routes), len(self.link_ids)))
        for n, route in enumerate(self.routes):
            matrix[n, list(route)] = 1.0
        return matrix

    def route_labels(self) -> List[str]:
        return ["-".join(self.link_ids[e] for e in route) for route in self.routes]


@dataclass
class ChoiceProbabilities:
    probabilities: np.ndarray
    link_flows: np.ndarray

    def to_frame(self, rs: RouteSet) -> pd.DataFrame:
        return pd.DataFrame({"link_id": rs.link_ids, "flow": self.link_flows})


@dataclass
class CalibrationResult:
    kind: str
    beta_u: float
    beta_ps: Optional[float]
    sse: float
    iterations: int

    def to_dict(self):
        return {"model": self.kind, "beta_u": self.beta_u, "beta_ps": self.beta_ps, "sse": self.sse,
                "iterations": self.iterations}


def enumerate_routes(net: Network, d: DemandSpec, u: UtilityRates, max_routes: int = ROUTE_CAP) -> RouteSet:
    """루프 없는 경로 전수 열거 (상한 초과 시 오류)"""
    graph = nx.MultiDiGraph()
    graph.add_nodes_from(range(net.n_nodes))
    for index, (tail, head) in enumerate(zip(net.tails, net.heads)):
        graph.add_edge(int(tail), int(head), key=index)

    origin, destination = net.node_id(d.origin), net.node_id(d.destination)
    routes = []
    for path in nx.all_simple_edge_paths(graph, origin, destination):
        routes.append(tuple(int(key) for _, _, key in path))
        if len(routes) > max_routes:
            raise RouteExplosionError(f"{d.label()}: 경로가 {max_routes}개를 넘습니다")
    if not routes:
        raise InfeasibleError(f"목적지에 도달할 수 없습니다: {d.label()}")
    routes.sort()

    weighted = net.lengths * u.values
    route_set = RouteSet(
        demand=d,
        routes=routes,
        utilities=np.array([weighted[list(r)].sum() for r in routes]),
        route_lengths=np.array([net.lengths[list(r)].sum() for r in routes]),
        link_lengths=np.asarray(net.lengths),
        link_ids=net.link_ids,
    )
    logger.debug("경로 열거", od=d.label(), routes=len(routes))
    return route_set


def path_size(rs: RouteSet) -> np.ndarray:
    """S_n = Σ_{e∈n} (l_e / L_n)(1 / N_e)"""
    incidence = rs.incidence()
    overlap = incidence.sum(axis=0)
    shares = incidence * rs.link_lengths / rs.route_lengths[:, None]
    return (shares / np.where(overlap > 0, overlap, 1.0)).sum(axis=1)


def _choice(rs: RouteSet, systematic: np.ndarray) -> ChoiceProbabilities:
    probabilities = special.softmax(systematic)
    return ChoiceProbabilities(probabilities=probabilities, link_flows=probabilities @ rs.incidence())


def mnl_probabilities(rs: RouteSet, beta_u: float) -> ChoiceProbabilities:
    """V_n = β_u U_n"""
    return _choice(rs, beta_u * rs.utilities)


def psl_probabilities(rs: RouteSet, beta_u: float, beta_ps: float) -> ChoiceProbabilities:
    """V_n = β_u U_n + β_PS ln S_n"""
    return _choice(rs, beta_u * rs.utilities + beta_ps * np.log(path_size(rs)))


def calibrate_to_flows(kind: Literal["mnl", "psl"], rs: RouteSet, target,
                       beta_u: Optional[float] = None,
                       beta_u_bounds: Tuple[float, float] = (1e-3, 20.0),
                       beta_ps_bounds: Tuple[float, float] = (-5.0, 10.0)) -> CalibrationResult:
    """링크 흐름 제곱오차 합을 최소화하는 파라미터 (psl 에서 beta_u 를 주면 β_PS 만 탐색)"""
    target = np.asarray(target, dtype=float)

    if kind == "mnl":
        def sse_mnl(b):
            return float(np.sum((mnl_probabilities(rs, b).link_flows - target) ** 2))

        result = optimize.minimize_scalar(sse_mnl, bounds=beta_u_bounds, method="bounded",
                                          options={"xatol": 1e-10})
        if not result.success:
            raise CalibrationError(f"MNL 보정 실패: {result.message}")
        calibrated = CalibrationResult("mnl", float(result.x), None, float(result.fun), int(result.nfev))

    elif beta_u is not None:
        def sse_fixed(b_ps):
            return float(np.sum((psl_probabilities(rs, beta_u, b_ps).link_flows - target) ** 2))

        result = optimize.minimize_scalar(sse_fixed, bounds=beta_ps_bounds, method="bounded",
                                          options={"xatol": 1e-10})
        if not result.success:
            raise CalibrationError(f"PSL 보정 실패: {result.message}")
        calibrated = CalibrationResult("psl", float(beta_u), float(result.x), float(result.fun), int(result.nfev))

    else:
        def sse_psl(params):
            return float(np.sum((psl_probabilities(rs, params[0], params[1]).link_flows - target) ** 2))

        result = optimize.minimize(sse_psl, x0=np.array([1.0, 1.0]), method="Nelder-Mead",
                                   bounds=[beta_u_bounds, beta_ps_bounds],
                                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        if not result.success:
            raise CalibrationError(f"PSL 보정 실패: {result.message}")
        calibrated = CalibrationResult("psl", float(result.x[0]), float(result.x[1]), float(result.fun),
                                       int(result.nit))

    logger.info("🎯 베이스라인 보정 완료", **calibrated.to_dict())
    return calibrated


if __name__ == "__main__":
    # 테스트 실행
    from network import link_utilities, toy_network

    toy = toy_network()
    route_set = enumerate_routes(toy, DemandSpec(origin="O", destination="D"), link_utilities(toy, [-1.0]))
    logger.info("경로", routes=route_set.route_labels())
    logger.info("MNL", flows=mnl_probabilities(route_set, 2.0).link_flows.round(4).tolist())
    logger.info("PSL", flows=psl_probabilities(route_set, 2.0, 1.1).link_flows.round(4).tolist())
