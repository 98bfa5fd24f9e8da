import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from config import DECOMPOSITION_TOL, DEFAULT_JOBS, INNER_SWEEPS, SOLVER_DEFAULTS, logger
from errors import ConvergenceError, DataError, DecompositionError, InfeasibleError
from network import DemandSpec, Network, UtilityRates, demand_vector, incidence_matrix
from perturbation import PerturbationSpec, f_prime, f_second, f_value

NEWTON_STEPS = 60
TRUNCATION_ROUNDS = 5
RESIDUAL_EPS = 1e-12      # 분해 시 0 으로 보는 잔여 흐름


class SolverOptions(BaseModel):
    """솔버 허용치 / 반복 상한"""
    model_config = ConfigDict(frozen=True)

    kkt_tol: float = Field(default=SOLVER_DEFAULTS["kkt_tol"], gt=0)
    feas_tol: float = Field(default=SOLVER_DEFAULTS["feas_tol"], gt=0)
    zero_tol: float = Field(default=SOLVER_DEFAULTS["zero_tol"], gt=0)
    max_iters: int = Field(default=SOLVER_DEFAULTS["max_iters"], gt=0)
    method: Literal["pairwise_fw"] = SOLVER_DEFAULTS["method"]


@dataclass
class FlowSolution:
    """한 OD 의 최적 흐름 x̂, 승수 λ̂, 활성 집합"""
    demand: Optional[DemandSpec]
    flows: np.ndarray
    multipliers: np.ndarray
    objective: float
    kkt_residual: float
    active: np.ndarray
    iterations: int = 0
    gap: float = 0.0
    seconds: float = 0.0
    paths: List[Tuple[Tuple[int, ...], float]] = field(default_factory=list)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    def to_frame(self, net: Network) -> pd.DataFrame:
        """flows.csv 형식: link_id, flow, active"""
        return pd.DataFrame({"link_id": net.link_ids, "flow": self.flows, "active": self.active.astype(bool)})

    def route_weights(self, net: Network) -> List[Tuple[List[str], float]]:
        """수렴한 경로 가중치 (링크 id 목록)"""
        ids = net.link_ids
        return [([ids[e] for e in path], weight) for path, weight in self.paths]


@dataclass
class SubstitutionResult:
    """효용 변화 전/후 흐름 비교"""
    base: FlowSolution
    perturbed: FlowSolution
    base_active: np.ndarray          # 기준 해의 활성 링크 인덱스
    ratio: np.ndarray                # base_active 링크의 perturbed / base
    newly_active: np.ndarray         # 기준에선 비활성, 변화 후 활성

    def to_frame(self, net: Network) -> pd.DataFrame:
        ids = net.link_ids
        frame = pd.DataFrame({
            "link_id": ids,
            "base_flow": self.base.flows,
            "perturbed_flow": self.perturbed.flows,
            "difference": self.perturbed.flows - self.base.flows,
        })
        ratio = np.full(len(ids), np.nan)
        ratio[self.base_active] = self.ratio
        frame["ratio"] = ratio
        frame["newly_active"] = np.isin(np.arange(len(ids)), self.newly_active)
        return frame


class _Topology:
    """병렬 링크를 (tail, head) 쌍으로 묶은 그래프 구조"""

    def __init__(self, net: Network):
        self.n_nodes = net.n_nodes
        keys = net.tails * net.n_nodes + net.heads
        unique_keys, self.pair_of_link = np.unique(keys, return_inverse=True)
        self.pair_tails = unique_keys // net.n_nodes
        self.pair_heads = unique_keys % net.n_nodes
        self.pair_links: Dict[Tuple[int, int], np.ndarray] = {}
        order = np.argsort(self.pair_of_link, kind="stable")
        splits = np.flatnonzero(np.diff(self.pair_of_link[order])) + 1
        for group in np.split(order, splits):
            pair = int(self.pair_of_link[group[0]])
            self.pair_links[(int(self.pair_tails[pair]), int(self.pair_heads[pair]))] = group

    def graph(self, costs: np.ndarray, reverse: bool = False) -> sparse.csr_matrix:
        pair_cost = np.full(self.pair_tails.size, np.inf)
        np.minimum.at(pair_cost, self.pair_of_link, costs)
        rows, cols = (self.pair_heads, self.pair_tails) if reverse else (self.pair_tails, self.pair_heads)
        return sparse.csr_matrix((pair_cost, (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def link_between(self, tail: int, head: int, costs: np.ndarray) -> int:
        candidates = self.pair_links[(tail, head)]
        return int(candidates[np.argmin(costs[candidates])])


def objective_value(net: Network, u: UtilityRates, pert: PerturbationSpec, flows) -> float:
    """lᵀ(u∘x) - lᵀF(x)"""
    flows = np.asarray(flows, dtype=float)
    return float(np.sum(net.lengths * (u.values * flows - f_value(pert, flows))))


class FlowSolver:
    """경로 원자 위의 쌍별 조건부 경사법 (최단경로 오라클 + 뉴턴 선탐색)"""

    def __init__(self, options: Optional[SolverOptions] = None):
        self.options = options or SolverOptions()
        logger.debug("솔버 초기화", **self.options.model_dump())

    def solve(self, net: Network, u: UtilityRates, d: Optional[DemandSpec],
              pert: Optional[PerturbationSpec] = None,
              opts: Optional[SolverOptions] = None) -> FlowSolution:
        """단위 수요 OD 하나의 효용 극대화 흐름"""
        pert = pert or PerturbationSpec()
        opts = opts or self.options
        if len(u) != net.n_links:
            raise DataError(f"효용률 길이({len(u)})가 링크 수({net.n_links})와 다릅니다")

        started = time.perf_counter()
        if d is None:
            return self._zero_solution(net, started)

        origin, destination = net.node_id(d.origin), net.node_id(d.destination)
        topology = _Topology(net)
        lengths, rates = net.lengths, u.values

        base_costs = -lengths * rates
        first = self._shortest_path(topology, base_costs, origin, destination, d)
        atoms: List[np.ndarray] = [first]
        weights = np.array([1.0])
        flows = np.zeros(net.n_links)
        flows[first] = 1.0

        gap = np.inf
        iteration = 0
        converged = False
        for iteration in range(1, opts.max_iters + 1):
            costs = lengths * (f_prime(pert, flows) - rates)
            candidate = self._shortest_path(topology, costs, origin, destination, d)
            atom_costs = np.array([costs[a].sum() for a in atoms])
            gap = float(weights @ atom_costs - costs[candidate].sum())
            logger.debug("반복", od=d.label(), iteration=iteration, gap=gap, atoms=len(atoms))
            if gap <= opts.kkt_tol:
                converged = True
                break

            if not any(np.array_equal(candidate, a) for a in atoms):
                atoms.append(candidate)
                weights = np.append(weights, 0.0)
            atoms, weights, flows = self._equalize(net, rates, pert, atoms, weights, flows, opts.kkt_tol)

        solution = self._finish(net, u, pert, d, atoms, weights, topology, opts, iteration, gap, started)
        if not converged and solution.kkt_residual > opts.kkt_tol:
            raise ConvergenceError(f"{d.label()}: {opts.max_iters}회 반복 후에도 수렴하지 않았습니다 "
                                   f"(gap={gap:.3g}, kkt={solution.kkt_residual:.3g})")
        return solution

    def _zero_solution(self, net: Network, started: float) -> FlowSolution:
        flows = np.zeros(net.n_links)
        return FlowSolution(demand=None, flows=flows, multipliers=np.zeros(net.n_nodes), objective=0.0,
                            kkt_residual=0.0, active=np.zeros(net.n_links, dtype=bool),
                            seconds=time.perf_counter() - started)

    def _shortest_path(self, topology: _Topology, costs: np.ndarray, origin: int, destination: int,
                       d: DemandSpec) -> np.ndarray:
        """링크 비용 최단경로 (링크 인덱스 배열)"""
        distances, predecessors = dijkstra(topology.graph(costs), directed=True, indices=origin,
                                           return_predecessors=True)
        if not np.isfinite(distances[destination]):
            raise InfeasibleError(f"목적지에 도달할 수 없습니다: {d.label()}")
        links = []
        node = destination
        while node != origin:
            previous = int(predecessors[node])
            links.append(topology.link_between(previous, node, costs))
            node = previous
        return np.array(links[::-1], dtype=np.int64)

    def _equalize(self, net: Network, rates: np.ndarray, pert: PerturbationSpec,
                  atoms: List[np.ndarray], weights: np.ndarray, flows: np.ndarray, tol: float):
        """비싼 원자의 가중치를 최소비용 원자로 옮겨 사용 경로 비용을 균등화"""
        lengths = net.lengths
        for _ in range(INNER_SWEEPS):
            marginal = lengths * (f_prime(pert, flows) - rates)
            atom_costs = np.array([marginal[a].sum() for a in atoms])
            best = int(np.argmin(atom_costs))
            used = weights > 0
            spread = float(np.max(atom_costs[used]) - atom_costs[best])
            if spread <= 0.1 * tol:
                break
            for k in np.flatnonzero(used):
                if k == best:
                    continue
                shift = self._pairwise_step(lengths, rates, pert, flows, atoms[k], atoms[best], weights[k])
                if shift <= 0.0:
                    continue
                flows[atoms[best]] += shift
                flows[atoms[k]] -= shift
                if shift >= weights[k]:
                    weights[best] += weights[k]
                    weights[k] = 0.0
                else:
                    weights[k] -= shift
                    weights[best] += shift

        keep = weights > 0
        atoms = [a for a, k in zip(atoms, keep) if k]
        weights = weights[keep] / weights[keep].sum()
        return atoms, weights, self._superpose(net.n_links, atoms, weights)

    @staticmethod
    def _superpose(n_links: int, atoms: List[np.ndarray], weights: np.ndarray) -> np.ndarray:
        flows = np.zeros(n_links)
        for atom, weight in zip(atoms, weights):
            flows[atom] += weight
        return flows

    @staticmethod
    def _pairwise_step(lengths, rates, pert, flows, source, target, cap) -> float:
        """source 에서 target 으로 옮길 양 t ∈ [0, cap] (안전장치 뉴턴)"""
        plus = np.setdiff1d(target, source, assume_unique=True)
        minus = np.setdiff1d(source, target, assume_unique=True)
        lp, up, xp = lengths[plus], rates[plus], flows[plus]
        lm, um, xm = lengths[minus], rates[minus], flows[minus]

        def slope(t):
            return (np.sum(lp * (f_prime(pert, xp + t) - up))
                    - np.sum(lm * (f_prime(pert, np.maximum(xm - t, 0.0)) - um)))

        def curvature(t):
            return (np.sum(lp * f_second(pert, xp + t))
                    + np.sum(lm * f_second(pert, np.maximum(xm - t, 0.0))))

        s = slope(0.0)
        if s >= 0.0:
            return 0.0
        if slope(cap) <= 0.0:
            return float(cap)

        scale = 1e-15 * (1.0 + np.sum(lp * np.abs(up)) + np.sum(lm * np.abs(um)))
        lo, hi, t = 0.0, float(cap), 0.0
        for _ in range(NEWTON_STEPS):
            step = t - s / curvature(t)
            t = step if lo < step < hi else 0.5 * (lo + hi)
            s = slope(t)
            if abs(s) <= scale:
                break
            if s < 0.0:
                lo = t
            else:
                hi = t
            if hi - lo <= 1e-16:
                break
        return t

    def _finish(self, net: Network, u: UtilityRates, pert: PerturbationSpec, d: DemandSpec,
                atoms: List[np.ndarray], weights: np.ndarray, topology: _Topology,
                opts: SolverOptions, iterations: int, gap: float, started: float) -> FlowSolution:
        """zero_tol 이하 경로 절단, 승수 복원, KKT 잔차 계산"""
        rates = u.values
        flows = self._superpose(net.n_links, atoms, weights)
        truncated = 0
        for _ in range(TRUNCATION_ROUNDS):
            small = weights <= opts.zero_tol
            if not small.any() or small.all():
                break
            marginal = net.lengths * (f_prime(pert, flows) - rates)
            atom_costs = np.array([marginal[a].sum() for a in atoms])
            atom_costs[small] = np.inf
            best = int(np.argmin(atom_costs))
            weights[best] += weights[small].sum()
            truncated += int(small.sum())
            atoms = [a for a, k in zip(atoms, ~small) if k]
            weights = weights[~small]
            flows = self._superpose(net.n_links, atoms, weights)
            atoms, weights, flows = self._equalize(net, rates, pert, atoms, weights, flows, opts.kkt_tol)

        active = flows > opts.zero_tol
        flows = np.where(active, flows, 0.0)
        costs = net.lengths * (f_prime(pert, flows) - rates)
        multipliers = self._multipliers(net, topology, costs, active, net.node_id(d.destination))

        solution = FlowSolution(
            demand=d,
            flows=flows,
            multipliers=multipliers,
            objective=objective_value(net, u, pert, flows),
            kkt_residual=0.0,
            active=active,
            iterations=iterations,
            gap=gap,
            paths=[(tuple(int(e) for e in a), float(w)) for a, w in zip(atoms, weights)],
        )
        solution.kkt_residual = kkt_residual(net, u, pert, solution)
        solution.seconds = time.perf_counter() - started

        if truncated:
            logger.debug("작은 경로 절단", od=d.label(), truncated=truncated)
        if solution.kkt_residual > opts.kkt_tol:
            logger.warning("⚠️ KKT 잔차가 허용치를 넘습니다", od=d.label(), kkt=solution.kkt_residual,
                           truncated=truncated)
        logger.debug("풀이 완료", od=d.label(), iterations=iterations, active=solution.n_active,
                     objective=solution.objective, kkt=solution.kkt_residual, seconds=solution.seconds)
        return solution

    @staticmethod
    def _multipliers(net: Network, topology: _Topology, costs: np.ndarray, active: np.ndarray,
                     destination: int) -> np.ndarray:
        """활성 링크 정상성 λ_h - λ_t = t_e 의 최소제곱 해, 나머지 노드는 목적지까지 거리로 보완"""
        to_destination = dijkstra(topology.graph(costs, reverse=True), directed=True, indices=destination)
        finite = np.isfinite(to_destination)
        to_destination[~finite] = to_destination[finite].max()
        potential = -to_destination

        links = np.flatnonzero(active)
        if links.size == 0:
            return potential
        nodes = np.unique(np.concatenate([net.tails[links], net.heads[links]]))
        rows = np.arange(links.size)
        system = np.zeros((links.size, nodes.size))
        system[rows, np.searchsorted(nodes, net.tails[links])] = -1.0
        system[rows, np.searchsorted(nodes, net.heads[links])] = 1.0
        solved, *_ = np.linalg.lstsq(system, costs[links], rcond=None)

        multipliers = potential + float(np.mean(solved - potential[nodes]))
        multipliers[nodes] = solved
        return multipliers

    def solve_many(self, net: Network, u: UtilityRates, demands: Sequence[DemandSpec],
                   pert: Optional[PerturbationSpec] = None, opts: Optional[SolverOptions] = None,
                   jobs: int = DEFAULT_JOBS) -> List[FlowSolution]:
        """여러 OD 를 스레드 풀에서 풀기 (입력 순서 유지)"""
        demands = list(demands)
        if jobs <= 1 or len(demands) <= 1:
            return [self.solve(net, u, d, pert, opts) for d in demands]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda d: self.solve(net, u, d, pert, opts), demands))


def kkt_residual(net: Network, u: UtilityRates, pert: PerturbationSpec, sol: FlowSolution) -> float:
    """상보성, 경계 정상성, 흐름 보존 위반의 최댓값"""
    incidence = incidence_matrix(net)
    flows = np.asarray(sol.flows, dtype=float)
    lengths, rates = net.lengths, u.values
    reduced = incidence.T @ sol.multipliers

    stationarity = lengths * (rates - f_prime(pert, np.maximum(flows, 0.0))) + reduced
    residual = float(np.max(np.abs(flows * stationarity)))

    inactive = ~np.asarray(sol.active, dtype=bool)
    if inactive.any():
        boundary = lengths[inactive] * rates[inactive] + reduced[inactive]
        residual = max(residual, float(max(0.0, boundary.max())))

    b = np.zeros(net.n_nodes) if sol.demand is None else demand_vector(net, sol.demand)
    residual = max(residual, float(np.max(np.abs(incidence @ flows - b))))
    return residual


def decompose_flow(net: Network, sol: FlowSolution) -> List[Tuple[List[str], float]]:
    """최대 잔여 출링크를 따라가는 탐욕적 경로 분해"""
    if sol.demand is None:
        return []
    origin, destination = net.node_id(sol.demand.origin), net.node_id(sol.demand.destination)
    residual = np.where(sol.active, np.asarray(sol.flows, dtype=float), 0.0)
    out_links = [np.flatnonzero(net.tails == v) for v in range(net.n_nodes)]
    ids = net.link_ids

    paths: List[Tuple[List[str], float]] = []
    for _ in range(net.n_links + 1):
        if residual[out_links[origin]].sum() <= RESIDUAL_EPS:
            break
        node, visited, path = origin, {origin}, []
        while node != destination:
            candidates = out_links[node]
            if candidates.size == 0 or residual[candidates].max() <= RESIDUAL_EPS:
                raise DecompositionError(f"{sol.demand.label()}: 노드 {net.nodes[node]} 에서 흐름이 끊깁니다")
            link = int(candidates[np.argmax(residual[candidates])])
            path.append(link)
            node = int(net.heads[link])
            if node in visited:
                raise DecompositionError(f"{sol.demand.label()}: 순환 흐름이 있습니다 (노드 {net.nodes[node]})")
            visited.add(node)
        weight = float(residual[path].min())
        residual[path] -= weight
        paths.append(([ids[e] for e in path], weight))

    leftover = float(np.abs(residual).max()) if residual.size else 0.0
    if leftover > DECOMPOSITION_TOL:
        raise DecompositionError(f"{sol.demand.label()}: 분해 후 잔여 흐름 {leftover:.3g}")
    return paths


def substitution_experiment(net: Network, u: UtilityRates, d: DemandSpec, pert: PerturbationSpec,
                            delta, opts: Optional[SolverOptions] = None) -> SubstitutionResult:
    """u → u + delta 전후 흐름 비교"""
    base = flow_solver.solve(net, u, d, pert, opts)
    perturbed = flow_solver.solve(net, u.shifted(delta), d, pert, opts)
    base_active = np.flatnonzero(base.active)
    ratio = perturbed.flows[base_active] / base.flows[base_active]
    newly_active = np.flatnonzero(~base.active & perturbed.active)
    logger.info("대체 실험 완료", od=d.label(), base_active=base_active.size, newly_active=newly_active.size)
    return SubstitutionResult(base=base, perturbed=perturbed, base_active=base_active, ratio=ratio,
                              newly_active=newly_active)


# 전역 솔버 인스턴스
flow_solver = FlowSolver()


def solve_flow(net: Network, u: UtilityRates, d: Optional[DemandSpec],
               pert: Optional[PerturbationSpec] = None, opts: Optional[SolverOptions] = None) -> FlowSolution:
    return flow_solver.solve(net, u, d, pert, opts)


def solve_many(net: Network, u: UtilityRates, demands: Sequence[DemandSpec],
               pert: Optional[PerturbationSpec] = None, opts: Optional[SolverOptions] = None,
               jobs: int = DEFAULT_JOBS) -> List[FlowSolution]:
    return flow_solver.solve_many(net, u, demands, pert, opts, jobs)


if __name__ == "__main__":
    # 테스트 실행
    from network import link_utilities, toy_network

    toy = toy_network()
    od = DemandSpec(origin="O", destination="D")
    solution = solve_flow(toy, link_utilities(toy, [-1.0]), od)
    logger.info("예제 네트워크 흐름", flows=np.round(solution.flows, 4).tolist(), kkt=solution.kkt_residual)
    for route, weight in decompose_flow(toy, solution):
        logger.info("경로", links=route, weight=round(weight, 4))
