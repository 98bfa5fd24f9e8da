import json
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import DEFAULT_JOBS, DEFAULT_SEED, SOLUTION_CACHE_SIZE, STEP_CAP_FACTOR, load_toml, logger
from errors import DataError, SimulationError
from network import DemandSpec, Network, link_utilities
from perturbation import PerturbationSpec
from solver import FlowSolution, SolverOptions, flow_solver


class Trip(BaseModel):
    """관측 또는 시뮬레이션된 한 번의 통행 (링크 순서열)"""
    model_config = ConfigDict(frozen=True)

    origin: str
    destination: str
    links: List[str]

    @property
    def od(self) -> DemandSpec:
        return DemandSpec(origin=self.origin, destination=self.destination)

    def nodes(self, net: Network) -> List[str]:
        """링크 순서열이 지나는 노드 순서열"""
        self.check(net)
        sequence = [net.link(self.links[0]).tail]
        sequence.extend(net.link(link_id).head for link_id in self.links)
        return sequence

    def check(self, net: Network) -> "Trip":
        """연결성 및 출발/도착 노드 검증"""
        if not self.links:
            raise DataError(f"빈 통행입니다: {self.origin}->{self.destination}")
        links = [net.link(link_id) for link_id in self.links]
        if links[0].tail != self.origin or links[-1].head != self.destination:
            raise DataError(f"통행 끝점 불일치: {self.origin}->{self.destination} "
                            f"(실제 {links[0].tail}->{links[-1].head})")
        for previous, current in zip(links, links[1:]):
            if previous.head != current.tail:
                raise DataError(f"연결되지 않은 통행: {previous.id} -> {current.id}")
        return self

    @classmethod
    def from_links(cls, net: Network, link_ids: List[str]) -> "Trip":
        if not link_ids:
            raise DataError("링크가 없는 통행은 만들 수 없습니다")
        trip = cls(origin=net.link(link_ids[0]).tail, destination=net.link(link_ids[-1]).head, links=list(link_ids))
        return trip.check(net)


class SimulationPlan(BaseModel):
    """OD 목록 × OD 당 통행 수, 참 β, 시드"""
    ods: List[DemandSpec] = Field(default_factory=list)
    random_ods: int = Field(default=0, ge=0)
    trips_per_od: int = Field(ge=1)
    beta: List[float]
    seed: int = DEFAULT_SEED
    perturbation: PerturbationSpec = Field(default_factory=PerturbationSpec)

    def resolve_ods(self, net: Network) -> List[DemandSpec]:
        """명시 OD 와 시드 기반 무작위 OD 를 합친 목록"""
        ods = list(self.ods)
        if self.random_ods:
            ods.extend(random_od_pairs(net, self.random_ods, self.seed))
        if not ods:
            raise DataError("시뮬레이션 계획에 OD 가 없습니다")
        return ods


def load_plan(path) -> SimulationPlan:
    try:
        return SimulationPlan.model_validate(load_toml(path))
    except FileNotFoundError as e:
        raise DataError(f"계획 파일이 없습니다: {path}") from e
    except ValidationError as e:
        raise DataError(f"계획 파일 검증 실패 ({path}): {e}") from e


def random_od_pairs(net: Network, count: int, seed: int) -> List[DemandSpec]:
    """서로 다른 노드 쌍을 시드 고정으로 추출 (중복 없음)"""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD0])))
    total = net.n_nodes * (net.n_nodes - 1)
    if count > total:
        raise DataError(f"가능한 OD 쌍({total})보다 많이 요청했습니다: {count}")
    chosen = rng.choice(total, size=count, replace=False)
    pairs = []
    for code in np.sort(chosen):
        origin, offset = divmod(int(code), net.n_nodes - 1)
        destination = offset if offset < origin else offset + 1
        pairs.append(DemandSpec(origin=net.nodes[origin], destination=net.nodes[destination]))
    return pairs


def trip_rng(seed: int, od_index: int, trip_index: int) -> np.random.Generator:
    """(seed, OD, 통행) 별 독립 PCG64 스트림"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, od_index, trip_index])))


def transition_table(sol: FlowSolution, net: Network) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """노드 → (활성 출링크, 누적 흐름)"""
    table: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    active = np.flatnonzero(sol.active)
    for tail in np.unique(net.tails[active]):
        links = active[net.tails[active] == tail]
        table[int(tail)] = (links, np.cumsum(sol.flows[links]))
    return table


def sample_trip(sol: FlowSolution, net: Network, rng: np.random.Generator,
                table: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
                step_cap: Optional[int] = None) -> Trip:
    """흐름 비례 랜덤 워크 한 번"""
    if sol.demand is None:
        raise SimulationError("수요가 없는 해에서는 통행을 뽑을 수 없습니다")
    table = table if table is not None else transition_table(sol, net)
    step_cap = step_cap or STEP_CAP_FACTOR * net.n_links
    origin, destination = net.node_id(sol.demand.origin), net.node_id(sol.demand.destination)
    ids = net.link_ids

    node, path = origin, []
    while node != destination:
        if node not in table:
            raise SimulationError(f"막다른 노드 {net.nodes[node]} ({sol.demand.label()})")
        if len(path) >= step_cap:
            raise SimulationError(f"스텝 상한 {step_cap} 초과 ({sol.demand.label()})")
        links, cumulative = table[node]
        pick = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
        link = int(links[min(pick, links.size - 1)])
        path.append(ids[link])
        node = int(net.heads[link])

    return Trip(origin=sol.demand.origin, destination=sol.demand.destination, links=path)


class TripSimulator:
    """OD 별 해를 캐시해 두고 통행 데이터셋 생성"""

    def __init__(self, options: Optional[SolverOptions] = None, cache_size: int = SOLUTION_CACHE_SIZE):
        if cache_size < 0:
            raise DataError(f"캐시 크기는 0 이상이어야 합니다: {cache_size}")
        self.options = options
        self.cache_size = cache_size
        self._solutions: "OrderedDict[Tuple, FlowSolution]" = OrderedDict()
        self._lock = threading.Lock()

    def _key(self, net: Network, d: DemandSpec, beta, pert: PerturbationSpec) -> Tuple:
        return (net, d.key, tuple(float(b) for b in beta), pert.kind)

    def __len__(self) -> int:
        return len(self._solutions)

    def solutions(self, net: Network, ods: List[DemandSpec], beta, pert: PerturbationSpec,
                  jobs: int = DEFAULT_JOBS) -> List[FlowSolution]:
        """캐시에 없는 OD 만 새로 풀기 (LRU, 최대 cache_size 개)"""
        keys = [self._key(net, d, beta, pert) for d in ods]
        found: Dict[Tuple, FlowSolution] = {}
        with self._lock:
            for key in keys:
                cached = self._solutions.get(key)
                if cached is not None:
                    self._solutions.move_to_end(key)
                    found[key] = cached

        missing = [(key, d) for key, d in zip(keys, ods) if key not in found]
        if missing:
            u = link_utilities(net, beta)
            solved = flow_solver.solve_many(net, u, [d for _, d in missing], pert, self.options, jobs)
            for (key, _), sol in zip(missing, solved):
                found[key] = sol
            with self._lock:
                for (key, _), sol in zip(missing, solved):
                    self._remember(key, sol)
        return [found[key] for key in keys]

    def _remember(self, key: Tuple, sol: FlowSolution):
        if self.cache_size == 0:
            return
        self._solutions[key] = sol
        self._solutions.move_to_end(key)
        while len(self._solutions) > self.cache_size:
            self._solutions.popitem(last=False)

    def clear(self):
        with self._lock:
            self._solutions.clear()

    def simulate(self, net: Network, plan: SimulationPlan, pert: Optional[PerturbationSpec] = None,
                 jobs: int = DEFAULT_JOBS) -> List[Trip]:
        pert = pert or plan.perturbation
        solutions = self.solutions(net, plan.resolve_ods(net), plan.beta, pert, jobs)
        return self.sample(net, plan, solutions)

    @staticmethod
    def sample(net: Network, plan: SimulationPlan, solutions: List[FlowSolution]) -> List[Trip]:
        """OD 순서대로 trips_per_od 번씩 랜덤 워크"""
        trips: List[Trip] = []
        for od_index, sol in enumerate(solutions):
            table = transition_table(sol, net)
            for trip_index in range(plan.trips_per_od):
                trips.append(sample_trip(sol, net, trip_rng(plan.seed, od_index, trip_index), table))
        logger.info("🎲 통행 시뮬레이션 완료", ods=len(solutions), trips=len(trips), seed=plan.seed)
        return trips


# 전역 시뮬레이터 인스턴스
trip_simulator = TripSimulator()


def simulate_dataset(net: Network, plan: SimulationPlan, pert: Optional[PerturbationSpec] = None,
                     jobs: int = DEFAULT_JOBS) -> List[Trip]:
    return trip_simulator.simulate(net, plan, pert, jobs)


def summarize_solution_stats(net: Network, solutions: Iterable[FlowSolution],
                             time_column: str = "travel_time") -> pd.DataFrame:
    """OD 별 활성 링크 수, 기대 통행시간 Σ time_e x̂_e, 기대 길이"""
    solutions = list(solutions)
    if not solutions:
        raise DataError("요약할 해가 없습니다")
    times = net.attribute(time_column) if net.has_attribute(time_column) else None
    rows = []
    for sol in solutions:
        rows.append({
            "origin": sol.demand.origin if sol.demand else "",
            "destination": sol.demand.destination if sol.demand else "",
            "active_links": sol.n_active,
            "expected_time": float(times @ sol.flows) if times is not None else np.nan,
            "expected_length": float(net.lengths @ sol.flows),
            "objective": sol.objective,
        })
    return pd.DataFrame(rows)


def write_trips_jsonl(trips: Iterable[Trip], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for trip in trips:
            fh.write(trip.model_dump_json() + "\n")
    return path


def read_trips_jsonl(path) -> List[Trip]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"통행 파일이 없습니다: {path}")
    trips = []
    with path.open(encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                trips.append(Trip.model_validate(json.loads(line)))
            except (json.JSONDecodeError, ValidationError) as e:
                raise DataError(f"{path} {line_number}행: 통행 파싱 실패 ({e})") from e
    return trips


if __name__ == "__main__":
    # 테스트 실행
    from network import toy_network

    toy = toy_network()
    plan = SimulationPlan(ods=[DemandSpec(origin="O", destination="D")], trips_per_od=5, beta=[-1.0], seed=7)
    for trip in simulate_dataset(toy, plan):
        logger.info("통행", links=trip.links)
