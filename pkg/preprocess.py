from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from config import DEFAULT_JOBS, SCREEN_BETA, SCREEN_FEATURE, SCREEN_THRESHOLD, logger
from errors import DataError
from network import Network, UtilityRates
from perturbation import PerturbationSpec
from simulate import Trip
from solver import SolverOptions, flow_solver

NodeSequence = Sequence[str]


@dataclass
class TrimResult:
    """선택된 출발/도착 노드 집합과 잘라낸 통행"""
    chosen_origins: List[str]
    chosen_destinations: List[str]
    trips: List[Trip]
    discarded: List[Trip] = field(default_factory=list)

    @property
    def discarded_count(self) -> int:
        return len(self.discarded)

    def summary(self) -> Dict:
        return {
            "chosen_origins": self.chosen_origins,
            "chosen_destinations": self.chosen_destinations,
            "kept": len(self.trips),
            "discarded": self.discarded_count,
        }


@dataclass
class FilterResult:
    kept: List[Trip]
    discarded: List[Trip]
    coverage: List[float]

    def summary(self) -> Dict:
        return {"kept": len(self.kept), "discarded": len(self.discarded),
                "mean_coverage": float(np.mean(self.coverage)) if self.coverage else None}


@dataclass
class GreedyStep:
    node: str
    score: float
    remaining: float     # 선택 후 남은 총 점수


def _sequences(trips: Sequence[Union[Trip, NodeSequence]], net: Optional[Network]) -> List[List[str]]:
    sequences = []
    for trip in trips:
        if isinstance(trip, Trip):
            if net is None:
                raise DataError("Trip 객체에는 네트워크가 필요합니다")
            sequences.append(trip.nodes(net))
        else:
            sequences.append([str(v) for v in trip])
    return sequences


def greedy_trace(trips: Sequence[Union[Trip, NodeSequence]], n: int,
                 direction: Literal["origin", "destination"] = "origin",
                 net: Optional[Network] = None) -> List[GreedyStep]:
    """탐욕적 노드 선택 과정 (선택 노드, 점수, 남은 점수)"""
    if n < 1:
        raise DataError(f"선택 노드 수는 1 이상이어야 합니다: {n}")
    sequences = _sequences(trips, net)
    if not sequences:
        raise DataError("통행이 없습니다")
    if direction == "destination":
        sequences = [seq[::-1] for seq in sequences]

    nodes = sorted({v for seq in sequences for v in seq})
    if n > len(nodes):
        raise DataError(f"선택 노드 수({n})가 통행에 나타난 노드 수({len(nodes)})보다 많습니다")
    code = {v: i for i, v in enumerate(nodes)}

    # 통행별 첫 등장 위치만 사용
    trip_ids, node_codes, positions = [], [], []
    for t, seq in enumerate(sequences):
        seen = set()
        for k, v in enumerate(seq):
            if v not in seen:
                seen.add(v)
                trip_ids.append(t)
                node_codes.append(code[v])
                positions.append(k)
    trip_ids = np.array(trip_ids)
    node_codes = np.array(node_codes)
    positions = np.array(positions, dtype=float)
    k_star = np.array([len(seq) - 1 for seq in sequences], dtype=float)

    selected = np.zeros(len(nodes), dtype=bool)
    steps: List[GreedyStep] = []
    for _ in range(n):
        contribution = np.maximum(k_star[trip_ids] - positions, 0.0)
        scores = np.bincount(node_codes, weights=contribution, minlength=len(nodes))
        scores[selected] = -np.inf
        best = int(np.argmax(scores))
        selected[best] = True

        hit = node_codes == best
        np.minimum.at(k_star, trip_ids[hit], positions[hit])
        remaining = np.maximum(k_star[trip_ids] - positions, 0.0)
        remaining_total = float(np.bincount(node_codes, weights=remaining, minlength=len(nodes))[~selected].sum())
        steps.append(GreedyStep(node=nodes[best], score=float(scores[best]), remaining=remaining_total))
    return steps


def select_trim_nodes(trips: Sequence[Union[Trip, NodeSequence]], n: int,
                      direction: Literal["origin", "destination"] = "origin",
                      net: Optional[Network] = None) -> List[str]:
    """남은 노드 수 점수로 출발(또는 도착) 노드 n 개를 탐욕적으로 선택"""
    steps = greedy_trace(trips, n, direction, net)
    logger.debug("트림 노드 선택", direction=direction, nodes=[s.node for s in steps])
    return [s.node for s in steps]


def trim_trips(trips: Sequence[Trip], origins: Sequence[str], destinations: Sequence[str],
               net: Network) -> TrimResult:
    """첫 출발 노드 방문부터 마지막 도착 노드 방문까지 잘라내기"""
    if not origins or not destinations:
        raise DataError("출발/도착 노드 집합이 비어 있습니다")
    origin_set, destination_set = set(origins), set(destinations)

    kept, discarded = [], []
    for trip in trips:
        nodes = trip.nodes(net)
        first = next((k for k, v in enumerate(nodes) if v in origin_set), None)
        last = next((k for k in range(len(nodes) - 1, -1, -1) if nodes[k] in destination_set), None)
        if first is None or last is None or first >= last:
            discarded.append(trip)
            continue
        kept.append(Trip(origin=nodes[first], destination=nodes[last], links=list(trip.links[first:last])))

    if discarded:
        logger.warning("⚠️ 트림 불가 통행 제외", discarded=len(discarded), kept=len(kept))
    return TrimResult(chosen_origins=list(origins), chosen_destinations=list(destinations),
                      trips=kept, discarded=discarded)


def group_by_od(trips: Sequence[Trip]) -> Dict[Tuple[str, str], List[Trip]]:
    """OD 별 통행 묶음 (처음 등장한 순서 유지)"""
    groups: Dict[Tuple[str, str], List[Trip]] = {}
    for trip in trips:
        groups.setdefault((trip.origin, trip.destination), []).append(trip)
    return groups


def drop_degenerate_ods(groups: Dict[Tuple[str, str], List[Trip]]):
    """모든 통행이 같은 링크 집합을 쓰는 OD 제외 (통행 1개인 OD 포함)"""
    kept: Dict[Tuple[str, str], List[Trip]] = {}
    dropped: List[Tuple[str, str]] = []
    for key, trips in groups.items():
        if len({frozenset(trip.links) for trip in trips}) > 1:
            kept[key] = trips
        else:
            dropped.append(key)
    if dropped:
        logger.warning("⚠️ 단일 경로 OD 제외", dropped=len(dropped), kept=len(kept))
    return kept, dropped


def trip_coverage(trip: Trip, net: Network, u: UtilityRates, active: np.ndarray) -> float:
    """통행 효용(|u| 가중 길이) 중 활성 링크 위에 있는 비율"""
    links = np.array([net.link_index[link_id] for link_id in trip.links])
    weights = net.lengths[links] * np.abs(u.values[links])
    total = weights.sum()
    return float(weights[active[links]].sum() / total) if total > 0 else 1.0


def filter_nonsensical(trips: Sequence[Trip], net: Network, screen_beta: float = SCREEN_BETA,
                       coverage_threshold: float = SCREEN_THRESHOLD, feature: str = SCREEN_FEATURE,
                       pert: Optional[PerturbationSpec] = None, opts: Optional[SolverOptions] = None,
                       jobs: int = DEFAULT_JOBS) -> FilterResult:
    """스크리닝 모형의 활성 집합 밖 효용이 큰 통행 제외"""
    if screen_beta >= 0:
        raise DataError(f"스크리닝 β 는 음수여야 합니다: {screen_beta}")
    if not 0.0 <= coverage_threshold <= 1.0:
        raise DataError(f"커버리지 기준은 [0, 1] 이어야 합니다: {coverage_threshold}")

    u = UtilityRates(screen_beta * net.attribute(feature))
    groups = group_by_od(trips)
    ods = [members[0].od for members in groups.values()]
    solutions = flow_solver.solve_many(net, u, ods, pert, opts, jobs)

    kept, discarded, coverage = [], [], []
    for od_trips, sol in zip(groups.values(), solutions):
        for trip in od_trips:
            share = trip_coverage(trip.check(net), net, u, sol.active)
            coverage.append(share)
            (kept if share >= coverage_threshold else discarded).append(trip)

    logger.info("🧹 비합리 통행 필터 완료", kept=len(kept), discarded=len(discarded),
                screen_beta=screen_beta, threshold=coverage_threshold)
    return FilterResult(kept=kept, discarded=discarded, coverage=coverage)


if __name__ == "__main__":
    # 테스트 실행
    sample = [["a", "b", "c", "d"], ["a", "b", "e"], ["x", "b", "c"]]
    logger.info("출발 노드", nodes=select_trim_nodes(sample, 2, "origin"))
    logger.info("도착 노드", nodes=select_trim_nodes(sample, 2, "destination"))
