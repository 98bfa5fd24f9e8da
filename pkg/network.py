import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from scipy import sparse

from config import load_toml, logger
from errors import DataError, ModelDomainError

BASE_COLUMNS = ["link_id", "tail", "head", "length_km", "road_type"]
DEMAND_COLUMNS = ["origin", "destination", "trip_count"]

# 링크 분할 시 길이에 비례해 나눠야 하는 속성 (나머지는 km 당 값)
LENGTH_SCALED_ATTRIBUTES = {"travel_time"}


class Link(BaseModel):
    """방향 링크 (길이 km, 특성 행 z_e)"""
    model_config = ConfigDict(frozen=True)

    id: str
    tail: str
    head: str
    length: float
    features: Tuple[float, ...] = ()
    road_type: Optional[str] = None

    @model_validator(mode="after")
    def _check_link(self):
        if self.tail == self.head:
            raise ValueError(f"자기 루프 링크는 허용되지 않습니다: {self.id}")
        if not np.isfinite(self.length) or self.length <= 0:
            raise ValueError(f"링크 길이는 양수여야 합니다: {self.id} ({self.length})")
        return self


class DemandSpec(BaseModel):
    """단위 수요 OD"""
    model_config = ConfigDict(frozen=True)

    origin: str
    destination: str

    @model_validator(mode="after")
    def _check_od(self):
        if self.origin == self.destination:
            raise ValueError(f"출발지와 목적지가 같습니다: {self.origin}")
        return self

    @property
    def key(self) -> Tuple[str, str]:
        return (self.origin, self.destination)

    def label(self) -> str:
        return f"{self.origin}->{self.destination}"


class FeatureSpec(BaseModel):
    """모델 특성 하나 (원시 컬럼, 출링크 상수, 도로 유형 상호작용)"""
    name: str
    kind: Literal["column", "outlinks", "road_type_interaction"] = "column"
    column: Optional[str] = None
    road_type: Optional[str] = None

    @model_validator(mode="after")
    def _check_feature(self):
        if self.kind in ("column", "road_type_interaction") and not self.column:
            raise ValueError(f"특성 {self.name}: column 이 필요합니다")
        return self


class ModelSpec(BaseModel):
    """효용 u = zβ 의 명세 (Model A/B/C 는 data/models/*.toml)"""
    name: str = "model"
    features: List[FeatureSpec]
    beta: Optional[List[float]] = None
    perturbation: Optional[str] = None


class UtilityRates:
    """링크별 효용률 u_e (util/km), 전부 음수"""

    def __init__(self, values):
        values = np.array(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ModelDomainError("효용률에 유한하지 않은 값이 있습니다")
        if np.any(values >= 0):
            bad = np.flatnonzero(values >= 0)
            raise ModelDomainError(f"효용률은 모두 음수여야 합니다 (위반 링크 인덱스: {bad[:10].tolist()})")
        values.setflags(write=False)
        self.values = values

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"UtilityRates(n={self.values.size}, min={self.values.min():.4g}, max={self.values.max():.4g})"

    def shifted(self, delta) -> "UtilityRates":
        """u + delta"""
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if delta.size != self.values.size:
            raise DataError(f"delta 길이 불일치: {delta.size} != {self.values.size}")
        return UtilityRates(self.values + delta)

    def scaled(self, factor: float) -> "UtilityRates":
        return UtilityRates(self.values * float(factor))


class Network:
    """방향 그래프 (노드/링크 인덱스, 길이, 특성 행렬). 생성 후 불변."""

    def __init__(self, links: Sequence[Link], nodes: Optional[Sequence[str]] = None,
                 feature_names: Optional[Sequence[str]] = None,
                 attributes: Optional[pd.DataFrame] = None):
        links = list(links)
        if not links:
            raise DataError("링크가 없는 네트워크입니다")

        if nodes is None:
            seen: Dict[str, None] = {}
            for link in links:
                seen.setdefault(link.tail)
                seen.setdefault(link.head)
            nodes = list(seen)
        nodes = [str(v) for v in nodes]
        if len(set(nodes)) != len(nodes):
            raise DataError("중복된 노드 id 가 있습니다")
        self.node_index: Dict[str, int] = {v: i for i, v in enumerate(nodes)}

        link_index: Dict[str, int] = {}
        for i, link in enumerate(links):
            if link.id in link_index:
                raise DataError(f"중복된 링크 id: {link.id}")
            for end in (link.tail, link.head):
                if end not in self.node_index:
                    raise DataError(f"링크 {link.id} 가 존재하지 않는 노드를 참조합니다: {end}")
            link_index[link.id] = i
        self.link_index = link_index

        widths = {len(link.features) for link in links}
        if len(widths) != 1:
            raise DataError(f"링크마다 특성 개수가 다릅니다: {sorted(widths)}")
        n_features = widths.pop()
        if feature_names is None:
            feature_names = [f"z{k}" for k in range(n_features)]
        if len(feature_names) != n_features:
            raise DataError(f"특성 이름 개수 불일치: {len(feature_names)} != {n_features}")

        self.nodes: List[str] = nodes
        self.links: List[Link] = links
        self.feature_names: List[str] = list(feature_names)

        self.tails = self._frozen(np.array([self.node_index[l.tail] for l in links], dtype=np.int64))
        self.heads = self._frozen(np.array([self.node_index[l.head] for l in links], dtype=np.int64))
        self.lengths = self._frozen(np.array([l.length for l in links], dtype=float))
        self.z = self._frozen(np.array([l.features for l in links], dtype=float).reshape(len(links), n_features))

        if attributes is None:
            attributes = pd.DataFrame(index=range(len(links)))
        if len(attributes) != len(links):
            raise DataError("속성 테이블 행 수가 링크 수와 다릅니다")
        self.attributes = attributes.reset_index(drop=True).copy()
        self._incidence = None

    @staticmethod
    def _frozen(array: np.ndarray) -> np.ndarray:
        array.setflags(write=False)
        return array

    def __repr__(self) -> str:
        return f"Network(|V|={self.n_nodes}, |E|={self.n_links}, features={self.feature_names})"

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def link_ids(self) -> List[str]:
        return [link.id for link in self.links]

    @property
    def road_types(self) -> List[Optional[str]]:
        return [link.road_type for link in self.links]

    def link(self, link_id: str) -> Link:
        if link_id not in self.link_index:
            raise DataError(f"존재하지 않는 링크: {link_id}")
        return self.links[self.link_index[link_id]]

    def node_id(self, node: str) -> int:
        if node not in self.node_index:
            raise DataError(f"존재하지 않는 노드: {node}")
        return self.node_index[node]

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.tails, minlength=self.n_nodes)

    def attribute(self, name: str) -> np.ndarray:
        """원시 속성 컬럼 또는 특성 컬럼"""
        if name in self.attributes.columns:
            return self.attributes[name].to_numpy(dtype=float)
        if name in self.feature_names:
            return self.z[:, self.feature_names.index(name)].copy()
        raise DataError(f"네트워크에 '{name}' 컬럼이 없습니다")

    def has_attribute(self, name: str) -> bool:
        return name in self.attributes.columns or name in self.feature_names

    def with_features(self, names: Sequence[str], matrix) -> "Network":
        """특성 행렬만 교체한 새 네트워크"""
        matrix = np.asarray(matrix, dtype=float).reshape(self.n_links, len(names))
        links = [link.model_copy(update={"features": tuple(float(v) for v in row)})
                 for link, row in zip(self.links, matrix)]
        return Network(links, nodes=self.nodes, feature_names=names, attributes=self.attributes)

    def with_lengths(self, lengths: Dict[str, float]) -> "Network":
        """일부 링크 길이만 바꾼 새 네트워크 (기하 실험용)"""
        for link_id in lengths:
            self.link(link_id)
        try:
            links = [Link(**{**link.model_dump(), "length": float(lengths.get(link.id, link.length))})
                     for link in self.links]
        except ValidationError as e:
            raise DataError(f"링크 길이 변경 실패: {e}") from e
        return Network(links, nodes=self.nodes, feature_names=self.feature_names, attributes=self.attributes)

    def to_frame(self) -> pd.DataFrame:
        """links.csv 형식 테이블"""
        frame = pd.DataFrame({
            "link_id": self.link_ids,
            "tail": [l.tail for l in self.links],
            "head": [l.head for l in self.links],
            "length_km": self.lengths,
            "road_type": [l.road_type or "" for l in self.links],
        })
        extra = self.attributes.copy()
        for k, name in enumerate(self.feature_names):
            if name not in extra.columns:
                extra[name] = self.z[:, k]
        return pd.concat([frame, extra.reset_index(drop=True)], axis=1)


def incidence_matrix(net: Network) -> sparse.csc_matrix:
    """노드×링크 부호 행렬: tail -1, head +1"""
    if net._incidence is None:
        n_links = net.n_links
        rows = np.concatenate([net.tails, net.heads])
        cols = np.concatenate([np.arange(n_links), np.arange(n_links)])
        data = np.concatenate([-np.ones(n_links), np.ones(n_links)])
        matrix = sparse.csc_matrix((data, (rows, cols)), shape=(net.n_nodes, n_links))
        net._incidence = matrix
    return net._incidence


def demand_vector(net: Network, d: DemandSpec) -> np.ndarray:
    """b: 출발지 -1, 목적지 +1"""
    origin = net.node_id(d.origin)
    destination = net.node_id(d.destination)
    b = np.zeros(net.n_nodes)
    b[origin] = -1.0
    b[destination] = 1.0
    return b


def link_utilities(net: Network, beta) -> UtilityRates:
    """u = zβ"""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != net.n_features:
        raise DataError(f"β 길이({beta.size})가 특성 개수({net.n_features})와 다릅니다: {net.feature_names}")
    return UtilityRates(net.z @ beta)


def split_link(net: Network, link_id: str, fraction: float) -> Network:
    """링크를 새 노드를 거치는 두 링크로 분할"""
    original = net.link(link_id)
    if not 0.0 < fraction < 1.0:
        raise DataError(f"분할 비율은 (0, 1) 안이어야 합니다: {fraction}")

    new_node = f"{link_id}~split"
    while new_node in net.node_index:
        new_node += "~"
    first_id, second_id = f"{link_id}/1", f"{link_id}/2"
    for candidate in (first_id, second_id):
        if candidate in net.link_index:
            raise DataError(f"분할 링크 id 충돌: {candidate}")

    position = net.link_index[link_id]
    first = original.model_copy(update={"id": first_id, "head": new_node,
                                        "length": original.length * fraction})
    second = original.model_copy(update={"id": second_id, "tail": new_node,
                                         "length": original.length * (1.0 - fraction)})
    links = net.links[:position] + [first, second] + net.links[position + 1:]

    row = net.attributes.iloc[[position]]
    first_row, second_row = row.copy(), row.copy()
    for column in LENGTH_SCALED_ATTRIBUTES & set(row.columns):
        first_row[column] = row[column] * fraction
        second_row[column] = row[column] * (1.0 - fraction)
    attributes = pd.concat([net.attributes.iloc[:position], first_row, second_row,
                            net.attributes.iloc[position + 1:]], ignore_index=True)

    logger.debug("링크 분할", link=link_id, fraction=fraction, node=new_node)
    return Network(links, nodes=net.nodes + [new_node], feature_names=net.feature_names, attributes=attributes)


def outlink_feature(net: Network) -> np.ndarray:
    """head 노드 출링크가 2개 이상이면 1/l_e, 아니면 0"""
    out_degree = net.out_degree()
    dummy = (out_degree[net.heads] >= 2).astype(float)
    return dummy / net.lengths


def build_features(net: Network, model: ModelSpec) -> Network:
    """ModelSpec 대로 특성 행렬 z 구성"""
    names: List[str] = []
    columns: List[np.ndarray] = []
    road_types = np.array([rt or "" for rt in net.road_types], dtype=object)

    for spec in model.features:
        if spec.kind == "column":
            names.append(spec.name)
            columns.append(net.attribute(spec.column))
        elif spec.kind == "outlinks":
            names.append(spec.name)
            columns.append(outlink_feature(net))
        else:
            values = net.attribute(spec.column)
            kinds = [spec.road_type] if spec.road_type else sorted({rt for rt in road_types if rt})
            if not kinds:
                raise DataError(f"특성 {spec.name}: 네트워크에 road_type 이 없습니다")
            for kind in kinds:
                names.append(f"{spec.name}:{kind}")
                columns.append(np.where(road_types == kind, values, 0.0))

    if model.beta is not None and len(model.beta) != len(names):
        raise DataError(f"모델 {model.name}: β 길이({len(model.beta)})와 특성({names}) 불일치")
    return net.with_features(names, np.column_stack(columns))


def load_model_spec(path) -> ModelSpec:
    """모델 명세 TOML 로드"""
    try:
        return ModelSpec.model_validate(load_toml(path))
    except FileNotFoundError as e:
        raise DataError(f"모델 설정 파일이 없습니다: {path}") from e
    except ValidationError as e:
        raise DataError(f"모델 설정 검증 실패 ({path}): {e}") from e


def _frame_to_network(frame: pd.DataFrame, source: str, model: Optional[ModelSpec]) -> Network:
    missing = [c for c in BASE_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{source}: 필수 컬럼 누락 {missing}")

    extra_columns = [c for c in frame.columns if c not in BASE_COLUMNS]
    attributes = pd.DataFrame(index=range(len(frame)))
    for column in extra_columns:
        try:
            attributes[column] = pd.to_numeric(frame[column], errors="raise").astype(float).to_numpy()
        except (ValueError, TypeError) as e:
            raise DataError(f"{source}: 숫자가 아닌 특성 컬럼 '{column}' ({e})") from e
    try:
        lengths = pd.to_numeric(frame["length_km"], errors="raise").astype(float).to_numpy()
    except (ValueError, TypeError) as e:
        raise DataError(f"{source}: length_km 파싱 실패 ({e})") from e

    links = []
    for row_number, (_, row) in enumerate(frame.iterrows(), start=2):
        road_type = row["road_type"]
        road_type = None if road_type is None or pd.isna(road_type) or str(road_type).strip() == "" else str(road_type)
        try:
            links.append(Link(
                id=str(row["link_id"]).strip(),
                tail=str(row["tail"]).strip(),
                head=str(row["head"]).strip(),
                length=float(lengths[row_number - 2]),
                features=tuple(float(v) for v in attributes.iloc[row_number - 2].to_numpy()),
                road_type=road_type,
            ))
        except ValidationError as e:
            raise DataError(f"{source} {row_number}행: {e.errors()[0]['msg']}") from e

    net = Network(links, feature_names=extra_columns, attributes=attributes)
    if model is not None:
        net = build_features(net, model)
    return net


def load_network(path, format: str = "csv", model: Optional[ModelSpec] = None) -> Network:
    """links.csv (또는 JSON 링크 목록) 로드 및 검증"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"네트워크 파일이 없습니다: {path}")

    if format == "csv":
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise DataError(f"{path}: CSV 파싱 실패 ({e})") from e
    elif format == "json":
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: JSON 파싱 실패 ({e})") from e
        frame = pd.DataFrame.from_records(records)
    else:
        raise DataError(f"지원하지 않는 네트워크 형식: {format}")

    net = _frame_to_network(frame, str(path), model)
    logger.info("네트워크 로드 완료", path=str(path), nodes=net.n_nodes, links=net.n_links,
                features=net.feature_names)
    return net


def load_demand(path) -> List[Tuple[DemandSpec, int]]:
    """demand.csv: origin,destination,trip_count"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"수요 파일이 없습니다: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in DEMAND_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: 필수 컬럼 누락 {missing}")

    demands = []
    for row_number, (_, row) in enumerate(frame.iterrows(), start=2):
        try:
            count = int(row["trip_count"])
            if count < 0:
                raise ValueError("trip_count 는 음수일 수 없습니다")
            demands.append((DemandSpec(origin=row["origin"].strip(), destination=row["destination"].strip()), count))
        except ValueError as e:
            raise DataError(f"{path} {row_number}행: {e}") from e
    return demands


def write_links_csv(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net.to_frame().to_csv(path, index=False, float_format="%.10g")
    return path


def toy_network(u6: float = -2.0, l2: float = 1.0, l34: float = 1.0) -> Network:
    """여섯 링크 예제 네트워크 (O, M, D). 특성 unit_cost 에 β=(-1)"""
    spec = [
        ("1", "O", "D", 2.0, 1.0),
        ("2", "O", "M", l2, 1.0),
        ("3", "M", "D", l34, 1.0),
        ("4", "M", "D", l34, 1.0),
        ("5", "M", "O", l2, 1.0),
        ("6", "O", "D", 2.0, -u6),
    ]
    links = [Link(id=i, tail=t, head=h, length=l, features=(c,)) for i, t, h, l, c in spec]
    attributes = pd.DataFrame({"unit_cost": [c for *_, c in spec]})
    return Network(links, nodes=["O", "M", "D"], feature_names=["unit_cost"], attributes=attributes)


ROAD_TYPE_PACE = {
    "motorway": (0.6, 0.9),
    "urban": (1.5, 3.0),
    "rural": (0.9, 1.5),
}


def make_grid_network(rows: int, cols: int, seed: int = 0,
                      length_range: Tuple[float, float] = (0.4, 1.2),
                      road_type_weights: Optional[Dict[str, float]] = None) -> Network:
    """양방향 격자 네트워크 (pace, travel_time, road_type)"""
    if rows < 2 or cols < 2:
        raise DataError("격자는 최소 2×2 여야 합니다")
    rng = np.random.default_rng(seed)
    weights = road_type_weights or {"urban": 0.6, "rural": 0.3, "motorway": 0.1}
    kinds = list(weights)
    probs = np.array([weights[k] for k in kinds], dtype=float)
    probs = probs / probs.sum()

    nodes = [f"{r}_{c}" for r in range(rows) for c in range(cols)]
    pairs = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                pairs.append((f"{r}_{c}", f"{r}_{c + 1}"))
            if r + 1 < rows:
                pairs.append((f"{r}_{c}", f"{r + 1}_{c}"))

    links, paces, times = [], [], []
    for a, b in pairs:
        length = float(rng.uniform(*length_range))
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        lo, hi = ROAD_TYPE_PACE.get(kind, (1.0, 2.0))
        pace = float(rng.uniform(lo, hi))
        for tail, head in ((a, b), (b, a)):
            links.append(Link(id=f"L{len(links):04d}", tail=tail, head=head, length=length,
                              features=(pace,), road_type=kind))
            paces.append(pace)
            times.append(pace * length)

    attributes = pd.DataFrame({"pace": paces, "travel_time": times})
    net = Network(links, nodes=nodes, feature_names=["pace"], attributes=attributes)
    logger.debug("격자 네트워크 생성", rows=rows, cols=cols, links=net.n_links, seed=seed)
    return net


if __name__ == "__main__":
    # 테스트 실행
    logger.info("네트워크 모듈 테스트 시작")

    toy = toy_network()
    logger.info("예제 네트워크", network=repr(toy))
    logger.info("예제 효용률", u=link_utilities(toy, [-1.0]).values.tolist())
    logger.info("출링크 특성", values=outlink_feature(toy).tolist())

    grid = make_grid_network(4, 4, seed=1)
    logger.info("격자 네트워크", network=repr(grid))

    logger.info("네트워크 모듈 테스트 완료")
