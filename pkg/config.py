import os
import sys
import logging
from importlib import metadata
from pathlib import Path
from typing import Dict, List

import structlog
from dotenv import load_dotenv

# Python 3.10 이상 (3.11 미만은 tomli 백포트)
MIN_PYTHON = (3, 10)
if sys.version_info < MIN_PYTHON:
    raise RuntimeError(f"purc 는 Python {'.'.join(map(str, MIN_PYTHON))} 이상이 필요합니다: {sys.version.split()[0]}")

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TOMLDecodeError = tomllib.TOMLDecodeError

# 환경 변수 로드
load_dotenv()

# 경로 설정
DATA_DIR = os.getenv('PURC_DATA_DIR', './data')
DEFAULT_OUT_DIR = "./out"

# 실행 설정
DEFAULT_JOBS = int(os.getenv('PURC_JOBS', '1'))
DEFAULT_SEED = int(os.getenv('PURC_SEED', '20190601'))
DEFAULT_PERTURBATION = os.getenv('PURC_PERTURBATION', 'modified_entropy')

# 솔버 설정
SOLVER_DEFAULTS = {
    "kkt_tol": 1e-9,      # 정지 조건 (쌍대 간극 / KKT 잔차)
    "feas_tol": 1e-9,     # ‖Ax - b‖∞ 허용치
    "zero_tol": 1e-8,     # 활성 링크 판정
    "max_iters": 5000,    # 외부 반복 상한
    "method": "pairwise_fw",
}
INNER_SWEEPS = 60         # 경로 균등화 내부 반복 상한
DECOMPOSITION_TOL = 1e-6

# 베이스라인 / 시뮬레이션 설정
ROUTE_CAP = 10_000
STEP_CAP_FACTOR = 10      # 랜덤 워크 최대 스텝 = 10 * |E|
SOLUTION_CACHE_SIZE = int(os.getenv('PURC_SOLUTION_CACHE', '256'))  # 시뮬레이터 OD 해 캐시 (LRU)

# 전처리 설정
SCREEN_BETA = -0.3
SCREEN_THRESHOLD = 0.95
SCREEN_FEATURE = "pace"

# β 스윕 그리드 (분 / km 당 효용)
BETA_GRID = [-3.0, -2.5, -2.0, -1.5, -1.0, -0.5]

# 출력 파일 이름 (--out DIR 아래 고정)
OUTPUT_FILES = {
    "flows": "flows.csv",
    "fit": "fit.json",
    "trips": "trips.jsonl",
    "report": "report.json",
    "scatter": "flows_scatter.csv",
    "outside_cdf": "outside_cdf.csv",
    "kept": "kept.jsonl",
    "discarded": "discarded.jsonl",
    "summary": "summary.json",
    "baseline": "baseline_flows.csv",
    "calibration": "calibration.json",
    "sweep": "sweep.csv",
    "sweep_stats": "sweep_stats.csv",
    "solution_stats": "solution_stats.csv",
    "links": "links.csv",
    "comparison": "perturbation_comparison.csv",
    "substitution": "substitution.csv",
    "routes": "routes.csv",
    "solver_paths": "solver_paths.csv",
    "link_totals": "link_totals.csv",
    "manifest": "manifest.json",
    "error": "error.json",
}

# 로깅 설정
LOG_LEVEL = os.getenv('PURC_LOG_LEVEL', 'INFO').upper()
LOG_FILE = os.getenv('PURC_LOG_FILE')

_handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
if LOG_FILE:
    os.makedirs(os.path.dirname(LOG_FILE) or '.', exist_ok=True)
    _handlers.append(logging.FileHandler(LOG_FILE))

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(message)s',
    handlers=_handlers,
)

structlog.configure(
    processors=[
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.format_exc_info,
        structlog.processors.KeyValueRenderer(key_order=["timestamp", "level", "logger", "event"]),
    ],
    logger_factory=structlog.stdlib.LoggerFactory(),
    wrapper_class=structlog.stdlib.BoundLogger,
    cache_logger_on_first_use=True,
)

logger = structlog.get_logger("purc")


def set_log_level(level: str):
    """CLI --log-level 반영"""
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))


def load_toml(path) -> Dict:
    """TOML 설정 파일 로드"""
    path = Path(path)
    with path.open("rb") as fh:
        return tomllib.load(fh)


def parse_vector(text: str) -> List[float]:
    """'-1.5' 또는 '-0.6,-0.03' 형식의 벡터 파싱"""
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError(f"빈 벡터: {text!r}")
    return [float(p) for p in parts]


def get_package_versions() -> Dict[str, str]:
    """재현성 매니페스트용 패키지 버전"""
    versions = {"python": sys.version.split()[0]}
    for package in ("numpy", "pandas", "scipy", "statsmodels", "networkx", "pydantic", "structlog"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions
