import argparse
import hashlib
import json
import math
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

# 프로젝트 모듈 임포트
from config import (BETA_GRID, DEFAULT_JOBS, DEFAULT_OUT_DIR, DEFAULT_PERTURBATION, DEFAULT_SEED, OUTPUT_FILES,
                    ROUTE_CAP, SCREEN_BETA, SCREEN_FEATURE, SCREEN_THRESHOLD, TOMLDecodeError, get_package_versions,
                    load_toml, logger, parse_vector, set_log_level)
from errors import DataError, NumericalError, PurcError, UsageError
from network import (DemandSpec, ModelSpec, Network, link_utilities, load_demand, load_model_spec, load_network,
                     make_grid_network, toy_network, write_links_csv)
from perturbation import PERTURBATION_KINDS, PerturbationSpec
from solver import SolverOptions, decompose_flow, flow_solver, substitution_experiment
from estimation import EstimationOptions, empirical_flows, estimate
from simulate import load_plan, read_trips_jsonl, summarize_solution_stats, trip_simulator, write_trips_jsonl
from baselines import calibrate_to_flows, enumerate_routes, mnl_probabilities, psl_probabilities
from preprocess import drop_degenerate_ods, filter_nonsensical, group_by_od, select_trim_nodes, trim_trips
from validation import holdout_validation, validate


class RunConfig(BaseModel):
    """한 번의 CLI 실행 설정 (TOML + 플래그 병합 결과)"""
    command: str
    network: Optional[str] = None
    perturbation: PerturbationSpec = Field(default_factory=PerturbationSpec.default)
    model: Optional[ModelSpec] = None
    beta: Optional[List[float]] = None
    solver: SolverOptions = Field(default_factory=SolverOptions)
    seed: int = DEFAULT_SEED
    jobs: int = Field(default=DEFAULT_JOBS, ge=1)
    out_dir: str = DEFAULT_OUT_DIR
    options: Dict[str, Any] = Field(default_factory=dict)

    def sha256(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class RunContext:
    """출력 파일 기록 및 매니페스트"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: Dict[str, str] = {}
        self.started_at = datetime.now().isoformat()

    def path(self, key: str) -> Path:
        return self.out_dir / OUTPUT_FILES[key]

    def _record(self, path: Path) -> Path:
        self.outputs[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def write_csv(self, key: str, frame: pd.DataFrame) -> Path:
        path = self.path(key)
        frame.to_csv(path, index=False, float_format="%.10g")
        return self._record(path)

    def write_json(self, key: str, payload: Dict) -> Path:
        path = self.path(key)
        path.write_text(json.dumps(_jsonable(payload), indent=2, ensure_ascii=False, allow_nan=False) + "\n",
                        encoding="utf-8")
        return self._record(path)

    def write_trips(self, key: str, trips) -> Path:
        return self._record(write_trips_jsonl(trips, self.path(key)))

    def write_links(self, key: str, net: Network) -> Path:
        return self._record(write_links_csv(net, self.path(key)))

    def write_manifest(self, status: str, error: Optional[Dict] = None) -> Path:
        manifest = {
            "command": self.cfg.command,
            "status": status,
            "config": self.cfg.model_dump(mode="json"),
            "config_sha256": self.cfg.sha256(),
            "seed": self.cfg.seed,
            "versions": get_package_versions(),
            "outputs": self.outputs,
            "started_at": self.started_at,
            "finished_at": datetime.now().isoformat(),
        }
        if error:
            manifest["error"] = error
        path = self.path("manifest")
        path.write_text(json.dumps(_jsonable(manifest), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def _jsonable(value):
    """NaN/inf → None, numpy → 파이썬 기본형"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class PurcArgumentParser(argparse.ArgumentParser):
    """인자 오류를 UsageError 로 변환"""

    def error(self, message):
        raise UsageError(message)


def parse_od(text: str) -> DemandSpec:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"--od 는 'O,D' 형식이어야 합니다: {text!r}")
    try:
        return DemandSpec(origin=parts[0], destination=parts[1])
    except ValidationError as e:
        raise UsageError(f"잘못된 OD: {text!r}") from e


def _vector(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return parse_vector(text)
    except ValueError as e:
        raise UsageError(f"벡터 파싱 실패: {text!r}") from e


# TOML [solver] 위에 덮어쓰는 플래그
SOLVER_FLAGS = ("kkt_tol", "feas_tol", "zero_tol", "max_iters")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """--config TOML 위에 CLI 플래그를 덮어씀"""
    base: Dict[str, Any] = {}
    if args.config:
        try:
            base = load_toml(args.config)
        except FileNotFoundError as e:
            raise DataError(f"설정 파일이 없습니다: {args.config}") from e

    model = None
    model_source = getattr(args, "model_config_path", None) or base.get("model")
    if isinstance(model_source, dict):
        model = ModelSpec.model_validate(model_source)
    elif model_source:
        model = load_model_spec(model_source)

    perturbation = (getattr(args, "perturbation", None) or base.get("perturbation")
                    or (model.perturbation if model else None) or DEFAULT_PERTURBATION)
    beta = _vector(getattr(args, "beta", None)) or base.get("beta") or (model.beta if model else None)

    solver = dict(base.get("solver", {}))
    for key in SOLVER_FLAGS:
        if getattr(args, key, None) is not None:
            solver[key] = getattr(args, key)

    options = {k: v for k, v in vars(args).items()
               if k not in {"command", "config", "network", "perturbation", "beta", "seed", "jobs", "out",
                            "log_level", "model_config_path", "handler", *SOLVER_FLAGS}}
    options["seed_given"] = args.seed is not None or "seed" in base
    return RunConfig(
        command=args.command,
        network=getattr(args, "network", None) or base.get("network"),
        perturbation=PerturbationSpec(kind=perturbation),
        model=model,
        beta=beta,
        solver=SolverOptions(**solver),
        seed=args.seed if args.seed is not None else base.get("seed", DEFAULT_SEED),
        jobs=args.jobs if args.jobs is not None else base.get("jobs", DEFAULT_JOBS),
        out_dir=args.out or base.get("out_dir", DEFAULT_OUT_DIR),
        options=options,
    )


def _network(cfg: RunConfig) -> Network:
    if not cfg.network:
        raise UsageError("--network 가 필요합니다")
    return load_network(cfg.network, model=cfg.model)


def _beta(cfg: RunConfig, net: Network) -> List[float]:
    if cfg.beta is None:
        raise UsageError("--beta 또는 β 가 들어 있는 --model 이 필요합니다")
    if len(cfg.beta) != net.n_features:
        raise DataError(f"β 길이({len(cfg.beta)})와 특성({net.feature_names}) 불일치")
    return list(cfg.beta)


def _trips(cfg: RunConfig):
    path = cfg.options.get("trips")
    if not path:
        raise UsageError("--trips 가 필요합니다")
    return read_trips_jsonl(path)


def _od_list(cfg: RunConfig) -> List[DemandSpec]:
    ods = cfg.options.get("od") or []
    if not ods:
        raise UsageError("--od 가 필요합니다")
    return [parse_od(text) for text in ods]


def _single_od(cfg: RunConfig) -> DemandSpec:
    ods = _od_list(cfg)
    if len(ods) > 1:
        raise UsageError(f"--od 는 한 번만 줄 수 있습니다 ({len(ods)}개). 여러 OD 는 --demand 파일을 쓰세요")
    return ods[0]


def _parse_assignments(texts: List[str], flag: str) -> List[tuple]:
    """'LINK=VALUE' 목록 파싱"""
    pairs = []
    for text in texts:
        link_id, sep, value = str(text).partition("=")
        try:
            if not sep:
                raise ValueError(text)
            pairs.append((link_id.strip(), float(value)))
        except ValueError as e:
            raise UsageError(f"{flag} 는 'LINK=VALUE' 형식이어야 합니다: {text!r}") from e
    return pairs


def _empirical(net: Network, trips, drop_degenerate: bool = True):
    groups = group_by_od(trips)
    if drop_degenerate:
        groups, _ = drop_degenerate_ods(groups)
    return [empirical_flows(members, net, members[0].od) for members in groups.values()]


def _routes_frame(routes) -> pd.DataFrame:
    return pd.DataFrame({"route": ["-".join(r) for r, _ in routes], "weight": [w for _, w in routes]})


def cmd_solve(cfg: RunConfig, ctx: RunContext) -> Dict:
    """한 OD 의 최적 흐름 (선택적으로 효용 변화 실험), 또는 수요 파일 전체의 링크 합계"""
    net = _network(cfg)
    lengths = _parse_assignments(cfg.options.get("length") or [], "--length")
    if lengths:
        net = net.with_lengths(dict(lengths))
    u = link_utilities(net, _beta(cfg, net))

    if cfg.options.get("demand"):
        if cfg.options.get("od") or cfg.options.get("change"):
            raise UsageError("--demand 는 --od / --change 와 함께 쓸 수 없습니다")
        return _solve_demand(cfg, ctx, net, u, load_demand(cfg.options["demand"]))

    od = _single_od(cfg)
    solution = flow_solver.solve(net, u, od, cfg.perturbation, cfg.solver)
    ctx.write_csv("flows", solution.to_frame(net))
    ctx.write_csv("routes", _routes_frame(decompose_flow(net, solution)))
    ctx.write_csv("solver_paths", _routes_frame(solution.route_weights(net)))

    summary = {"od": od.label(), "objective": solution.objective, "kkt_residual": solution.kkt_residual,
               "active_links": solution.n_active, "iterations": solution.iterations}
    if lengths:
        summary["lengths"] = dict(lengths)

    changes = _parse_assignments(cfg.options.get("change") or [], "--change")
    if changes:
        delta = np.zeros(net.n_links)
        for link_id, value in changes:
            if link_id not in net.link_index:
                raise UsageError(f"--change 에 없는 링크: {link_id}")
            delta[net.link_index[link_id]] += value
        result = substitution_experiment(net, u, od, cfg.perturbation, delta, cfg.solver)
        ctx.write_csv("substitution", result.to_frame(net))
        summary["newly_active"] = [net.link_ids[e] for e in result.newly_active]
    return summary


def _solve_demand(cfg: RunConfig, ctx: RunContext, net: Network, u, demands) -> Dict:
    """OD 별 흐름과 통행 수 가중 링크 합계"""
    demands = [(d, count) for d, count in demands if count > 0]
    if not demands:
        raise DataError("수요 파일에 통행 수가 양수인 OD 가 없습니다")
    solutions = flow_solver.solve_many(net, u, [d for d, _ in demands], cfg.perturbation, cfg.solver, cfg.jobs)

    frames, totals = [], np.zeros(net.n_links)
    for (d, count), sol in zip(demands, solutions):
        frame = sol.to_frame(net)
        frame.insert(0, "trip_count", count)
        frame.insert(0, "destination", d.destination)
        frame.insert(0, "origin", d.origin)
        frames.append(frame)
        totals += count * sol.flows
    ctx.write_csv("flows", pd.concat(frames, ignore_index=True))
    ctx.write_csv("link_totals", pd.DataFrame({"link_id": net.link_ids, "total": totals}))
    return {"ods": len(demands), "trips": int(sum(count for _, count in demands)),
            "max_kkt_residual": max(sol.kkt_residual for sol in solutions)}


def cmd_estimate(cfg: RunConfig, ctx: RunContext) -> Dict:
    """관측 통행에서 β 추정"""
    net = _network(cfg)
    options = EstimationOptions(cov_type=cfg.options.get("cov_type") or "HC1",
                                min_count=cfg.options.get("min_count"), jobs=cfg.jobs)
    flows = _empirical(net, _trips(cfg))
    fit = estimate(net, flows, cfg.perturbation, options)
    payload = fit.to_dict()
    payload["perturbation"] = cfg.perturbation.kind
    ctx.write_json("fit", payload)
    return {"beta": fit.beta.tolist(), "robust_se": fit.robust_se.tolist(), "n_obs": fit.n_obs}


def cmd_simulate(cfg: RunConfig, ctx: RunContext) -> Dict:
    """계획 파일대로 통행 데이터셋 생성"""
    net = _network(cfg)
    plan_path = cfg.options.get("plan")
    if not plan_path:
        raise UsageError("--plan 이 필요합니다")
    plan = load_plan(plan_path)
    updates = {}
    if cfg.beta is not None:
        updates["beta"] = cfg.beta
    if cfg.options.get("seed_given"):
        updates["seed"] = cfg.seed
    if cfg.options.get("trips_per_od"):
        updates["trips_per_od"] = cfg.options["trips_per_od"]
    plan = plan.model_copy(update=updates)

    solutions = trip_simulator.solutions(net, plan.resolve_ods(net), plan.beta, cfg.perturbation, cfg.jobs)
    trips = trip_simulator.sample(net, plan, solutions)
    ctx.write_trips("trips", trips)
    ctx.write_csv("solution_stats", summarize_solution_stats(net, solutions))
    return {"trips": len(trips), "ods": len(solutions), "seed": plan.seed}


def cmd_validate(cfg: RunConfig, ctx: RunContext) -> Dict:
    """예측 링크 합계 vs 관측"""
    net = _network(cfg)
    trips = _trips(cfg)
    if cfg.options.get("holdout"):
        fit, report = holdout_validation(net, trips, cfg.perturbation, cfg.seed, jobs=cfg.jobs)
        ctx.write_json("fit", fit.to_dict())
    else:
        beta = cfg.beta
        fit_path = cfg.options.get("fit")
        if fit_path:
            try:
                fitted = json.loads(Path(fit_path).read_text(encoding="utf-8"))
            except FileNotFoundError as e:
                raise DataError(f"fit 파일이 없습니다: {fit_path}") from e
            if fitted.get("features") and fitted["features"] != net.feature_names:
                raise DataError(f"fit 특성 {fitted['features']} 이 네트워크 특성 {net.feature_names} 과 다릅니다")
            beta = fitted["beta"]
        if beta is None:
            raise UsageError("--fit 또는 --beta 가 필요합니다")
        report = validate(net, trips, beta, cfg.perturbation, cfg.solver, cfg.jobs)

    ctx.write_json("report", report.to_dict())
    ctx.write_csv("scatter", report.scatter_frame())
    ctx.write_csv("outside_cdf", report.outside_cdf_frame())
    return {"adj_r2": report.adj_r2, "overlap": report.unused.overlap}


def cmd_trim(cfg: RunConfig, ctx: RunContext) -> Dict:
    """출발/도착 노드 집합을 고르고 통행 잘라내기"""
    net = _network(cfg)
    trips = _trips(cfg)
    origins = select_trim_nodes(trips, cfg.options["n_origins"], "origin", net)
    destinations = select_trim_nodes(trips, cfg.options["n_destinations"], "destination", net)
    result = trim_trips(trips, origins, destinations, net)
    ctx.write_trips("kept", result.trips)
    ctx.write_trips("discarded", result.discarded)
    ctx.write_json("summary", result.summary())
    return result.summary()


def cmd_filter(cfg: RunConfig, ctx: RunContext) -> Dict:
    """스크리닝 모형 기준 비합리 통행 제거"""
    net = _network(cfg)
    result = filter_nonsensical(_trips(cfg), net, cfg.options["screen_beta"], cfg.options["threshold"],
                                cfg.options["screen_feature"], cfg.perturbation, cfg.solver, cfg.jobs)
    ctx.write_trips("kept", result.kept)
    ctx.write_trips("discarded", result.discarded)
    ctx.write_json("summary", result.summary())
    return result.summary()


def cmd_baseline(cfg: RunConfig, ctx: RunContext) -> Dict:
    """MNL / PSL 경로 선택 확률과 링크 흐름"""
    net = _network(cfg)
    u = link_utilities(net, _beta(cfg, net))
    od = _single_od(cfg)
    route_set = enumerate_routes(net, od, u, cfg.options.get("max_routes") or ROUTE_CAP)
    kind = cfg.options["baseline_model"]
    beta_u, beta_ps = cfg.options["beta_u"], cfg.options["beta_ps"]

    target_path = cfg.options.get("calibrate_to")
    summary: Dict[str, Any] = {"model": kind, "routes": len(route_set)}
    if target_path:
        target = pd.read_csv(target_path, dtype={"link_id": str}).set_index("link_id")["flow"]
        missing = set(net.link_ids) - set(target.index)
        if missing:
            raise DataError(f"보정 대상 흐름에 없는 링크: {sorted(missing)[:10]}")
        fixed = beta_u if (kind == "psl" and cfg.options.get("fix_beta_u")) else None
        calibrated = calibrate_to_flows(kind, route_set, target.loc[net.link_ids].to_numpy(), beta_u=fixed)
        ctx.write_json("calibration", calibrated.to_dict())
        beta_u = calibrated.beta_u
        beta_ps = calibrated.beta_ps if calibrated.beta_ps is not None else beta_ps
        summary.update(calibrated.to_dict())

    choice = (mnl_probabilities(route_set, beta_u) if kind == "mnl"
              else psl_probabilities(route_set, beta_u, beta_ps))
    ctx.write_csv("baseline", choice.to_frame(route_set))
    summary["route_probabilities"] = dict(zip(route_set.route_labels(), choice.probabilities.tolist()))
    return summary


def cmd_sweep(cfg: RunConfig, ctx: RunContext) -> Dict:
    """β 그리드 전체에서 OD 해 계산"""
    net = _network(cfg)
    if net.n_features != 1:
        raise UsageError(f"sweep 은 단일 특성 모형만 지원합니다: {net.feature_names}")
    grid = _vector(cfg.options.get("grid")) or list(BETA_GRID)
    ods = _od_list(cfg)

    flow_rows, stat_frames = [], []
    for value in grid:
        u = link_utilities(net, [value])
        solutions = flow_solver.solve_many(net, u, ods, cfg.perturbation, cfg.solver, cfg.jobs)
        for sol in solutions:
            frame = sol.to_frame(net)
            frame.insert(0, "destination", sol.demand.destination)
            frame.insert(0, "origin", sol.demand.origin)
            frame.insert(0, "beta", value)
            flow_rows.append(frame)
        stats = summarize_solution_stats(net, solutions)
        stats.insert(0, "beta", value)
        stat_frames.append(stats)
        logger.debug("스윕 지점 완료", beta=value)

    ctx.write_csv("sweep", pd.concat(flow_rows, ignore_index=True))
    ctx.write_csv("sweep_stats", pd.concat(stat_frames, ignore_index=True))
    return {"grid": grid, "ods": len(ods)}


def cmd_make_grid(cfg: RunConfig, ctx: RunContext) -> Dict:
    """합성 격자 네트워크 links.csv"""
    if cfg.options.get("toy"):
        net = toy_network()
    else:
        net = make_grid_network(cfg.options["rows"], cfg.options["cols"], cfg.seed)
    ctx.write_links("links", net)
    return {"nodes": net.n_nodes, "links": net.n_links}


def cmd_compare(cfg: RunConfig, ctx: RunContext) -> Dict:
    """두 교란 함수로 같은 데이터 추정 후 조정 R² 비교"""
    net = _network(cfg)
    trips = _trips(cfg)
    flows = _empirical(net, trips)
    rows = []
    for kind in PERTURBATION_KINDS:
        pert = PerturbationSpec(kind=kind)
        fit = estimate(net, flows, pert, EstimationOptions(jobs=cfg.jobs))
        report = validate(net, trips, fit.beta, pert, cfg.solver, cfg.jobs, n_params=len(fit.beta))
        row = {"perturbation": kind, "n_obs": fit.n_obs, "regression_adj_r2": fit.adj_r2,
               "prediction_adj_r2": report.adj_r2}
        for name, b, se in zip(fit.feature_names, fit.beta, fit.robust_se):
            row[f"beta:{name}"] = b
            row[f"se:{name}"] = se
        rows.append(row)
    ctx.write_csv("comparison", pd.DataFrame(rows))
    return {"rows": rows}


COMMANDS: Dict[str, Callable[[RunConfig, RunContext], Dict]] = {
    "solve": cmd_solve,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "trim": cmd_trim,
    "filter": cmd_filter,
    "baseline": cmd_baseline,
    "sweep": cmd_sweep,
    "make-grid": cmd_make_grid,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="출력 디렉터리")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--config", help="실행 설정 TOML")
    common.add_argument("--log-level", default=None)

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--network")
    model_args.add_argument("--model", dest="model_config_path", help="모델 명세 TOML")
    model_args.add_argument("--beta", help="'-1.5' 또는 '-0.6,-0.03'")
    model_args.add_argument("--perturbation", choices=PERTURBATION_KINDS)
    model_args.add_argument("--kkt-tol", type=float)
    model_args.add_argument("--feas-tol", type=float)
    model_args.add_argument("--zero-tol", type=float)
    model_args.add_argument("--max-iters", type=int)

    parser = PurcArgumentParser(prog="purc", description="교란 효용 경로 선택 도구")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=PurcArgumentParser)

    p = sub.add_parser("solve", parents=[common, model_args])
    p.add_argument("--od", action="append", help="'O,D' (한 번만)")
    p.add_argument("--demand", help="origin,destination,trip_count CSV")
    p.add_argument("--change", action="append", help="LINK=DELTA 효용률 변화")
    p.add_argument("--length", action="append", help="LINK=KM 링크 길이 변경")

    p = sub.add_parser("estimate", parents=[common, model_args])
    p.add_argument("--trips", required=True)
    p.add_argument("--cov-type", choices=["HC1", "HC0", "cluster"], default="HC1")
    p.add_argument("--min-count", type=int)

    p = sub.add_parser("simulate", parents=[common, model_args])
    p.add_argument("--plan", required=True)
    p.add_argument("--trips-per-od", type=int)

    p = sub.add_parser("validate", parents=[common, model_args])
    p.add_argument("--trips", required=True)
    p.add_argument("--fit")
    p.add_argument("--holdout", action="store_true")

    p = sub.add_parser("trim", parents=[common, model_args])
    p.add_argument("--trips", required=True)
    p.add_argument("--n-origins", type=int, required=True)
    p.add_argument("--n-destinations", type=int, required=True)

    p = sub.add_parser("filter", parents=[common, model_args])
    p.add_argument("--trips", required=True)
    p.add_argument("--screen-beta", type=float, default=SCREEN_BETA)
    p.add_argument("--threshold", type=float, default=SCREEN_THRESHOLD)
    p.add_argument("--screen-feature", default=SCREEN_FEATURE)

    p = sub.add_parser("baseline", parents=[common])
    p.add_argument("--network")
    p.add_argument("--model", dest="baseline_model", choices=["mnl", "psl"], required=True)
    p.add_argument("--spec", dest="model_config_path", help="모델 명세 TOML")
    p.add_argument("--beta", help="링크 효용률 β")
    p.add_argument("--od", action="append", required=True)
    p.add_argument("--beta-u", type=float, default=2.0)
    p.add_argument("--beta-ps", type=float, default=1.1)
    p.add_argument("--calibrate-to")
    p.add_argument("--fix-beta-u", action="store_true")
    p.add_argument("--max-routes", type=int)

    p = sub.add_parser("sweep", parents=[common, model_args])
    p.add_argument("--od", action="append", required=True)
    p.add_argument("--grid", help="쉼표로 구분한 β 값")

    p = sub.add_parser("make-grid", parents=[common])
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--toy", action="store_true", help="여섯 링크 예제 네트워크")

    p = sub.add_parser("compare", parents=[common, model_args])
    p.add_argument("--trips", required=True)
    return parser


def _error_payload(error: BaseException, code: int) -> Dict:
    return {"error": type(error).__name__, "message": str(error), "exit_code": code,
            "timestamp": datetime.now().isoformat()}


def _exit_code(error: BaseException) -> int:
    if isinstance(error, PurcError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, ValidationError, TOMLDecodeError)):
        return DataError.exit_code
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ctx: Optional[RunContext] = None
    try:
        args = parser.parse_args(argv)
        if args.log_level:
            set_log_level(args.log_level)
        cfg = resolve_config(args)
        ctx = RunContext(cfg)
        logger.info(f"🚀 purc {cfg.command} 시작", out=str(ctx.out_dir), seed=cfg.seed, jobs=cfg.jobs)

        summary = COMMANDS[cfg.command](cfg, ctx)
        ctx.write_manifest("success")
        print(json.dumps(_jsonable({"success": True, "command": cfg.command, "outputs": sorted(ctx.outputs),
                                    "summary": summary, "timestamp": datetime.now().isoformat()}),
                         ensure_ascii=False))
        logger.info(f"✅ purc {cfg.command} 완료", outputs=sorted(ctx.outputs))
        return 0

    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except Exception as e:
        code = _exit_code(e)
        payload = _error_payload(e, code)
        if code == 1:
            logger.exception("❌ 예상하지 못한 오류", error=str(e))
        elif isinstance(e, NumericalError):
            logger.error("❌ 수치 계산 실패", error=str(e))
        else:
            logger.error("❌ 실행 실패", error=str(e), exit_code=code)
        if ctx is not None:
            ctx.path("error").write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
            ctx.write_manifest("error", payload)
        print(json.dumps(payload, ensure_ascii=False))
        return code


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
