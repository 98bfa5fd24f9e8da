import numpy as np
import pytest

from conftest import (TOY_BASE_FLOWS, TOY_GEOMETRY_FLOWS, TOY_LINK4_FLOWS, TOY_LINK4_RATIOS, chain_network,
                      parallel_network)
from errors import ConvergenceError, DecompositionError, InfeasibleError
from network import (DemandSpec, Link, Network, incidence_matrix, link_utilities, make_grid_network, split_link,
                     toy_network)
from perturbation import PERTURBATION_KINDS, PerturbationSpec
from simulate import random_od_pairs
from solver import (FlowSolution, FlowSolver, SolverOptions, decompose_flow, kkt_residual, objective_value,
                    solve_flow, solve_many, substitution_experiment)

PERT = PerturbationSpec()
AB = DemandSpec(origin="A", destination="B")


def _two_link_share(delta: float) -> float:
    """두 병렬 링크, u = (-1, -1-Δ) 의 x₁ 해석해"""
    share = (2 * np.exp(delta) - 1) / (1 + np.exp(delta))
    return float(min(share, 1.0))


class TestToyNetwork:

    def test_base_flows(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        np.testing.assert_allclose(sol.flows, TOY_BASE_FLOWS, atol=1e-3)
        assert sol.flows[4] == 0.0
        assert sol.flows[5] == 0.0
        assert sol.kkt_residual <= 1e-9
        assert sol.n_active == 4

    def test_equal_flows_on_parallel_links(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        assert sol.flows[2] == pytest.approx(sol.flows[3], abs=1e-9)

    def test_conservation(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        residual = incidence_matrix(toy) @ sol.flows
        np.testing.assert_allclose(residual, [-1.0, 0.0, 1.0], atol=1e-9)

    def test_geometry_changes_flows(self, od_toy):
        net = toy_network(l2=0.5, l34=1.5)
        sol = solve_flow(net, link_utilities(net, [-1.0]), od_toy)
        np.testing.assert_allclose(sol.flows[:4], TOY_GEOMETRY_FLOWS, atol=1e-3)

    def test_objective_beats_single_route(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        direct = np.zeros(6)
        direct[0] = 1.0
        assert sol.objective >= objective_value(toy, toy_u, PERT, direct)

    def test_scale_concentrates_flow(self, toy, od_toy):
        counts = [solve_flow(toy, link_utilities(toy, [beta]), od_toy).n_active
                  for beta in (-0.25, -0.5, -1.0, -2.0, -4.0, -8.0)]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] == 5

    def test_quadratic_perturbation(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy, PerturbationSpec(kind="quadratic"))
        assert sol.kkt_residual <= 1e-9
        assert sol.flows.sum() > 1.0

    def test_flows_frame(self, toy, toy_u, od_toy):
        frame = solve_flow(toy, toy_u, od_toy).to_frame(toy)
        assert list(frame.columns) == ["link_id", "flow", "active"]
        assert frame["active"].tolist() == [True, True, True, True, False, False]


class TestParallelLinks:

    def test_symmetric_split(self):
        sol = solve_flow(parallel_network([1.0, 1.0]), link_utilities(parallel_network([1.0, 1.0]), [-1.0]), AB)
        np.testing.assert_allclose(sol.flows, [0.5, 0.5], atol=1e-9)

    def test_closed_form_share(self):
        net = parallel_network([1.0, 1.2])
        sol = solve_flow(net, link_utilities(net, [-1.0]), AB)
        assert sol.flows[0] == pytest.approx(_two_link_share(0.2), abs=1e-6)
        assert sol.flows[0] == pytest.approx(0.64950, abs=1e-5)

    def test_corner_solution(self):
        net = parallel_network([1.0, 1.0 + np.log(2.0)])
        sol = solve_flow(net, link_utilities(net, [-1.0]), AB)
        assert sol.flows[0] == pytest.approx(1.0, abs=1e-7)
        assert sol.flows[1] == 0.0

    def test_dominated_link_inactive(self):
        net = parallel_network([1.0, 3.0])
        sol = solve_flow(net, link_utilities(net, [-1.0]), AB)
        np.testing.assert_array_equal(sol.active, [True, False])
        assert sol.kkt_residual <= 1e-9

    def test_single_link(self):
        net = parallel_network([1.0])
        sol = solve_flow(net, link_utilities(net, [-1.0]), AB)
        assert sol.flows.tolist() == [1.0]
        assert sol.kkt_residual <= 1e-12


class TestKktResidual:

    def test_analytic_solution(self):
        net = parallel_network([1.0, 1.2])
        u = link_utilities(net, [-1.0])
        x1 = _two_link_share(0.2)
        flows = np.array([x1, 1 - x1])
        # λ_A = 0, λ_B = l(F'(x₁) - u₁)
        multipliers = np.zeros(2)
        multipliers[net.node_id("B")] = np.log1p(x1) + 1.0
        sol = FlowSolution(demand=AB, flows=flows, multipliers=multipliers, objective=0.0,
                           kkt_residual=0.0, active=flows > 0)
        assert kkt_residual(net, u, PERT, sol) <= 1e-9

    def test_zero_demand(self, toy, toy_u):
        sol = solve_flow(toy, toy_u, None)
        assert sol.flows.sum() == 0.0
        assert sol.kkt_residual == 0.0
        assert kkt_residual(toy, toy_u, PERT, sol) == 0.0

    def test_perturbed_flow_detected(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        sol.flows = sol.flows.copy()
        sol.flows[0] += 0.01
        assert kkt_residual(toy, toy_u, PERT, sol) >= 0.01 - 1e-12


class TestSubstitution:

    def test_link4_cost_increase(self, toy, toy_u, od_toy):
        delta = np.zeros(6)
        delta[3] = -0.1
        result = substitution_experiment(toy, toy_u, od_toy, PERT, delta)
        np.testing.assert_allclose(result.perturbed.flows, TOY_LINK4_FLOWS, atol=1e-3)
        np.testing.assert_array_equal(result.base_active, [0, 1, 2, 3])
        np.testing.assert_allclose(result.ratio, TOY_LINK4_RATIOS, atol=1e-2)
        assert result.newly_active.size == 0

    def test_zero_change(self, toy, toy_u, od_toy):
        result = substitution_experiment(toy, toy_u, od_toy, PERT, np.zeros(6))
        np.testing.assert_allclose(result.ratio, np.ones(4), atol=1e-9)

    def test_cheaper_link6_becomes_active(self, toy, toy_u, od_toy):
        delta = np.zeros(6)
        delta[5] = 0.75
        result = substitution_experiment(toy, toy_u, od_toy, PERT, delta)
        np.testing.assert_array_equal(result.newly_active, [5])
        frame = result.to_frame(toy)
        assert bool(frame.loc[5, "newly_active"])
        assert np.isnan(frame.loc[5, "ratio"])


class TestDecomposition:

    def test_toy_routes(self, toy, toy_u, od_toy):
        sol = solve_flow(toy, toy_u, od_toy)
        routes = {tuple(r): w for r, w in decompose_flow(toy, sol)}
        assert set(routes) == {("1",), ("2", "3"), ("2", "4")}
        assert routes[("1",)] == pytest.approx(0.424, abs=1e-3)
        assert routes[("2", "3")] == pytest.approx(0.288, abs=1e-3)
        assert sum(routes.values()) == pytest.approx(1.0, abs=1e-9)

    def test_superposition_reproduces_flows(self, grid):
        d = DemandSpec(origin="0_0", destination="4_4")
        sol = solve_flow(grid, link_utilities(grid, [-1.0]), d)
        rebuilt = np.zeros(grid.n_links)
        for route, weight in decompose_flow(grid, sol):
            rebuilt[[grid.link_index[e] for e in route]] += weight
        np.testing.assert_allclose(rebuilt, sol.flows, atol=1e-6)

    def test_single_path(self):
        net = chain_network(["A", "B", "C"])
        sol = solve_flow(net, link_utilities(net, [-1.0]), DemandSpec(origin="A", destination="C"))
        assert decompose_flow(net, sol) == [(["AB", "BC"], 1.0)]

    def test_cycle_raises(self):
        links = [Link(id="ac", tail="A", head="C", length=1.0, features=(1.0,)),
                 Link(id="ab", tail="A", head="B", length=1.0, features=(1.0,)),
                 Link(id="ba", tail="B", head="A", length=1.0, features=(1.0,))]
        net = Network(links, feature_names=["cost"])
        flows = np.array([1.0, 0.5, 0.5])
        sol = FlowSolution(demand=DemandSpec(origin="A", destination="C"), flows=flows,
                           multipliers=np.zeros(3), objective=0.0, kkt_residual=0.0, active=flows > 0)
        with pytest.raises(DecompositionError):
            decompose_flow(net, sol)


class TestErrors:

    def test_unreachable_destination(self):
        net = chain_network(["A", "B", "C"])
        with pytest.raises(InfeasibleError):
            solve_flow(net, link_utilities(net, [-1.0]), DemandSpec(origin="C", destination="A"))

    def test_invalid_options(self):
        with pytest.raises(ValueError):
            SolverOptions(kkt_tol=0.0)

    def test_iteration_cap(self, grid):
        d = DemandSpec(origin="0_0", destination="4_4")
        with pytest.raises(ConvergenceError):
            solve_flow(grid, link_utilities(grid, [-1.0]), d, opts=SolverOptions(max_iters=1))


class TestSolveMany:

    def test_order_and_threads(self, grid):
        u = link_utilities(grid, [-1.5])
        ods = random_od_pairs(grid, 6, seed=3)
        sequential = solve_many(grid, u, ods, jobs=1)
        threaded = FlowSolver().solve_many(grid, u, ods, jobs=4)
        assert [s.demand for s in threaded] == ods
        for a, b in zip(sequential, threaded):
            np.testing.assert_array_equal(a.flows, b.flows)


def _random_grid_case(case: int):
    rng = np.random.default_rng(case)
    rows, cols = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    net = make_grid_network(rows, cols, seed=case)
    d = random_od_pairs(net, 1, seed=case)[0]
    return net, d, rng


@pytest.mark.parametrize("case", range(20))
def test_link_split_invariance(case):
    net, d, rng = _random_grid_case(case)
    link_id = net.link_ids[int(rng.integers(net.n_links))]
    fraction = float(rng.uniform(0.1, 0.9))
    u = link_utilities(net, [-1.0])
    base = solve_flow(net, u, d)

    split = split_link(net, link_id, fraction)
    after = solve_flow(split, link_utilities(split, [-1.0]), d)
    for e, other in enumerate(net.link_ids):
        if other != link_id:
            assert after.flows[split.link_index[other]] == pytest.approx(base.flows[e], abs=1e-6)
    first, second = after.flows[split.link_index[f"{link_id}/1"]], after.flows[split.link_index[f"{link_id}/2"]]
    assert first == pytest.approx(second, abs=1e-9)
    assert first == pytest.approx(base.flows[net.link_index[link_id]], abs=1e-6)
    assert after.objective == pytest.approx(base.objective, abs=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("case", range(50))
def test_random_networks_satisfy_kkt(case):
    net, d, _ = _random_grid_case(100 + case)
    sol = solve_flow(net, link_utilities(net, [-1.5]), d)
    assert sol.kkt_residual <= 1e-9
    np.testing.assert_allclose(incidence_matrix(net) @ sol.flows,
                               np.eye(net.n_nodes)[net.node_id(d.destination)]
                               - np.eye(net.n_nodes)[net.node_id(d.origin)], atol=1e-9)
    assert np.all(sol.flows >= 0)


def _random_digraph(case: int):
    """백본 경로 n0 → … → n{k} 위에 무작위 링크 (병렬, 역방향, 순환 포함)"""
    rng = np.random.default_rng(1000 + case)
    n_links = int(rng.integers(20, 301))
    n_nodes = int(rng.integers(6, max(7, n_links // 3)))
    pairs = [(k, k + 1) for k in range(n_nodes - 1)]
    while len(pairs) < n_links:
        tail, head = (int(v) for v in rng.integers(n_nodes, size=2))
        if tail != head:
            pairs.append((tail, head))
    links = [Link(id=f"e{k}", tail=f"n{t}", head=f"n{h}", length=float(rng.uniform(0.2, 2.0)),
                  features=(float(rng.uniform(0.5, 2.0)),))
             for k, (t, h) in enumerate(pairs)]
    net = Network(links, feature_names=["cost"])
    return net, DemandSpec(origin="n0", destination=f"n{n_nodes - 1}")


@pytest.mark.slow
@pytest.mark.parametrize("kind", PERTURBATION_KINDS)
@pytest.mark.parametrize("beta", [-0.1, -1.5, -3.0])
@pytest.mark.parametrize("case", range(20))
def test_random_digraphs_satisfy_kkt(case, beta, kind):
    net, d = _random_digraph(case)
    pert = PerturbationSpec(kind=kind)
    u = link_utilities(net, [beta])
    sol = solve_flow(net, u, d, pert)
    assert sol.kkt_residual <= 1e-9
    assert kkt_residual(net, u, pert, sol) <= 1e-9
    np.testing.assert_allclose(incidence_matrix(net) @ sol.flows,
                               np.eye(net.n_nodes)[net.node_id(d.destination)]
                               - np.eye(net.n_nodes)[net.node_id(d.origin)], atol=1e-9)
    assert np.all(sol.flows >= 0)
