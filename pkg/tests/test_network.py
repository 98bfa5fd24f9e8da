import numpy as np
import pandas as pd
import pytest

from conftest import DATA_DIR
from errors import DataError, ModelDomainError
from network import (DemandSpec, Link, Network, build_features, demand_vector, incidence_matrix,
                     link_utilities, load_demand, load_model_spec, load_network, make_grid_network,
                     outlink_feature, split_link, toy_network, write_links_csv)


def _write(tmp_path, text, name="links.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadNetwork:

    def test_toy_csv(self):
        net = load_network(DATA_DIR / "toy" / "links.csv")
        assert net.n_nodes == 3
        assert net.n_links == 6
        assert net.feature_names == ["unit_cost"]
        np.testing.assert_array_equal(net.lengths, [2, 1, 1, 1, 1, 2])

    def test_toy_csv_matches_builtin(self, toy):
        net = load_network(DATA_DIR / "toy" / "links.csv")
        np.testing.assert_array_equal(net.z, toy.z)
        assert net.link_ids == toy.link_ids

    def test_single_link(self, tmp_path):
        path = _write(tmp_path, "link_id,tail,head,length_km,road_type,pace\na,X,Y,1.5,urban,2\n")
        net = load_network(path)
        assert (net.n_nodes, net.n_links) == (2, 1)
        assert net.road_types == ["urban"]

    def test_zero_length_rejected(self, tmp_path):
        path = _write(tmp_path, "link_id,tail,head,length_km,road_type,pace\na,X,Y,0,,2\n")
        with pytest.raises(DataError):
            load_network(path)

    def test_self_loop_rejected(self, tmp_path):
        path = _write(tmp_path, "link_id,tail,head,length_km,road_type,pace\na,X,X,1,,2\n")
        with pytest.raises(DataError):
            load_network(path)

    def test_non_numeric_feature_rejected(self, tmp_path):
        path = _write(tmp_path, "link_id,tail,head,length_km,road_type,pace\na,X,Y,1,,fast\n")
        with pytest.raises(DataError):
            load_network(path)

    def test_missing_column_rejected(self, tmp_path):
        path = _write(tmp_path, "link_id,tail,length_km\na,X,1\n")
        with pytest.raises(DataError):
            load_network(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_network(tmp_path / "nope.csv")

    def test_json_records(self, tmp_path):
        path = _write(tmp_path, '[{"link_id": "a", "tail": "X", "head": "Y", "length_km": 2, '
                                '"road_type": "", "pace": 1.2}]', name="links.json")
        net = load_network(path, format="json")
        assert net.n_links == 1
        assert net.attribute("pace")[0] == pytest.approx(1.2)

    def test_written_grid_loads_back(self, tmp_path, grid):
        net = load_network(write_links_csv(grid, tmp_path / "links.csv"), model=load_model_spec(
            DATA_DIR / "models" / "model_a.toml"))
        assert net.feature_names == ["pace"]
        assert net.link_ids == grid.link_ids
        np.testing.assert_allclose(net.lengths, grid.lengths, rtol=1e-9)
        np.testing.assert_allclose(net.z, grid.z, rtol=1e-9)


class TestNetworkConstruction:

    def test_duplicate_link_id(self):
        links = [Link(id="a", tail="X", head="Y", length=1.0), Link(id="a", tail="Y", head="X", length=1.0)]
        with pytest.raises(DataError):
            Network(links)

    def test_ragged_features(self):
        links = [Link(id="a", tail="X", head="Y", length=1.0, features=(1.0,)),
                 Link(id="b", tail="Y", head="X", length=1.0, features=(1.0, 2.0))]
        with pytest.raises(DataError):
            Network(links)

    def test_unknown_node_reference(self):
        with pytest.raises(DataError):
            Network([Link(id="a", tail="X", head="Y", length=1.0)], nodes=["X"])

    def test_arrays_read_only(self, toy):
        with pytest.raises(ValueError):
            toy.lengths[0] = 5.0


class TestIncidence:

    def test_signs_and_columns(self, toy):
        a = incidence_matrix(toy).toarray()
        assert a.shape == (3, 6)
        np.testing.assert_array_equal(a.sum(axis=0), np.zeros(6))
        np.testing.assert_array_equal(np.count_nonzero(a, axis=0), np.full(6, 2))
        # 링크 2: O → M
        assert a[toy.node_id("O"), 1] == -1
        assert a[toy.node_id("M"), 1] == 1

    def test_demand_vector(self, toy, od_toy):
        b = demand_vector(toy, od_toy)
        assert b.sum() == 0
        assert b[toy.node_id("O")] == -1
        assert b[toy.node_id("D")] == 1

    def test_same_origin_destination_rejected(self):
        with pytest.raises(ValueError):
            DemandSpec(origin="O", destination="O")

    def test_unknown_node(self, toy):
        with pytest.raises(DataError):
            demand_vector(toy, DemandSpec(origin="O", destination="Z"))


class TestUtilities:

    def test_toy_rates(self, toy_u):
        np.testing.assert_array_equal(toy_u.values, [-1, -1, -1, -1, -1, -2])

    def test_non_negative_rate_rejected(self, toy):
        with pytest.raises(ModelDomainError):
            link_utilities(toy, [1.0])

    def test_wrong_beta_length(self, toy):
        with pytest.raises(DataError):
            link_utilities(toy, [-1.0, -2.0])

    def test_shifted(self, toy_u):
        delta = np.zeros(6)
        delta[3] = -0.1
        assert toy_u.shifted(delta).values[3] == pytest.approx(-1.1)
        with pytest.raises(ModelDomainError):
            toy_u.shifted(np.full(6, 3.0))


class TestSplitLink:

    def test_halves(self, toy):
        net = split_link(toy, "1", 0.5)
        assert net.n_nodes == 4
        assert net.n_links == 7
        assert net.link("1/1").length == pytest.approx(1.0)
        assert net.link("1/2").length == pytest.approx(1.0)
        assert net.link("1/1").head == net.link("1/2").tail
        assert net.link("1/1").features == toy.link("1").features

    def test_travel_time_is_split(self, grid):
        link_id = grid.link_ids[0]
        net = split_link(grid, link_id, 0.25)
        total = grid.attribute("travel_time")[0]
        times = net.attribute("travel_time")
        assert times[net.link_index[f"{link_id}/1"]] == pytest.approx(0.25 * total)
        assert times[net.link_index[f"{link_id}/2"]] == pytest.approx(0.75 * total)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_bad_fraction(self, toy, fraction):
        with pytest.raises(DataError):
            split_link(toy, "1", fraction)

    def test_unknown_link(self, toy):
        with pytest.raises(DataError):
            split_link(toy, "99", 0.5)


class TestFeatures:

    def test_outlink_feature(self):
        links = [
            Link(id="wx", tail="W", head="X", length=1.0),
            Link(id="xy", tail="X", head="Y", length=2.0),
            Link(id="y1", tail="Y", head="Z1", length=1.0),
            Link(id="y2", tail="Y", head="Z2", length=1.0),
            Link(id="y3", tail="Y", head="Z3", length=1.0),
        ]
        values = outlink_feature(Network(links))
        # X 는 출링크 1개, Y 는 3개
        np.testing.assert_allclose(values, [0.0, 0.5, 0.0, 0.0, 0.0])

    def test_model_b(self, grid):
        net = build_features(grid, load_model_spec(DATA_DIR / "models" / "model_b.toml"))
        assert net.feature_names == ["pace", "outlinks"]
        np.testing.assert_allclose(net.z[:, 1], outlink_feature(grid))

    def test_model_c_interactions_sum_to_pace(self, grid):
        net = build_features(grid, load_model_spec(DATA_DIR / "models" / "model_c.toml"))
        interaction = [k for k, name in enumerate(net.feature_names) if name.startswith("pace:")]
        assert len(interaction) == len(set(grid.road_types))
        np.testing.assert_allclose(net.z[:, interaction].sum(axis=1), grid.attribute("pace"))

    def test_beta_length_mismatch(self, grid):
        spec = load_model_spec(DATA_DIR / "models" / "model_b.toml").model_copy(update={"beta": [-1.0]})
        with pytest.raises(DataError):
            build_features(grid, spec)

    def test_missing_model_file(self, tmp_path):
        with pytest.raises(DataError):
            load_model_spec(tmp_path / "model.toml")


class TestGrid:

    def test_link_count(self):
        net = make_grid_network(3, 4, seed=0)
        assert net.n_nodes == 12
        assert net.n_links == 2 * (3 * 3 + 4 * 2)

    def test_deterministic(self):
        a, b = make_grid_network(4, 4, seed=5), make_grid_network(4, 4, seed=5)
        np.testing.assert_array_equal(a.lengths, b.lengths)
        np.testing.assert_array_equal(a.z, b.z)

    def test_two_way_links_share_attributes(self, grid):
        np.testing.assert_array_equal(grid.lengths[0::2], grid.lengths[1::2])
        np.testing.assert_array_equal(grid.tails[0::2], grid.heads[1::2])

    def test_too_small(self):
        with pytest.raises(DataError):
            make_grid_network(1, 5)


def test_toy_geometry_variant():
    net = toy_network(l2=0.5, l34=1.5)
    np.testing.assert_allclose(net.lengths, [2.0, 0.5, 1.5, 1.5, 0.5, 2.0])


def test_load_demand(tmp_path):
    demands = load_demand(DATA_DIR / "toy" / "demand.csv")
    assert demands == [(DemandSpec(origin="O", destination="D"), 10)]

    path = _write(tmp_path, "origin,destination,trip_count\nO,D,-1\n", name="demand.csv")
    with pytest.raises(DataError):
        load_demand(path)


def test_to_frame_columns(toy):
    frame = toy.to_frame()
    assert list(frame.columns[:5]) == ["link_id", "tail", "head", "length_km", "road_type"]
    assert "unit_cost" in frame.columns
    assert isinstance(frame, pd.DataFrame)
