import json

import numpy as np
import pytest

from microgrid_decomp.instance import (ConfigError, generate_instance, instance_from_dict, load_instance,
                                       save_instance, tiny_lattice_instance)


def test_round_trip(tmp_path):
    inst = generate_instance(6, 3, T=8, atoms=4)
    save_instance(inst, tmp_path / "i.json")
    back = load_instance(tmp_path / "i.json")
    assert back.n_nodes == 6 and back.n_arcs == inst.n_arcs and back.horizon == 8
    np.testing.assert_array_equal(back.noise.d_el, inst.noise.d_el)
    np.testing.assert_array_equal(back.tariff, inst.tariff)
    assert back.to_dict() == inst.to_dict()


def test_generated_sizes():
    assert generate_instance(12, 0, T=4, atoms=2).n_arcs == 16


def test_every_problem_reported_at_once():
    with pytest.raises(ConfigError) as e:
        instance_from_dict({"topology": {"generate": {"n_nodes": 3}}, "nodes": {}, "colour": 1, "speed": 2})
    assert {"colour", "speed"} <= set(e.value.keys)


def test_bad_node_key_and_missing_noise():
    doc = {"topology": {"nodes": [1, 2], "arcs": [[1, 2]]}, "nodes": [{"h_max": 2.0}, {"volume": 1}],
           "tariff": [0.1]}
    with pytest.raises(ConfigError) as e:
        instance_from_dict(doc)
    assert "nodes[1].volume" in e.value.keys and "noise" in e.value.keys


def test_invalid_json(tmp_path):
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_instance(tmp_path / "x.json")


def test_synthetic_document():
    doc = {"topology": {"generate": {"n_nodes": 3, "seed": 1}}, "nodes": {}, "horizon": 4, "delta_t": 1.0,
           "tariff": {"day": 0.2, "night": 0.1}, "noise": {"synthetic": {"atoms": 3, "seed": 2}}}
    inst = instance_from_dict(doc)
    assert inst.horizon == 4 and inst.noise.n_atoms == 3
    assert json.loads(json.dumps(inst.to_dict()))["horizon"] == 4


def test_lattice_refinement_keeps_original_grid():
    a = tiny_lattice_instance(4)
    b = tiny_lattice_instance(4, refine=1)
    assert a.to_dict() == b.to_dict()
    c = tiny_lattice_instance(4, refine=2)
    assert len(c.nodes[0].u_t_grid) == 2 * len(a.nodes[0].u_t_grid) - 1
