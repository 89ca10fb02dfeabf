import json

import numpy as np
import pytest

from geoatt.costmodel import (
    CostReport,
    LayerConfig,
    cost_expatt,
    cost_kq,
    cost_pos_encoding,
    layers_for,
    measure_counts,
)
from geoatt.expatt import ExpAttLayer, KqAttnLayer
from geoatt.grid_kernels import GridShape
from geoatt.numcore import make_rng


def cfg(h=1, w=1, c=1, n=1, d=1, dv=1, learnable=True):
    return LayerConfig(h, w, c, n, d, dv, learnable)


def test_kq_closed_form():
    assert cost_kq(cfg(c=64, n=8, d=8, dv=8)).params == 8192
    assert KqAttnLayer.create(64, 8, 8, 1).w_k.size * 2 == 8192
    r = cost_kq(cfg())
    assert (r.params, r.mem_elems) == (2, 1)


def test_pos_encoding_closed_form():
    assert cost_pos_encoding(cfg(d=1)).params == 2
    assert cost_pos_encoding(cfg(h=14, w=14, d=40)).params == 2 * 27 * 40 == 2160
    assert cost_pos_encoding(cfg(h=2, w=2, d=3)).mem_elems == 12


def test_expatt_closed_form():
    assert cost_expatt(cfg(h=3, w=3, learnable=False)) == CostReport(0, 81, 0)
    assert cost_expatt(cfg(h=3, w=3)).params == 1
    assert cost_expatt(cfg(h=3, w=3)).mem_elems == 81


def test_report_json_and_validation():
    assert json.loads(json.dumps(CostReport(1, 2, 3).to_json())) == {"params": 1, "mem_elems": 2, "flops": 3}
    with pytest.raises(ValueError):
        CostReport(-1, 0, 0)
    with pytest.raises(ValueError):
        LayerConfig(2, 2, 2, 3, 1, 4)


def test_measure_expatt_total_params():
    layer = ExpAttLayer.create(6, 4, 2, "gaussian")
    assert measure_counts(layer, GridShape(2, 2), scope="total").params == 6 * 4 + 16 + 1
    assert measure_counts(ExpAttLayer.create(6, 4, 2, "linear"), GridShape(2, 2), scope="total").params == 40


def random_configs(n, seed):
    rng = make_rng(seed)
    for _ in range(n):
        heads = int(rng.integers(1, 5))
        yield LayerConfig(int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 9)),
                          heads, int(rng.integers(1, 5)), heads * int(rng.integers(1, 3)),
                          bool(rng.integers(0, 2)))


@pytest.mark.parametrize("config", list(random_configs(12, 0)), ids=str)
def test_measured_matches_closed_form(config):
    exp_layer, kq_layer = layers_for(config, seed=1)
    shape = GridShape(config.h, config.w)
    assert measure_counts(kq_layer, shape) == cost_kq(config)
    assert measure_counts(exp_layer, shape) == cost_expatt(config)


def test_map_memory_scaling_in_heads():
    shape = GridShape(3, 4)
    exp_mem, kq_mem = [], []
    for n in (1, 2, 4):
        exp_layer, kq_layer = layers_for(LayerConfig(3, 4, 4, n, 2, 4), seed=n)
        exp_mem.append(measure_counts(exp_layer, shape).mem_elems)
        kq_mem.append(measure_counts(kq_layer, shape).mem_elems)
    assert exp_mem == [144, 144, 144]
    assert kq_mem == [144, 288, 576]


def test_fixed_kernel_forward_costs_nothing_for_maps():
    layer = ExpAttLayer.create(3, 2, 1, "cosine")
    report = measure_counts(layer, GridShape(4, 4))
    assert (report.params, report.flops) == (0, 0)


def test_expatt_cheaper_than_kq():
    for config in random_configs(20, 3):
        assert cost_expatt(config).flops < cost_kq(config).flops
        assert cost_expatt(config).params < cost_kq(config).params


def test_unknown_layer_and_scope():
    with pytest.raises(TypeError):
        measure_counts(object(), GridShape(1, 1))
    with pytest.raises(ValueError):
        measure_counts(ExpAttLayer.create(1, 1), GridShape(1, 1), scope="all")
