"""Tests for the padded tensor encoding of genomes and populations."""

import numpy as np
import pytest

from builders import SCHEMA, make_genome, node_row, random_genome
from models.data_models import ConnGene, GenomeLimits, NodeGene
from models.errors import CorruptRow, GenomeFull, ShapeMismatch, UnknownFunction
from services.encoding_service import (
    AttributeSchema,
    GenomeTensors,
    concat_population,
    decode_genome,
    encode_conn,
    encode_node,
    genome_from_genes,
    pad_genome,
    validate_genome,
)


def test_schema_row_lengths():
    assert SCHEMA.node_row_length == 1 + SCHEMA.node_attr_count == 5
    assert SCHEMA.conn_row_length == 3 + SCHEMA.conn_attr_count == 4


def test_schema_rejects_unregistered_function():
    with pytest.raises(UnknownFunction):
        AttributeSchema(activations=("identity", "softplus"))


@pytest.mark.parametrize("record, schema, expected", [
    (NodeGene(key=3, bias=0.5, response=1.0, aggregation="sum", activation="tanh"),
     AttributeSchema(activations=("tanh",), aggregations=("sum",)), [3.0, 0.5, 1.0, 0.0, 0.0]),
    (NodeGene(key=0, bias=0.0, response=1.0, aggregation="sum", activation="identity"),
     AttributeSchema(activations=("identity", "tanh"), aggregations=("sum",)), [0.0, 0.0, 1.0, 0.0, 0.0]),
])
def test_encode_node(record, schema, expected):
    assert encode_node(record, schema).tolist() == expected


def test_encode_node_unknown_activation():
    record = NodeGene(key=1, bias=0.1, response=1.0, aggregation="sum", activation="relu")
    with pytest.raises(UnknownFunction):
        encode_node(record, AttributeSchema(activations=("identity", "tanh"), aggregations=("sum",)))


@pytest.mark.parametrize("record, expected", [
    (ConnGene(in_key=0, out_key=2, enabled=True, weight=0.7), [0.0, 2.0, 1.0, 0.7]),
    (ConnGene(in_key=2, out_key=1, enabled=False, weight=-0.3), [2.0, 1.0, 0.0, -0.3]),
    (ConnGene(in_key=5, out_key=5, enabled=True, weight=1.0), [5.0, 5.0, 1.0, 1.0]),
])
def test_encode_conn(record, expected):
    assert encode_conn(record).tolist() == expected


def test_pad_genome_fills_tail_with_nan():
    nodes = [node_row(k) for k in range(3)]
    g = pad_genome(nodes, [], GenomeLimits(max_nodes=5, max_conns=4), 2, 1, SCHEMA)
    assert not np.isnan(g.nodes[:3]).any()
    assert np.isnan(g.nodes[3:]).all()
    assert g.conns.shape == (4, 4)
    assert np.isnan(g.conns).all()


def test_pad_genome_too_many_nodes():
    nodes = [node_row(k) for k in range(6)]
    with pytest.raises(GenomeFull):
        pad_genome(nodes, [], GenomeLimits(max_nodes=5, max_conns=4), 2, 1, SCHEMA)


def test_genome_tensors_are_read_only():
    g = make_genome(1, 1, conns=[(0, 1, 1.0)])
    with pytest.raises(ValueError):
        g.nodes[0, 1] = 5.0


def test_concat_population_shapes():
    g = make_genome(2, 1, max_nodes=5, max_conns=4)
    pop = concat_population([g, g])
    assert pop.nodes.shape == (2, 5, 5)
    assert pop.conns.shape == (2, 4, 4)


def test_concat_single_genome_is_identity():
    g = make_genome(2, 1, conns=[(0, 2, 0.5)], max_nodes=5, max_conns=4)
    pop = concat_population([g])
    assert len(pop) == 1
    assert pop.genome(0).equals(g)


def test_concat_rejects_mixed_limits():
    with pytest.raises(ShapeMismatch):
        concat_population([make_genome(2, 1, max_conns=4), make_genome(2, 1, max_conns=8)])


def test_decode_empty_conns():
    nodes, conns = decode_genome(make_genome(2, 1), SCHEMA)
    assert [n.key for n in nodes] == [0, 1, 2]
    assert conns == []


def test_decode_round_trips_records():
    nodes = [
        NodeGene(key=0, bias=0.0, response=1.0, aggregation="sum", activation="identity"),
        NodeGene(key=1, bias=-0.25, response=1.5, aggregation="max", activation="tanh"),
        NodeGene(key=4, bias=0.3, response=1.0, aggregation="product", activation="relu"),
    ]
    conns = [
        ConnGene(in_key=0, out_key=4, enabled=True, weight=0.7),
        ConnGene(in_key=4, out_key=1, enabled=False, weight=-1.2),
    ]
    g = genome_from_genes(nodes, conns, GenomeLimits(max_nodes=6, max_conns=5), 1, 1, SCHEMA)
    assert decode_genome(g, SCHEMA) == (nodes, conns)


def test_decode_partially_nan_row():
    g = make_genome(1, 1, max_nodes=4)
    nodes = g.nodes.copy()
    nodes[2] = [3.0, np.nan, 1.0, 0, 0]
    with pytest.raises(CorruptRow):
        decode_genome(g.replace(nodes=nodes), SCHEMA)


def test_decode_fractional_key():
    g = make_genome(1, 1, max_nodes=4)
    nodes = g.nodes.copy()
    nodes[2] = [2.5, 0.0, 1.0, 0, 0]
    with pytest.raises(CorruptRow):
        decode_genome(g.replace(nodes=nodes), SCHEMA)


def test_equals_respects_nan_rows():
    a = make_genome(2, 1, conns=[(0, 2, 0.5)])
    b = make_genome(2, 1, conns=[(0, 2, 0.5)])
    assert a.equals(b)
    assert not a.equals(make_genome(2, 1, conns=[(0, 2, 0.25)]))


class TestValidateGenome:

    def test_valid(self):
        g = make_genome(2, 1, hidden=[3], conns=[(0, 3, 1.0), (1, 3, 1.0), (3, 2, 1.0)])
        assert validate_genome(g, SCHEMA) == []

    def test_random_genomes_are_valid(self, rng):
        for _ in range(50):
            assert validate_genome(random_genome(rng), SCHEMA) == []

    def test_cycle(self):
        g = make_genome(1, 1, hidden=[2, 3], conns=[(0, 2, 1.0), (2, 3, 1.0), (3, 2, 1.0), (3, 1, 1.0)])
        problems = validate_genome(g, SCHEMA)
        assert len(problems) == 1
        assert problems[0].startswith("cycle")

    def test_disabled_edge_does_not_close_a_cycle(self):
        g = make_genome(1, 1, hidden=[2, 3], conns=[(0, 2, 1.0), (2, 3, 1.0), (3, 2, 1.0, False), (3, 1, 1.0)])
        assert validate_genome(g, SCHEMA) == []

    def test_dangling(self):
        g = make_genome(1, 1, conns=[(0, 7, 1.0)])
        assert any("dangling" in p for p in validate_genome(g, SCHEMA))

    def test_missing_output(self):
        g = GenomeTensors(make_genome(1, 1).nodes[:1], make_genome(1, 1).conns, 1, 1)
        assert "missing input/output node 1" in validate_genome(g, SCHEMA)

    def test_duplicate_pair(self):
        g = make_genome(1, 1, conns=[(0, 1, 1.0), (0, 1, 2.0)])
        assert "duplicate connection pairs" in validate_genome(g, SCHEMA)

    def test_unknown_function_id(self):
        g = make_genome(1, 1)
        nodes = g.nodes.copy()
        nodes[1, 4] = 42
        assert validate_genome(g.replace(nodes=nodes), SCHEMA)
