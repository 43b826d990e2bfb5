"""
Genome service for the neatpad workbench.
Handles tensorized node / connection / attribute edits and the evolutionary
operators built from them: mutation, crossover and compatibility distance.

Every function takes and returns immutable GenomeTensors; edits copy the
affected tensor, write the new row (or NaN) in place, and wrap it again.
"""

import logging
import threading
from typing import Dict, List, Tuple

import numpy as np

from models.data_models import DistanceConfig, MutationConfig
from models.errors import (
    AttrOutOfRange,
    DanglingEndpoint,
    DuplicateConn,
    DuplicateKey,
    GenomeFull,
    KeyNotFound,
    ProtectedNode,
    ShapeMismatch,
)
from services.encoding_service import (
    ACTIVATION,
    AGGREGATION,
    BIAS,
    ENABLED,
    IN_KEY,
    KEY,
    OUT_KEY,
    RESPONSE,
    WEIGHT,
    AttributeSchema,
    GenomeTensors,
    PopulationTensors,
    enabled_edges,
)
from utils.rng import RngKey

DEFAULT_SCHEMA = AttributeSchema()

# Population chunk for vectorized distance; bounds the (P, R, R) match tensor
_DISTANCE_CHUNK = 512


class InnovationTable:
    """
    Historical markers for node splits.

    Within one generation every genome splitting the same (in, out) pair gets
    the same new node key. Access is serialized by a lock.
    """

    def __init__(self, next_key: int):
        self._lock = threading.Lock()
        self._splits: Dict[Tuple[int, int], int] = {}
        self.next_key = int(next_key)

    @classmethod
    def for_population(cls, pop: PopulationTensors) -> "InnovationTable":
        """Table whose next key is above every key already in use."""
        keys = pop.nodes[..., KEY]
        highest = np.nanmax(keys) if np.isfinite(keys).any() else -1
        return cls(int(highest) + 1)

    def node_key(self, in_key: int, out_key: int) -> int:
        with self._lock:
            pair = (int(in_key), int(out_key))
            if pair not in self._splits:
                self._splits[pair] = self.next_key
                self.next_key += 1
                logging.debug(f"Innovation {pair} -> node {self._splits[pair]}")
            return self._splits[pair]

    def new_generation(self) -> None:
        with self._lock:
            self._splits.clear()

    def assignments(self) -> Dict[Tuple[int, int], int]:
        with self._lock:
            return dict(self._splits)


# Primitive edits

def _first_free(column: np.ndarray) -> int:
    free = np.flatnonzero(np.isnan(column))
    return int(free[0]) if free.size else -1


def add_node(g: GenomeTensors, row: np.ndarray) -> GenomeTensors:
    """
    Write a node row into the first all-NaN node row.

    Raises:
        DuplicateKey: If the key already exists
        GenomeFull: If no NaN row is left
    """
    row = np.asarray(row, dtype=np.float64)
    key = int(row[KEY])
    if g.node_row(key) is not None:
        raise DuplicateKey(f"node {key} already exists")
    index = _first_free(g.nodes[:, KEY])
    if index < 0:
        raise GenomeFull(f"no free node row (max_nodes={g.max_nodes})")
    nodes = g.nodes.copy()
    nodes[index] = row
    return g.replace(nodes=nodes)


def remove_node(g: GenomeTensors, key: int) -> GenomeTensors:
    """
    Blank a hidden node's row and every connection touching it.

    Raises:
        KeyNotFound: If the key is absent
        ProtectedNode: If the key is an input or output node
    """
    index = g.node_row(key)
    if index is None:
        raise KeyNotFound(f"node {key} not found")
    if g.is_protected(key):
        raise ProtectedNode(f"node {key} is an input/output node")
    nodes = g.nodes.copy()
    nodes[index] = np.nan
    conns = g.conns.copy()
    touching = (conns[:, IN_KEY] == key) | (conns[:, OUT_KEY] == key)
    conns[touching] = np.nan
    return g.replace(nodes=nodes, conns=conns)


def add_conn(g: GenomeTensors, row: np.ndarray) -> GenomeTensors:
    """
    Write a connection row into the first all-NaN connection row.

    Raises:
        DanglingEndpoint: If either endpoint key is absent
        DuplicateConn: If the (in, out) pair exists
        GenomeFull: If no NaN row is left
    """
    row = np.asarray(row, dtype=np.float64)
    in_key, out_key = int(row[IN_KEY]), int(row[OUT_KEY])
    for endpoint in (in_key, out_key):
        if g.node_row(endpoint) is None:
            raise DanglingEndpoint(f"connection {in_key}→{out_key} references missing node {endpoint}")
    if g.conn_row(in_key, out_key) is not None:
        raise DuplicateConn(f"connection {in_key}→{out_key} already exists")
    index = _first_free(g.conns[:, IN_KEY])
    if index < 0:
        raise GenomeFull(f"no free connection row (max_conns={g.max_conns})")
    conns = g.conns.copy()
    conns[index] = row
    return g.replace(conns=conns)


def remove_conn(g: GenomeTensors, in_key: int, out_key: int) -> GenomeTensors:
    index = g.conn_row(in_key, out_key)
    if index is None:
        raise KeyNotFound(f"connection {in_key}→{out_key} not found")
    conns = g.conns.copy()
    conns[index] = np.nan
    return g.replace(conns=conns)


def set_node_attr(g: GenomeTensors, key: int, attr_index: int, value: float) -> GenomeTensors:
    """Set attribute `attr_index` of node `key`, i.e. cell ``[row][1 + attr_index]``."""
    index = g.node_row(key)
    if index is None:
        raise KeyNotFound(f"node {key} not found")
    if not 0 <= attr_index < g.nodes.shape[1] - 1:
        raise AttrOutOfRange(f"node attribute {attr_index} out of range")
    nodes = g.nodes.copy()
    nodes[index, 1 + attr_index] = value
    return g.replace(nodes=nodes)


def set_conn_attr(g: GenomeTensors, in_key: int, out_key: int, attr_index: int, value: float) -> GenomeTensors:
    """Set attribute `attr_index` of a connection, i.e. cell ``[row][3 + attr_index]``."""
    index = g.conn_row(in_key, out_key)
    if index is None:
        raise KeyNotFound(f"connection {in_key}→{out_key} not found")
    if not 0 <= attr_index < g.conns.shape[1] - 3:
        raise AttrOutOfRange(f"connection attribute {attr_index} out of range")
    conns = g.conns.copy()
    conns[index, 3 + attr_index] = value
    return g.replace(conns=conns)


# Mutation

def new_node_row(key: int, rng: np.random.Generator, cfg: MutationConfig, schema: AttributeSchema,
                 activation: str = None) -> np.ndarray:
    """A fresh node row with attributes drawn from the init distributions."""
    return np.array([
        float(key),
        cfg.bias_init_mean + rng.normal() * cfg.bias_init_std,
        cfg.response_init_mean + rng.normal() * cfg.response_init_std,
        float(schema.aggregation_id(cfg.aggregation_default)),
        float(schema.activation_id(activation or cfg.activation_default)),
    ])


def _mutate_add_node(g, rng, cfg, innovations, schema):
    conn_mask = g.conn_mask()
    candidates = np.flatnonzero(conn_mask & (g.conns[:, ENABLED] == 1.0))
    if candidates.size == 0:
        return g
    row = int(candidates[rng.integers(candidates.size)])
    in_key, out_key = int(g.conns[row, IN_KEY]), int(g.conns[row, OUT_KEY])
    weight = g.conns[row, WEIGHT]
    node_row = new_node_row(innovations.node_key(in_key, out_key), rng, cfg, schema)

    free_nodes = np.isnan(g.nodes[:, KEY]).sum()
    free_conns = (~conn_mask).sum()
    if free_nodes < 1 or free_conns < 2 or g.node_row(int(node_row[KEY])) is not None:
        logging.debug(f"Node split of {in_key}→{out_key} skipped (full or key in use)")
        return g

    conns = g.conns.copy()
    conns[row, ENABLED] = 0.0
    g = add_node(g.replace(conns=conns), node_row)
    new_key = int(node_row[KEY])
    g = add_conn(g, np.array([in_key, new_key, 1.0, 1.0]))
    return add_conn(g, np.array([new_key, out_key, 1.0, weight]))


def _mutate_delete_node(g, rng):
    hidden = [int(k) for k in g.node_keys() if not g.is_protected(int(k))]
    if not hidden:
        return g
    return remove_node(g, hidden[rng.integers(len(hidden))])


def legal_new_conns(g: GenomeTensors) -> List[Tuple[int, int]]:
    """
    Absent (source, target) pairs whose addition keeps the enabled graph acyclic.

    Sources are input or hidden nodes, targets are hidden or output nodes.
    """
    keys = sorted(int(k) for k in g.node_keys())
    successors: Dict[int, List[int]] = {k: [] for k in keys}
    for a, b in enabled_edges(g):
        successors[a].append(b)

    reach: Dict[int, set] = {}
    for start in keys:
        seen, stack = set(), [start]
        while stack:
            for nxt in successors[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        reach[start] = seen

    mask = g.conn_mask()
    existing = {(int(a), int(b)) for a, b in g.conns[mask][:, [IN_KEY, OUT_KEY]]}
    outputs = set(g.output_keys)
    inputs = set(g.input_keys)
    pairs = []
    for u in keys:
        if u in outputs:
            continue
        for v in keys:
            if v in inputs or u == v or (u, v) in existing or u in reach[v]:
                continue
            pairs.append((u, v))
    return pairs


def _mutate_add_conn(g, rng, cfg):
    if not np.isnan(g.conns[:, IN_KEY]).any():
        return g
    pairs = legal_new_conns(g)
    if not pairs:
        return g
    in_key, out_key = pairs[rng.integers(len(pairs))]
    weight = cfg.weight_init_mean + rng.normal() * cfg.weight_init_std
    return add_conn(g, np.array([in_key, out_key, 1.0, weight]))


def _mutate_delete_conn(g, rng):
    rows = np.flatnonzero(g.conn_mask())
    if rows.size == 0:
        return g
    row = int(rows[rng.integers(rows.size)])
    return remove_conn(g, int(g.conns[row, IN_KEY]), int(g.conns[row, OUT_KEY]))


def _mutate_attribute(values, mask, rng, init_mean, init_std, power, rate, replace_rate):
    n = values.shape[0]
    roll = rng.random(n)
    perturbed = values + rng.normal(size=n) * power
    replaced = init_mean + rng.normal(size=n) * init_std
    mutated = np.where(roll < rate, perturbed, np.where(roll < rate + replace_rate, replaced, values))
    return np.where(mask, mutated, values)


def _mutate_choice(values, mask, rng, options, replace_rate):
    n = values.shape[0]
    roll = rng.random(n)
    picks = np.asarray(options, dtype=np.float64)[rng.integers(len(options), size=n)]
    return np.where(mask & (roll < replace_rate), picks, values)


def _mutate_values(g, rng, cfg, schema):
    nodes = g.nodes.copy()
    node_mask = g.node_mask()
    keys = np.where(node_mask, g.nodes[:, KEY], -1)
    non_input = node_mask & (keys >= g.num_inputs)
    hidden = node_mask & (keys >= g.num_inputs + g.num_outputs)

    nodes[:, BIAS] = _mutate_attribute(
        nodes[:, BIAS], non_input, rng, cfg.bias_init_mean, cfg.bias_init_std,
        cfg.bias_mutate_power, cfg.bias_mutate_rate, cfg.bias_replace_rate)
    nodes[:, RESPONSE] = _mutate_attribute(
        nodes[:, RESPONSE], non_input, rng, cfg.response_init_mean, cfg.response_init_std,
        cfg.response_mutate_power, cfg.response_mutate_rate, cfg.response_replace_rate)
    nodes[:, ACTIVATION] = _mutate_choice(
        nodes[:, ACTIVATION], hidden, rng,
        [schema.activation_id(n) for n in cfg.activation_options], cfg.activation_replace_rate)
    nodes[:, AGGREGATION] = _mutate_choice(
        nodes[:, AGGREGATION], non_input, rng,
        [schema.aggregation_id(n) for n in cfg.aggregation_options], cfg.aggregation_replace_rate)

    conns = g.conns.copy()
    conns[:, WEIGHT] = _mutate_attribute(
        conns[:, WEIGHT], g.conn_mask(), rng, cfg.weight_init_mean, cfg.weight_init_std,
        cfg.weight_mutate_power, cfg.weight_mutate_rate, cfg.weight_replace_rate)
    return g.replace(nodes=nodes, conns=conns)


def mutate(
    g: GenomeTensors,
    key: RngKey,
    cfg: MutationConfig,
    innovations: InnovationTable,
    schema: AttributeSchema = DEFAULT_SCHEMA,
) -> GenomeTensors:
    """
    Apply structural then attribute mutation.

    Structural steps (node split, node delete, connection add, connection
    delete) each fire with their probability and silently do nothing when the
    tensor is full or no candidate exists. Attributes of non-input genes are
    then perturbed or redrawn per their mutate / replace rates.

    Args:
        g: Parent genome
        key: Random key for this genome's mutation stream
        cfg: Mutation probabilities and attribute settings
        innovations: Shared node-split markers of the current generation
        schema: Registries for activation / aggregation ids

    Returns:
        The mutated genome
    """
    rng = key.generator()
    draws = rng.random(4)
    if draws[0] < cfg.node_add:
        g = _mutate_add_node(g, rng, cfg, innovations, schema)
    if draws[1] < cfg.node_delete:
        g = _mutate_delete_node(g, rng)
    if draws[2] < cfg.conn_add:
        g = _mutate_add_conn(g, rng, cfg)
    if draws[3] < cfg.conn_delete:
        g = _mutate_delete_conn(g, rng)
    return _mutate_values(g, rng, cfg, schema)


# Crossover

def _check_compatible(a: GenomeTensors, b: GenomeTensors) -> None:
    if a.nodes.shape != b.nodes.shape or a.conns.shape != b.conns.shape:
        raise ShapeMismatch(
            f"parents have shapes {a.nodes.shape}/{a.conns.shape} and {b.nodes.shape}/{b.conns.shape}")


def crossover(fit_parent: GenomeTensors, other: GenomeTensors, key: RngKey) -> GenomeTensors:
    """
    Child with the fitter parent's topology.

    Genes whose marker (node key, or connection endpoint pair) also exists in
    `other` take each attribute from either parent by a fair coin; the enabled
    flag always comes from `fit_parent`.
    """
    _check_compatible(fit_parent, other)
    rng = key.generator()

    nodes = fit_parent.nodes.copy()
    match = fit_parent.nodes[:, KEY][:, None] == other.nodes[:, KEY][None, :]
    has = match.any(axis=1)
    partner = other.nodes[match.argmax(axis=1)]
    coin = rng.random(nodes[:, 1:].shape) < 0.5
    nodes[:, 1:] = np.where(has[:, None] & coin, partner[:, 1:], nodes[:, 1:])

    conns = fit_parent.conns.copy()
    match = (
        (fit_parent.conns[:, IN_KEY][:, None] == other.conns[:, IN_KEY][None, :])
        & (fit_parent.conns[:, OUT_KEY][:, None] == other.conns[:, OUT_KEY][None, :])
    )
    has = match.any(axis=1)
    partner = other.conns[match.argmax(axis=1)]
    coin = rng.random(conns[:, 3:].shape) < 0.5
    conns[:, 3:] = np.where(has[:, None] & coin, partner[:, 3:], conns[:, 3:])

    return fit_parent.replace(nodes=nodes, conns=conns)


# Compatibility distance

_NODE_KEYS = (KEY,)
_NODE_ATTRS = (BIAS, RESPONSE, AGGREGATION, ACTIVATION)
_NODE_CATEGORICAL = np.array([False, False, True, True])
_CONN_KEYS = (IN_KEY, OUT_KEY)
_CONN_ATTRS = (WEIGHT,)
_CONN_CATEGORICAL = np.array([False])


def _class_distance(rows, ref, key_cols, attr_cols, categorical, cfg: DistanceConfig) -> np.ndarray:
    """Distance of every genome in `rows` (P, R, W) to the reference rows (R2, W) for one gene class."""
    valid = ~np.isnan(rows[..., key_cols[0]])
    ref_valid = ~np.isnan(ref[:, key_cols[0]])

    match = np.ones(valid.shape + ref_valid.shape, dtype=bool)
    for col in key_cols:
        match &= rows[..., col][..., None] == ref[:, col][None, None, :]
    matched = match.any(axis=-1)
    partner = ref[match.argmax(axis=-1)]

    n_match = matched.sum(axis=-1)
    count = valid.sum(axis=-1)
    ref_count = ref_valid.sum()
    disjoint = count + ref_count - 2 * n_match
    norm = np.maximum(count, ref_count)
    norm = np.where(norm == 0, 1, norm)

    mine = rows[..., list(attr_cols)]
    theirs = partner[..., list(attr_cols)]
    diff = np.where(categorical, (mine != theirs).astype(np.float64), np.abs(mine - theirs))
    per_gene = np.where(matched, diff.mean(axis=-1), 0.0)
    homologous = per_gene.sum(axis=-1) / np.maximum(n_match, 1)

    return cfg.compatibility_disjoint * disjoint / norm + cfg.compatibility_homologous * homologous


def batch_distance(pop: PopulationTensors, g: GenomeTensors, cfg: DistanceConfig) -> np.ndarray:
    """Distance from every genome of `pop` to `g`, shape (P,)."""
    if pop.nodes.shape[2] != g.nodes.shape[1] or pop.conns.shape[2] != g.conns.shape[1]:
        raise ShapeMismatch("population and genome use different attribute schemas")
    out = np.empty(len(pop))
    for start in range(0, len(pop), _DISTANCE_CHUNK):
        stop = start + _DISTANCE_CHUNK
        out[start:stop] = (
            _class_distance(pop.nodes[start:stop], g.nodes, _NODE_KEYS, _NODE_ATTRS, _NODE_CATEGORICAL, cfg)
            + _class_distance(pop.conns[start:stop], g.conns, _CONN_KEYS, _CONN_ATTRS, _CONN_CATEGORICAL, cfg)
        )
    return out


def distance(g1: GenomeTensors, g2: GenomeTensors, cfg: DistanceConfig) -> float:
    """
    Compatibility distance between two genomes.

    For nodes and connections separately: disjoint coefficient times the
    non-matching gene count over the larger genome's gene count, plus the
    homologous coefficient times the mean (over matching genes) of the mean
    absolute attribute difference. Function ids count 1 when they differ.
    """
    if g1.nodes.shape[1] != g2.nodes.shape[1] or g1.conns.shape[1] != g2.conns.shape[1]:
        raise ShapeMismatch("genomes use different attribute schemas")
    return float(
        _class_distance(g1.nodes[None], g2.nodes, _NODE_KEYS, _NODE_ATTRS, _NODE_CATEGORICAL, cfg)[0]
        + _class_distance(g1.conns[None], g2.conns, _CONN_KEYS, _CONN_ATTRS, _CONN_CATEGORICAL, cfg)[0]
    )
