"""
Encoding service for the neatpad workbench.
Handles the padded tensor encoding of genomes and populations.

A genome is two float tensors: nodes (max_nodes x 5) with rows
``[key, bias, response, aggregation_id, activation_id]`` and connections
(max_conns x 4) with rows ``[in_key, out_key, enabled, weight]``. Unused rows
are NaN in every field; the key / in_key column is the emptiness test.
"""

import heapq
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from models.data_models import ConnGene, GenomeLimits, NodeGene
from models.errors import (
    CorruptRow,
    GenomeFull,
    ShapeMismatch,
    UnknownFunction,
)

# Node row layout
KEY, BIAS, RESPONSE, AGGREGATION, ACTIVATION = range(5)
NODE_ATTRS = ("bias", "response", "aggregation", "activation")

# Connection row layout
IN_KEY, OUT_KEY, ENABLED, WEIGHT = range(4)
CONN_ATTRS = ("weight",)


def _identity(x):
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


ACTIVATIONS: Dict[str, Callable] = {
    "identity": _identity,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "sin": np.sin,
}

AGGREGATIONS: Dict[str, Callable] = {
    "sum": np.sum,
    "product": np.prod,
    "max": np.max,
    "mean": np.mean,
}


@dataclass(frozen=True)
class AttributeSchema:
    """Attribute layout and function registries shared by every genome of a run."""
    activations: Tuple[str, ...] = ("identity", "tanh", "sigmoid", "relu", "sin")
    aggregations: Tuple[str, ...] = ("sum", "product", "max", "mean")

    def __post_init__(self):
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise UnknownFunction(f"activation '{name}' is not registered")
        for name in self.aggregations:
            if name not in AGGREGATIONS:
                raise UnknownFunction(f"aggregation '{name}' is not registered")

    @property
    def node_attr_count(self) -> int:
        return len(NODE_ATTRS)

    @property
    def conn_attr_count(self) -> int:
        return len(CONN_ATTRS)

    @property
    def node_row_length(self) -> int:
        return 1 + self.node_attr_count

    @property
    def conn_row_length(self) -> int:
        return 3 + self.conn_attr_count

    def activation_id(self, name: str) -> int:
        try:
            return self.activations.index(name)
        except ValueError:
            raise UnknownFunction(f"activation '{name}' is not registered") from None

    def aggregation_id(self, name: str) -> int:
        try:
            return self.aggregations.index(name)
        except ValueError:
            raise UnknownFunction(f"aggregation '{name}' is not registered") from None

    def activation_name(self, index: int) -> str:
        if not 0 <= index < len(self.activations):
            raise UnknownFunction(f"activation id {index} is not registered")
        return self.activations[index]

    def aggregation_name(self, index: int) -> str:
        if not 0 <= index < len(self.aggregations):
            raise UnknownFunction(f"aggregation id {index} is not registered")
        return self.aggregations[index]

    def activation_fn(self, index: int) -> Callable:
        return ACTIVATIONS[self.activation_name(index)]

    def aggregation_fn(self, index: int) -> Callable:
        return AGGREGATIONS[self.aggregation_name(index)]


def _freeze(array, dtype=np.float64) -> np.ndarray:
    array = np.asarray(array, dtype=dtype)
    if array.flags.writeable:
        array = array.copy()
        array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GenomeTensors:
    """One genome as padded node / connection tensors. Arrays are read-only."""
    nodes: np.ndarray
    conns: np.ndarray
    num_inputs: int
    num_outputs: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", _freeze(self.nodes))
        object.__setattr__(self, "conns", _freeze(self.conns))
        if self.nodes.ndim != 2 or self.conns.ndim != 2:
            raise ShapeMismatch("genome tensors must be two-dimensional")

    @property
    def input_keys(self) -> List[int]:
        return list(range(self.num_inputs))

    @property
    def output_keys(self) -> List[int]:
        return list(range(self.num_inputs, self.num_inputs + self.num_outputs))

    @property
    def max_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def max_conns(self) -> int:
        return self.conns.shape[0]

    @property
    def limits(self) -> GenomeLimits:
        return GenomeLimits(max_nodes=self.max_nodes, max_conns=self.max_conns)

    def node_mask(self) -> np.ndarray:
        return ~np.isnan(self.nodes[:, KEY])

    def conn_mask(self) -> np.ndarray:
        return ~np.isnan(self.conns[:, IN_KEY])

    def node_keys(self) -> np.ndarray:
        """Keys of non-empty node rows, in row order."""
        return self.nodes[self.node_mask(), KEY].astype(np.int64)

    def node_row(self, key: int) -> Optional[int]:
        rows = np.flatnonzero(self.nodes[:, KEY] == key)
        return int(rows[0]) if rows.size else None

    def conn_row(self, in_key: int, out_key: int) -> Optional[int]:
        rows = np.flatnonzero((self.conns[:, IN_KEY] == in_key) & (self.conns[:, OUT_KEY] == out_key))
        return int(rows[0]) if rows.size else None

    def is_protected(self, key: int) -> bool:
        return 0 <= key < self.num_inputs + self.num_outputs

    def replace(self, nodes: np.ndarray = None, conns: np.ndarray = None) -> "GenomeTensors":
        """New genome sharing whichever tensor is not replaced."""
        return GenomeTensors(
            nodes=self.nodes if nodes is None else nodes,
            conns=self.conns if conns is None else conns,
            num_inputs=self.num_inputs,
            num_outputs=self.num_outputs,
        )

    def equals(self, other: "GenomeTensors") -> bool:
        """Bit-exact equality, NaN rows included."""
        return (
            self.num_inputs == other.num_inputs
            and self.num_outputs == other.num_outputs
            and self.nodes.shape == other.nodes.shape
            and self.conns.shape == other.conns.shape
            and np.array_equal(self.nodes, other.nodes, equal_nan=True)
            and np.array_equal(self.conns, other.conns, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class PopulationTensors:
    """Stacked genome tensors, leading axis = population slot."""
    nodes: np.ndarray
    conns: np.ndarray
    num_inputs: int
    num_outputs: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", _freeze(self.nodes))
        object.__setattr__(self, "conns", _freeze(self.conns))

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def genome(self, index: int) -> GenomeTensors:
        return GenomeTensors(self.nodes[index], self.conns[index], self.num_inputs, self.num_outputs)

    def genomes(self) -> Iterator[GenomeTensors]:
        for index in range(len(self)):
            yield self.genome(index)

    @property
    def limits(self) -> GenomeLimits:
        return GenomeLimits(max_nodes=self.nodes.shape[1], max_conns=self.conns.shape[1])


def empty_nodes(max_nodes: int, schema: AttributeSchema) -> np.ndarray:
    return np.full((max_nodes, schema.node_row_length), np.nan)


def empty_conns(max_conns: int, schema: AttributeSchema) -> np.ndarray:
    return np.full((max_conns, schema.conn_row_length), np.nan)


def encode_node(record: NodeGene, schema: AttributeSchema) -> np.ndarray:
    """
    Encode a node record as a tensor row.

    Args:
        record: Node key and readable attributes
        schema: Registries used to turn function names into ids

    Returns:
        Row ``[key, bias, response, aggregation_id, activation_id]``
    """
    return np.array([
        float(record.key),
        float(record.bias),
        float(record.response),
        float(schema.aggregation_id(record.aggregation)),
        float(schema.activation_id(record.activation)),
    ])


def encode_conn(record: ConnGene) -> np.ndarray:
    """Encode a connection record as ``[in_key, out_key, enabled, weight]``."""
    return np.array([
        float(record.in_key),
        float(record.out_key),
        1.0 if record.enabled else 0.0,
        float(record.weight),
    ])


def pad_genome(
    nodes: Sequence[np.ndarray],
    conns: Sequence[np.ndarray],
    limits: GenomeLimits,
    num_inputs: int,
    num_outputs: int,
    schema: AttributeSchema,
) -> GenomeTensors:
    """
    Copy encoded rows into NaN-padded tensors of the given limits.

    Args:
        nodes: Encoded node rows
        conns: Encoded connection rows
        limits: Tensor sizes
        num_inputs: Number of input nodes (keys 0..I-1)
        num_outputs: Number of output nodes (keys I..I+O-1)
        schema: Attribute schema fixing row lengths

    Returns:
        The padded genome

    Raises:
        GenomeFull: If a row list is longer than its limit
    """
    if len(nodes) > limits.max_nodes:
        raise GenomeFull(f"{len(nodes)} nodes exceed max_nodes={limits.max_nodes}")
    if len(conns) > limits.max_conns:
        raise GenomeFull(f"{len(conns)} connections exceed max_conns={limits.max_conns}")

    node_tensor = empty_nodes(limits.max_nodes, schema)
    conn_tensor = empty_conns(limits.max_conns, schema)
    for index, row in enumerate(nodes):
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (schema.node_row_length,):
            raise ShapeMismatch(f"node row has shape {row.shape}, expected ({schema.node_row_length},)")
        node_tensor[index] = row
    for index, row in enumerate(conns):
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (schema.conn_row_length,):
            raise ShapeMismatch(f"connection row has shape {row.shape}, expected ({schema.conn_row_length},)")
        conn_tensor[index] = row

    return GenomeTensors(node_tensor, conn_tensor, num_inputs, num_outputs)


def genome_from_genes(
    nodes: Sequence[NodeGene],
    conns: Sequence[ConnGene],
    limits: GenomeLimits,
    num_inputs: int,
    num_outputs: int,
    schema: AttributeSchema,
) -> GenomeTensors:
    """Encode and pad readable gene records in one step."""
    return pad_genome(
        [encode_node(n, schema) for n in nodes],
        [encode_conn(c) for c in conns],
        limits, num_inputs, num_outputs, schema,
    )


def concat_population(genomes: Sequence[GenomeTensors]) -> PopulationTensors:
    """
    Stack genomes along a new leading axis.

    Raises:
        ShapeMismatch: If the genomes do not share limits and I/O counts
    """
    if not genomes:
        raise ShapeMismatch("cannot stack an empty population")
    first = genomes[0]
    for index, genome in enumerate(genomes):
        if genome.nodes.shape != first.nodes.shape or genome.conns.shape != first.conns.shape:
            raise ShapeMismatch(
                f"genome {index} has shapes {genome.nodes.shape}/{genome.conns.shape}, "
                f"expected {first.nodes.shape}/{first.conns.shape}"
            )
        if (genome.num_inputs, genome.num_outputs) != (first.num_inputs, first.num_outputs):
            raise ShapeMismatch(f"genome {index} has different input/output counts")
    return PopulationTensors(
        nodes=np.stack([g.nodes for g in genomes]),
        conns=np.stack([g.conns for g in genomes]),
        num_inputs=first.num_inputs,
        num_outputs=first.num_outputs,
    )


def _check_row(row: np.ndarray, integral: Sequence[int], what: str, index: int) -> bool:
    """Return False for an empty row, True for a valid one; raise on anything else."""
    missing = np.isnan(row)
    if missing.all():
        return False
    if missing.any() or not np.isfinite(row).all():
        raise CorruptRow(f"{what} row {index} is partially NaN: {row.tolist()}")
    for column in integral:
        value = row[column]
        if value != np.floor(value) or value < 0:
            raise CorruptRow(f"{what} row {index} column {column} must be a non-negative integer, got {value}")
    return True


def decode_genome(g: GenomeTensors, schema: AttributeSchema) -> Tuple[List[NodeGene], List[ConnGene]]:
    """
    Decode the non-empty rows of a genome into readable records.

    Args:
        g: Genome to decode
        schema: Registries for resolving function ids

    Returns:
        Tuple of (nodes, connections) in row order

    Raises:
        CorruptRow: If a row is partially NaN or holds a non-integral key/flag/id
    """
    nodes: List[NodeGene] = []
    conns: List[ConnGene] = []
    for index, row in enumerate(g.nodes):
        if not _check_row(row, (KEY, AGGREGATION, ACTIVATION), "node", index):
            continue
        nodes.append(NodeGene(
            key=int(row[KEY]),
            bias=float(row[BIAS]),
            response=float(row[RESPONSE]),
            aggregation=schema.aggregation_name(int(row[AGGREGATION])),
            activation=schema.activation_name(int(row[ACTIVATION])),
        ))
    for index, row in enumerate(g.conns):
        if not _check_row(row, (IN_KEY, OUT_KEY, ENABLED), "connection", index):
            continue
        if row[ENABLED] not in (0.0, 1.0):
            raise CorruptRow(f"connection row {index} has enabled flag {row[ENABLED]}")
        conns.append(ConnGene(
            in_key=int(row[IN_KEY]),
            out_key=int(row[OUT_KEY]),
            enabled=bool(row[ENABLED]),
            weight=float(row[WEIGHT]),
        ))
    return nodes, conns


def enabled_edges(g: GenomeTensors) -> List[Tuple[int, int]]:
    """(in_key, out_key) pairs of enabled connections, in row order."""
    rows = g.conns[g.conn_mask()]
    rows = rows[rows[:, ENABLED] == 1.0]
    return [(int(a), int(b)) for a, b in rows[:, [IN_KEY, OUT_KEY]]]


def topological_keys(keys: Sequence[int], edges: Sequence[Tuple[int, int]]) -> Tuple[List[int], List[int]]:
    """
    Kahn's algorithm with a min-key heap, so the order is unique.

    Returns:
        Tuple of (ordered keys, keys left over because they sit on or behind a cycle)
    """
    successors: Dict[int, List[int]] = {k: [] for k in keys}
    indegree: Dict[int, int] = {k: 0 for k in keys}
    for a, b in edges:
        successors[a].append(b)
        indegree[b] += 1

    heap = [k for k in keys if indegree[k] == 0]
    heapq.heapify(heap)
    order: List[int] = []
    while heap:
        key = heapq.heappop(heap)
        order.append(key)
        for nxt in successors[key]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(heap, nxt)
    placed = set(order)
    return order, [k for k in keys if k not in placed]


def find_cycle(keys: Sequence[int], edges: Sequence[Tuple[int, int]]) -> List[int]:
    """One directed cycle as ``[k1, k2, ..., k1]``, or [] if the graph is acyclic."""
    successors: Dict[int, List[int]] = {k: [] for k in keys}
    for a, b in edges:
        successors[a].append(b)
    for nexts in successors.values():
        nexts.sort()

    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    for start in sorted(successors):
        if state.get(start):
            continue
        stack = [(start, iter(successors[start]))]
        path = [start]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                path.pop()
            elif state.get(nxt) == 1:
                return path[path.index(nxt):] + [nxt]
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(successors[nxt])))
                path.append(nxt)
    return []


def validate_genome(g: GenomeTensors, schema: AttributeSchema) -> List[str]:
    """
    Check every structural invariant of a genome.

    Returns:
        Human-readable problems; empty when the genome is valid
    """
    try:
        nodes, conns = decode_genome(g, schema)
    except (CorruptRow, UnknownFunction) as e:
        return [str(e)]

    problems: List[str] = []
    keys = [n.key for n in nodes]
    if len(set(keys)) != len(keys):
        problems.append("duplicate node keys")
    key_set = set(keys)
    for key in g.input_keys + g.output_keys:
        if key not in key_set:
            problems.append(f"missing input/output node {key}")

    pairs = [(c.in_key, c.out_key) for c in conns]
    if len(set(pairs)) != len(pairs):
        problems.append("duplicate connection pairs")
    for c in conns:
        if c.in_key not in key_set or c.out_key not in key_set:
            problems.append(f"dangling connection {c.in_key}→{c.out_key}")

    if not problems:
        cycle = find_cycle(sorted(key_set), enabled_edges(g))
        if cycle:
            problems.append("cycle " + "→".join(str(k) for k in cycle))

    if problems:
        logging.debug(f"Genome failed validation: {problems}")
    return problems
