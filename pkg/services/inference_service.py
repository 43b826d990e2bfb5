"""
Inference service for the neatpad workbench.
Handles the two-stage feedforward evaluation of tensor genomes.

transform() turns a genome into a topological order of node rows and a dense
expanded weight tensor; the propagation kernel then walks the order once,
computing a whole population x batch slab of node values per step.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from models.errors import (
    CycleDetected,
    DanglingEndpoint,
    EmptyAggregation,
    KeyNotFound,
    NonFiniteInput,
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
    AttributeSchema,
    GenomeTensors,
    PopulationTensors,
    enabled_edges,
    find_cycle,
    topological_keys,
)

DEFAULT_SCHEMA = AttributeSchema()


@dataclass(frozen=True, eq=False)
class TransformedNetwork:
    """A genome prepared for repeated forward passes."""
    nodes: np.ndarray
    order: np.ndarray
    expanded: np.ndarray
    key_to_row: Dict[int, int]
    input_rows: np.ndarray
    output_rows: np.ndarray

    @property
    def num_inputs(self) -> int:
        return len(self.input_rows)

    @property
    def num_outputs(self) -> int:
        return len(self.output_rows)

    def order_keys(self) -> List[int]:
        """Node keys in evaluation order."""
        rows = self.order[np.isfinite(self.order)].astype(np.int64)
        return [int(self.nodes[r, KEY]) for r in rows]


@dataclass(frozen=True, eq=False)
class TransformedBatch:
    """Transformed networks stacked along a leading population axis."""
    nodes: np.ndarray       # (P, N, node_row_length)
    order: np.ndarray       # (P, N), NaN tail
    expanded: np.ndarray    # (P, N, N, conn_attr_count)
    input_rows: np.ndarray  # (P, I)
    output_rows: np.ndarray  # (P, O)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def slice(self, start: int, stop: int) -> "TransformedBatch":
        return TransformedBatch(
            self.nodes[start:stop], self.order[start:stop], self.expanded[start:stop],
            self.input_rows[start:stop], self.output_rows[start:stop],
        )

    def take(self, indices: np.ndarray) -> "TransformedBatch":
        return TransformedBatch(
            self.nodes[indices], self.order[indices], self.expanded[indices],
            self.input_rows[indices], self.output_rows[indices],
        )


def transform(g: GenomeTensors) -> TransformedNetwork:
    """
    Build the evaluation order and expanded connection tensor of a genome.

    Args:
        g: A valid genome

    Returns:
        TransformedNetwork whose order lists every node row once, ascending
        key breaking ties, and whose expanded[i][j] holds the attributes of
        the enabled connection from row i to row j (NaN elsewhere)

    Raises:
        DanglingEndpoint: If a connection references a missing node
        CycleDetected: If the enabled connections form a cycle
    """
    node_mask = g.node_mask()
    rows = np.flatnonzero(node_mask)
    key_to_row = {int(g.nodes[r, KEY]): int(r) for r in rows}

    conn_rows = np.flatnonzero(g.conn_mask())
    for r in conn_rows:
        in_key, out_key = int(g.conns[r, IN_KEY]), int(g.conns[r, OUT_KEY])
        if in_key not in key_to_row or out_key not in key_to_row:
            raise DanglingEndpoint(f"connection {in_key}→{out_key} references a missing node")

    keys = sorted(key_to_row)
    edges = enabled_edges(g)
    ordered, leftover = topological_keys(keys, edges)
    if leftover:
        raise CycleDetected(find_cycle(keys, edges))

    n = g.max_nodes
    order = np.full(n, np.nan)
    order[:len(ordered)] = [key_to_row[k] for k in ordered]

    expanded = np.full((n, n, g.conns.shape[1] - 3), np.nan)
    for r in conn_rows:
        if g.conns[r, ENABLED] == 1.0:
            i = key_to_row[int(g.conns[r, IN_KEY])]
            j = key_to_row[int(g.conns[r, OUT_KEY])]
            expanded[i, j] = g.conns[r, 3:]

    try:
        input_rows = np.array([key_to_row[k] for k in g.input_keys], dtype=np.int64)
        output_rows = np.array([key_to_row[k] for k in g.output_keys], dtype=np.int64)
    except KeyError as e:
        raise KeyNotFound(f"input/output node {e.args[0]} missing") from None

    return TransformedNetwork(
        nodes=g.nodes, order=order, expanded=expanded, key_to_row=key_to_row,
        input_rows=input_rows, output_rows=output_rows,
    )


def transform_population(pop: PopulationTensors) -> List[TransformedNetwork]:
    return [transform(g) for g in pop.genomes()]


def stack_networks(networks: Sequence[TransformedNetwork]) -> TransformedBatch:
    """
    Stack transformed networks for batched propagation.

    Raises:
        ShapeMismatch: If the networks differ in limits or I/O counts
    """
    if not networks:
        raise ShapeMismatch("cannot stack an empty population")
    first = networks[0]
    for index, net in enumerate(networks):
        if (net.expanded.shape != first.expanded.shape
                or net.num_inputs != first.num_inputs or net.num_outputs != first.num_outputs):
            raise ShapeMismatch(f"network {index} does not match the shape of network 0")
    return TransformedBatch(
        nodes=np.stack([t.nodes for t in networks]),
        order=np.stack([t.order for t in networks]),
        expanded=np.stack([t.expanded for t in networks]),
        input_rows=np.stack([t.input_rows for t in networks]),
        output_rows=np.stack([t.output_rows for t in networks]),
    )


def apply_activation(index: int, x, schema: AttributeSchema = DEFAULT_SCHEMA):
    """Evaluate registered activation `index` elementwise."""
    return schema.activation_fn(index)(x)


def apply_aggregation(index: int, xs: Sequence[float], schema: AttributeSchema = DEFAULT_SCHEMA) -> float:
    """
    Reduce `xs` with registered aggregation `index`.

    Empty input reduces to the identity (sum and mean 0, product 1).

    Raises:
        UnknownFunction: If the id is not registered
        EmptyAggregation: For max over an empty input
    """
    name = schema.aggregation_name(index)
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        if name == "max":
            raise EmptyAggregation("max over an empty input")
        return 1.0 if name == "product" else 0.0
    return float(schema.aggregation_fn(index)(xs))


def _propagate(batch: TransformedBatch, inputs: np.ndarray, schema: AttributeSchema) -> np.ndarray:
    """
    Propagate a (P, B, I) input slab through a stacked batch.

    Fan-in terms are folded left to right in ascending source row, with
    absent terms contributing the exact identity (0 for sums, 1 for products,
    -inf for max); results are therefore independent of padding and of how
    the population is chunked.
    """
    p_count, n = batch.order.shape
    b_count = inputs.shape[1]
    p_idx = np.arange(p_count)
    b_idx = np.arange(b_count)

    values = np.full((p_count, b_count, n), np.nan)
    values[p_idx[:, None, None], b_idx[None, :, None], batch.input_rows[:, None, :]] = inputs
    is_input = np.zeros((p_count, n), dtype=bool)
    is_input[p_idx[:, None], batch.input_rows] = True

    weights = batch.expanded[..., 0]
    steps = int(np.isfinite(batch.order).sum(axis=1).max())
    names = {i: schema.aggregation_name(i) for i in range(len(schema.aggregations))}

    with np.errstate(all="ignore"):
        for step in range(steps):
            order_col = batch.order[:, step]
            present = np.isfinite(order_col)
            rows = np.where(present, order_col, 0).astype(np.int64)
            active = present & ~is_input[p_idx, rows]
            if not active.any():
                continue

            node = batch.nodes[p_idx, rows]
            agg_ids = np.where(active, node[:, AGGREGATION], -1).astype(np.int64)
            act_ids = np.where(active, node[:, ACTIVATION], -1).astype(np.int64)
            wanted = {names[i] for i in np.unique(agg_ids[active])}

            fan_in = weights[p_idx, :, rows]  # (P, N)
            sources = np.flatnonzero(np.isfinite(fan_in).any(axis=0))

            total = np.zeros((p_count, b_count))
            product = np.ones((p_count, b_count))
            largest = np.full((p_count, b_count), -np.inf)
            count = np.zeros((p_count, 1))
            for j in sources:
                w = fan_in[:, j]
                has = np.isfinite(w)[:, None]
                term = w[:, None] * values[:, :, j]
                count = count + has
                if "sum" in wanted or "mean" in wanted:
                    total = total + np.where(has, term, 0.0)
                if "product" in wanted:
                    product = product * np.where(has, term, 1.0)
                if "max" in wanted:
                    largest = np.maximum(largest, np.where(has, term, -np.inf))

            aggregated = np.zeros((p_count, b_count))
            for index, name in names.items():
                if name not in wanted:
                    continue
                if name == "sum":
                    result = total
                elif name == "mean":
                    result = total / np.maximum(count, 1.0)
                elif name == "product":
                    result = product
                else:
                    result = np.where(count > 0, largest, 0.0)
                aggregated = np.where((agg_ids == index)[:, None], result, aggregated)

            pre = np.ascontiguousarray(node[:, RESPONSE][:, None] * aggregated + node[:, BIAS][:, None])
            out = np.zeros((p_count, b_count))
            for index in np.unique(act_ids[active]):
                out = np.where((act_ids == index)[:, None], apply_activation(int(index), pre, schema), out)

            values[p_idx[active], :, rows[active]] = out[active]

    return values[p_idx[:, None, None], b_idx[None, :, None], batch.output_rows[:, None, :]]


def _check_inputs(inputs: np.ndarray, num_inputs: int) -> None:
    if inputs.shape[-1] != num_inputs:
        raise ShapeMismatch(f"expected {num_inputs} inputs per sample, got {inputs.shape[-1]}")
    if not np.isfinite(inputs).all():
        raise NonFiniteInput("inputs contain NaN or infinity")


def forward(t: TransformedNetwork, inputs, schema: AttributeSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """
    Evaluate one transformed network on one input vector.

    Args:
        t: Transformed network
        inputs: Vector of length num_inputs
        schema: Function registries

    Returns:
        Output vector of length num_outputs

    Raises:
        NonFiniteInput: If an input is NaN or infinite
    """
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1)
    _check_inputs(inputs, t.num_inputs)
    return _propagate(stack_networks([t]), inputs[None, None, :], schema)[0, 0]


def propagate(
    batch: TransformedBatch,
    inputs: np.ndarray,
    schema: AttributeSchema = DEFAULT_SCHEMA,
    workers: int = 1,
) -> np.ndarray:
    """
    Evaluate a stacked batch on per-genome inputs.

    Args:
        batch: Stacked transformed networks
        inputs: (P, B, I) inputs, one slab per genome
        schema: Function registries
        workers: Threads splitting the population axis

    Returns:
        (P, B, O) outputs, identical for every worker count
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[0] != len(batch):
        raise ShapeMismatch(f"inputs of shape {inputs.shape} do not match a population of {len(batch)}")
    _check_inputs(inputs, batch.input_rows.shape[1])

    size = len(batch)
    workers = max(1, min(int(workers), size))
    if workers == 1:
        return _propagate(batch, inputs, schema)

    chunk = -(-size // workers)
    bounds = [(start, min(start + chunk, size)) for start in range(0, size, chunk)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        parts = list(executor.map(
            lambda b: _propagate(batch.slice(*b), inputs[b[0]:b[1]], schema), bounds))
    return np.concatenate(parts, axis=0)


def batch_forward(
    pop: Union[Sequence[TransformedNetwork], TransformedBatch],
    inputs,
    schema: AttributeSchema = DEFAULT_SCHEMA,
    workers: int = 1,
) -> np.ndarray:
    """
    Evaluate every network of a population on the same input batch.

    Args:
        pop: Transformed networks (or an already stacked batch)
        inputs: (B, I) input matrix
        schema: Function registries
        workers: Threads splitting the population axis

    Returns:
        (P, B, O) outputs; element [p][b] equals forward(pop[p], inputs[b])

    Raises:
        ShapeMismatch: On non-uniform networks or wrong input width
    """
    batch = pop if isinstance(pop, TransformedBatch) else stack_networks(list(pop))
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ShapeMismatch(f"inputs must be a (batch, inputs) matrix, got shape {inputs.shape}")
    tiled = np.broadcast_to(inputs, (len(batch),) + inputs.shape)
    logging.debug(f"Batch forward: {len(batch)} networks x {inputs.shape[0]} samples on {workers} workers")
    return propagate(batch, tiled, schema, workers)


def forward_genome(g: GenomeTensors, inputs, schema: Optional[AttributeSchema] = None) -> np.ndarray:
    """Transform and evaluate in one call; convenient for tests and the viewer."""
    return forward(transform(g), inputs, schema or DEFAULT_SCHEMA)
