"""
Export service for the neatpad workbench.
Handles topology diagrams, symbolic formulas and genome documents.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config.settings import DIAGRAM_DECIMALS, GENOME_FORMAT, GENOME_VERSION, SERIALIZATION_DIGITS
from models.data_models import GenomeDocument
from models.errors import CorruptRow, NeatError, ParseError, UnknownFunction, VersionUnsupported
from services.encoding_service import (
    CONN_ATTRS,
    NODE_ATTRS,
    AttributeSchema,
    GenomeTensors,
    decode_genome,
    enabled_edges,
    topological_keys,
)
from services.inference_service import DEFAULT_SCHEMA, transform

_DOT_COLORS = {"input": "yellow", "hidden": "white", "output": "lightblue"}

_LATEX_ACTIVATIONS = {
    "tanh": r"\tanh",
    "sigmoid": r"\sigma",
    "sin": r"\sin",
}
_LATEX_AGGREGATIONS = {
    "max": r"\max",
}


@dataclass(frozen=True)
class FormulaNode:
    """One assignment: symbol = act(response * agg(w * source, ...) + bias)."""
    symbol: str
    activation: str
    aggregation: str
    bias: float
    response: float
    terms: Tuple[Tuple[float, str], ...]


@dataclass(frozen=True)
class FormulaTree:
    """Assignments in evaluation order with exact attribute values."""
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    assignments: Tuple[FormulaNode, ...]
    schema: AttributeSchema

    def evaluate(self, inputs: Sequence[float]) -> np.ndarray:
        """Evaluate the formulas on one input vector."""
        env: Dict[str, float] = {symbol: float(x) for symbol, x in zip(self.inputs, inputs)}
        for node in self.assignments:
            values = [w * env[src] for w, src in node.terms]
            if node.aggregation == "max" and not values:
                aggregated = 0.0
            else:
                aggregated = _aggregate(node.aggregation, values, self.schema)
            pre = node.response * aggregated + node.bias
            env[node.symbol] = float(self.schema.activation_fn(self.schema.activation_id(node.activation))(pre))
        return np.array([env[symbol] for symbol in self.outputs])


def _aggregate(name: str, values: List[float], schema: AttributeSchema) -> float:
    if not values:
        return 1.0 if name == "product" else 0.0
    return float(schema.aggregation_fn(schema.aggregation_id(name))(np.array(values)))


def _symbols(g: GenomeTensors, order: Sequence[int]) -> Dict[int, str]:
    symbols = {k: f"i{k}" for k in g.input_keys}
    symbols.update({k: f"o{k - g.num_inputs}" for k in g.output_keys})
    hidden = [k for k in order if not g.is_protected(k)]
    symbols.update({k: f"h{n}" for n, k in enumerate(hidden)})
    return symbols


def _signed_join(parts: List[Tuple[float, str]]) -> str:
    text = ""
    for index, (value, body) in enumerate(parts):
        if index == 0:
            text = body if value >= 0 else f"-{body}"
        else:
            text += f" + {body}" if value >= 0 else f" - {body}"
    return text


class ExportService:
    """Emitters for diagrams, formulas and genome documents. Every output is deterministic."""

    def __init__(self, schema: AttributeSchema = DEFAULT_SCHEMA):
        self.schema = schema

    def to_dot(self, g: GenomeTensors, schema: Optional[AttributeSchema] = None) -> str:
        """
        Render the genome as graph-description text.

        Args:
            g: Genome to draw
            schema: Registries used for node tooltips

        Returns:
            A ``digraph`` with one statement per node (sorted by key) and per
            connection (sorted by endpoint pair); disabled connections are dashed
        """
        schema = schema or self.schema
        nodes, conns = decode_genome(g, schema)
        keys = sorted(n.key for n in nodes)
        order, leftover = topological_keys(keys, enabled_edges(g))
        symbols = _symbols(g, order + leftover)

        lines = ["digraph genome {", "  rankdir=LR;"]
        for node in sorted(nodes, key=lambda n: n.key):
            role = "input" if node.key in g.input_keys else "output" if node.key in g.output_keys else "hidden"
            shape = "box" if role == "input" else "circle"
            lines.append(
                f'  n{node.key} [label="{symbols[node.key]}", shape={shape}, style=filled, '
                f'fillcolor={_DOT_COLORS[role]}, tooltip="key {node.key}: {node.activation}/{node.aggregation} '
                f'bias {node.bias:.{DIAGRAM_DECIMALS}f}"];'
            )
        for conn in sorted(conns, key=lambda c: (c.in_key, c.out_key)):
            style = "" if conn.enabled else ", style=dashed"
            lines.append(f'  n{conn.in_key} -> n{conn.out_key} [label="{conn.weight:.{DIAGRAM_DECIMALS}f}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def formula_tree(self, g: GenomeTensors, schema: Optional[AttributeSchema] = None) -> FormulaTree:
        """
        Build the assignment list of a genome.

        Raises:
            CycleDetected: If the enabled connections form a cycle
        """
        schema = schema or self.schema
        network = transform(g)
        order = network.order_keys()
        symbols = _symbols(g, order)
        nodes, _ = decode_genome(g, schema)
        by_key = {n.key: n for n in nodes}

        incoming: Dict[int, List[Tuple[float, str]]] = {k: [] for k in order}
        for row in sorted(np.flatnonzero(g.conn_mask()), key=lambda r: (g.conns[r, 0], g.conns[r, 1])):
            in_key, out_key, enabled, weight = g.conns[row]
            if enabled == 1.0:
                incoming[int(out_key)].append((float(weight), symbols[int(in_key)]))

        assignments = []
        for key in order:
            if key in g.input_keys:
                continue
            node = by_key[key]
            assignments.append(FormulaNode(
                symbol=symbols[key], activation=node.activation, aggregation=node.aggregation,
                bias=node.bias, response=node.response, terms=tuple(incoming[key]),
            ))
        return FormulaTree(
            inputs=tuple(symbols[k] for k in g.input_keys),
            outputs=tuple(symbols[k] for k in g.output_keys),
            assignments=tuple(assignments),
            schema=schema,
        )

    def _plain_line(self, node: FormulaNode) -> str:
        terms = [(w, f"{abs(w):.{DIAGRAM_DECIMALS}f} * {src}") for w, src in node.terms]
        if node.aggregation == "sum":
            inner = _signed_join(terms) if terms else f"{0:.{DIAGRAM_DECIMALS}f}"
        else:
            inner = f"{node.aggregation}({', '.join(_signed_join([t]) for t in terms)})"
        if node.response != 1.0:
            inner = f"{node.response:.{DIAGRAM_DECIMALS}f} * ({inner})"
        body = _signed_join([(1.0, inner), (node.bias, f"{abs(node.bias):.{DIAGRAM_DECIMALS}f}")])
        if node.activation == "identity":
            return f"{node.symbol} = ({body})"
        return f"{node.symbol} = {node.activation}({body})"

    def _typeset_line(self, node: FormulaNode) -> str:
        def sym(s: str) -> str:
            return f"{s[0]}_{{{s[1:]}}}"

        terms = [(w, f"{abs(w):.{DIAGRAM_DECIMALS}f} \\cdot {sym(src)}") for w, src in node.terms]
        if node.aggregation == "sum":
            inner = _signed_join(terms) if terms else f"{0:.{DIAGRAM_DECIMALS}f}"
        else:
            name = _LATEX_AGGREGATIONS.get(node.aggregation, f"\\operatorname{{{node.aggregation}}}")
            inner = f"{name}\\left({', '.join(_signed_join([t]) for t in terms)}\\right)"
        if node.response != 1.0:
            inner = f"{node.response:.{DIAGRAM_DECIMALS}f} \\cdot \\left({inner}\\right)"
        body = _signed_join([(1.0, inner), (node.bias, f"{abs(node.bias):.{DIAGRAM_DECIMALS}f}")])
        if node.activation == "identity":
            return f"{sym(node.symbol)} = \\left({body}\\right)"
        name = _LATEX_ACTIVATIONS.get(node.activation, f"\\operatorname{{{node.activation}}}")
        return f"{sym(node.symbol)} = {name}\\left({body}\\right)"

    def to_formula(self, g: GenomeTensors, style: str = "plain", schema: Optional[AttributeSchema] = None) -> str:
        """
        Render one assignment per non-input node in evaluation order.

        Args:
            g: Genome to render
            style: "plain" for infix arithmetic, "typeset" for LaTeX math markup
            schema: Function registries

        Returns:
            Newline-separated assignments; hidden nodes are h0.., outputs o0..

        Raises:
            CycleDetected: If the enabled connections form a cycle
        """
        if style not in ("plain", "typeset"):
            raise ValueError(f"unknown formula style '{style}'")
        tree = self.formula_tree(g, schema)
        render = self._plain_line if style == "plain" else self._typeset_line
        return "\n".join(render(node) for node in tree.assignments) + "\n"

    # Genome documents

    def save_genome(self, g: GenomeTensors, schema: Optional[AttributeSchema] = None) -> str:
        """
        Serialize a genome as a JSON document with sorted keys.

        Numbers are written with 17 significant digits; NaN cells become null.

        Raises:
            CorruptRow: If a cell is infinite
        """
        schema = schema or self.schema

        def number(value: float) -> str:
            if math.isnan(value):
                return "null"
            if math.isinf(value):
                raise CorruptRow(f"cannot serialize infinite value {value}")
            return format(float(value), f".{SERIALIZATION_DIGITS}g")

        def rows(tensor: np.ndarray) -> str:
            body = ",\n".join("    [" + ", ".join(number(v) for v in row) + "]" for row in tensor)
            return "[\n" + body + "\n  ]"

        def strings(items: Sequence[str]) -> str:
            return "[" + ", ".join(json.dumps(s) for s in items) + "]"

        schema_text = (
            "{"
            f'"activations": {strings(schema.activations)}, '
            f'"aggregations": {strings(schema.aggregations)}, '
            f'"conn_attrs": {strings(CONN_ATTRS)}, '
            f'"node_attrs": {strings(NODE_ATTRS)}'
            "}"
        )
        return (
            "{\n"
            f'  "conns": {rows(g.conns)},\n'
            f'  "format": "{GENOME_FORMAT}",\n'
            f'  "limits": {{"max_conns": {g.max_conns}, "max_nodes": {g.max_nodes}}},\n'
            f'  "nodes": {rows(g.nodes)},\n'
            f'  "num_inputs": {g.num_inputs},\n'
            f'  "num_outputs": {g.num_outputs},\n'
            f'  "schema": {schema_text},\n'
            f'  "version": {GENOME_VERSION}\n'
            "}\n"
        )

    def load_genome_with_schema(self, text: str) -> Tuple[GenomeTensors, AttributeSchema]:
        """
        Parse a genome document.

        Returns:
            Tuple of (genome, the schema recorded in the document)

        Raises:
            ParseError: On malformed JSON (with line) or invalid fields (with field path)
            VersionUnsupported: If the document's version is not readable by this build
        """
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line=e.lineno) from None
        if not isinstance(data, dict):
            raise ParseError("genome document must be a JSON object")
        if "version" not in data:
            raise ParseError("missing", field="version")
        if data["version"] != GENOME_VERSION:
            raise VersionUnsupported(f"genome document version {data['version']!r} (supported: {GENOME_VERSION})")

        try:
            document = GenomeDocument.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            raise ParseError(first["msg"], field=".".join(str(p) for p in first["loc"])) from None

        if tuple(document.schema_.node_attrs) != NODE_ATTRS or tuple(document.schema_.conn_attrs) != CONN_ATTRS:
            raise ParseError("unsupported attribute layout", field="schema")
        try:
            schema = AttributeSchema(tuple(document.schema_.activations), tuple(document.schema_.aggregations))
        except UnknownFunction as e:
            raise ParseError(str(e), field="schema") from None

        nodes = self._tensor(document.nodes, document.limits.max_nodes, schema.node_row_length, "nodes")
        conns = self._tensor(document.conns, document.limits.max_conns, schema.conn_row_length, "conns")
        genome = GenomeTensors(nodes, conns, document.num_inputs, document.num_outputs)
        try:
            decode_genome(genome, schema)
        except NeatError as e:
            raise ParseError(str(e), field="nodes/conns") from None
        logging.debug(f"Loaded genome: {int(genome.node_mask().sum())} nodes, {int(genome.conn_mask().sum())} connections")
        return genome, schema

    def load_genome(self, text: str) -> GenomeTensors:
        return self.load_genome_with_schema(text)[0]

    @staticmethod
    def _tensor(rows: List[List[Optional[float]]], count: int, width: int, field: str) -> np.ndarray:
        if len(rows) != count:
            raise ParseError(f"expected {count} rows, found {len(rows)}", field=field)
        for index, row in enumerate(rows):
            if len(row) != width:
                raise ParseError(f"row {index} has {len(row)} cells, expected {width}", field=field)
        return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64).reshape(count, width)


# Create a singleton instance
export_service = ExportService()
