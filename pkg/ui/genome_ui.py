"""
Genome UI components for the neatpad run browser.
Provides the champion view: topology diagram, formulas and gene tables.
"""

from pathlib import Path
from typing import Optional, Tuple

import pandas as pd
import streamlit as st

from models.errors import NeatError
from services.encoding_service import AttributeSchema, GenomeTensors, decode_genome, validate_genome
from services.export_service import export_service
from utils.logging_utils import log_error


def load_genome_file(path: Path) -> Optional[Tuple[GenomeTensors, AttributeSchema]]:
    """
    Read a genome document, reporting failures in the UI.

    Args:
        path: Path of a saved genome document

    Returns:
        Tuple of (genome, schema) or None if it could not be read
    """
    try:
        return export_service.load_genome_with_schema(path.read_text())
    except (NeatError, OSError) as e:
        log_error(e, f"Cannot read genome {path}: {e}")
        return None


def gene_tables(genome: GenomeTensors, schema: AttributeSchema) -> Tuple[pd.DataFrame, pd.DataFrame]:
    nodes, conns = decode_genome(genome, schema)
    return (
        pd.DataFrame([n.model_dump() for n in nodes]),
        pd.DataFrame([c.model_dump() for c in conns]),
    )


def genome_page(path: Path) -> None:
    """
    Display one genome document.

    Args:
        path: Path of the genome document
    """
    loaded = load_genome_file(path)
    if loaded is None:
        return
    genome, schema = loaded

    problems = validate_genome(genome, schema)
    if problems:
        st.error("Invalid genome: " + "; ".join(problems))
        return

    st.subheader("Topology")
    st.graphviz_chart(export_service.to_dot(genome, schema))

    st.subheader("Formulas")
    for line in export_service.to_formula(genome, "typeset", schema).splitlines():
        st.latex(line)
    with st.expander("Plain text"):
        st.code(export_service.to_formula(genome, "plain", schema), language="text")

    nodes, conns = gene_tables(genome, schema)
    col1, col2 = st.columns(2)
    with col1:
        st.caption(f"Nodes ({len(nodes)}/{genome.max_nodes})")
        st.dataframe(nodes, use_container_width=True, hide_index=True)
    with col2:
        st.caption(f"Connections ({len(conns)}/{genome.max_conns})")
        st.dataframe(conns, use_container_width=True, hide_index=True)

    st.download_button("Download .dot", export_service.to_dot(genome, schema), file_name=f"{path.stem}.dot")
