"""
neatpad run browser

A Streamlit viewer for finished neatpad runs: fitness curves per seed, the
champion's topology diagram and formulas, and its gene tables. Runs are
produced by `python cli.py run`; this app only reads them.
"""

import logging
from pathlib import Path

import streamlit as st

from config.settings import APP_NAME, DEBUG, RUNS_DIR
from ui.genome_ui import genome_page
from ui.run_ui import run_page
from utils.logging_utils import configure_root_logging


# Set up logging
if DEBUG:
    log_level = logging.DEBUG
else:
    log_level = logging.INFO

configure_root_logging(log_level)

# Configure Streamlit page
st.set_page_config(
    page_title=APP_NAME,
    page_icon="🧬",
    layout="wide",
    initial_sidebar_state="expanded"
)


def main():
    """Main application entry point."""
    st.sidebar.title(APP_NAME)

    if "current_page" not in st.session_state:
        st.session_state["current_page"] = "runs"

    st.sidebar.title("Navigation")
    if st.sidebar.button("Runs", use_container_width=True,
                         type="primary" if st.session_state["current_page"] == "runs" else "secondary"):
        st.session_state["current_page"] = "runs"
        st.rerun()
    if st.sidebar.button("Open genome file", use_container_width=True,
                         type="primary" if st.session_state["current_page"] == "genome" else "secondary"):
        st.session_state["current_page"] = "genome"
        st.rerun()

    runs_dir = Path(st.sidebar.text_input("Runs directory", RUNS_DIR))

    if st.session_state["current_page"] == "runs":
        run_page(runs_dir)
    elif st.session_state["current_page"] == "genome":
        path = st.text_input("Genome document path")
        if path:
            genome_page(Path(path))
    else:
        st.error(f"Unknown page: {st.session_state['current_page']}")


if __name__ == "__main__":
    main()
