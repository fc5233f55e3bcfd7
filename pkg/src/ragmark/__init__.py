"""Retrieval strategy benchmarking and answer evaluation for RAG pipelines."""

__version__ = "0.1.0"
