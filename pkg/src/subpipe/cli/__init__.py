"""Config parsing, corpus ingestion, checkpoints and experiment drivers."""
