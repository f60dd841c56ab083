"""Runnable face of the workbench: I/O, configuration, suites, CLI."""
