"""Executable model, model checkers, test generator and reference runtime for a
contract-automata orchestration middleware."""

__version__ = "0.1.0"
