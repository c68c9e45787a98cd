"""Parallel instance-query extraction of flat and nested entity spans.

A self-contained, desk-scale trainer and evaluator: learnable instance
queries read a sentence through a one-way-masked transformer encoder, point
at span boundaries, classify types, and are supervised through a dynamic
one-to-many linear-assignment labeling scheme.
"""

__version__ = "0.1.0"
