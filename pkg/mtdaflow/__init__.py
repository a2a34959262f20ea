"""
mtdaflow - reiterative curriculum multi-target domain adaptation on a stage-node engine.
"""

__version__ = "0.3.0"
