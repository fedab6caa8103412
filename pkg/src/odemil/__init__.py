"""Multiple-instance symbolic regression of ODE systems with transformers."""
from .exprtree import Expression, OdeSystem, parse_prefix, render_system, to_prefix
from .integrate import Divergent, SolverConfig, Trajectory, solve
from .tokenizer import Vocab, build_vocab, decode_float, encode_float

__version__ = "0.1.0"

__all__ = [
    "Divergent", "Expression", "OdeSystem", "SolverConfig", "Trajectory", "Vocab", "build_vocab",
    "decode_float", "encode_float", "parse_prefix", "render_system", "solve", "to_prefix",
]
