from .discrn import DisCRnExample, Instance, answer_spaces, balance_answers, build_discrn
from .oracle import LMOracle, OracleError, RemoteOracle, ReplayOracle, ScriptedOracle, StubOracle, make_oracle
from .qa import QAExample, generate_qa_pairs, generate_qa_pairs_3d, strip_color
from .similarity import partial_similarity, ratio
from .stats import dataset_stats

__all__ = [
    "DisCRnExample", "Instance", "answer_spaces", "balance_answers", "build_discrn",
    "LMOracle", "OracleError", "RemoteOracle", "ReplayOracle", "ScriptedOracle", "StubOracle", "make_oracle",
    "QAExample", "generate_qa_pairs", "generate_qa_pairs_3d", "strip_color",
    "partial_similarity", "ratio", "dataset_stats",
]
