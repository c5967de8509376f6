"""Recurrent binary embeddings and exhaustive bitwise k-NN search.

The model side lives in ``rbe.model`` and ``rbe.trainer``; these top-level
names cover the embedding format and the search engine.
"""

__version__ = "0.1.0"

from rbe.binvec import (  # noqa: E402
    PackedBinaryVector,
    RbeEmbedding,
    SimilarityConfig,
    binary_dot,
    pack,
    rbe_score,
    refined_vector,
    unpack,
)
from rbe.engine import (  # noqa: E402
    KeywordIndex,
    ScanGeometry,
    SelectionResult,
    build_index,
    load_index,
    save_index,
    search,
)
from rbe.kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND",
    "KeywordIndex",
    "PackedBinaryVector",
    "RbeEmbedding",
    "ScanGeometry",
    "SelectionResult",
    "SimilarityConfig",
    "__version__",
    "binary_dot",
    "build_index",
    "load_index",
    "pack",
    "rbe_score",
    "refined_vector",
    "save_index",
    "search",
    "unpack",
]
