"""spacebond: fuse pre-trained multimodal embedding spaces.

The library collects pseudo multimodal pairs from unpaired embeddings,
trains small projector ensembles with a contrastive objective, composes
the trained bonds into an enhanced unified space, and evaluates the result
with retrieval and classification metrics.  ``spacebond.cli`` exposes the
pipeline as the ``spacebond`` command.
"""

__version__ = "0.1.0"

from spacebond.store import (  # noqa: E402,F401
    EmbeddingMatrix,
    SpaceBundle,
    StoreError,
    cosine_similarity,
    load_space,
    normalize_rows,
    save_space,
)
from spacebond.synth import LatentWorld, SpaceSpec, generate_world, realize_space  # noqa: E402,F401

