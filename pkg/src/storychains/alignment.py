"""Align textual clusters to visual chains into multimodal chains.

A character's textual and visual sides tend to show up in the same
slots: someone mentioned in sentences 1 and 2 usually appears in images
1 and 2. Each side is summarized as a presence bit-vector and scored by
dot product; a thresholded assignment then pairs clusters with chains.
Unpaired clusters and chains survive as single-modality chains.
"""

from __future__ import annotations

from .assignment import ScoreMatrix, solve_with_threshold
from .errors import ValidationError
from .model import AnnotatedStory, MultimodalChain, VisualChain, distribution_vector


def alignment_matrix(
    story: AnnotatedStory, vchains: list[VisualChain], image_count: int
) -> ScoreMatrix:
    """Overlap counts between textual clusters (rows) and visual chains (cols).

    Rows follow cluster ids sorted lexicographically, columns follow
    chain ids sorted lexicographically. Entries are dot products of the
    two sides' presence vectors: integers in [0, image_count].

    Stories are assumed to have one sentence per image; when the counts
    differ, vectors are sized to the larger and zero-padded.
    """
    slots = max(image_count, len(story.sentences))
    cluster_ids = sorted(story.chains)
    chain_order = sorted(vchains, key=lambda c: c.chain_id)
    t_vecs = [distribution_vector((story, cid), slots) for cid in cluster_ids]
    v_vecs = [distribution_vector(chain, slots) for chain in chain_order]
    return ScoreMatrix.from_rows(
        [[float(t.dot(v)) for v in v_vecs] for t in t_vecs], cols=len(v_vecs)
    )


def align(
    story: AnnotatedStory,
    vchains: list[VisualChain],
    image_count: int,
    min_overlap: int = 1,
) -> list[MultimodalChain]:
    """Pair textual clusters with visual chains by distribution overlap.

    Output ids run "mm0", "mm1", ... with fused chains first, then
    textual-only clusters, then visual-only chains. Pairs overlapping in
    fewer than `min_overlap` slots are not fused.
    """
    if min_overlap < 1:
        raise ValidationError("min_overlap_range", "min_overlap must be >= 1")
    cluster_ids = sorted(story.chains)
    chain_order = sorted(vchains, key=lambda c: c.chain_id)
    matrix = alignment_matrix(story, vchains, image_count)
    result = solve_with_threshold(matrix, float(min_overlap))

    chains: list[MultimodalChain] = []

    def next_id() -> str:
        return f"mm{len(chains)}"

    for m in result.matches:
        cluster_id = cluster_ids[m.row]
        vchain = chain_order[m.col]
        chains.append(
            MultimodalChain(
                chain_id=next_id(),
                visual_chain_id=vchain.chain_id,
                textual_cluster_id=cluster_id,
                visual_members=vchain.members,
                textual_members=story.chains[cluster_id],
            )
        )
    for r in result.unmatched_rows:
        cluster_id = cluster_ids[r]
        chains.append(
            MultimodalChain(
                chain_id=next_id(),
                visual_chain_id=None,
                textual_cluster_id=cluster_id,
                textual_members=story.chains[cluster_id],
            )
        )
    for c in result.unmatched_cols:
        vchain = chain_order[c]
        chains.append(
            MultimodalChain(
                chain_id=next_id(),
                visual_chain_id=vchain.chain_id,
                textual_cluster_id=None,
                visual_members=vchain.members,
            )
        )
    return chains


def alignment_quality(
    predicted: list[MultimodalChain],
    gold_pairs: list[tuple[str, str]],
) -> tuple[float, float]:
    """(precision, recall) of predicted (cluster, chain) pairings.

    A predicted pair counts when it appears verbatim in the gold list;
    single-modality chains predict no pair. Empty-over-empty ratios are
    defined as 1.0.
    """
    predicted_pairs = {
        (c.textual_cluster_id, c.visual_chain_id) for c in predicted if c.is_fused
    }
    gold = set(gold_pairs)
    correct = len(predicted_pairs & gold)
    precision = correct / len(predicted_pairs) if predicted_pairs else 1.0
    recall = correct / len(gold) if gold else 1.0
    return precision, recall
