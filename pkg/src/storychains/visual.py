"""Build visual coreference chains from per-image detections.

Chains grow incrementally across the image sequence: detections from the
first image seed singleton chains, and each later image's detections are
matched against the existing chains with a thresholded maximum-weight
assignment. Detections that match nothing with enough similarity open
new chains, so the number of characters never has to be known up front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .assignment import ScoreMatrix, solve_with_threshold
from .errors import SimilarityError, ValidationError
from .model import Detection, ImageSequence, VisualChain

EMBEDDING_COSINE = "embedding_cosine"
PAIRWISE_TABLE = "pairwise_table"
AGGREGATES = ("mean", "max", "last")

# The similarity threshold for opening a new chain is a tuning knob, not a
# reported value; 0.5 sits mid-scale for [0,1] similarities.
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class FilterPolicy:
    """Which detections count as foreground characters."""

    person_label: str = "person"
    min_confidence: float = 0.9
    min_area_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValidationError("policy_range", "min_confidence must be in [0,1]")
        if not 0.0 <= self.min_area_fraction <= 1.0:
            raise ValidationError("policy_range", "min_area_fraction must be in [0,1]")

    def to_doc(self) -> dict:
        return {
            "person_label": self.person_label,
            "min_confidence": self.min_confidence,
            "min_area_fraction": self.min_area_fraction,
        }

    @classmethod
    def from_doc(cls, doc: Mapping) -> "FilterPolicy":
        return cls(
            person_label=doc.get("person_label", "person"),
            min_confidence=doc.get("min_confidence", 0.9),
            min_area_fraction=doc.get("min_area_fraction", 0.10),
        )


@dataclass(frozen=True)
class SimilaritySource:
    """Pluggable provider of pairwise detection similarity.

    `embedding_cosine` scores crops by the cosine of their embeddings,
    remapped to [0,1] via (1+cos)/2 so both modes share one scale.
    `pairwise_table` serves externally produced scores (e.g. yes/no
    matcher output) keyed by detection ref pairs; lookups are symmetric.
    `aggregate` controls how member scores combine into a chain score.
    """

    mode: str = EMBEDDING_COSINE
    pairwise_table: Mapping[tuple[str, str], float] | None = None
    aggregate: str = "mean"

    def __post_init__(self):
        if self.mode not in (EMBEDDING_COSINE, PAIRWISE_TABLE):
            raise ValidationError("similarity_mode", f"unknown similarity mode: {self.mode}")
        if self.aggregate not in AGGREGATES:
            raise ValidationError("aggregate_mode", f"unknown aggregate: {self.aggregate}")
        if self.mode == PAIRWISE_TABLE and self.pairwise_table is None:
            raise ValidationError("missing_table", "pairwise_table mode needs a table")

    def pair_score(self, a: Detection, b: Detection) -> float:
        if self.mode == PAIRWISE_TABLE:
            table = self.pairwise_table
            key = (a.ref, b.ref)
            if key in table:
                return float(table[key])
            rkey = (b.ref, a.ref)
            if rkey in table:
                return float(table[rkey])
            raise SimilarityError(f"no pairwise score for ({a.ref}, {b.ref})")
        return _cosine_unit(a, b)


def _cosine_unit(a: Detection, b: Detection) -> float:
    for det in (a, b):
        if det.embedding is None:
            raise SimilarityError(f"detection {det.ref} has no embedding")
    ea, eb = a.embedding, b.embedding
    if len(ea) != len(eb):
        raise SimilarityError(f"embedding length mismatch for ({a.ref}, {b.ref})")
    na = math.sqrt(sum(v * v for v in ea))
    nb = math.sqrt(sum(v * v for v in eb))
    if na == 0.0 or nb == 0.0:
        raise SimilarityError(f"zero-norm embedding in pair ({a.ref}, {b.ref})")
    cos = sum(x * y for x, y in zip(ea, eb)) / (na * nb)
    cos = max(-1.0, min(1.0, cos))
    return (1.0 + cos) / 2.0


def filter_detections(detections: Sequence[Detection], policy: FilterPolicy) -> list[Detection]:
    """Keep person detections confident and large enough to be characters.

    The confidence bound is strict (> min_confidence), the area bound is
    inclusive (>= min_area_fraction); label comparison ignores case.
    Input order is preserved.
    """
    label = policy.person_label.lower()
    return [
        d
        for d in detections
        if d.label.lower() == label
        and d.confidence > policy.min_confidence
        and d.area_fraction >= policy.min_area_fraction
    ]


def chain_similarity(
    detection: Detection,
    chain_members: Sequence[Detection],
    source: SimilaritySource,
) -> float:
    """Score a detection against an existing chain's member detections."""
    if not chain_members:
        raise ValidationError("empty_members", "chain has no members to score against")
    scores = [source.pair_score(detection, member) for member in chain_members]
    if source.aggregate == "max":
        return max(scores)
    if source.aggregate == "last":
        return scores[-1]
    return sum(scores) / len(scores)


def build_chains(
    sequence: ImageSequence,
    detections_per_image: Sequence[Sequence[Detection]],
    policy: FilterPolicy,
    source: SimilaritySource,
    tau: float = DEFAULT_TAU,
) -> list[VisualChain]:
    """Incrementally cluster detections into visual coreference chains.

    `detections_per_image[i]` holds the detections of image i. Chain ids
    are assigned in creation order ("c0", "c1", ...). Each chain gains at
    most one member per image by construction.
    """
    k = sequence.image_count
    if len(detections_per_image) != k:
        raise ValidationError(
            "detections_shape",
            f"expected detections for {k} images, got {len(detections_per_image)}",
            sequence.sequence_id,
        )
    for i, dets in enumerate(detections_per_image):
        for d in dets:
            if d.image_index != i:
                raise ValidationError(
                    "image_index_mismatch",
                    f"detection {d.detection_id} grouped under image {i} "
                    f"but carries image_index {d.image_index}",
                    sequence.sequence_id,
                )

    # chain id -> member detections, insertion order = creation order
    chains: dict[str, list[Detection]] = {}

    def new_chain(det: Detection) -> None:
        chains[f"c{len(chains)}"] = [det]

    for det in filter_detections(detections_per_image[0], policy):
        new_chain(det)

    for i in range(1, k):
        dets = filter_detections(detections_per_image[i], policy)
        if not dets:
            continue
        chain_ids = list(chains)
        matrix = ScoreMatrix.from_rows(
            [
                [chain_similarity(det, chains[cid], source) for cid in chain_ids]
                for det in dets
            ],
            cols=len(chain_ids),
        )
        result = solve_with_threshold(matrix, tau)
        for m in result.matches:
            chains[chain_ids[m.col]].append(dets[m.row])
        for r in result.unmatched_rows:
            new_chain(dets[r])

    return [
        VisualChain(chain_id=cid, members=tuple((d.image_index, d.detection_id) for d in members))
        for cid, members in chains.items()
    ]
