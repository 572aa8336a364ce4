"""Domain types for character chains in visual stories.

Every type is an immutable dataclass with a `to_doc`/`from_doc` pair:
`to_doc` emits a plain JSON-compatible dict, `from_doc` rebuilds the
object and re-checks its invariants. `canonical_dumps` renders documents
byte-stably (sorted keys, two-space indent, trailing newline) so that
on-disk artifacts are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

from .errors import ValidationError

FORMAT_VERSION = 1

# Corpus convention: five images and five sentences per story. Algorithms
# never rely on this value; it is only the default for new sequences.
DEFAULT_IMAGE_COUNT = 5


def canonical_dumps(doc: Any) -> str:
    """Render a document dict in the canonical on-disk form."""
    return json.dumps(doc, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _require(cond: bool, rule: str, message: str, entity_id: str | None = None) -> None:
    if not cond:
        raise ValidationError(rule, message, entity_id=entity_id)


def _get(doc: Mapping[str, Any], key: str, kinds, entity: str):
    try:
        value = doc[key]
    except (KeyError, TypeError):
        raise ValidationError("missing_field", f"{entity}: missing field '{key}'") from None
    if kinds is not None and not isinstance(value, kinds):
        raise ValidationError("invalid_field", f"{entity}: field '{key}' has wrong type")
    if kinds is not None and isinstance(value, bool) and bool not in _as_tuple(kinds):
        raise ValidationError("invalid_field", f"{entity}: field '{key}' has wrong type")
    return value


def _as_tuple(kinds):
    return kinds if isinstance(kinds, tuple) else (kinds,)


def _opt(doc: Mapping[str, Any], key: str, kinds, entity: str):
    if key not in doc or doc[key] is None:
        return None
    return _get(doc, key, kinds, entity)


@dataclass(frozen=True)
class ImageSequence:
    """One photo sequence: an ordered list of opaque image identifiers."""

    sequence_id: str
    image_count: int
    image_refs: tuple[str, ...]
    # Optional (width, height) per image; enables area-fraction cross-checks.
    image_sizes: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if self.image_sizes is not None:
            object.__setattr__(
                self, "image_sizes", tuple((int(w), int(h)) for w, h in self.image_sizes)
            )
        sid = self.sequence_id
        _require(bool(sid), "empty_id", "sequence_id must be non-empty", sid)
        _require(self.image_count >= 1, "image_count_range", "image_count must be >= 1", sid)
        _require(
            len(self.image_refs) == self.image_count,
            "image_refs_length",
            f"expected {self.image_count} image refs, got {len(self.image_refs)}",
            sid,
        )
        _require(
            len(set(self.image_refs)) == len(self.image_refs),
            "duplicate_image_ref",
            "image refs must be distinct",
            sid,
        )
        if self.image_sizes is not None:
            _require(
                len(self.image_sizes) == self.image_count,
                "image_sizes_length",
                "image_sizes must have one entry per image",
                sid,
            )
            _require(
                all(w > 0 and h > 0 for w, h in self.image_sizes),
                "image_size_range",
                "image sizes must be positive",
                sid,
            )

    def to_doc(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "image_count": self.image_count,
            "image_refs": list(self.image_refs),
            "image_sizes": [list(s) for s in self.image_sizes] if self.image_sizes else None,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ImageSequence":
        entity = "image sequence"
        sizes = _opt(doc, "image_sizes", list, entity)
        return cls(
            sequence_id=_get(doc, "sequence_id", str, entity),
            image_count=_get(doc, "image_count", int, entity),
            image_refs=tuple(_get(doc, "image_refs", list, entity)),
            image_sizes=tuple(tuple(s) for s in sizes) if sizes is not None else None,
        )


@dataclass(frozen=True)
class Detection:
    """One candidate character region in one image."""

    detection_id: str
    image_index: int
    bbox: tuple[float, float, float, float]  # (x, y, width, height) in pixels
    label: str
    confidence: float
    area_fraction: float
    embedding: tuple[float, ...] | None = None
    # Opaque handle to an externally stored segmentation mask; never interpreted.
    mask_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        did = self.detection_id
        _require(bool(did), "empty_id", "detection_id must be non-empty", did)
        _require(self.image_index >= 0, "image_index_range", "image_index must be >= 0", did)
        _require(len(self.bbox) == 4, "bbox_shape", "bbox must be (x, y, width, height)", did)
        x, y, w, h = self.bbox
        _require(
            x >= 0 and y >= 0, "bbox_range", "bbox origin must be non-negative", did
        )
        _require(w > 0 and h > 0, "bbox_range", "bbox width and height must be positive", did)
        _require(
            0.0 <= self.confidence <= 1.0,
            "confidence_range",
            f"confidence out of [0,1]: {self.confidence}",
            did,
        )
        _require(
            0.0 <= self.area_fraction <= 1.0,
            "area_fraction_range",
            f"area_fraction out of [0,1]: {self.area_fraction}",
            did,
        )
        if self.embedding is not None:
            _require(len(self.embedding) > 0, "embedding_empty", "embedding must be non-empty", did)
            _require(
                all(math.isfinite(v) for v in self.embedding),
                "embedding_finite",
                "embedding values must be finite",
                did,
            )

    @property
    def ref(self) -> str:
        """Corpus-wide handle: '<image_index>:<detection_id>'."""
        return f"{self.image_index}:{self.detection_id}"

    def to_doc(self) -> dict:
        return {
            "detection_id": self.detection_id,
            "image_index": self.image_index,
            "bbox": list(self.bbox),
            "label": self.label,
            "confidence": self.confidence,
            "area_fraction": self.area_fraction,
            "embedding": list(self.embedding) if self.embedding is not None else None,
            "mask_ref": self.mask_ref,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Detection":
        entity = "detection"
        embedding = _opt(doc, "embedding", list, entity)
        return cls(
            detection_id=_get(doc, "detection_id", str, entity),
            image_index=_get(doc, "image_index", int, entity),
            bbox=tuple(_get(doc, "bbox", list, entity)),
            label=_get(doc, "label", str, entity),
            confidence=float(_get(doc, "confidence", (int, float), entity)),
            area_fraction=float(_get(doc, "area_fraction", (int, float), entity)),
            embedding=tuple(embedding) if embedding is not None else None,
            mask_ref=_opt(doc, "mask_ref", str, entity),
        )


@dataclass(frozen=True)
class VisualChain:
    """Detections across a sequence judged to depict the same character.

    A character appears at most once per image, so members carry distinct
    image indices and are kept sorted by image index.
    """

    chain_id: str
    members: tuple[tuple[int, str], ...]  # (image_index, detection_id)

    def __post_init__(self):
        members = tuple((int(i), str(d)) for i, d in self.members)
        object.__setattr__(self, "members", tuple(sorted(members)))
        cid = self.chain_id
        _require(bool(cid), "empty_id", "chain_id must be non-empty", cid)
        _require(len(self.members) > 0, "empty_members", "chain must have members", cid)
        indices = [i for i, _ in self.members]
        _require(
            len(set(indices)) == len(indices),
            "duplicate_image_index",
            "duplicate image_index in chain members",
            cid,
        )
        _require(all(i >= 0 for i in indices), "image_index_range", "image_index must be >= 0", cid)
        _require(all(d for _, d in self.members), "empty_id", "member detection_id empty", cid)

    @property
    def image_indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.members)

    def to_doc(self) -> dict:
        return {"chain_id": self.chain_id, "members": [[i, d] for i, d in self.members]}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "VisualChain":
        entity = "visual chain"
        members = _get(doc, "members", list, entity)
        return cls(
            chain_id=_get(doc, "chain_id", str, entity),
            members=tuple((m[0], m[1]) for m in members),
        )


@dataclass(frozen=True)
class TextualMention:
    """A character mention in story text, tagged with one or more clusters.

    `char_span` is a (start, end) pair of byte offsets into the plain
    story text; byte offsets are unambiguous across encodings. Plural
    mentions ("we", "they") name every cluster they cover, in written
    order.
    """

    mention_id: str
    sentence_index: int
    char_span: tuple[int, int]
    surface: str
    cluster_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "char_span", (int(self.char_span[0]), int(self.char_span[1])))
        object.__setattr__(self, "cluster_ids", tuple(str(c) for c in self.cluster_ids))
        mid = self.mention_id
        _require(bool(mid), "empty_id", "mention_id must be non-empty", mid)
        _require(self.sentence_index >= 0, "sentence_index_range", "sentence_index must be >= 0", mid)
        start, end = self.char_span
        _require(0 <= start < end, "span_range", f"invalid span ({start}, {end})", mid)
        _require(bool(self.surface), "empty_surface", "surface must be non-empty", mid)
        _require(
            "[" not in self.surface and "]" not in self.surface,
            "surface_brackets",
            "surface may not contain bracket characters",
            mid,
        )
        _require(len(self.cluster_ids) > 0, "empty_clusters", "mention must name a cluster", mid)
        _require(all(self.cluster_ids), "empty_id", "cluster id must be non-empty", mid)
        _require(
            len(set(self.cluster_ids)) == len(self.cluster_ids),
            "duplicate_cluster_id",
            "cluster ids must be distinct within a mention",
            mid,
        )

    def to_doc(self) -> dict:
        return {
            "mention_id": self.mention_id,
            "sentence_index": self.sentence_index,
            "char_span": list(self.char_span),
            "surface": self.surface,
            "cluster_ids": list(self.cluster_ids),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "TextualMention":
        entity = "mention"
        span = _get(doc, "char_span", list, entity)
        return cls(
            mention_id=_get(doc, "mention_id", str, entity),
            sentence_index=_get(doc, "sentence_index", int, entity),
            char_span=(span[0], span[1]),
            surface=_get(doc, "surface", str, entity),
            cluster_ids=tuple(_get(doc, "cluster_ids", list, entity)),
        )


def _recompute_chains(mentions: Sequence[TextualMention]) -> dict[str, tuple[str, ...]]:
    chains: dict[str, list[str]] = {}
    for m in sorted(mentions, key=lambda m: (m.sentence_index, m.char_span)):
        for cid in m.cluster_ids:
            chains.setdefault(cid, []).append(m.mention_id)
    return {cid: tuple(ms) for cid, ms in chains.items()}


@dataclass(frozen=True)
class AnnotatedStory:
    """Story text with its character mentions and the derived cluster index.

    Sentences are exact, contiguous slices of the story text (terminal
    punctuation and its trailing whitespace stay with the sentence they
    follow), so `text` is recoverable byte-for-byte. `chains` maps each
    cluster id to its mention ids in document order and must equal the
    index recomputed from `mentions`.
    """

    story_id: str
    sentences: tuple[str, ...]
    mentions: tuple[TextualMention, ...]
    chains: Mapping[str, tuple[str, ...]] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        mentions = tuple(sorted(self.mentions, key=lambda m: (m.sentence_index, m.char_span)))
        object.__setattr__(self, "mentions", mentions)
        sid = self.story_id
        _require(bool(sid), "empty_id", "story_id must be non-empty", sid)

        text_bytes = self.text.encode("utf-8")
        bounds = self._sentence_byte_bounds()
        ids = [m.mention_id for m in mentions]
        _require(len(set(ids)) == len(ids), "duplicate_mention_id", "mention ids must be unique", sid)

        prev_end = 0
        for m in mentions:
            start, end = m.char_span
            _require(
                end <= len(text_bytes),
                "span_out_of_text",
                f"mention {m.mention_id} span exceeds text length",
                sid,
            )
            try:
                piece = text_bytes[start:end].decode("utf-8")
            except UnicodeDecodeError:
                raise ValidationError(
                    "span_alignment", f"mention {m.mention_id} span splits a character", sid
                ) from None
            _require(
                piece == m.surface,
                "surface_mismatch",
                f"mention {m.mention_id} surface does not match text at span",
                sid,
            )
            _require(
                start >= prev_end,
                "overlapping_mentions",
                f"mention {m.mention_id} overlaps the previous mention",
                sid,
            )
            prev_end = end
            _require(
                m.sentence_index < len(self.sentences),
                "sentence_index_range",
                f"mention {m.mention_id} names sentence {m.sentence_index}",
                sid,
            )
            s_start, s_end = bounds[m.sentence_index]
            _require(
                s_start <= start and end <= s_end,
                "mention_crosses_sentence",
                f"mention {m.mention_id} does not lie within sentence {m.sentence_index}",
                sid,
            )

        recomputed = _recompute_chains(mentions)
        if self.chains is None:
            object.__setattr__(self, "chains", recomputed)
        else:
            stored = {str(k): tuple(v) for k, v in dict(self.chains).items()}
            object.__setattr__(self, "chains", stored)
            _require(
                stored == recomputed,
                "chains_index_mismatch",
                "stored chains index does not match the mentions",
                sid,
            )

    @property
    def text(self) -> str:
        return "".join(self.sentences)

    def _sentence_byte_bounds(self) -> list[tuple[int, int]]:
        bounds = []
        pos = 0
        for s in self.sentences:
            n = len(s.encode("utf-8"))
            bounds.append((pos, pos + n))
            pos += n
        return bounds

    def mentions_of(self, cluster_id: str) -> tuple[TextualMention, ...]:
        wanted = set(self.chains.get(cluster_id, ()))
        return tuple(m for m in self.mentions if m.mention_id in wanted)

    def to_doc(self) -> dict:
        return {
            "story_id": self.story_id,
            "sentences": list(self.sentences),
            "mentions": [m.to_doc() for m in self.mentions],
            "chains": {cid: list(ms) for cid, ms in self.chains.items()},
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "AnnotatedStory":
        entity = "story"
        chains = _get(doc, "chains", dict, entity)
        return cls(
            story_id=_get(doc, "story_id", str, entity),
            sentences=tuple(_get(doc, "sentences", list, entity)),
            mentions=tuple(TextualMention.from_doc(m) for m in _get(doc, "mentions", list, entity)),
            chains={k: tuple(v) for k, v in chains.items()},
        )


@dataclass(frozen=True)
class MultimodalChain:
    """An aligned (textual cluster, visual chain) pair, or either side alone."""

    chain_id: str
    visual_chain_id: str | None
    textual_cluster_id: str | None
    visual_members: tuple[tuple[int, str], ...] = ()
    textual_members: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "visual_members", tuple((int(i), str(d)) for i, d in self.visual_members)
        )
        object.__setattr__(self, "textual_members", tuple(str(m) for m in self.textual_members))
        cid = self.chain_id
        _require(bool(cid), "empty_id", "chain_id must be non-empty", cid)
        _require(
            self.visual_chain_id is not None or self.textual_cluster_id is not None,
            "empty_chain",
            "chain must have a visual or a textual side",
            cid,
        )
        _require(
            (self.visual_chain_id is None) == (len(self.visual_members) == 0),
            "visual_members_mismatch",
            "visual members present iff a visual chain is referenced",
            cid,
        )
        _require(
            (self.textual_cluster_id is None) == (len(self.textual_members) == 0),
            "textual_members_mismatch",
            "textual members present iff a textual cluster is referenced",
            cid,
        )

    @property
    def members(self) -> tuple[str, ...]:
        """Union of member handles: visual '<image>:<detection>' refs, then mention ids."""
        return tuple(f"{i}:{d}" for i, d in self.visual_members) + self.textual_members

    @property
    def is_fused(self) -> bool:
        return self.visual_chain_id is not None and self.textual_cluster_id is not None

    def to_doc(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "visual_chain_id": self.visual_chain_id,
            "textual_cluster_id": self.textual_cluster_id,
            "visual_members": [[i, d] for i, d in self.visual_members],
            "textual_members": list(self.textual_members),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "MultimodalChain":
        entity = "multimodal chain"
        return cls(
            chain_id=_get(doc, "chain_id", str, entity),
            visual_chain_id=_opt(doc, "visual_chain_id", str, entity),
            textual_cluster_id=_opt(doc, "textual_cluster_id", str, entity),
            visual_members=tuple((m[0], m[1]) for m in _get(doc, "visual_members", list, entity)),
            textual_members=tuple(_get(doc, "textual_members", list, entity)),
        )


@dataclass(frozen=True)
class DistributionVector:
    """Presence bits of a chain over the images/sentences of one sequence."""

    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        _require(len(self.bits) > 0, "empty_vector", "vector must have at least one slot")
        _require(all(b in (0, 1) for b in self.bits), "non_binary", "bits must be 0 or 1")

    def dot(self, other: "DistributionVector") -> int:
        _require(
            len(self.bits) == len(other.bits),
            "length_mismatch",
            "vectors must have equal length",
        )
        return sum(a * b for a, b in zip(self.bits, other.bits))

    def to_doc(self) -> dict:
        return {"bits": list(self.bits)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "DistributionVector":
        return cls(bits=tuple(_get(doc, "bits", list, "distribution vector")))


ChainOrCluster = Union[VisualChain, tuple[AnnotatedStory, str]]


def distribution_vector(source: ChainOrCluster, image_count: int) -> DistributionVector:
    """Presence vector of a visual chain or of a textual cluster.

    `source` is either a VisualChain (bits indexed by image) or an
    (AnnotatedStory, cluster_id) pair (bits indexed by sentence). Repeat
    mentions within one slot still set a single bit.
    """
    _require(image_count >= 1, "image_count_range", "image_count must be >= 1")
    if isinstance(source, VisualChain):
        indices = list(source.image_indices)
        entity = source.chain_id
    else:
        story, cluster_id = source
        indices = [m.sentence_index for m in story.mentions_of(cluster_id)]
        entity = cluster_id
    if not indices:
        raise ValidationError("empty_members", "cannot build a vector from empty members", entity)
    if max(indices) >= image_count:
        raise ValidationError(
            "index_out_of_range", f"index out of range: {max(indices)} >= {image_count}", entity
        )
    bits = [0] * image_count
    for i in indices:
        bits[i] = 1
    return DistributionVector(bits=tuple(bits))
