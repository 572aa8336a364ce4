"""Character-centric and story-specific evaluation metrics.

Coreference quality is scored with B-cubed: every mention contributes a
precision/recall term based on how much its predicted chain overlaps its
gold chain, and terms are averaged over mentions. Detection quality is
plain precision/recall after matching predicted mentions to gold ones
(head-word equality for text, IoU for boxes). Story quality adds
readability (Flesch-Kincaid grade level), cross-story trigram repetition
and character richness, plus agreement scoring for pairwise judge
verdicts.
"""

from __future__ import annotations

import re
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import UnscorableTextError, ValidationError
from .annotations import split_sentences

Partition = Iterable[Iterable[str]]

JUDGE_DIMENSIONS = (
    "specificity",
    "coherence",
    "engagement",
    "grounding",
    "characters",
    "overall_preference",
)


@dataclass(frozen=True)
class FkglCoefficients:
    """Linear coefficients of the Flesch-Kincaid grade level formula."""

    words_per_sentence: float = 0.39
    syllables_per_word: float = 11.8
    constant: float = -15.59


DEFAULT_FKGL = FkglCoefficients()


@dataclass(frozen=True)
class TextStats:
    n_word: int
    n_sentence: int
    n_syllable: int

    def __post_init__(self):
        if self.n_word < 1 or self.n_sentence < 1:
            raise UnscorableTextError("text needs at least one word and one sentence")


@dataclass(frozen=True)
class MentionMatchPolicy:
    """How predicted mentions map onto gold mentions.

    Textual mentions match when their head words are equal within the
    same sentence; visual mentions match greedily by descending IoU,
    one-to-one per image, at `iou_threshold` or above.
    """

    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError("iou_threshold_range", "iou_threshold must be in (0,1]")


@dataclass(frozen=True)
class TextualMentionRef:
    """A textual mention as the matcher sees it."""

    mention_id: str
    sentence_index: int
    surface: str

    @property
    def head(self) -> str:
        return head_word(self.surface)


@dataclass(frozen=True)
class VisualMentionRef:
    """A visual mention (one detection) as the matcher sees it."""

    mention_id: str
    image_index: int
    bbox: tuple[float, float, float, float]


MentionRef = "TextualMentionRef | VisualMentionRef"


def head_word(surface: str) -> str:
    """Head of a noun phrase, by the right-headed heuristic: last word."""
    words = re.findall(r"[A-Za-z']+", surface.lower())
    if not words:
        return surface.strip().lower()
    return words[-1].strip("'")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection-over-union of two (x, y, width, height) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _normalize_partition(partition) -> list[frozenset[str]]:
    if isinstance(partition, Mapping):
        groups = [frozenset(str(m) for m in ms) for _, ms in sorted(partition.items())]
    else:
        groups = [frozenset(str(m) for m in ms) for ms in partition]
    groups = [g for g in groups if g]
    seen: set[str] = set()
    for g in groups:
        for m in g:
            if m in seen:
                raise ValidationError(
                    "not_a_partition", f"mention {m!r} appears in more than one chain"
                )
            seen.add(m)
    return groups


def b3(predicted: Partition, gold: Partition) -> tuple[float, float]:
    """B-cubed precision and recall between two mention partitions.

    Per mention m, precision is |R ∩ G| / |R| and recall |R ∩ G| / |G|,
    where R and G are the predicted and gold chains containing m; the
    final scores average these over the predicted-side and gold-side
    mentions respectively. A mention present on only one side counts as
    a singleton on the other. Empty sides score 1.0 (vacuous).
    """
    pred = _normalize_partition(predicted)
    gold_groups = _normalize_partition(gold)
    gold_of = {m: g for g in gold_groups for m in g}
    pred_of = {m: r for r in pred for m in r}

    def side_average(groups: list[frozenset[str]], other_of: dict, own_size) -> float:
        total = 0.0
        count = 0
        for group in groups:
            for m in group:
                other = other_of.get(m, frozenset((m,)))
                total += len(group & other) / own_size(group, other)
                count += 1
        return total / count if count else 1.0

    precision = side_average(pred, gold_of, lambda r, g: len(r))
    recall = side_average(gold_groups, pred_of, lambda g, r: len(g))
    return precision, recall


def match_mentions(
    predicted: Sequence, gold: Sequence, policy: MentionMatchPolicy
) -> dict[str, str]:
    """One-to-one map from predicted mention ids to gold mention ids.

    Unmatched predicted mentions map to fresh invented ids that collide
    with nothing on the gold side.
    """
    mapping: dict[str, str] = {}
    used_gold: set[str] = set()

    pred_textual = [m for m in predicted if isinstance(m, TextualMentionRef)]
    gold_textual = [m for m in gold if isinstance(m, TextualMentionRef)]
    gold_by_sentence: dict[int, list[TextualMentionRef]] = defaultdict(list)
    for g in gold_textual:
        gold_by_sentence[g.sentence_index].append(g)
    for p in sorted(pred_textual, key=lambda m: (m.sentence_index, m.mention_id)):
        for g in gold_by_sentence.get(p.sentence_index, ()):
            if g.mention_id not in used_gold and g.head == p.head:
                mapping[p.mention_id] = g.mention_id
                used_gold.add(g.mention_id)
                break

    pred_visual = [m for m in predicted if isinstance(m, VisualMentionRef)]
    gold_visual = [m for m in gold if isinstance(m, VisualMentionRef)]
    images = {m.image_index for m in pred_visual} | {m.image_index for m in gold_visual}
    for image in sorted(images):
        pv = [m for m in pred_visual if m.image_index == image]
        gv = [m for m in gold_visual if m.image_index == image]
        scored = [
            (iou(p.bbox, g.bbox), p.mention_id, g.mention_id)
            for p in pv
            for g in gv
        ]
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        taken_pred: set[str] = set()
        for value, pid, gid in scored:
            if value < policy.iou_threshold:
                break
            if pid in taken_pred or gid in used_gold:
                continue
            mapping[pid] = gid
            taken_pred.add(pid)
            used_gold.add(gid)

    invented = 0
    for m in predicted:
        if m.mention_id not in mapping:
            mapping[m.mention_id] = f"unmatched::{invented}::{m.mention_id}"
            invented += 1
    return mapping


def coref_score(
    pred_chains: Mapping[str, Sequence],
    gold_chains: Mapping[str, Sequence],
    policy: MentionMatchPolicy = MentionMatchPolicy(),
) -> float:
    """B-cubed precision (x100) of predicted chains against gold chains.

    Chains map chain ids to mention refs. Predicted mentions are first
    mapped onto gold mention ids under `policy`; unmatched predictions
    become invented singleton ids, which depresses precision. Plural
    mentions may place one mention in several chains, so chains are
    scored as overlapping sets: each (mention, chain) membership is one
    precision term, scored against the best-overlapping gold chain that
    contains the mention.
    """
    pred_refs = [m for chain in pred_chains.values() for m in chain]
    gold_refs = [m for chain in gold_chains.values() for m in chain]
    mapping = match_mentions(pred_refs, gold_refs, policy)

    pred_sets = {
        cid: frozenset(mapping[m.mention_id] for m in chain)
        for cid, chain in pred_chains.items()
        if chain
    }
    gold_sets = [
        (cid, frozenset(m.mention_id for m in chain))
        for cid, chain in sorted(gold_chains.items())
        if chain
    ]
    gold_containing: dict[str, list[frozenset[str]]] = defaultdict(list)
    for _, g in gold_sets:
        for m in g:
            gold_containing[m].append(g)

    total = 0.0
    count = 0
    for _, r in sorted(pred_sets.items()):
        for m in r:
            candidates = gold_containing.get(m)
            if candidates:
                overlap = max(len(r & g) for g in candidates)
            else:
                overlap = 1  # invented singleton: only itself
            total += overlap / len(r)
            count += 1
    if count == 0:
        return 100.0
    return 100.0 * total / count


def detection_pr(
    predicted: Sequence,
    gold: Sequence,
    policy: MentionMatchPolicy = MentionMatchPolicy(),
    modality: str = "visual",
) -> tuple[float, float]:
    """Precision/recall of predicted mentions against gold mentions.

    `modality` selects which refs participate ("textual" or "visual").
    Empty-over-empty ratios are defined as 1.0.
    """
    if modality not in ("textual", "visual"):
        raise ValidationError("modality", f"unknown modality: {modality}")
    kind = TextualMentionRef if modality == "textual" else VisualMentionRef
    pred = [m for m in predicted if isinstance(m, kind)]
    gold_refs = [m for m in gold if isinstance(m, kind)]
    mapping = match_mentions(pred, gold_refs, policy)
    matched = sum(1 for m in pred if not mapping[m.mention_id].startswith("unmatched::"))
    precision = matched / len(pred) if pred else 1.0
    recall = matched / len(gold_refs) if gold_refs else 1.0
    return precision, recall


_WORD = re.compile(r"[A-Za-z']+")
_VOWEL_GROUP = re.compile(r"[aeiouy]+")


def count_syllables(word: str) -> int:
    """Syllables by the vowel-group heuristic.

    Count maximal clusters of a/e/i/o/u/y; a trailing silent 'e' drops
    one unless the word ends in 'le'; every word has at least one.
    """
    w = word.lower().strip("'")
    groups = len(_VOWEL_GROUP.findall(w))
    if w.endswith("e") and not w.endswith("le"):
        groups -= 1
    return max(1, groups)


def text_stats(text: str) -> TextStats:
    words = _WORD.findall(text)
    if not words:
        raise UnscorableTextError("unscorable: no words")
    sentences = [s for s in split_sentences(text) if _WORD.search(s)]
    return TextStats(
        n_word=len(words),
        n_sentence=max(1, len(sentences)),
        n_syllable=sum(count_syllables(w) for w in words),
    )


def fkgl_from_stats(
    stats: TextStats, coeffs: FkglCoefficients = DEFAULT_FKGL, clamp: bool = False
) -> float:
    value = (
        coeffs.words_per_sentence * (stats.n_word / stats.n_sentence)
        + coeffs.syllables_per_word * (stats.n_syllable / stats.n_word)
        + coeffs.constant
    )
    if clamp:
        value = max(0.0, min(18.0, value))
    return value


def fkgl(text: str, coeffs: FkglCoefficients = DEFAULT_FKGL, clamp: bool = False) -> float:
    """Flesch-Kincaid grade level of a plain story text.

    Returns the raw formula value; pass clamp=True to clip into the
    conventional [0, 18] reading-age range.
    """
    return fkgl_from_stats(text_stats(text), coeffs, clamp)


_TOKEN = re.compile(r"[a-z0-9']+")


def _tokens(text: str) -> list[str]:
    return [t for t in (tok.strip("'") for tok in _TOKEN.findall(text.lower())) if t]


def _trigrams(tokens: Sequence[str]) -> set[tuple[str, str, str]]:
    return {tuple(tokens[i : i + 3]) for i in range(len(tokens) - 2)}


def inter_story_repetition(stories: Sequence[str]) -> float:
    """Mean percentage of each story's distinct trigrams found in other stories.

    Stories with fewer than three tokens are excluded with a warning.
    """
    if len(stories) < 2:
        raise ValidationError("too_few_stories", "need at least two stories")
    grams = [_trigrams(_tokens(s)) for s in stories]
    scores: list[float] = []
    for i, own in enumerate(grams):
        if not own:
            warnings.warn(f"story {i} has fewer than 3 tokens; excluded from repetition")
            continue
        others = set().union(*(g for j, g in enumerate(grams) if j != i))
        scores.append(100.0 * len(own & others) / len(own))
    if not scores:
        raise ValidationError("too_few_stories", "no story has enough tokens to score")
    return sum(scores) / len(scores)


def character_richness(stories: Sequence) -> tuple[float, float]:
    """(mean clusters per story, mean mentions per story)."""
    if not stories:
        raise ValidationError("empty_corpus", "need at least one story")
    chars = sum(len(s.chains) for s in stories) / len(stories)
    mentions = sum(len(s.mentions) for s in stories) / len(stories)
    return chars, mentions


def judge_accuracy(verdicts: Sequence, human: Sequence) -> dict[str, float]:
    """Percent agreement with human verdicts, per judging dimension.

    Inputs must be aligned pairwise (same order, same length). Keys come
    back in the standard reporting order: specificity, coherence,
    engagement, grounding, characters, overall_preference.
    """
    if len(verdicts) != len(human):
        raise ValidationError(
            "length_mismatch", f"{len(verdicts)} verdicts vs {len(human)} human judgments"
        )
    if not verdicts:
        raise ValidationError("empty_verdicts", "need at least one verdict pair")
    result: dict[str, float] = {}
    for dim in JUDGE_DIMENSIONS:
        agree = sum(
            1 for v, h in zip(verdicts, human) if getattr(v, dim) == getattr(h, dim)
        )
        result[dim] = 100.0 * agree / len(verdicts)
    return result
