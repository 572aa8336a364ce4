"""Batch orchestration: stage execution, resume manifests, eval reports.

Each sequence flows through three stages (visual chains, textual chains,
alignment) whose outputs land under the out root. A per-sequence
manifest records the input hashes and stage config that produced each
output, so re-runs skip stages whose inputs are unchanged and a partial
corpus resumes where it left off. Evaluation reads predictions and gold
documents and assembles one report document embedding the full
effective configuration.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import corpus as C
from .alignment import align
from .annotations import parse_annotated
from .errors import DocumentError, DriftError, ValidationError
from .llm import verify_coref_output
from .metrics import (
    FkglCoefficients,
    MentionMatchPolicy,
    TextualMentionRef,
    VisualMentionRef,
    character_richness,
    fkgl,
    inter_story_repetition,
    match_mentions,
)
from .model import AnnotatedStory, Detection, MultimodalChain, VisualChain
from .visual import (
    DEFAULT_TAU,
    EMBEDDING_COSINE,
    PAIRWISE_TABLE,
    FilterPolicy,
    SimilaritySource,
    build_chains,
    filter_detections,
)

KNOWN_METRICS = ("richness", "fkgl", "repetition", "detection", "coref", "alignment")

_SIMILARITY_ALIASES = {
    "embedding": EMBEDDING_COSINE,
    "table": PAIRWISE_TABLE,
    EMBEDDING_COSINE: EMBEDDING_COSINE,
    PAIRWISE_TABLE: PAIRWISE_TABLE,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Effective configuration for a batch run; embedded in every report."""

    tau: float = DEFAULT_TAU
    similarity: str = PAIRWISE_TABLE
    aggregate: str = "mean"
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    min_overlap: int = 1
    metrics: tuple[str, ...] = KNOWN_METRICS
    iou_threshold: float = 0.5
    fkgl: FkglCoefficients = field(default_factory=FkglCoefficients)
    verify_stories: bool = True

    def __post_init__(self):
        if self.similarity not in _SIMILARITY_ALIASES:
            raise ValidationError("similarity_mode", f"unknown similarity mode: {self.similarity}")
        object.__setattr__(self, "similarity", _SIMILARITY_ALIASES[self.similarity])
        unknown = [m for m in self.metrics if m not in KNOWN_METRICS]
        if unknown:
            raise ValidationError("unknown_metric", f"unknown metric name: {', '.join(unknown)}")
        object.__setattr__(self, "metrics", tuple(self.metrics))

    def to_doc(self) -> dict:
        return {
            "tau": self.tau,
            "similarity": self.similarity,
            "aggregate": self.aggregate,
            "policy": self.policy.to_doc(),
            "min_overlap": self.min_overlap,
            "metrics": list(self.metrics),
            "iou_threshold": self.iou_threshold,
            "fkgl": {
                "a": self.fkgl.words_per_sentence,
                "b": self.fkgl.syllables_per_word,
                "c": self.fkgl.constant,
            },
            "verify_stories": self.verify_stories,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PipelineConfig":
        kwargs: dict[str, Any] = {}
        for key in ("tau", "similarity", "aggregate", "min_overlap", "iou_threshold",
                    "verify_stories"):
            if key in doc:
                kwargs[key] = doc[key]
        if "metrics" in doc:
            kwargs["metrics"] = tuple(doc["metrics"])
        if "policy" in doc:
            kwargs["policy"] = FilterPolicy.from_doc(doc["policy"])
        if "fkgl" in doc:
            f = doc["fkgl"]
            kwargs["fkgl"] = FkglCoefficients(
                words_per_sentence=f.get("a", 0.39),
                syllables_per_word=f.get("b", 11.8),
                constant=f.get("c", -15.59),
            )
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path | None, **overrides) -> "PipelineConfig":
        base = cls.from_doc(json.loads(Path(path).read_text("utf-8"))) if path else cls()
        overrides = {k: v for k, v in overrides.items() if v is not None}
        policy_fields = {k: overrides.pop(k) for k in list(overrides) if k in (
            "person_label", "min_confidence", "min_area_fraction")}
        if policy_fields:
            policy_doc = base.policy.to_doc()
            policy_doc.update(policy_fields)
            overrides["policy"] = FilterPolicy.from_doc(policy_doc)
        return replace(base, **overrides) if overrides else base


def _vchains_stage_config(cfg: PipelineConfig) -> dict:
    return {
        "tau": cfg.tau,
        "similarity": cfg.similarity,
        "aggregate": cfg.aggregate,
        "policy": cfg.policy.to_doc(),
    }


def _align_stage_config(cfg: PipelineConfig) -> dict:
    return {"min_overlap": cfg.min_overlap}


def similarity_source(data: C.SequenceData, cfg: PipelineConfig) -> SimilaritySource:
    if cfg.similarity == PAIRWISE_TABLE:
        if data.pairwise is None:
            raise DocumentError(
                str(data.directory / C.PAIRWISE_DOC),
                "pairwise similarity mode needs a pairwise.doc",
            )
        return SimilaritySource(
            mode=PAIRWISE_TABLE, pairwise_table=data.pairwise, aggregate=cfg.aggregate
        )
    return SimilaritySource(mode=EMBEDDING_COSINE, aggregate=cfg.aggregate)


def build_vchains(data: C.SequenceData, cfg: PipelineConfig) -> list[VisualChain]:
    return build_chains(
        data.sequence,
        data.detections_by_image,
        cfg.policy,
        similarity_source(data, cfg),
        tau=cfg.tau,
    )


def build_story(data: C.SequenceData, cfg: PipelineConfig) -> AnnotatedStory:
    if data.annotated_text is None:
        raise DocumentError(
            str(data.directory / C.STORY_ANNOTATED_TXT), "annotated story is required"
        )
    if cfg.verify_stories and data.story_text is not None:
        return replace_story_id(
            verify_coref_output(data.story_text, data.annotated_text), data.sequence_id
        )
    return parse_annotated(data.annotated_text, story_id=data.sequence_id)


def replace_story_id(story: AnnotatedStory, story_id: str) -> AnnotatedStory:
    return AnnotatedStory(
        story_id=story_id,
        sentences=story.sentences,
        mentions=story.mentions,
        chains=story.chains,
    )


def build_mmchains(
    data: C.SequenceData,
    vchains: list[VisualChain],
    story: AnnotatedStory,
    cfg: PipelineConfig,
) -> list[MultimodalChain]:
    return align(story, vchains, data.sequence.image_count, min_overlap=cfg.min_overlap)


# --- manifests ----------------------------------------------------------------


def _load_manifest(out_dir: Path) -> dict:
    path = out_dir / C.MANIFEST_DOC
    if not path.exists():
        return {}
    try:
        return C.read_document(path, kind="stage_manifest").get("stages", {})
    except DocumentError:
        return {}


def _stage_entry(inputs: Mapping[str, Path], config: Mapping, outputs: Sequence[str]) -> dict:
    return {
        "config": dict(config),
        "inputs": {name: C.sha256_file(path) for name, path in inputs.items() if path.exists()},
        "outputs": list(outputs),
    }


def _stage_fresh(previous: Mapping | None, entry: Mapping, out_dir: Path) -> bool:
    if previous != entry:
        return False
    return all((out_dir / name).exists() for name in entry["outputs"])


def process_sequence(
    root: Path, out_root: Path, sequence_id: str, cfg: PipelineConfig
) -> list[tuple[str, str, str]]:
    """Run vchains -> tchains -> align for one sequence, skipping fresh stages.

    Returns (sequence_id, stage, "computed"|"cached") events.
    """
    data = C.load_sequence(root, sequence_id)
    out_dir = Path(out_root) / sequence_id
    out_dir.mkdir(parents=True, exist_ok=True)
    previous = _load_manifest(out_dir)
    manifest: dict[str, dict] = {}
    events: list[tuple[str, str, str]] = []

    def run_stage(name: str, inputs: Mapping[str, Path], config: Mapping,
                  outputs: Sequence[str], compute) -> None:
        entry = _stage_entry(inputs, config, outputs)
        if _stage_fresh(previous.get(name), entry, out_dir):
            events.append((sequence_id, name, "cached"))
        else:
            compute()
            events.append((sequence_id, name, "computed"))
        manifest[name] = entry

    directory = data.directory

    def compute_vchains() -> None:
        chains = build_vchains(data, cfg)
        C.write_document(
            out_dir / C.VCHAINS_DOC,
            C.vchains_to_doc(sequence_id, chains, _vchains_stage_config(cfg)),
        )

    run_stage(
        "vchains",
        {
            C.IMAGES_META: directory / C.IMAGES_META,
            C.DETECTIONS_DOC: directory / C.DETECTIONS_DOC,
            C.PAIRWISE_DOC: directory / C.PAIRWISE_DOC,
        },
        _vchains_stage_config(cfg),
        [C.VCHAINS_DOC],
        compute_vchains,
    )

    def compute_story() -> None:
        story = build_story(data, cfg)
        C.write_document(out_dir / C.STORY_DOC, C.story_to_doc(story))

    run_stage(
        "tchains",
        {
            C.STORY_ANNOTATED_TXT: directory / C.STORY_ANNOTATED_TXT,
            C.STORY_TXT: directory / C.STORY_TXT,
        },
        {"verify_stories": cfg.verify_stories},
        [C.STORY_DOC],
        compute_story,
    )

    def compute_align() -> None:
        vchains = C.vchains_from_doc(C.read_document(out_dir / C.VCHAINS_DOC, "visual_chains"))
        story = C.story_from_doc(C.read_document(out_dir / C.STORY_DOC, "annotated_story"))
        chains = build_mmchains(data, vchains, story, cfg)
        C.write_document(
            out_dir / C.MMCHAINS_DOC,
            C.mmchains_to_doc(sequence_id, chains, _align_stage_config(cfg)),
        )

    run_stage(
        "align",
        {C.VCHAINS_DOC: out_dir / C.VCHAINS_DOC, C.STORY_DOC: out_dir / C.STORY_DOC},
        _align_stage_config(cfg),
        [C.MMCHAINS_DOC],
        compute_align,
    )

    C.write_document(
        out_dir / C.MANIFEST_DOC,
        {"kind": "stage_manifest", "sequence_id": sequence_id, "stages": manifest},
    )
    return events


def run_stages(
    root: Path, out_root: Path, cfg: PipelineConfig, workers: int | None = None
) -> list[tuple[str, str, str]]:
    """Run the per-sequence stages for a whole corpus on a worker pool."""
    sequence_ids = C.discover_sequences(root)
    events: list[tuple[str, str, str]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for seq_events in pool.map(
            lambda s: process_sequence(root, out_root, s, cfg), sequence_ids
        ):
            events.extend(seq_events)
    events.sort()
    return events


# --- evaluation ---------------------------------------------------------------


@dataclass
class _SequenceEval:
    """Prediction and gold bundles for one sequence."""

    sequence_id: str
    story: AnnotatedStory
    vchains: list[VisualChain]
    mmchains: list[MultimodalChain]
    boxes: dict[tuple[int, str], tuple[float, float, float, float]]
    gold_story: AnnotatedStory | None
    gold_vchains: list[VisualChain] | None
    gold_mmchains: list[MultimodalChain] | None
    gold_boxes: dict[tuple[int, str], tuple[float, float, float, float]] | None


def _boxes_of(detections: Sequence[Detection]) -> dict:
    return {(d.image_index, d.detection_id): d.bbox for d in detections}


def _load_eval_sequence(
    root: Path,
    out_root: Path,
    sequence_id: str,
    cfg: PipelineConfig,
    pred_gold: bool,
    gold_root: Path | None,
    need_gold: bool,
) -> _SequenceEval:
    gold_dir = (Path(gold_root) / sequence_id) if gold_root else Path(root) / sequence_id / C.GOLD_DIR
    pred_dir = gold_dir if pred_gold else Path(out_root) / sequence_id

    story = C.story_from_doc(C.read_document(pred_dir / C.STORY_DOC, "annotated_story"))
    vchains = C.vchains_from_doc(C.read_document(pred_dir / C.VCHAINS_DOC, "visual_chains"))
    mmchains = C.mmchains_from_doc(C.read_document(pred_dir / C.MMCHAINS_DOC, "multimodal_chains"))
    if pred_gold:
        boxes = _boxes_of(
            C.detections_from_doc(C.read_document(gold_dir / C.DETECTIONS_DOC, "detections"))
        )
    else:
        boxes = _boxes_of(
            C.detections_from_doc(
                C.read_document(Path(root) / sequence_id / C.DETECTIONS_DOC, "detections")
            )
        )

    gold_story = gold_vchains = gold_mmchains = gold_boxes = None
    if need_gold:
        gold_story = C.story_from_doc(C.read_document(gold_dir / C.STORY_DOC, "annotated_story"))
        gold_vchains = C.vchains_from_doc(C.read_document(gold_dir / C.VCHAINS_DOC, "visual_chains"))
        gold_mmchains = C.mmchains_from_doc(
            C.read_document(gold_dir / C.MMCHAINS_DOC, "multimodal_chains")
        )
        gold_boxes = _boxes_of(
            C.detections_from_doc(C.read_document(gold_dir / C.DETECTIONS_DOC, "detections"))
        )
    return _SequenceEval(
        sequence_id, story, vchains, mmchains, boxes,
        gold_story, gold_vchains, gold_mmchains, gold_boxes,
    )


def _textual_refs(story: AnnotatedStory) -> dict[str, TextualMentionRef]:
    return {
        m.mention_id: TextualMentionRef(f"t:{m.mention_id}", m.sentence_index, m.surface)
        for m in story.mentions
    }


def _visual_refs(
    chains: Sequence[VisualChain], boxes: Mapping[tuple[int, str], tuple]
) -> dict[tuple[int, str], VisualMentionRef]:
    refs = {}
    for chain in chains:
        for member in chain.members:
            i, d = member
            refs[member] = VisualMentionRef(f"v:{i}:{d}", i, tuple(boxes[member]))
    return refs


def _mm_chain_refs(
    mmchains: Sequence[MultimodalChain],
    textual: Mapping[str, TextualMentionRef],
    visual: Mapping[tuple[int, str], VisualMentionRef],
) -> dict[str, list]:
    chains: dict[str, list] = {}
    for chain in mmchains:
        refs: list = [visual[m] for m in chain.visual_members]
        refs.extend(textual[m] for m in chain.textual_members)
        chains[chain.chain_id] = refs
    return chains


def _chain_mapping(pred_sets: Mapping[str, frozenset], gold_sets: Mapping[str, frozenset]) -> dict:
    """Map each predicted chain to the gold chain sharing most members.

    Zero overlap or a tie between gold chains leaves the prediction
    unmapped.
    """
    mapping: dict[str, str] = {}
    for pid, pset in pred_sets.items():
        scored = sorted(
            ((len(pset & gset), gid) for gid, gset in gold_sets.items()),
            key=lambda t: (-t[0], t[1]),
        )
        if not scored or scored[0][0] == 0:
            continue
        if len(scored) > 1 and scored[1][0] == scored[0][0]:
            continue
        mapping[pid] = scored[0][1]
    return mapping


def _overlap_precision(
    pred_sets: Mapping[str, frozenset], gold_sets: Mapping[str, frozenset]
) -> tuple[float, int]:
    """Sum of per-membership precision terms plus the membership count.

    Chains may overlap (plural mentions sit in several chains); each
    (mention, chain) membership contributes one term, scored against the
    best-overlapping gold chain containing the mention.
    """
    gold_containing: dict[str, list[frozenset]] = {}
    for _, gset in sorted(gold_sets.items()):
        for m in gset:
            gold_containing.setdefault(m, []).append(gset)
    total = 0.0
    count = 0
    for _, rset in sorted(pred_sets.items()):
        if not rset:
            continue
        for m in rset:
            candidates = gold_containing.get(m)
            overlap = max(len(rset & g) for g in candidates) if candidates else 1
            total += overlap / len(rset)
            count += 1
    return total, count


def evaluate_corpus(
    root: Path,
    out_root: Path,
    cfg: PipelineConfig,
    metric_names: Sequence[str] | None = None,
    pred_gold: bool = False,
    gold_root: Path | None = None,
) -> dict:
    """Compute the selected metrics and assemble the report document."""
    names = tuple(metric_names) if metric_names is not None else cfg.metrics
    unknown = [m for m in names if m not in KNOWN_METRICS]
    if unknown:
        raise ValidationError("unknown_metric", f"unknown metric name: {', '.join(unknown)}")
    need_gold = bool({"detection", "coref", "alignment"} & set(names))
    policy = MentionMatchPolicy(iou_threshold=cfg.iou_threshold)

    sequence_ids = C.discover_sequences(root)
    evals = [
        _load_eval_sequence(root, out_root, s, cfg, pred_gold, gold_root, need_gold)
        for s in sequence_ids
    ]

    per_seq: dict[str, dict] = {s: {} for s in sequence_ids}
    corpus_section: dict[str, Any] = {}

    if "richness" in names:
        stories = [e.story for e in evals]
        chars, mentions = character_richness(stories)
        corpus_section["character_richness"] = {
            "chars_per_story": chars,
            "mentions_per_story": mentions,
        }
        for e in evals:
            per_seq[e.sequence_id]["richness"] = {
                "clusters": len(e.story.chains),
                "mentions": len(e.story.mentions),
            }

    if "fkgl" in names:
        values = {}
        for e in evals:
            values[e.sequence_id] = fkgl(e.story.text, cfg.fkgl)
            per_seq[e.sequence_id]["fkgl"] = values[e.sequence_id]
        corpus_section["fkgl_mean"] = sum(values.values()) / len(values)

    if "repetition" in names:
        corpus_section["inter_story_repetition"] = inter_story_repetition(
            [e.story.text for e in evals]
        )

    if "detection" in names:
        pooled = {"textual": [0, 0, 0], "visual": [0, 0, 0]}  # matched, predicted, gold
        for e in evals:
            counts = _detection_counts(e, policy)
            per_seq[e.sequence_id]["detection"] = {
                mod: _pr_dict(*counts[mod]) for mod in ("textual", "visual")
            }
            for mod in ("textual", "visual"):
                for i in range(3):
                    pooled[mod][i] += counts[mod][i]
        corpus_section["detection"] = {mod: _pr_dict(*pooled[mod]) for mod in ("textual", "visual")}

    if "coref" in names:
        total = 0.0
        count = 0
        for e in evals:
            t, c = _coref_terms(e, policy)
            per_seq[e.sequence_id]["coref_precision"] = 100.0 * t / c if c else 100.0
            total += t
            count += c
        corpus_section["coref_precision"] = 100.0 * total / count if count else 100.0

    if "alignment" in names:
        pooled = [0, 0, 0]  # correct, predicted, gold
        for e in evals:
            correct, predicted, gold = _alignment_counts(e, policy)
            per_seq[e.sequence_id]["alignment"] = {
                "precision": correct / predicted if predicted else 1.0,
                "recall": correct / gold if gold else 1.0,
            }
            pooled[0] += correct
            pooled[1] += predicted
            pooled[2] += gold
        corpus_section["alignment"] = {
            "precision": pooled[0] / pooled[1] if pooled[1] else 1.0,
            "recall": pooled[0] / pooled[2] if pooled[2] else 1.0,
        }

    # External tool scores are never computed in-process; the report only
    # carries them through when a scores file is supplied.
    external = {"grooviist": None, "mauve": None}
    external_path = Path(root) / C.EXTERNAL_DOC
    if external_path.exists():
        doc = C.read_document(external_path, kind="external_scores")
        for key in external:
            if doc.get(key) is not None:
                external[key] = doc[key]
    corpus_section.update(external)

    report_cfg = cfg.to_doc()
    report_cfg["metrics"] = list(names)
    report_cfg["pred_gold"] = pred_gold
    return {
        "kind": "eval_report",
        "config": report_cfg,
        "corpus": corpus_section,
        "sequences": per_seq,
    }


def _pr_dict(matched: int, predicted: int, gold: int) -> dict:
    return {
        "precision": matched / predicted if predicted else 1.0,
        "recall": matched / gold if gold else 1.0,
    }


def _detection_counts(e: _SequenceEval, policy: MentionMatchPolicy) -> dict[str, tuple]:
    pred_textual = list(_textual_refs(e.story).values())
    gold_textual = list(_textual_refs(e.gold_story).values())
    pred_visual = list(_visual_refs(e.vchains, e.boxes).values())
    gold_visual = list(_visual_refs(e.gold_vchains, e.gold_boxes).values())
    out = {}
    for mod, pred, gold in (
        ("textual", pred_textual, gold_textual),
        ("visual", pred_visual, gold_visual),
    ):
        mapping = match_mentions(pred, gold, policy)
        matched = sum(
            1 for m in pred if not mapping[m.mention_id].startswith("unmatched::")
        )
        out[mod] = (matched, len(pred), len(gold))
    return out


def _mapped_chain_sets(e: _SequenceEval, policy: MentionMatchPolicy) -> tuple[dict, dict]:
    pred_textual = _textual_refs(e.story)
    pred_visual = _visual_refs(e.vchains, e.boxes)
    gold_textual = _textual_refs(e.gold_story)
    gold_visual = _visual_refs(e.gold_vchains, e.gold_boxes)

    pred_chains = _mm_chain_refs(e.mmchains, pred_textual, pred_visual)
    gold_chains = _mm_chain_refs(e.gold_mmchains, gold_textual, gold_visual)

    # A plural mention sits in several chains; match each mention once.
    pred_refs = {m.mention_id: m for chain in pred_chains.values() for m in chain}
    gold_refs = {m.mention_id: m for chain in gold_chains.values() for m in chain}
    mapping = match_mentions(list(pred_refs.values()), list(gold_refs.values()), policy)

    pred_sets = {
        cid: frozenset(mapping[m.mention_id] for m in chain)
        for cid, chain in pred_chains.items()
        if chain
    }
    gold_sets = {
        cid: frozenset(m.mention_id for m in chain)
        for cid, chain in gold_chains.items()
        if chain
    }
    return pred_sets, gold_sets


def _coref_terms(e: _SequenceEval, policy: MentionMatchPolicy) -> tuple[float, int]:
    pred_sets, gold_sets = _mapped_chain_sets(e, policy)
    return _overlap_precision(pred_sets, gold_sets)


def _alignment_counts(e: _SequenceEval, policy: MentionMatchPolicy) -> tuple[int, int, int]:
    """Correct/predicted/gold pair counts after mapping chains to gold ids."""
    # Map predicted textual clusters and visual chains onto gold ids by
    # shared (matched) membership, then compare the fused pairings.
    gold_textual = _textual_refs(e.gold_story)
    pred_textual = _textual_refs(e.story)
    t_mapping = match_mentions(
        list(pred_textual.values()), list(gold_textual.values()), policy
    )
    pred_cluster_sets = {
        cid: frozenset(t_mapping[pred_textual[m].mention_id] for m in members)
        for cid, members in e.story.chains.items()
    }
    gold_cluster_sets = {
        cid: frozenset(gold_textual[m].mention_id for m in members)
        for cid, members in e.gold_story.chains.items()
    }
    cluster_map = _chain_mapping(pred_cluster_sets, gold_cluster_sets)

    gold_visual = _visual_refs(e.gold_vchains, e.gold_boxes)
    pred_visual = _visual_refs(e.vchains, e.boxes)
    v_mapping = match_mentions(
        list(pred_visual.values()), list(gold_visual.values()), policy
    )
    pred_chain_sets = {
        ch.chain_id: frozenset(v_mapping[pred_visual[m].mention_id] for m in ch.members)
        for ch in e.vchains
    }
    gold_chain_sets = {
        ch.chain_id: frozenset(gold_visual[m].mention_id for m in ch.members)
        for ch in e.gold_vchains
    }
    vchain_map = _chain_mapping(pred_chain_sets, gold_chain_sets)

    pred_pairs = {
        (
            cluster_map.get(c.textual_cluster_id, f"?t:{c.textual_cluster_id}"),
            vchain_map.get(c.visual_chain_id, f"?v:{c.visual_chain_id}"),
        )
        for c in e.mmchains
        if c.is_fused
    }
    gold_pairs = {
        (c.textual_cluster_id, c.visual_chain_id) for c in e.gold_mmchains if c.is_fused
    }
    return len(pred_pairs & gold_pairs), len(pred_pairs), len(gold_pairs)
