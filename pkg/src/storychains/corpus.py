"""Corpus directory layout, document I/O and corpus validation.

A corpus root holds one directory per sequence:

    <root>/<sequence_id>/
        images.meta            image sequence document
        detections.doc         detections document
        pairwise.doc           optional pairwise similarity scores
        story.txt              plain story text
        story.annotated.txt    tagged story text
        gold/                  optional gold-standard documents
            detections.doc, story.doc, vchains.doc, mmchains.doc

Pipeline outputs land under <root>/out/<sequence_id>/ by default. Every
document is one UTF-8 JSON file in canonical form (sorted keys,
two-space indent) carrying `format_version` and `kind` fields.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

from .annotations import parse_annotated
from .errors import DocumentError, ParseError, ValidationError
from .model import (
    FORMAT_VERSION,
    AnnotatedStory,
    Detection,
    ImageSequence,
    MultimodalChain,
    VisualChain,
    canonical_dumps,
)

IMAGES_META = "images.meta"
DETECTIONS_DOC = "detections.doc"
PAIRWISE_DOC = "pairwise.doc"
STORY_TXT = "story.txt"
STORY_ANNOTATED_TXT = "story.annotated.txt"
GOLD_DIR = "gold"
OUT_DIR = "out"

VCHAINS_DOC = "vchains.doc"
STORY_DOC = "story.doc"
MMCHAINS_DOC = "mmchains.doc"
MANIFEST_DOC = "manifest.doc"
REPORT_DOC = "report.doc"
EXTERNAL_DOC = "external.doc"

_RESERVED_DIRS = {OUT_DIR}


@dataclass(frozen=True)
class Finding:
    """One violated invariant: where, what entity, which rule."""

    file: str
    entity_id: str | None
    rule: str
    message: str

    def __str__(self) -> str:
        entity = f" [{self.entity_id}]" if self.entity_id else ""
        return f"{self.file}{entity}: {self.rule}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, file: str, entity_id: str | None, rule: str, message: str) -> None:
        self.findings.append(Finding(file, entity_id, rule, message))

    def add_error(self, file: str, exc: ValidationError) -> None:
        self.add(file, exc.entity_id, exc.rule, str(exc))


def read_document(path: Path, kind: str | None = None) -> dict:
    """Read one canonical JSON document; malformed content is fatal."""
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise DocumentError(str(path), "file not found") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DocumentError(str(path), f"unreadable file: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        byte_offset = len(text[: exc.pos].encode("utf-8"))
        raise DocumentError(str(path), f"malformed document: {exc.msg}", byte_offset) from exc
    if not isinstance(doc, dict):
        raise DocumentError(str(path), "malformed document: top level must be an object", 0)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DocumentError(str(path), f"unsupported format_version: {version!r}")
    if kind is not None and doc.get("kind") != kind:
        raise DocumentError(str(path), f"expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def write_document(path: Path, doc: Mapping[str, Any]) -> None:
    payload = dict(doc)
    payload.setdefault("format_version", FORMAT_VERSION)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(payload), "utf-8")


def read_annotated_story(path: Path, story_id: str) -> AnnotatedStory:
    """Parse an annotated story file; parse failures are fatal documents errors."""
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise DocumentError(str(path), "file not found") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DocumentError(str(path), f"unreadable file: {exc}") from exc
    try:
        return parse_annotated(text, story_id=story_id)
    except ParseError as exc:
        raise DocumentError(str(path), f"malformed document: {exc}", exc.byte_offset) from exc


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def discover_sequences(root: Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DocumentError(str(root), "corpus root is not a directory")
    found = sorted(
        p.name
        for p in root.iterdir()
        if p.is_dir() and p.name not in _RESERVED_DIRS and not p.name.startswith(".")
    )
    if not found:
        raise DocumentError(str(root), "no sequence directories found")
    return found


# --- document <-> domain object bundles -------------------------------------


def sequence_from_doc(doc: Mapping) -> ImageSequence:
    return ImageSequence.from_doc(doc)


def detections_from_doc(doc: Mapping) -> list[Detection]:
    return [Detection.from_doc(d) for d in doc.get("detections", [])]


def detections_to_doc(sequence_id: str, detections: list[Detection]) -> dict:
    ordered = sorted(detections, key=lambda d: (d.image_index, d.detection_id))
    return {
        "kind": "detections",
        "sequence_id": sequence_id,
        "detections": [d.to_doc() for d in ordered],
    }


def pairwise_from_doc(doc: Mapping) -> dict[tuple[str, str], float]:
    table: dict[tuple[str, str], float] = {}
    for entry in doc.get("scores", []):
        table[(str(entry["a"]), str(entry["b"]))] = float(entry["score"])
    return table


def pairwise_to_doc(sequence_id: str, table: Mapping[tuple[str, str], float]) -> dict:
    return {
        "kind": "pairwise_scores",
        "sequence_id": sequence_id,
        "scores": [
            {"a": a, "b": b, "score": score} for (a, b), score in sorted(table.items())
        ],
    }


def vchains_from_doc(doc: Mapping) -> list[VisualChain]:
    return [VisualChain.from_doc(c) for c in doc.get("chains", [])]


def vchains_to_doc(sequence_id: str, chains: list[VisualChain], config: Mapping) -> dict:
    return {
        "kind": "visual_chains",
        "sequence_id": sequence_id,
        "config": dict(config),
        "chains": [c.to_doc() for c in chains],
    }


def story_from_doc(doc: Mapping) -> AnnotatedStory:
    return AnnotatedStory.from_doc(doc)


def story_to_doc(story: AnnotatedStory) -> dict:
    doc = story.to_doc()
    doc["kind"] = "annotated_story"
    return doc


def mmchains_from_doc(doc: Mapping) -> list[MultimodalChain]:
    return [MultimodalChain.from_doc(c) for c in doc.get("chains", [])]


def mmchains_to_doc(sequence_id: str, chains: list[MultimodalChain], config: Mapping) -> dict:
    return {
        "kind": "multimodal_chains",
        "sequence_id": sequence_id,
        "config": dict(config),
        "chains": [c.to_doc() for c in chains],
    }


@dataclass
class SequenceData:
    """Everything loadable for one sequence directory."""

    sequence_id: str
    directory: Path
    sequence: ImageSequence
    detections: list[Detection]
    pairwise: dict[tuple[str, str], float] | None
    story_text: str | None
    annotated_text: str | None

    @property
    def detections_by_image(self) -> list[list[Detection]]:
        groups: list[list[Detection]] = [[] for _ in range(self.sequence.image_count)]
        for d in self.detections:
            groups[d.image_index].append(d)
        return groups

    def gold_path(self, name: str) -> Path:
        return self.directory / GOLD_DIR / name


def load_sequence(root: Path, sequence_id: str) -> SequenceData:
    directory = Path(root) / sequence_id
    seq = sequence_from_doc(read_document(directory / IMAGES_META, kind="image_sequence"))
    if seq.sequence_id != sequence_id:
        raise DocumentError(
            str(directory / IMAGES_META),
            f"sequence_id {seq.sequence_id!r} does not match directory {sequence_id!r}",
        )
    detections = detections_from_doc(read_document(directory / DETECTIONS_DOC, kind="detections"))
    for d in detections:
        if d.image_index >= seq.image_count:
            raise ValidationError(
                "image_index_range",
                f"detection {d.detection_id} image_index {d.image_index} "
                f">= image_count {seq.image_count}",
                d.detection_id,
            )
    pairwise = None
    if (directory / PAIRWISE_DOC).exists():
        pairwise = pairwise_from_doc(read_document(directory / PAIRWISE_DOC, kind="pairwise_scores"))
    story_text = None
    if (directory / STORY_TXT).exists():
        story_text = (directory / STORY_TXT).read_text("utf-8")
    annotated_text = None
    if (directory / STORY_ANNOTATED_TXT).exists():
        annotated_text = (directory / STORY_ANNOTATED_TXT).read_text("utf-8")
    return SequenceData(
        sequence_id=sequence_id,
        directory=directory,
        sequence=seq,
        detections=detections,
        pairwise=pairwise,
        story_text=story_text,
        annotated_text=annotated_text,
    )


# --- validation ---------------------------------------------------------------


def _validate_detections(
    report: ValidationReport,
    file: str,
    doc: Mapping,
    seq: ImageSequence | None,
    embedding_length: list[int | None],
) -> None:
    seen: set[tuple[int, str]] = set()
    for raw in doc.get("detections", []):
        try:
            det = Detection.from_doc(raw)
        except ValidationError as exc:
            report.add_error(file, exc)
            continue
        key = (det.image_index, det.detection_id)
        if key in seen:
            report.add(
                file, det.detection_id, "duplicate_detection_id",
                f"detection_id {det.detection_id!r} repeats within image {det.image_index}",
            )
        seen.add(key)
        if seq is not None and det.image_index >= seq.image_count:
            report.add(
                file, det.detection_id, "image_index_range",
                f"image_index {det.image_index} >= image_count {seq.image_count}",
            )
        if seq is not None and seq.image_sizes is not None and det.image_index < seq.image_count:
            width, height = seq.image_sizes[det.image_index]
            computed = (det.bbox[2] * det.bbox[3]) / (width * height)
            if abs(computed - det.area_fraction) > 1e-6:
                report.add(
                    file, det.detection_id, "area_fraction_mismatch",
                    f"stored area_fraction {det.area_fraction} differs from computed {computed}",
                )
        if det.embedding is not None:
            if embedding_length[0] is None:
                embedding_length[0] = len(det.embedding)
            elif len(det.embedding) != embedding_length[0]:
                report.add(
                    file, det.detection_id, "embedding_length_mismatch",
                    f"embedding length {len(det.embedding)} != corpus length {embedding_length[0]}",
                )


def _validate_pairwise(
    report: ValidationReport, file: str, doc: Mapping, detections: list[Detection]
) -> None:
    refs = {d.ref for d in detections}
    seen_pairs: set[tuple[str, str]] = set()
    for entry in doc.get("scores", []):
        if not isinstance(entry, Mapping) or not {"a", "b", "score"} <= set(entry):
            report.add(file, None, "malformed_score_entry", f"bad entry: {entry!r}")
            continue
        a, b, score = str(entry["a"]), str(entry["b"]), entry["score"]
        pair_id = f"({a}, {b})"
        for ref in (a, b):
            if ref not in refs:
                report.add(file, pair_id, "unknown_detection_ref", f"no detection {ref!r}")
        if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
            report.add(file, pair_id, "score_range", f"score out of [0,1]: {score!r}")
        key = (a, b) if a <= b else (b, a)
        if key in seen_pairs:
            report.add(file, pair_id, "duplicate_pair", "pair listed twice")
        seen_pairs.add(key)


def _validate_vchains(
    report: ValidationReport, file: str, doc: Mapping, detections: list[Detection] | None
) -> None:
    known = {(d.image_index, d.detection_id) for d in detections} if detections is not None else None
    seen_ids: set[str] = set()
    for raw in doc.get("chains", []):
        try:
            chain = VisualChain.from_doc(raw)
        except ValidationError as exc:
            report.add_error(file, exc)
            continue
        if chain.chain_id in seen_ids:
            report.add(file, chain.chain_id, "duplicate_chain_id", "chain_id repeats")
        seen_ids.add(chain.chain_id)
        if known is not None:
            for member in chain.members:
                if member not in known:
                    report.add(
                        file, chain.chain_id, "unknown_member",
                        f"member {member} does not resolve to a detection",
                    )


def validate_corpus(corpus_root: Path) -> ValidationReport:
    """Check every invariant across a corpus directory.

    Returns a report of findings; `report.ok` is true iff there are
    none. Unreadable files and structurally malformed documents raise
    DocumentError instead (naming the file and byte offset).
    """
    root = Path(corpus_root)
    report = ValidationReport()
    embedding_length: list[int | None] = [None]

    for sequence_id in discover_sequences(root):
        directory = root / sequence_id
        rel = lambda name: str(Path(sequence_id) / name)  # noqa: E731

        seq: ImageSequence | None = None
        meta_doc = read_document(directory / IMAGES_META, kind="image_sequence")
        try:
            seq = sequence_from_doc(meta_doc)
            if seq.sequence_id != sequence_id:
                report.add(
                    rel(IMAGES_META), seq.sequence_id, "sequence_id_mismatch",
                    f"sequence_id {seq.sequence_id!r} does not match directory name",
                )
        except ValidationError as exc:
            report.add_error(rel(IMAGES_META), exc)

        detections: list[Detection] = []
        det_path = directory / DETECTIONS_DOC
        if det_path.exists():
            det_doc = read_document(det_path, kind="detections")
            _validate_detections(report, rel(DETECTIONS_DOC), det_doc, seq, embedding_length)
            try:
                detections = detections_from_doc(det_doc)
            except ValidationError:
                detections = []
        else:
            report.add(rel(DETECTIONS_DOC), None, "missing_file", "detections document is required")

        pairwise_path = directory / PAIRWISE_DOC
        if pairwise_path.exists():
            pw_doc = read_document(pairwise_path, kind="pairwise_scores")
            _validate_pairwise(report, rel(PAIRWISE_DOC), pw_doc, detections)

        annotated_path = directory / STORY_ANNOTATED_TXT
        if annotated_path.exists():
            read_annotated_story(annotated_path, story_id=sequence_id)

        gold = directory / GOLD_DIR
        if gold.is_dir():
            gold_dets: list[Detection] | None = None
            if (gold / DETECTIONS_DOC).exists():
                gdoc = read_document(gold / DETECTIONS_DOC, kind="detections")
                _validate_detections(
                    report, rel(f"{GOLD_DIR}/{DETECTIONS_DOC}"), gdoc, seq, embedding_length
                )
                try:
                    gold_dets = detections_from_doc(gdoc)
                except ValidationError:
                    gold_dets = None
            if (gold / VCHAINS_DOC).exists():
                vdoc = read_document(gold / VCHAINS_DOC, kind="visual_chains")
                _validate_vchains(report, rel(f"{GOLD_DIR}/{VCHAINS_DOC}"), vdoc, gold_dets)
            if (gold / STORY_DOC).exists():
                sdoc = read_document(gold / STORY_DOC, kind="annotated_story")
                try:
                    story_from_doc(sdoc)
                except ValidationError as exc:
                    report.add_error(rel(f"{GOLD_DIR}/{STORY_DOC}"), exc)
            if (gold / MMCHAINS_DOC).exists():
                mdoc = read_document(gold / MMCHAINS_DOC, kind="multimodal_chains")
                for raw in mdoc.get("chains", []):
                    try:
                        MultimodalChain.from_doc(raw)
                    except ValidationError as exc:
                        report.add_error(rel(f"{GOLD_DIR}/{MMCHAINS_DOC}"), exc)

    return report
